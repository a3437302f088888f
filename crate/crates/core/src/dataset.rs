//! Trajectory data and its CSV representation.
//!
//! A dataset is `n` trajectories of equal length `T`. Each step holds
//! `(S_t, A_t, R_t, S_{t+1})`. On disk every trajectory is written as `T`
//! decision rows followed by one terminal row (`t = T`) that carries only
//! the final state, with the `action` and `reward` fields left empty.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    steps: Vec<Step>,
}

impl Trajectory {
    /// Checks that consecutive steps chain (`next_state` of step `t` is the
    /// `state` of step `t + 1`) and that every state is finite.
    pub fn new(steps: Vec<Step>) -> Result<Self> {
        Self::validate(&steps).map_err(|reason| Error::InvalidTrajectory { index: 0, reason })?;
        Ok(Self { steps })
    }

    fn validate(steps: &[Step]) -> std::result::Result<(), String> {
        if steps.is_empty() {
            return Err("trajectory is empty".into());
        }
        let dim = steps[0].state.len();
        for (t, step) in steps.iter().enumerate() {
            if step.state.len() != dim || step.next_state.len() != dim {
                return Err(format!("state dimension changes at t={t}"));
            }
            if step.state.iter().chain(&step.next_state).any(|v| !v.is_finite()) {
                return Err(format!("non-finite state at t={t}"));
            }
            if !step.reward.is_finite() {
                return Err(format!("non-finite reward at t={t}"));
            }
        }
        for (t, pair) in steps.windows(2).enumerate() {
            if pair[0].next_state != pair[1].state {
                return Err(format!("next_state at t={t} does not match state at t={}", t + 1));
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn initial_state(&self) -> &[f64] {
        &self.steps[0].state
    }

    fn truncated(&self, len: usize) -> Self {
        Self { steps: self.steps[..len].to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    trajectories: Vec<Trajectory>,
    state_dim: usize,
    num_actions: usize,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>, num_actions: usize) -> Result<Self> {
        let first = trajectories
            .first()
            .ok_or_else(|| Error::InvalidArgument("dataset needs at least one trajectory".into()))?;
        if num_actions == 0 {
            return Err(Error::InvalidArgument("num_actions must be positive".into()));
        }
        let horizon = first.len();
        let state_dim = first.initial_state().len();
        for (index, traj) in trajectories.iter().enumerate() {
            Trajectory::validate(&traj.steps)
                .map_err(|reason| Error::InvalidTrajectory { index, reason })?;
            if traj.len() != horizon {
                return Err(Error::InvalidTrajectory {
                    index,
                    reason: format!("length {} differs from {horizon}", traj.len()),
                });
            }
            if traj.initial_state().len() != state_dim {
                return Err(Error::InvalidTrajectory { index, reason: "state dimension differs".into() });
            }
            if let Some(t) = traj.steps.iter().position(|s| s.action >= num_actions) {
                return Err(Error::InvalidTrajectory {
                    index,
                    reason: format!("action {} at t={t} is not below {num_actions}", traj.steps[t].action),
                });
            }
        }
        Ok(Self { trajectories, state_dim, num_actions })
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    /// Number of trajectories `n`.
    pub fn n(&self) -> usize {
        self.trajectories.len()
    }

    /// Common trajectory length `T`.
    pub fn horizon(&self) -> usize {
        self.trajectories[0].len()
    }

    /// Total number of transitions `nT`.
    pub fn len(&self) -> usize {
        self.n() * self.horizon()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// All steps in row order `i * T + t`.
    pub fn steps(&self) -> impl Iterator<Item = &Step> + '_ {
        self.trajectories.iter().flat_map(|traj| traj.steps.iter())
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps().map(|s| s.reward).collect()
    }

    /// Keeps only the listed trajectories, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let trajectories = indices.iter().map(|&i| self.trajectories[i].clone()).collect();
        Self::new(trajectories, self.num_actions)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        let mut header = vec!["traj_id".to_string(), "t".to_string()];
        header.extend((1..=self.state_dim).map(|j| format!("s_{j}")));
        header.push("action".into());
        header.push("reward".into());
        out.write_record(&header)?;
        for (i, traj) in self.trajectories.iter().enumerate() {
            for (t, step) in traj.steps.iter().enumerate() {
                let mut row = vec![i.to_string(), t.to_string()];
                row.extend(step.state.iter().map(|v| format_float(*v)));
                row.push(step.action.to_string());
                row.push(format_float(step.reward));
                out.write_record(&row)?;
            }
            let last = traj.steps.last().expect("non-empty trajectory");
            let mut row = vec![i.to_string(), traj.len().to_string()];
            row.extend(last.next_state.iter().map(|v| format_float(*v)));
            row.push(String::new());
            row.push(String::new());
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn export_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Shortest representation that parses back to the same bits.
fn format_float(v: f64) -> String {
    format!("{v:?}")
}

/// What to do with trajectories of unequal length.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RaggedPolicy {
    #[default]
    Reject,
    /// Cut every trajectory to the shortest length.
    Truncate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    /// Required state dimension; inferred from the `s_*` columns when absent.
    pub state_dim: Option<usize>,
    pub num_actions: usize,
    #[serde(default)]
    pub ragged: RaggedPolicy,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self { state_dim: None, num_actions: 2, ragged: RaggedPolicy::Reject }
    }
}

struct Columns {
    traj: usize,
    t: usize,
    states: Vec<usize>,
    action: usize,
    reward: usize,
}

impl Columns {
    fn locate(header: &csv::StringRecord, schema: &CsvSchema) -> Result<Self> {
        let find = |name: &str| {
            header
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
        };
        let dim = match schema.state_dim {
            Some(d) => d,
            None => (1..).take_while(|j| header.iter().any(|h| h.trim() == format!("s_{j}"))).count(),
        };
        if dim == 0 {
            return Err(Error::Schema("missing column `s_1`".into()));
        }
        let states = (1..=dim).map(|j| find(&format!("s_{j}"))).collect::<Result<Vec<_>>>()?;
        Ok(Self { traj: find("traj_id")?, t: find("t")?, states, action: find("action")?, reward: find("reward")? })
    }
}

struct Row {
    t: usize,
    state: Vec<f64>,
    decision: Option<(usize, f64)>,
}

fn parse_field<T: std::str::FromStr>(record: &csv::StringRecord, col: usize, name: &str, line: u64) -> Result<T> {
    let raw = record.get(col).unwrap_or("").trim();
    raw.parse()
        .map_err(|_| Error::Schema(format!("line {line}: cannot parse `{raw}` in column `{name}`")))
}

pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(reader);
    let header = rdr.headers()?.clone();
    let cols = Columns::locate(&header, schema)?;

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<Row>> = HashMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let id = record.get(cols.traj).unwrap_or("").trim().to_string();
        let t: usize = parse_field(&record, cols.t, "t", line)?;
        let state = cols
            .states
            .iter()
            .enumerate()
            .map(|(j, &c)| parse_field::<f64>(&record, c, &format!("s_{}", j + 1), line))
            .collect::<Result<Vec<_>>>()?;
        let action_raw = record.get(cols.action).unwrap_or("").trim();
        let decision = if action_raw.is_empty() {
            None
        } else {
            let action: i64 = parse_field(&record, cols.action, "action", line)?;
            if action < 0 || action as usize >= schema.num_actions {
                return Err(Error::Schema(format!(
                    "line {line}: unknown action {action} (num_actions = {})",
                    schema.num_actions
                )));
            }
            let reward: f64 = parse_field(&record, cols.reward, "reward", line)?;
            Some((action as usize, reward))
        };
        if !groups.contains_key(&id) {
            order.push(id.clone());
        }
        groups.entry(id).or_default().push(Row { t, state, decision });
    }

    let mut trajectories = Vec::with_capacity(order.len());
    for id in &order {
        let mut rows = groups.remove(id).expect("grouped id");
        rows.sort_by_key(|r| r.t);
        for (expected, row) in rows.iter().enumerate() {
            if row.t != expected {
                return Err(Error::Schema(format!(
                    "trajectory `{id}`: time index {} where {expected} was expected (non-contiguous)",
                    row.t
                )));
            }
        }
        let (last, body) = rows.split_last().expect("non-empty group");
        if last.decision.is_some() {
            return Err(Error::Schema(format!("trajectory `{id}` has no terminal row")));
        }
        if body.is_empty() {
            return Err(Error::Schema(format!("trajectory `{id}` has no decision rows")));
        }
        let mut steps = Vec::with_capacity(body.len());
        for (k, row) in body.iter().enumerate() {
            let (action, reward) = row.decision.ok_or_else(|| {
                Error::Schema(format!("trajectory `{id}`: missing action before the terminal row at t={}", row.t))
            })?;
            let next = rows[k + 1].state.clone();
            steps.push(Step { state: row.state.clone(), action, reward, next_state: next });
        }
        trajectories.push(Trajectory { steps });
    }

    let lengths: Vec<usize> = trajectories.iter().map(Trajectory::len).collect();
    let min_len = lengths.iter().copied().min().unwrap_or(0);
    if lengths.iter().any(|&l| l != min_len) {
        match schema.ragged {
            RaggedPolicy::Reject => {
                return Err(Error::Schema(format!(
                    "ragged trajectories (lengths {min_len}..={})",
                    lengths.iter().max().unwrap()
                )))
            }
            RaggedPolicy::Truncate => {
                log::warn!("truncating {} trajectories to common length {min_len}", trajectories.len());
                trajectories = trajectories.iter().map(|tr| tr.truncated(min_len)).collect();
            }
        }
    }
    Dataset::new(trajectories, schema.num_actions)
}

pub fn import_dataset(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_csv(std::io::BufReader::new(file), schema)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(s: f64, a: usize, r: f64, s2: f64) -> Step {
        Step { state: vec![s, -s], action: a, reward: r, next_state: vec![s2, -s2] }
    }

    fn small() -> Dataset {
        let t0 = Trajectory::new(vec![step(0.1, 0, 1.0, 0.2), step(0.2, 1, -0.5, 0.3)]).unwrap();
        let t1 = Trajectory::new(vec![step(1.0, 1, 0.25, 2.0), step(2.0, 0, 3.0, 1e-17)]).unwrap();
        Dataset::new(vec![t0, t1], 2).unwrap()
    }

    #[test]
    fn broken_chain_is_rejected() {
        let err = Trajectory::new(vec![step(0.0, 0, 0.0, 1.0), step(2.0, 0, 0.0, 1.0)]).unwrap_err();
        assert!(err.to_string().contains("does not match"));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let data = small();
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let back = read_csv(buf.as_slice(), &CsvSchema::default()).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn missing_column_is_named() {
        let csv = "traj_id,t,s_1,reward\n0,0,1.0,0.5\n0,1,2.0,\n";
        let err = read_csv(csv.as_bytes(), &CsvSchema::default()).unwrap_err();
        assert!(err.to_string().contains("`action`"), "{err}");
    }

    #[test]
    fn gap_in_time_index_is_rejected() {
        let csv = "traj_id,t,s_1,action,reward\n0,0,1.0,0,0.5\n0,2,2.0,,\n";
        let err = read_csv(csv.as_bytes(), &CsvSchema::default()).unwrap_err();
        assert!(err.to_string().contains("non-contiguous"), "{err}");
    }

    #[test]
    fn unknown_action_is_rejected() {
        let csv = "traj_id,t,s_1,action,reward\n0,0,1.0,3,0.5\n0,1,2.0,,\n";
        let err = read_csv(csv.as_bytes(), &CsvSchema::default()).unwrap_err();
        assert!(err.to_string().contains("unknown action 3"), "{err}");
    }

    #[test]
    fn ragged_input_truncates_or_rejects() {
        let csv = "traj_id,t,s_1,action,reward\n\
                   a,0,0.0,0,1\na,1,1.0,1,2\na,2,2.0,0,3\na,3,3.0,,\n\
                   b,0,5.0,1,4\nb,1,6.0,,\n";
        let err = read_csv(csv.as_bytes(), &CsvSchema::default()).unwrap_err();
        assert!(err.to_string().contains("ragged"));
        let schema = CsvSchema { ragged: RaggedPolicy::Truncate, ..CsvSchema::default() };
        let data = read_csv(csv.as_bytes(), &schema).unwrap();
        assert_eq!(data.n(), 2);
        assert_eq!(data.horizon(), 1);
        assert_eq!(data.trajectories()[0].steps()[0].next_state, vec![1.0]);
    }
}

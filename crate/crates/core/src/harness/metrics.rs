//! Aggregation of replicated estimates into a results table.

use serde::{Deserialize, Serialize};

use super::benchmark::ReplicationRecord;
use crate::{Error, Result};

/// One estimator's row. MSE and MeSE are reported ×1000, interval lengths ×100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub replications: usize,
    pub failures: usize,
    pub mse_x1000: f64,
    pub mse_se_x1000: f64,
    pub mese_x1000: f64,
    pub bias: f64,
    pub ecp: Option<f64>,
    pub al_x100: Option<f64>,
    pub al_se_x100: Option<f64>,
    pub adjusted_ecp: Option<f64>,
    pub adjusted_al_x100: Option<f64>,
    pub adjusted_al_se_x100: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub truth: f64,
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn row(&self, method: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Aggregates `records` for each name in `methods`, in that order.
    /// Failed replications and missing estimates are counted in `failures`.
    pub fn from_records(records: &[ReplicationRecord], truth: f64, methods: &[String]) -> Result<Self> {
        let mut rows = Vec::with_capacity(methods.len());
        for method in methods {
            let found: Vec<_> = records.iter().filter_map(|r| r.estimates.iter().find(|e| &e.method == method)).collect();
            if found.is_empty() {
                return Err(Error::AllReplicationsFailed(records.len()));
            }
            let sq: Vec<f64> = found.iter().map(|e| (e.value - truth).powi(2)).collect();
            let (mse, mse_se) = mean_and_se(&sq);
            let mut sorted = sq.clone();
            let bias = found.iter().map(|e| e.value - truth).sum::<f64>() / found.len() as f64;
            let coverage = |ci: &[(f64, f64)]| -> (Option<f64>, Option<f64>, Option<f64>) {
                if ci.len() != found.len() {
                    return (None, None, None);
                }
                let hits = ci.iter().filter(|(lo, hi)| *lo <= truth && truth <= *hi).count();
                let lengths: Vec<f64> = ci.iter().map(|(lo, hi)| hi - lo).collect();
                let (al, al_se) = mean_and_se(&lengths);
                (Some(hits as f64 / ci.len() as f64), Some(100.0 * al), Some(100.0 * al_se))
            };
            let ci: Vec<_> = found.iter().filter_map(|e| e.ci).collect();
            let adj: Vec<_> = found.iter().filter_map(|e| e.adjusted_ci).collect();
            let (ecp, al, al_se) = coverage(&ci);
            let (aecp, aal, aal_se) = coverage(&adj);
            rows.push(MetricsRow {
                method: method.clone(),
                replications: found.len(),
                failures: records.len() - found.len(),
                mse_x1000: 1000.0 * mse,
                mse_se_x1000: 1000.0 * mse_se,
                mese_x1000: 1000.0 * median(&mut sorted),
                bias,
                ecp,
                al_x100: al,
                al_se_x100: al_se,
                adjusted_ecp: aecp,
                adjusted_al_x100: aal,
                adjusted_al_se_x100: aal_se,
            });
        }
        Ok(Self { truth, rows })
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Fixed-width text rendering for terminals.
    pub fn render(&self) -> String {
        let opt = |v: Option<f64>, p: usize| v.map_or_else(|| "-".to_string(), |x| format!("{x:.p$}"));
        let mut out = format!("truth = {:.6}\n", self.truth);
        out.push_str(&format!(
            "{:<10} {:>5} {:>18} {:>10} {:>6} {:>16} {:>8} {:>9}\n",
            "method", "reps", "MSEx1000 (se)", "MeSEx1000", "ECP", "ALx100 (se)", "adj ECP", "adj AL"
        ));
        for r in &self.rows {
            let al = match (r.al_x100, r.al_se_x100) {
                (Some(a), Some(s)) => format!("{a:.2} ({s:.3})"),
                _ => "-".into(),
            };
            out.push_str(&format!(
                "{:<10} {:>5} {:>18} {:>10.3} {:>6} {:>16} {:>8} {:>9}\n",
                r.method,
                r.replications,
                format!("{:.3} ({:.3})", r.mse_x1000, r.mse_se_x1000),
                r.mese_x1000,
                opt(r.ecp, 3),
                al,
                opt(r.adjusted_ecp, 3),
                opt(r.adjusted_al_x100, 2),
            ));
        }
        out
    }
}

/// Mean and its standard error `sd / √n` (sample sd, 0 for one value).
fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

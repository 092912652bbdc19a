use super::HarnessError;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// One evaluation result row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub policy: String,
    /// `off`, `+1` or `-1`.
    pub detector_reward: String,
    pub budget: usize,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub mse: Option<f64>,
    pub auroc: Option<f64>,
    pub false_negative_rate: Option<f64>,
    pub mean_return: f64,
    pub episodes: usize,
}

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics_jsonl(path: &Path, records: &[MetricsRecord]) -> Result<(), HarnessError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Mean and standard deviation over seeds for one `(policy, detector, budget)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub policy: String,
    pub detector_reward: String,
    pub budget: usize,
    pub seeds: usize,
    pub accuracy_mean: Option<f64>,
    pub accuracy_std: Option<f64>,
    pub mse_mean: Option<f64>,
    pub mse_std: Option<f64>,
    pub auroc_mean: Option<f64>,
    pub auroc_std: Option<f64>,
    pub return_mean: f64,
    pub return_std: f64,
}

fn mean_std(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    (Some(crate::math::mean(v)), Some(crate::math::std_dev(v)))
}

pub fn summarize(records: &[MetricsRecord]) -> Vec<SummaryRow> {
    let mut cells: BTreeMap<(String, String, usize), Vec<&MetricsRecord>> = BTreeMap::new();
    for r in records {
        cells.entry((r.policy.clone(), r.detector_reward.clone(), r.budget)).or_default().push(r);
    }
    cells
        .into_iter()
        .map(|((policy, detector_reward, budget), rs)| {
            let pick = |f: &dyn Fn(&MetricsRecord) -> Option<f64>| -> Vec<f64> { rs.iter().filter_map(|r| f(r)).collect() };
            let (accuracy_mean, accuracy_std) = mean_std(&pick(&|r| r.accuracy));
            let (mse_mean, mse_std) = mean_std(&pick(&|r| r.mse));
            let (auroc_mean, auroc_std) = mean_std(&pick(&|r| r.auroc));
            let (rm, rs_) = mean_std(&pick(&|r| Some(r.mean_return)));
            SummaryRow {
                policy,
                detector_reward,
                budget,
                seeds: rs.len(),
                accuracy_mean,
                accuracy_std,
                mse_mean,
                mse_std,
                auroc_mean,
                auroc_std,
                return_mean: rm.unwrap_or(0.0),
                return_std: rs_.unwrap_or(0.0),
            }
        })
        .collect()
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::CliError;

pub const MEDIAN: &str = "median";

/// One benchmark row; metric fields are empty for failed runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub loss: String,
    pub seed: String,
    #[serde(rename = "locP")]
    pub loc_p: Option<f64>,
    #[serde(rename = "locR")]
    pub loc_r: Option<f64>,
    #[serde(rename = "locF1")]
    pub loc_f1: Option<f64>,
    #[serde(rename = "mlP")]
    pub ml_p: Option<f64>,
    #[serde(rename = "mlR")]
    pub ml_r: Option<f64>,
    #[serde(rename = "mlF1")]
    pub ml_f1: Option<f64>,
}

impl ResultRow {
    pub fn failed(loss: &str, seed: u64) -> Self {
        Self {
            loss: loss.to_string(),
            seed: seed.to_string(),
            loc_p: None,
            loc_r: None,
            loc_f1: None,
            ml_p: None,
            ml_r: None,
            ml_f1: None,
        }
    }

    pub fn is_median(&self) -> bool {
        self.seed == MEDIAN
    }

    pub fn metrics(&self) -> [Option<f64>; 6] {
        [self.loc_p, self.loc_r, self.loc_f1, self.ml_p, self.ml_r, self.ml_f1]
    }
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    Some(if values.len() % 2 == 1 {
        values[mid]
    } else {
        (values[mid - 1] + values[mid]) / 2.0
    })
}

/// Median-over-seeds row for every label, in first-appearance order.
/// Failed runs are left out of the medians.
pub fn median_rows(rows: &[ResultRow]) -> Vec<ResultRow> {
    let mut labels: Vec<&str> = Vec::new();
    for r in rows.iter().filter(|r| !r.is_median()) {
        if !labels.contains(&r.loss.as_str()) {
            labels.push(&r.loss);
        }
    }
    labels
        .into_iter()
        .map(|label| {
            let runs: Vec<_> = rows.iter().filter(|r| r.loss == label && !r.is_median()).collect();
            let col = |i: usize| median(&mut runs.iter().filter_map(|r| r.metrics()[i]).collect::<Vec<_>>());
            ResultRow {
                loss: label.to_string(),
                seed: MEDIAN.to_string(),
                loc_p: col(0),
                loc_r: col(1),
                loc_f1: col(2),
                ml_p: col(3),
                ml_r: col(4),
                ml_f1: col(5),
            }
        })
        .collect()
}

pub fn write_csv(path: &Path, rows: &[ResultRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::Runtime(e.to_string()))
}

pub fn read_csv(path: &Path) -> Result<Vec<ResultRow>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<Result<Vec<ResultRow>, _>>()
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

pub fn render_table(rows: &[ResultRow]) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(|| "failed".to_string(), |v| format!("{:.2}", v * 100.0));
    let mut out = format!(
        "{:<22} {:>6} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}\n",
        "loss", "seed", "locP", "locR", "locF1", "mlP", "mlR", "mlF1"
    );
    for r in rows {
        let m = r.metrics().map(fmt);
        out.push_str(&format!(
            "{:<22} {:>6} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}\n",
            r.loss, r.seed, m[0], m[1], m[2], m[3], m[4], m[5]
        ));
    }
    out
}

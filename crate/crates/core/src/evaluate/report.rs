use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One row of `irof.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IrofRow {
    pub method: String,
    pub image_id: usize,
    pub score: f64,
}

/// One row of `sensn.csv`; `mean_pcc` is empty when no image had a defined PCC.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensnRow {
    pub method: String,
    pub n: usize,
    pub mean_pcc: Option<f64>,
    pub n_excluded: usize,
}

/// One cell of `pairwise_ratio.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseRow {
    pub method_a: String,
    pub method_b: String,
    pub ratio: f64,
}

/// One row of `attack_runs.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub image_id: usize,
    pub attacked_method: String,
    pub evaluated_method: String,
    pub metric: String,
    pub value_before: f64,
    pub value_after: f64,
    pub metric_diff: f64,
    pub input_mse: f64,
    pub label_preserved: bool,
}

/// Writes rows with a header line taken from the field names.
pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}

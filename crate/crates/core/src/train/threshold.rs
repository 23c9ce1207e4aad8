use crate::autodiff::Tensor;
use crate::data::example_f1;
use crate::error::{Error, Result};
use crate::inference::discretize_mlc;

/// Candidate decision thresholds, ascending.
pub const THRESHOLD_GRID: [f64; 20] = [
    0.0, 0.01, 0.02, 0.03, 0.04, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5, 0.55, 0.6, 0.65,
    0.7, 0.75,
];

/// Discretizes every row of `probs` at `tau`.
pub fn predict_sets(probs: &Tensor, tau: f64) -> Vec<Vec<usize>> {
    (0..probs.rows()).map(|r| discretize_mlc(probs.row(r), tau)).collect()
}

/// The grid threshold with the highest example-averaged F1 on `gold`; ties
/// go to the smaller threshold. Returns `(tau, f1)`.
pub fn tune_threshold(probs: &Tensor, gold: &[Vec<usize>]) -> Result<(f64, f64)> {
    if gold.is_empty() {
        return Err(Error::Empty("threshold tuning needs at least one example".into()));
    }
    if probs.rows() != gold.len() {
        return Err(Error::Shape {
            op: "tune_threshold",
            detail: format!("{} prediction rows for {} gold sets", probs.rows(), gold.len()),
        });
    }
    let mut best = (THRESHOLD_GRID[0], f64::NEG_INFINITY);
    for &tau in &THRESHOLD_GRID {
        let f1 = example_f1(&predict_sets(probs, tau), gold)?;
        if f1 > best.1 {
            best = (tau, f1);
        }
    }
    Ok(best)
}

//! Scoring estimated parameter changes against validation gradients.
//!
//! A score is `∇ℓ(θ, val) · Δθ̂`, the predicted change in validation loss when
//! the sample is removed from its step. Positive scores mark helpful samples.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::attribution::backward::AttributionSet;
use crate::attribution::mask::Mask;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::math::{self, Matrix};
use crate::model::Model;

/// Validation gradients at `theta`, restricted to `mask`: one row per id.
pub fn validation_gradients(
    model: &Model,
    theta: &[f64],
    data: &Dataset,
    ids: &[usize],
    mask: &Mask,
) -> Result<Matrix> {
    if ids.is_empty() {
        return Err(Error::invalid("no validation points"));
    }
    let full = model.per_sample_grads(theta, data, ids)?;
    if mask.is_full() {
        return Ok(full);
    }
    let rows: Vec<Vec<f64>> = full.row_iter().map(|r| mask.restrict(r)).collect();
    Matrix::from_rows(&rows)
}

/// Mean of the rows of a gradient matrix.
pub fn mean_gradient(grads: &Matrix) -> Vec<f64> {
    crate::model::mean_rows(grads, crate::model::ReductionOrder::Forward)
}

/// `records × validation points`.
pub fn score_matrix(set: &AttributionSet, val_grads: &Matrix) -> Result<Matrix> {
    if let Some(r) = set.records.first() {
        if r.delta.len() != val_grads.cols() {
            return Err(Error::invalid(
                "validation gradients and attributions differ in dimension",
            ));
        }
    }
    let rows: Vec<Vec<f64>> = set
        .records
        .par_iter()
        .map(|r| val_grads.row_iter().map(|v| math::dot(v, &r.delta)).collect())
        .collect();
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, val_grads.rows()));
    }
    Matrix::from_rows(&rows)
}

/// Scores keyed by `(step, sample)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub keys: Vec<(usize, usize)>,
    /// `keys × validation points`.
    pub scores: Matrix,
}

impl ScoreTable {
    pub fn from_set(set: &AttributionSet, val_grads: &Matrix) -> Result<Self> {
        Ok(ScoreTable {
            keys: set.records.iter().map(|r| (r.step, r.sample)).collect(),
            scores: score_matrix(set, val_grads)?,
        })
    }

    pub fn row_of(&self, step: usize, sample: usize) -> Option<&[f64]> {
        self.keys
            .iter()
            .position(|&k| k == (step, sample))
            .map(|i| self.scores.row(i))
    }

    pub fn num_val(&self) -> usize {
        self.scores.cols()
    }
}

/// Per-sample totals over all occurrences, keyed by sample id.
pub fn sample_totals(set: &AttributionSet, scores: &Matrix) -> BTreeMap<usize, Vec<f64>> {
    let mut out: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (r, rec) in set.records.iter().enumerate() {
        let acc = out.entry(rec.sample).or_insert_with(|| vec![0.0; scores.cols()]);
        math::axpy(1.0, scores.row(r), acc);
    }
    out
}

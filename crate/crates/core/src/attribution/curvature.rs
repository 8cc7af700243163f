//! Per-step curvature operators on the masked coordinates.

use rayon::prelude::*;

use crate::attribution::mask::Mask;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::math::{self, Matrix};
use crate::model::Model;
use crate::trajectory::StepRecord;

/// `H_t` restricted to the mask, as an operator.
pub trait Curvature: Sync {
    /// `H_t v`.
    fn apply(&self, step: &StepRecord, v: &[f64]) -> Result<Vec<f64>>;

    /// `Q H_t`. `H_t` is symmetric, so each row of the product is `H_t q_i`.
    fn right_multiply(&self, step: &StepRecord, q: &Matrix) -> Result<Matrix> {
        let rows: Vec<Vec<f64>> = (0..q.rows())
            .into_par_iter()
            .map(|i| self.apply(step, q.row(i)))
            .collect::<Result<_>>()?;
        Matrix::from_rows(&rows)
    }

    /// Multiply-adds spent by one `right_multiply` on a `rows × |S|` matrix.
    fn right_multiply_cost(&self, step: &StepRecord, rows: usize) -> u64;
}

/// Outer-product Gauss–Newton `(1/b) Σ g_z g_zᵀ` from the recorded raw
/// per-sample gradients.
#[derive(Clone, Copy, Debug, Default)]
pub struct Ggn;

impl Curvature for Ggn {
    fn apply(&self, step: &StepRecord, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != step.per_sample_grads.cols() {
            return Err(Error::invalid("direction has the wrong dimension"));
        }
        Ok(crate::model::ggn_from_grads(&step.per_sample_grads, v))
    }

    fn right_multiply(&self, step: &StepRecord, q: &Matrix) -> Result<Matrix> {
        let g = &step.per_sample_grads;
        if q.cols() != g.cols() {
            return Err(Error::invalid("matrix has the wrong dimension"));
        }
        // (Q Gᵀ) G / b
        let mut out = q.mul_transposed(g).matmul(g);
        math::scale(1.0 / g.rows() as f64, out.as_mut_slice());
        Ok(out)
    }

    fn right_multiply_cost(&self, step: &StepRecord, rows: usize) -> u64 {
        let (b, s) = (step.per_sample_grads.rows() as u64, step.per_sample_grads.cols() as u64);
        2 * rows as u64 * b * s
    }
}

/// Exact Hessian of the batch-mean loss at the recorded parameters, via
/// Hessian-vector products of the model.
pub struct ExactHessian<'a> {
    model: &'a Model,
    data: &'a Dataset,
    /// Parameters before every step.
    thetas: &'a [Vec<f64>],
    mask: Mask,
}

impl<'a> ExactHessian<'a> {
    pub fn new(model: &'a Model, data: &'a Dataset, thetas: &'a [Vec<f64>], mask: Mask) -> Result<Self> {
        if mask.p() != model.param_count() {
            return Err(Error::invalid("mask does not match the model"));
        }
        Ok(ExactHessian {
            model,
            data,
            thetas,
            mask,
        })
    }
}

impl Curvature for ExactHessian<'_> {
    fn apply(&self, step: &StepRecord, v: &[f64]) -> Result<Vec<f64>> {
        let theta = self
            .thetas
            .get(step.t)
            .ok_or_else(|| Error::invalid(format!("no parameters for step {}", step.t)))?;
        let full = if self.mask.is_full() {
            self.model.hvp(theta, self.data, &step.sample_ids, v)?
        } else {
            self.model
                .hvp(theta, self.data, &step.sample_ids, &self.mask.embed(v))?
        };
        Ok(if self.mask.is_full() {
            full
        } else {
            self.mask.restrict(&full)
        })
    }

    fn right_multiply_cost(&self, step: &StepRecord, rows: usize) -> u64 {
        // One forward and two backward-like sweeps per sample and row.
        3 * rows as u64 * step.sample_ids.len() as u64 * self.model.param_count() as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::mask::MaskSpec;
    use crate::data::{gen_blobs, make_schedule};
    use crate::model::ModelSpec;
    use crate::optim::OptimizerConfig;
    use crate::trajectory::{record_in_memory, RunConfig};

    #[test]
    fn ggn_right_multiply_matches_rowwise_apply() {
        let data = gen_blobs(16, 3, 2, 1.0, 1).unwrap();
        let config = RunConfig {
            model: ModelSpec::mlp(3, &[4], 2, 0),
            optimizer: OptimizerConfig::adamw(1e-2),
            schedule: make_schedule(16, 4, 1, 0).unwrap(),
            mask: MaskSpec::full(),
        };
        let run = record_in_memory(&data, &config, true).unwrap();
        let step = &run.trajectory.steps[1];
        let s = step.g.len();
        let q = Matrix::from_vec(2, s, (0..2 * s).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let fast = Ggn.right_multiply(step, &q).unwrap();
        for i in 0..2 {
            let row = Ggn.apply(step, q.row(i)).unwrap();
            assert!(math::max_abs_diff(fast.row(i), &row) < 1e-14);
        }
    }

    #[test]
    fn exact_hessian_matches_finite_differences_under_a_mask() {
        let data = gen_blobs(16, 3, 2, 1.0, 1).unwrap();
        let config = RunConfig {
            model: ModelSpec::mlp(3, &[4], 2, 0),
            optimizer: OptimizerConfig::adamw(1e-2),
            schedule: make_schedule(16, 4, 1, 0).unwrap(),
            mask: MaskSpec {
                keep_ratio: 0.5,
                seed: 2,
                stream: 0,
            },
        };
        let run = record_in_memory(&data, &config, true).unwrap();
        let model = Model::new(config.model.clone()).unwrap();
        let mask = run.trajectory.manifest.build_mask().unwrap();
        let thetas = &run.checkpoints.as_ref().unwrap().thetas;
        let exact = ExactHessian::new(&model, &data, thetas, mask.clone()).unwrap();
        let step = &run.trajectory.steps[2];
        let v: Vec<f64> = (0..mask.len()).map(|i| (i as f64).cos()).collect();
        let got = exact.apply(step, &v).unwrap();
        let fd = model
            .hvp_fd(&thetas[2], &data, &step.sample_ids, &mask.embed(&v), 1e-5)
            .unwrap();
        assert!(math::rel_l2_error(&got, &mask.restrict(&fd)) < 1e-6);
    }
}

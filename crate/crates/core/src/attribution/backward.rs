//! Backward recurrences: one reverse sweep over the trajectory yields the
//! estimated final-parameter change for every (sample, step) injection.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::curvature::Curvature;
use crate::attribution::factors::{diag_factors, push_state, AdamWDynamics, PushState};
use crate::error::{Error, Result};
use crate::math::{self, Matrix};
use crate::trajectory::{StepRecord, StepSource};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Sgd,
    #[serde(rename = "adamw")]
    AdamW,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Sgd => "sgd",
            Estimator::AdamW => "adamw",
        }
    }
}

/// Estimated `θ'_T − θ_T` for removing `sample` from step `step`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionRecord {
    pub sample: usize,
    pub step: usize,
    pub delta: Vec<f64>,
}

impl AttributionRecord {
    pub fn score(&self, val_grad: &[f64]) -> f64 {
        math::dot(val_grad, &self.delta)
    }
}

#[derive(Clone, Debug)]
pub struct AttributionSet {
    pub estimator: Estimator,
    /// Sorted by step, then by position in the batch.
    pub records: Vec<AttributionRecord>,
}

impl AttributionSet {
    pub fn find(&self, sample: usize, step: usize) -> Option<&AttributionRecord> {
        self.records.iter().find(|r| r.sample == sample && r.step == step)
    }
}

/// Work done by one backward sweep.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BackwardStats {
    pub steps_visited: usize,
    pub mult_adds: u64,
    /// Entries of the summary matrix held during the sweep.
    pub summary_entries: usize,
}

/// Restrict emission to these `(step, sample)` pairs.
pub type Targets = BTreeSet<(usize, usize)>;

fn selected(step: &StepRecord, targets: Option<&Targets>) -> Vec<usize> {
    (0..step.batch_size())
        .filter(|&r| targets.is_none_or(|set| set.contains(&(step.t, step.sample_ids[r]))))
        .collect()
}

fn check_step(step: &StepRecord, t: usize, s: usize) -> Result<()> {
    if step.t != t {
        return Err(Error::format(
            format!("steps[{t}]"),
            format!("record claims step {}", step.t),
        ));
    }
    if step.g.len() != s || step.per_sample_grads.cols() != s || step.m.len() != s || step.v.len() != s {
        return Err(Error::format(
            format!("steps[{t}]"),
            "array length differs from the mask size",
        ));
    }
    Ok(())
}

fn rows_scaled(g: &Matrix, rows: &[usize], alpha: f64) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|&r| g.row(r).iter().map(|x| x * alpha).collect())
        .collect()
}

fn finish(estimator: Estimator, mut per_step: Vec<Vec<AttributionRecord>>) -> AttributionSet {
    per_step.reverse();
    AttributionSet {
        estimator,
        records: per_step.into_iter().flatten().collect(),
    }
}

/// AdamW-influence. `W = [W_θ | W_m | W_v]` starts at `[I 0 0]`; at each step
/// from `T−1` down, emissions use the current `W`, then `W ← W A_t`.
pub fn backward_adamw<S: StepSource + ?Sized>(
    src: &S,
    dynamics: &AdamWDynamics,
    curvature: &dyn Curvature,
    targets: Option<&Targets>,
) -> Result<(AttributionSet, BackwardStats)> {
    let s = src.manifest().mask_size;
    let n = s as u64;
    let mut w_theta = Matrix::identity(s);
    let mut w_m = Matrix::zeros(s, s);
    let mut w_v = Matrix::zeros(s, s);
    let mut stats = BackwardStats {
        summary_entries: 3 * s * s,
        ..BackwardStats::default()
    };
    let mut per_step = Vec::with_capacity(src.num_steps());
    let (b1, b2) = (dynamics.beta1, dynamics.beta2);

    for t in (0..src.num_steps()).rev() {
        let step = src.step(t)?;
        check_step(&step, t, s)?;
        stats.steps_visited += 1;
        let b = step.batch_size();
        let lr = step.lr;
        let f = diag_factors(&step.m, &step.v, t, dynamics)?;

        // Emission with W^{(t+1)}.
        let rows = selected(&step, targets);
        if !rows.is_empty() {
            let g_hats = rows_scaled(&step.per_sample_grads, &rows, 1.0 / b as f64);
            let pushes: Vec<PushState> = g_hats
                .par_iter()
                .map(|gh| push_state(gh, &step.g, &f, lr, dynamics))
                .collect::<Result<_>>()?;
            let stack = |pick: fn(&PushState) -> &Vec<f64>| {
                Matrix::from_rows(&pushes.iter().map(|z| pick(z).clone()).collect::<Vec<_>>())
            };
            let mut delta = stack(|z| &z.theta)?.mul_transposed(&w_theta);
            let dm = stack(|z| &z.m)?.mul_transposed(&w_m);
            let dv = stack(|z| &z.v)?.mul_transposed(&w_v);
            math::axpy(1.0, dm.as_slice(), delta.as_mut_slice());
            math::axpy(1.0, dv.as_slice(), delta.as_mut_slice());
            stats.mult_adds += 3 * rows.len() as u64 * n * n;
            per_step.push(
                rows.iter()
                    .enumerate()
                    .map(|(k, &r)| AttributionRecord {
                        sample: step.sample_ids[r],
                        step: t,
                        delta: delta.row(k).to_vec(),
                    })
                    .collect(),
            );
        } else {
            per_step.push(Vec::new());
        }

        // Q = W R_t: W_θ diag(ρ) + (1−β1) W_m + 2(1−β2) W_v diag(g_t).
        let rho: Vec<f64> = (0..s)
            .map(|j| -lr * (1.0 - b1) / f.c1 * f.d[j] + 2.0 * lr * (1.0 - b2) / f.c2 * f.s[j] * step.g[j])
            .collect();
        let gv: Vec<f64> = step.g.iter().map(|g| 2.0 * (1.0 - b2) * g).collect();
        let mut q = Matrix::zeros(s, s);
        q.as_mut_slice()
            .par_chunks_mut(s.max(1))
            .enumerate()
            .for_each(|(i, row)| {
                let (wt, wm, wv) = (w_theta.row(i), w_m.row(i), w_v.row(i));
                for j in 0..s {
                    row[j] = wt[j] * rho[j] + (1.0 - b1) * wm[j] + wv[j] * gv[j];
                }
            });
        stats.mult_adds += 3 * n * n;
        let qh = curvature.right_multiply(&step, &q)?;
        stats.mult_adds += curvature.right_multiply_cost(&step, s);

        let cm: Vec<f64> = f.d.iter().map(|d| -lr * b1 / f.c1 * d).collect();
        let cv: Vec<f64> = f.s.iter().map(|x| lr * b2 / f.c2 * x).collect();
        let decay = 1.0 - lr * dynamics.weight_decay;
        w_m.as_mut_slice()
            .par_chunks_mut(s.max(1))
            .zip(w_v.as_mut_slice().par_chunks_mut(s.max(1)))
            .zip(w_theta.as_mut_slice().par_chunks_mut(s.max(1)))
            .zip(qh.as_slice().par_chunks(s.max(1)))
            .for_each(|(((m_row, v_row), t_row), qh_row)| {
                for j in 0..s {
                    let wt = t_row[j];
                    m_row[j] = wt * cm[j] + b1 * m_row[j];
                    v_row[j] = wt * cv[j] + b2 * v_row[j];
                    t_row[j] = decay * wt + qh_row[j];
                }
            });
        stats.mult_adds += 5 * n * n;
        if !(w_theta.is_finite() && w_m.is_finite() && w_v.is_finite()) {
            return Err(Error::numeric(Some(t), "non-finite summary matrix"));
        }
    }
    Ok((finish(Estimator::AdamW, per_step), stats))
}

/// SGD-influence. `W` starts at zero; emissions are `η_t (I − W) ĝ`, then
/// `W ← W + η_t (I − W) H_t`.
pub fn backward_sgd<S: StepSource + ?Sized>(
    src: &S,
    curvature: &dyn Curvature,
    targets: Option<&Targets>,
) -> Result<(AttributionSet, BackwardStats)> {
    let s = src.manifest().mask_size;
    let n = s as u64;
    let mut w = Matrix::zeros(s, s);
    let mut stats = BackwardStats {
        summary_entries: s * s,
        ..BackwardStats::default()
    };
    let mut per_step = Vec::with_capacity(src.num_steps());

    for t in (0..src.num_steps()).rev() {
        let step = src.step(t)?;
        check_step(&step, t, s)?;
        stats.steps_visited += 1;
        let b = step.batch_size();
        let lr = step.lr;

        let rows = selected(&step, targets);
        if !rows.is_empty() {
            let g_hats = Matrix::from_rows(&rows_scaled(&step.per_sample_grads, &rows, 1.0 / b as f64))?;
            let wg = g_hats.mul_transposed(&w);
            stats.mult_adds += rows.len() as u64 * n * n;
            per_step.push(
                rows.iter()
                    .enumerate()
                    .map(|(k, &r)| AttributionRecord {
                        sample: step.sample_ids[r],
                        step: t,
                        delta: g_hats.row(k).iter().zip(wg.row(k)).map(|(g, x)| lr * (g - x)).collect(),
                    })
                    .collect(),
            );
        } else {
            per_step.push(Vec::new());
        }

        let mut q = Matrix::zeros(s, s);
        for (i, row) in q.as_mut_slice().chunks_mut(s.max(1)).enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                let id = if i == j { 1.0 } else { 0.0 };
                *x = lr * (id - w.get(i, j));
            }
        }
        stats.mult_adds += n * n;
        let qh = curvature.right_multiply(&step, &q)?;
        stats.mult_adds += curvature.right_multiply_cost(&step, s);
        math::axpy(1.0, qh.as_slice(), w.as_mut_slice());
        stats.mult_adds += n * n;
        if !w.is_finite() {
            return Err(Error::numeric(Some(t), "non-finite summary matrix"));
        }
    }
    Ok((finish(Estimator::Sgd, per_step), stats))
}

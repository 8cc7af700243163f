#![allow(dead_code)]

use trajattr::attribution::factors::{diag_factors, AdamWDynamics};
use trajattr::attribution::forward::injection;
use trajattr::attribution::mask::MaskSpec;
use trajattr::data::{gen_blobs, make_schedule, Dataset};
use trajattr::math::{Matrix, RngStream};
use trajattr::model::ModelSpec;
use trajattr::optim::{AdamWConfig, LrSchedule, OptimizerConfig, OptimizerKind};
use trajattr::trajectory::{record_in_memory, RecordedRun, RunConfig, StepRecord, Trajectory};

use rand::Rng;

/// A logistic model on one feature and two classes (p = 4), trained for at
/// most four steps with batches of at most two.
pub fn tiny_instance(seed: u64) -> (Dataset, RunConfig, RecordedRun) {
    let mut rng = RngStream::new(seed, 77).rng();
    let b = rng.random_range(1..=2usize);
    let steps = rng.random_range(1..=4usize);
    let n = b * steps;
    let data = gen_blobs(n.max(2), 1, 2, 1.0, seed).unwrap();
    let lr = 10f64.powf(rng.random_range(-2.5..-0.5));
    let cfg = AdamWConfig {
        beta1: rng.random_range(0.5..0.95),
        beta2: rng.random_range(0.8..0.999),
        eps: 1e-8,
        weight_decay: if rng.random_bool(0.5) {
            rng.random_range(0.0..0.1)
        } else {
            0.0
        },
        plain_sgd: false,
    };
    let config = RunConfig {
        model: ModelSpec::logistic(1, 2, seed),
        optimizer: OptimizerConfig {
            kind: OptimizerKind::AdamW,
            adamw: cfg,
            schedule: LrSchedule::constant(lr),
        },
        schedule: make_schedule(n.max(2), b, 1, seed).unwrap(),
        mask: MaskSpec::full(),
    };
    let run = record_in_memory(&data, &config, true).unwrap();
    (data, config, run)
}

pub fn explicit_ggn(step: &StepRecord) -> Matrix {
    let g = &step.per_sample_grads;
    let s = g.cols();
    let mut h = Matrix::zeros(s, s);
    for row in g.row_iter() {
        for i in 0..s {
            for j in 0..s {
                h.set(i, j, h.get(i, j) + row[i] * row[j] / g.rows() as f64);
            }
        }
    }
    h
}

/// Dense `3p × 3p` linearized AdamW step acting on `[θ̇; ṁ; v̇]`.
pub fn dense_transition(step: &StepRecord, dynamics: &AdamWDynamics) -> Matrix {
    let p = step.g.len();
    let f = diag_factors(&step.m, &step.v, step.t, dynamics).unwrap();
    let h = explicit_ggn(step);
    let (b1, b2, lr) = (dynamics.beta1, dynamics.beta2, step.lr);
    let mut a = Matrix::zeros(3 * p, 3 * p);
    for i in 0..p {
        let rho = -lr * (1.0 - b1) / f.c1 * f.d[i] + 2.0 * lr * (1.0 - b2) / f.c2 * f.s[i] * step.g[i];
        for j in 0..p {
            let id = if i == j { 1.0 } else { 0.0 };
            // θ̇' row
            a.set(i, j, (1.0 - lr * dynamics.weight_decay) * id + rho * h.get(i, j));
            a.set(i, p + j, -lr * b1 / f.c1 * f.d[i] * id);
            a.set(i, 2 * p + j, lr * b2 / f.c2 * f.s[i] * id);
            // ṁ' row
            a.set(p + i, j, (1.0 - b1) * h.get(i, j));
            a.set(p + i, p + j, b1 * id);
            // v̇' row
            a.set(2 * p + i, j, 2.0 * (1.0 - b2) * step.g[i] * h.get(i, j));
            a.set(2 * p + i, 2 * p + j, b2 * id);
        }
    }
    a
}

/// `P · A_{T−1} ⋯ A_{t*+1} · Z_push`, with every matrix materialized.
pub fn dense_adamw_oracle(traj: &Trajectory, dynamics: &AdamWDynamics, sample: usize, t_star: usize) -> Vec<f64> {
    let p = traj.steps[0].g.len();
    let z = injection(&traj.steps[t_star], sample, dynamics).unwrap();
    let mut prod = Matrix::identity(3 * p);
    for k in t_star + 1..traj.steps.len() {
        prod = dense_transition(&traj.steps[k], dynamics).matmul(&prod);
    }
    prod.matvec(&z.stacked())[..p].to_vec()
}

/// `η_{t*} ∏_{k>t*} (I − η_k H_k) ĝ` (product applied latest-last).
pub fn dense_sgd_oracle(traj: &Trajectory, sample: usize, t_star: usize) -> Vec<f64> {
    let step = &traj.steps[t_star];
    let r = step.position(sample).unwrap();
    let b = step.batch_size() as f64;
    let mut v: Vec<f64> = step.per_sample_grads.row(r).iter().map(|x| step.lr * x / b).collect();
    for k in t_star + 1..traj.steps.len() {
        let h = explicit_ggn(&traj.steps[k]);
        let hv = h.matvec(&v);
        for (vi, hi) in v.iter_mut().zip(hv) {
            *vi -= traj.steps[k].lr * hi;
        }
    }
    v
}

/// A small MLP on blobs for property tests.
pub fn small_mlp_run(
    kind: OptimizerKind,
    lr: f64,
    steps: usize,
    keep_ratio: f64,
    seed: u64,
) -> (Dataset, RunConfig, RecordedRun) {
    let b = 8;
    let data = gen_blobs(b * steps, 4, 3, 1.0, seed).unwrap();
    let config = RunConfig {
        model: ModelSpec::mlp(4, &[6], 3, seed),
        optimizer: OptimizerConfig {
            kind,
            adamw: AdamWConfig::default(),
            schedule: LrSchedule::constant(lr),
        },
        schedule: make_schedule(b * steps, b, 1, seed).unwrap(),
        mask: MaskSpec {
            keep_ratio,
            seed,
            stream: 0,
        },
    };
    let run = record_in_memory(&data, &config, true).unwrap();
    (data, config, run)
}

mod common;

use std::borrow::Cow;
use std::sync::atomic::{AtomicUsize, Ordering};

use trajattr::attribution::{
    backward_adamw, backward_sgd, forward_propagate, injection, propagate_sample, AdamWDynamics, Ggn, PushState,
};
use trajattr::error::Result;
use trajattr::math::{self, Matrix};
use trajattr::optim::OptimizerKind;
use trajattr::trajectory::{StepRecord, StepSource, Trajectory, TrajectoryManifest};

use common::*;

#[test]
fn adamw_backward_matches_dense_product_on_tiny_runs() {
    let mut worst = 0.0f64;
    for seed in 0..30 {
        let (_, config, run) = tiny_instance(seed);
        let dynamics = AdamWDynamics::from_config(&config.optimizer.adamw);
        let (set, _) = backward_adamw(&run.trajectory, &dynamics, &Ggn, None).unwrap();
        for rec in &set.records {
            let dense = dense_adamw_oracle(&run.trajectory, &dynamics, rec.sample, rec.step);
            worst = worst.max(math::max_abs_diff(&rec.delta, &dense));
        }
    }
    assert!(worst <= 1e-10, "max abs error {worst}");
}

#[test]
fn sgd_backward_matches_dense_product() {
    for seed in 0..20 {
        let (_, _, run) = tiny_instance(seed);
        let (set, _) = backward_sgd(&run.trajectory, &Ggn, None).unwrap();
        for rec in &set.records {
            let dense = dense_sgd_oracle(&run.trajectory, rec.sample, rec.step);
            assert!(math::max_abs_diff(&rec.delta, &dense) <= 1e-12);
        }
    }
}

#[test]
fn sgd_two_step_closed_form() {
    let seed = (0..200)
        .find(|&s| tiny_instance(s).2.trajectory.steps.len() == 2)
        .unwrap();
    let (_, _, run) = tiny_instance(seed);
    let traj = &run.trajectory;
    let (set, _) = backward_sgd(traj, &Ggn, None).unwrap();
    let s0 = &traj.steps[0];
    let z = s0.sample_ids[0];
    let b = s0.batch_size() as f64;
    let g_hat: Vec<f64> = s0.per_sample_grads.row(0).iter().map(|x| x / b).collect();
    let h1 = explicit_ggn(&traj.steps[1]);
    let hg = h1.matvec(&g_hat);
    let expected: Vec<f64> = g_hat
        .iter()
        .zip(hg)
        .map(|(g, h)| s0.lr * (g - traj.steps[1].lr * h))
        .collect();
    assert!(math::max_abs_diff(&set.find(z, 0).unwrap().delta, &expected) < 1e-14);
}

#[test]
fn last_step_emissions_use_the_terminal_condition() {
    let (_, config, run) = small_mlp_run(OptimizerKind::AdamW, 1e-2, 6, 1.0, 3);
    let dynamics = AdamWDynamics::from_config(&config.optimizer.adamw);
    let traj = &run.trajectory;
    let last = traj.steps.last().unwrap();
    let (adam, _) = backward_adamw(traj, &dynamics, &Ggn, None).unwrap();
    let (sgd, _) = backward_sgd(traj, &Ggn, None).unwrap();
    for (r, &z) in last.sample_ids.iter().enumerate() {
        let push = injection(last, z, &dynamics).unwrap();
        assert_eq!(adam.find(z, last.t).unwrap().delta, push.theta);
        let expected: Vec<f64> = last
            .per_sample_grads
            .row(r)
            .iter()
            .map(|x| last.lr * (x / last.batch_size() as f64))
            .collect();
        assert!(math::max_abs_diff(&sgd.find(z, last.t).unwrap().delta, &expected) == 0.0);
    }
}

#[test]
fn plain_sgd_mode_reduces_to_sgd_influence() {
    for (kind, seed) in [
        (OptimizerKind::Sgd, 1),
        (OptimizerKind::Sgd, 2),
        (OptimizerKind::AdamW, 3),
    ] {
        let (_, _, run) = small_mlp_run(kind, 5e-2, 12, 1.0, seed);
        let (adam, _) = backward_adamw(&run.trajectory, &AdamWDynamics::plain_sgd(), &Ggn, None).unwrap();
        let (sgd, _) = backward_sgd(&run.trajectory, &Ggn, None).unwrap();
        for (a, s) in adam.records.iter().zip(&sgd.records) {
            assert_eq!((a.sample, a.step), (s.sample, s.step));
            assert!(math::max_abs_diff(&a.delta, &s.delta) <= 1e-10);
        }
    }
}

#[test]
fn plain_sgd_forward_step_is_identity_minus_lr_hessian() {
    let (_, _, run) = small_mlp_run(OptimizerKind::Sgd, 5e-2, 4, 1.0, 4);
    let traj = &run.trajectory;
    let step = &traj.steps[2];
    let z = PushState {
        theta: (0..step.g.len()).map(|i| (i as f64 * 0.3).sin()).collect(),
        ..PushState::zeros(step.g.len())
    };
    let (next, h) = trajattr::attribution::propagate_step(&z, step, &AdamWDynamics::plain_sgd(), &Ggn).unwrap();
    let expected: Vec<f64> = z.theta.iter().zip(&h).map(|(t, hi)| t - step.lr * hi).collect();
    assert!(math::max_abs_diff(&next.theta, &expected) < 1e-15);
}

#[test]
fn backward_equals_forward_for_every_sample() {
    for (ratio, kind) in [
        (1.0, OptimizerKind::AdamW),
        (0.4, OptimizerKind::AdamW),
        (0.6, OptimizerKind::Sgd),
    ] {
        let (_, config, run) = small_mlp_run(kind, 1e-2, 25, ratio, 7);
        let dynamics = AdamWDynamics::from_config(&config.optimizer.adamw);
        let traj = &run.trajectory;
        assert!(traj.manifest.mask_size <= 512);
        let (set, _) = backward_adamw(traj, &dynamics, &Ggn, None).unwrap();
        for rec in &set.records {
            let prop = propagate_sample(traj, rec.sample, rec.step, &dynamics, &Ggn).unwrap();
            let fwd = &prop.final_state().theta;
            let scale = math::norm2(fwd).max(1e-300);
            assert!(
                math::max_abs_diff(&rec.delta, fwd) <= 1e-10 * scale.max(1.0),
                "sample {} step {}",
                rec.sample,
                rec.step
            );
        }
    }
}

#[test]
fn propagation_is_linear_in_the_injection() {
    let (_, config, run) = small_mlp_run(OptimizerKind::AdamW, 1e-2, 10, 1.0, 8);
    let dynamics = AdamWDynamics::from_config(&config.optimizer.adamw);
    let traj = &run.trajectory;
    let z = injection(&traj.steps[3], traj.steps[3].sample_ids[1], &dynamics).unwrap();
    let a = forward_propagate(z.clone(), traj, 3, traj.steps.len(), &dynamics, &Ggn).unwrap();
    let b = forward_propagate(z.scaled(2.0), traj, 3, traj.steps.len(), &dynamics, &Ggn).unwrap();
    assert_eq!(b.final_state().theta, a.final_state().scaled(2.0).theta);
}

#[test]
fn zero_state_stays_zero() {
    let (_, config, run) = small_mlp_run(OptimizerKind::AdamW, 1e-2, 6, 1.0, 9);
    let dynamics = AdamWDynamics::from_config(&config.optimizer.adamw);
    let n = run.trajectory.manifest.mask_size;
    let prop = forward_propagate(PushState::zeros(n), &run.trajectory, 0, 6, &dynamics, &Ggn).unwrap();
    assert!(prop.states.iter().all(|z| *z == PushState::zeros(n)));
}

#[test]
fn zero_gradients_give_zero_influence() {
    let (_, config, run) = small_mlp_run(OptimizerKind::Sgd, 1e-2, 5, 1.0, 10);
    let mut traj = run.trajectory.clone();
    for step in &mut traj.steps {
        let (b, s) = (step.per_sample_grads.rows(), step.per_sample_grads.cols());
        step.per_sample_grads = Matrix::zeros(b, s);
        step.g = vec![0.0; s];
    }
    let (sgd, _) = backward_sgd(&traj, &Ggn, None).unwrap();
    assert!(sgd.records.iter().all(|r| r.delta.iter().all(|&x| x == 0.0)));
    let dynamics = AdamWDynamics::from_config(&config.optimizer.adamw);
    let (adam, _) = backward_adamw(&traj, &dynamics, &Ggn, None).unwrap();
    assert!(adam.records.iter().all(|r| r.delta.iter().all(|&x| x == 0.0)));
}

struct Counting<'a> {
    inner: &'a Trajectory,
    visits: Vec<AtomicUsize>,
}

impl StepSource for Counting<'_> {
    fn manifest(&self) -> &TrajectoryManifest {
        &self.inner.manifest
    }

    fn step(&self, t: usize) -> Result<Cow<'_, StepRecord>> {
        self.visits[t].fetch_add(1, Ordering::SeqCst);
        self.inner.step(t)
    }
}

#[test]
fn backward_pass_visits_each_step_once_within_cost_model() {
    let (_, config, run) = small_mlp_run(OptimizerKind::AdamW, 1e-2, 20, 1.0, 11);
    let traj = &run.trajectory;
    let counting = Counting {
        inner: traj,
        visits: (0..traj.steps.len()).map(|_| AtomicUsize::new(0)).collect(),
    };
    let dynamics = AdamWDynamics::from_config(&config.optimizer.adamw);
    let (_, stats) = backward_adamw(&counting, &dynamics, &Ggn, None).unwrap();
    assert!(counting.visits.iter().all(|v| v.load(Ordering::SeqCst) == 1));
    assert_eq!(stats.steps_visited, traj.steps.len());
    let s = traj.manifest.mask_size as f64;
    let model = 3.0 * traj.steps.len() as f64 * 8.0 * s * s;
    let ratio = stats.mult_adds as f64 / model;
    assert!((0.25..=4.0).contains(&ratio), "ratio {ratio}");
    assert_eq!(stats.summary_entries, 3 * traj.manifest.mask_size.pow(2));
}

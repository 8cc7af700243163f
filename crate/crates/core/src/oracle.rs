//! Ground truth by retraining: trajectory-specific leave-one-out, finite
//! differences of the final parameters, and a determinism probe.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::math;
use crate::model::{Model, ReductionOrder};
use crate::optim::OptimState;
pub use crate::trajectory::RemovalMode;
use crate::trajectory::{train_segment, Checkpoints, LoopOptions, Perturbation, RecordedRun, RunConfig};

/// Everything needed to rerun a recorded training run from any step.
pub struct RetrainContext<'a> {
    model: Model,
    data: &'a Dataset,
    config: RunConfig,
    checkpoints: &'a Checkpoints,
    theta_final: &'a [f64],
}

impl<'a> RetrainContext<'a> {
    pub fn new(data: &'a Dataset, config: &RunConfig, run: &'a RecordedRun) -> Result<Self> {
        let checkpoints = run
            .checkpoints
            .as_ref()
            .ok_or_else(|| Error::invalid("retraining needs a run recorded with checkpoints"))?;
        if checkpoints.thetas.len() != config.num_steps() + 1 {
            return Err(Error::invalid("checkpoints do not cover the schedule"));
        }
        Ok(RetrainContext {
            model: Model::new(config.model.clone())?,
            data,
            config: config.clone(),
            checkpoints,
            theta_final: &run.theta_final,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn data(&self) -> &Dataset {
        self.data
    }

    pub fn num_steps(&self) -> usize {
        self.config.num_steps()
    }

    pub fn theta_final(&self) -> &[f64] {
        self.theta_final
    }

    pub fn theta_at(&self, t: usize) -> &[f64] {
        &self.checkpoints.thetas[t]
    }

    /// `θ_T` of the run with `pert` applied. Steps before the perturbation
    /// are taken from the checkpoints, which are bit-identical to a rerun.
    pub fn perturbed_final(&self, pert: &Perturbation) -> Result<Vec<f64>> {
        let t = pert.step;
        if t >= self.num_steps() {
            return Err(Error::invalid(format!("step {t} outside the trajectory")));
        }
        if !self.config.schedule.batch(t).contains(&pert.sample) {
            return Err(Error::invalid(format!(
                "sample {} is not in the batch of step {t}",
                pert.sample
            )));
        }
        let mut theta = self.checkpoints.thetas[t].clone();
        let mut state: OptimState = self.checkpoints.states[t].clone();
        train_segment(
            &self.model,
            self.data,
            &self.config.optimizer,
            &self.config.schedule,
            &mut theta,
            &mut state,
            t..self.num_steps(),
            Some(pert),
            LoopOptions::default(),
            None,
        )?;
        Ok(theta)
    }
}

/// Ground truth for removing one sample from one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TslooRecord {
    pub sample: usize,
    pub t_star: usize,
    pub mode: RemovalMode,
    pub theta_prime: Vec<f64>,
    /// `ℓ(θ'_T, val) − ℓ(θ_T, val)` per validation point.
    pub loss_deltas: Vec<f64>,
}

impl TslooRecord {
    pub fn delta_theta(&self, theta_final: &[f64]) -> Vec<f64> {
        math::sub(&self.theta_prime, theta_final)
    }
}

pub fn loss_deltas(
    model: &Model,
    theta_prime: &[f64],
    theta: &[f64],
    val: &Dataset,
    val_ids: &[usize],
) -> Result<Vec<f64>> {
    val_ids
        .iter()
        .map(|&i| Ok(model.loss(theta_prime, val.sample(i))? - model.loss(theta, val.sample(i))?))
        .collect()
}

pub fn tsloo_retrain(
    ctx: &RetrainContext<'_>,
    sample: usize,
    t_star: usize,
    mode: RemovalMode,
    val: &Dataset,
    val_ids: &[usize],
) -> Result<TslooRecord> {
    let theta_prime = ctx.perturbed_final(&Perturbation {
        step: t_star,
        sample,
        epsilon: 1.0,
        mode,
    })?;
    if !math::all_finite(&theta_prime) {
        return Err(Error::numeric(None, "non-finite retrained parameters"));
    }
    let loss_deltas = loss_deltas(&ctx.model, &theta_prime, ctx.theta_final, val, val_ids)?;
    Ok(TslooRecord {
        sample,
        t_star,
        mode,
        theta_prime,
        loss_deltas,
    })
}

/// Independent retraining jobs for `(sample, t_star)` pairs, in parallel;
/// output order follows `pairs`.
pub fn tsloo_batch(
    ctx: &RetrainContext<'_>,
    pairs: &[(usize, usize)],
    mode: RemovalMode,
    val: &Dataset,
    val_ids: &[usize],
) -> Result<Vec<TslooRecord>> {
    pairs
        .par_iter()
        .map(|&(sample, t)| tsloo_retrain(ctx, sample, t, mode, val, val_ids))
        .collect()
}

/// `(θ_T(+ε) − θ_T(−ε)) / 2ε` for `g(ε) = g − ε·g_z/b` at `t_star`.
pub fn fd_dot_theta(ctx: &RetrainContext<'_>, sample: usize, t_star: usize, epsilon: f64) -> Result<Vec<f64>> {
    if !(epsilon > 0.0) {
        return Err(Error::invalid("epsilon must be positive"));
    }
    let run = |e: f64| {
        ctx.perturbed_final(&Perturbation {
            step: t_star,
            sample,
            epsilon: e,
            mode: RemovalMode::Subtract,
        })
    };
    let (plus, minus) = rayon::join(|| run(epsilon), || run(-epsilon));
    let (plus, minus) = (plus?, minus?);
    let out: Vec<f64> = plus
        .iter()
        .zip(&minus)
        .map(|(a, b)| (a - b) / (2.0 * epsilon))
        .collect();
    if !math::all_finite(&out) {
        return Err(Error::numeric(
            Some(t_star),
            format!("finite difference blew up at epsilon {epsilon}; try a smaller epsilon"),
        ));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeterminismReport {
    /// Max |Δθ_T| between two reference runs; zero by contract.
    pub reference_max_diff: f64,
    /// Max |Δθ_T| against a run with reversed gradient reduction order.
    pub permuted_floor: f64,
    pub num_steps: usize,
}

fn train_from_init(data: &Dataset, config: &RunConfig, reduction: ReductionOrder) -> Result<Vec<f64>> {
    let model = Model::new(config.model.clone())?;
    let mut theta = model.init_params();
    let mut state = OptimState::new(model.param_count());
    train_segment(
        &model,
        data,
        &config.optimizer,
        &config.schedule,
        &mut theta,
        &mut state,
        0..config.num_steps(),
        None,
        LoopOptions { reduction },
        None,
    )?;
    Ok(theta)
}

/// Train twice on a single thread with identical settings, then once with
/// the batch reduction reversed.
pub fn determinism_probe(data: &Dataset, config: &RunConfig) -> Result<DeterminismReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::invalid(e.to_string()))?;
    let (a, b, c) = pool.install(|| -> Result<_> {
        Ok((
            train_from_init(data, config, ReductionOrder::Forward)?,
            train_from_init(data, config, ReductionOrder::Forward)?,
            train_from_init(data, config, ReductionOrder::Reversed)?,
        ))
    })?;
    let reference_max_diff = math::max_abs_diff(&a, &b);
    if reference_max_diff != 0.0 {
        return Err(Error::Determinism(format!(
            "reference path differs between identical runs by {reference_max_diff:e}"
        )));
    }
    Ok(DeterminismReport {
        reference_max_diff,
        permuted_floor: math::max_abs_diff(&a, &c),
        num_steps: config.num_steps(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::mask::MaskSpec;
    use crate::data::{gen_blobs, make_schedule};
    use crate::model::ModelSpec;
    use crate::optim::{LrSchedule, OptimizerConfig};
    use crate::trajectory::record_in_memory;

    fn quadratic_setup(features: Vec<f64>, dim: usize, b: usize, schedule: LrSchedule) -> (Dataset, RunConfig) {
        let n = features.len() / dim;
        let data = Dataset::new(features, vec![0; n], dim, 1).unwrap();
        let mut optimizer = OptimizerConfig::sgd(0.1);
        optimizer.schedule = schedule;
        let config = RunConfig {
            model: ModelSpec::quadratic(dim),
            optimizer,
            schedule: make_schedule(n, b, 2, 3).unwrap(),
            mask: MaskSpec::full(),
        };
        (data, config)
    }

    #[test]
    fn quadratic_tsloo_has_closed_form() {
        let features: Vec<f64> = (0..24).map(|i| ((i * 7) % 11) as f64 / 5.0 - 1.0).collect();
        let schedule = LrSchedule::WarmupLinear {
            base_lr: 0.2,
            warmup_steps: 2,
            total_steps: 8,
        };
        let (data, config) = quadratic_setup(features, 2, 3, schedule.clone());
        let run = record_in_memory(&data, &config, true).unwrap();
        let ctx = RetrainContext::new(&data, &config, &run).unwrap();
        let t_total = config.num_steps();
        for t_star in 0..t_total {
            for &z in config.schedule.batch(t_star) {
                let rec = tsloo_retrain(&ctx, z, t_star, RemovalMode::Subtract, &data, &[0]).unwrap();
                let dtheta = rec.delta_theta(&run.theta_final);
                let theta_t = ctx.theta_at(t_star);
                let decay: f64 = (t_star + 1..t_total).map(|k| 1.0 - schedule.lr(k)).product();
                for j in 0..2 {
                    let expected = schedule.lr(t_star) / 3.0 * (theta_t[j] - data.sample(z).x[j]) * decay;
                    assert!((dtheta[j] - expected).abs() < 1e-12, "t*={t_star} z={z}");
                }
            }
        }
    }

    #[test]
    fn zero_gradient_sample_has_no_effect() {
        let (data, config) = quadratic_setup(vec![0.0; 12], 2, 2, LrSchedule::constant(0.1));
        let run = record_in_memory(&data, &config, true).unwrap();
        let ctx = RetrainContext::new(&data, &config, &run).unwrap();
        let z = config.schedule.batch(1)[0];
        let rec = tsloo_retrain(&ctx, z, 1, RemovalMode::Subtract, &data, &[0, 1]).unwrap();
        assert!(rec.delta_theta(&run.theta_final).iter().all(|&x| x == 0.0));
        assert!(rec.loss_deltas.iter().all(|&x| x == 0.0));
        let fd = fd_dot_theta(&ctx, z, 1, 1e-3).unwrap();
        assert!(fd.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn removal_of_a_non_member_is_rejected() {
        let data = gen_blobs(16, 2, 2, 1.0, 1).unwrap();
        let config = RunConfig {
            model: ModelSpec::logistic(2, 2, 0),
            optimizer: OptimizerConfig::adamw(1e-2),
            schedule: make_schedule(16, 4, 1, 0).unwrap(),
            mask: MaskSpec::full(),
        };
        let run = record_in_memory(&data, &config, true).unwrap();
        let ctx = RetrainContext::new(&data, &config, &run).unwrap();
        let outsider = (0..16).find(|i| !config.schedule.batch(0).contains(i)).unwrap();
        let err = tsloo_retrain(&ctx, outsider, 0, RemovalMode::Subtract, &data, &[0]).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn loss_deltas_match_recomputation_and_modes_differ() {
        let data = gen_blobs(32, 3, 3, 1.0, 4).unwrap();
        let config = RunConfig {
            model: ModelSpec::mlp(3, &[5], 3, 1),
            optimizer: OptimizerConfig::adamw(1e-2),
            schedule: make_schedule(32, 8, 1, 2).unwrap(),
            mask: MaskSpec::full(),
        };
        let run = record_in_memory(&data, &config, true).unwrap();
        let ctx = RetrainContext::new(&data, &config, &run).unwrap();
        let z = config.schedule.batch(1)[2];
        let val_ids = [0, 5, 9];
        let sub = tsloo_retrain(&ctx, z, 1, RemovalMode::Subtract, &data, &val_ids).unwrap();
        let ren = tsloo_retrain(&ctx, z, 1, RemovalMode::Renormalize, &data, &val_ids).unwrap();
        let model = Model::new(config.model.clone()).unwrap();
        for (k, &i) in val_ids.iter().enumerate() {
            let expect = model.loss(&sub.theta_prime, data.sample(i)).unwrap()
                - model.loss(&run.theta_final, data.sample(i)).unwrap();
            assert_eq!(sub.loss_deltas[k], expect);
        }
        assert_ne!(sub.theta_prime, ren.theta_prime);
        let batch = tsloo_batch(&ctx, &[(z, 1)], RemovalMode::Subtract, &data, &val_ids).unwrap();
        assert_eq!(batch[0], sub);
    }

    #[test]
    fn determinism_probe_reports_zero_reference_diff() {
        let data = gen_blobs(64, 3, 3, 1.0, 4).unwrap();
        let config = RunConfig {
            model: ModelSpec::mlp(3, &[5], 3, 1),
            optimizer: OptimizerConfig::adamw(1e-2),
            schedule: make_schedule(64, 16, 2, 2).unwrap(),
            mask: MaskSpec::full(),
        };
        let report = determinism_probe(&data, &config).unwrap();
        assert_eq!(report.reference_max_diff, 0.0);
        assert!(report.permuted_floor.is_finite());
        let empty = RunConfig {
            schedule: make_schedule(64, 16, 0, 2).unwrap(),
            ..config
        };
        let report = determinism_probe(&data, &empty).unwrap();
        assert_eq!(report.permuted_floor, 0.0);
        assert_eq!(report.num_steps, 0);
    }
}

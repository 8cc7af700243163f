//! Data selection with K-step look-ahead scoring, offline selection from a
//! reference run, and the horizon/learning-rate sweep.
//!
//! Scores follow the attribution sign: a candidate's score is the predicted
//! change in probe loss if it were *left out*, so positive means the sample
//! helps. Online selection keeps the highest scores; offline selection drops
//! the lowest.

use std::collections::BTreeMap;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::backward::backward_adamw;
use crate::attribution::curvature::{Curvature, Ggn};
use crate::attribution::factors::{diag_factors, push_state, AdamWDynamics};
use crate::attribution::forward::propagate_step;
use crate::attribution::mask::MaskSpec;
use crate::attribution::score::{mean_gradient, score_matrix, validation_gradients};
use crate::data::{make_schedule, Dataset};
use crate::error::{Error, Result};
use crate::math::{self, Matrix, RngStream};
use crate::model::{mean_rows, Model, ModelSpec, ReductionOrder};
use crate::optim::{LrSchedule, OptimState, OptimizerConfig};
use crate::trajectory::{record_in_memory, train_segment, LoopOptions, RunConfig, StepRecord};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scorer {
    #[default]
    #[serde(rename = "adamw")]
    AdamW,
    Sgd,
    Random,
}

impl Scorer {
    pub fn name(self) -> &'static str {
        match self {
            Scorer::AdamW => "adamw",
            Scorer::Sgd => "sgd",
            Scorer::Random => "random",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    /// Candidates drawn per step (N).
    pub candidates: usize,
    /// Samples kept per step (B).
    pub retained: usize,
    /// Look-ahead horizon K.
    pub horizon: usize,
    pub scorer: Scorer,
    #[serde(default = "default_probe_size")]
    pub probe_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

fn default_probe_size() -> usize {
    16
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.retained == 0 || self.retained > self.candidates {
            return Err(Error::invalid(format!(
                "retained size {} must be in [1, candidates={}]",
                self.retained, self.candidates
            )));
        }
        if self.epochs == 0 || self.probe_size == 0 {
            return Err(Error::invalid("epochs and probe size must be positive"));
        }
        Ok(())
    }
}

/// Training pool plus held-out validation and test sets.
#[derive(Clone, Copy, Debug)]
pub struct SelectionData<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub test: &'a Dataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepChoice {
    pub t: usize,
    pub ids: Vec<usize>,
    /// Scores of the retained ids; empty when no scoring happened.
    pub scores: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetric {
    pub epoch: usize,
    pub val_error: f64,
    pub val_loss: f64,
    pub test_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub steps: Vec<StepChoice>,
    pub epochs: Vec<EpochMetric>,
    /// Epoch with the lowest validation error (ties: lower loss, then earlier).
    pub best_epoch: usize,
    /// Test error at `best_epoch`.
    pub test_error: f64,
    pub notices: Vec<String>,
    /// Look-ahead optimizer steps simulated for scoring.
    pub simulated_steps: u64,
    /// Curvature-vector products spent propagating candidates.
    pub curvature_products: u64,
    pub theta_final: Vec<f64>,
}

fn evaluate(model: &Model, theta: &[f64], data: SelectionData<'_>, epoch: usize) -> Result<EpochMetric> {
    let val_ids: Vec<usize> = (0..data.val.len()).collect();
    let metric = EpochMetric {
        epoch,
        val_error: model.error_rate(theta, data.val),
        val_loss: model.mean_loss(theta, data.val, &val_ids)?,
        test_error: model.error_rate(theta, data.test),
    };
    if !(metric.val_loss.is_finite() && metric.val_error.is_finite() && metric.test_error.is_finite()) {
        return Err(Error::numeric(None, format!("non-finite metrics after epoch {epoch}")));
    }
    Ok(metric)
}

fn best_epoch(epochs: &[EpochMetric]) -> Result<&EpochMetric> {
    epochs
        .iter()
        .min_by(|a, b| {
            a.val_error
                .total_cmp(&b.val_error)
                .then(a.val_loss.total_cmp(&b.val_loss))
                .then(a.epoch.cmp(&b.epoch))
        })
        .ok_or_else(|| Error::invalid("no epochs were run"))
}

fn finish_trace(
    steps: Vec<StepChoice>,
    epochs: Vec<EpochMetric>,
    notices: Vec<String>,
    counters: (u64, u64),
    theta_final: Vec<f64>,
) -> Result<SelectionTrace> {
    let best = *best_epoch(&epochs)?;
    Ok(SelectionTrace {
        steps,
        epochs,
        best_epoch: best.epoch,
        test_error: best.test_error,
        notices,
        simulated_steps: counters.0,
        curvature_products: counters.1,
        theta_final,
    })
}

/// SHA-256 over parameters and optimizer state, for checking that scoring
/// leaves the real path untouched.
pub fn state_digest(theta: &[f64], state: &OptimState) -> String {
    let mut h = Sha256::new();
    for xs in [theta, &state.m, &state.v] {
        for x in xs {
            h.update(x.to_le_bytes());
        }
    }
    h.update((state.t as u64).to_le_bytes());
    hex::encode(h.finalize())
}

/// Shared, read-only context for scoring candidates at one step.
pub struct Lookahead<'a> {
    pub model: &'a Model,
    pub data: SelectionData<'a>,
    pub optimizer: &'a OptimizerConfig,
    pub config: &'a SelectionConfig,
}

/// Scores for `candidates` at the real state `(theta, state)`, together with
/// the number of simulated steps and curvature products spent.
///
/// Step `t` itself is simulated with the mean candidate gradient standing in
/// for the not-yet-chosen batch. `K` further provisional batches of size `B`
/// are drawn from the `lookahead` stream and stepped on a scratch copy. Each
/// candidate's push state is propagated through those steps and dotted with
/// the probe gradient at `θ_t`.
pub fn score_candidates(
    ctx: &Lookahead<'_>,
    theta: &[f64],
    state: &OptimState,
    candidates: &[usize],
) -> Result<(Vec<f64>, u64, u64)> {
    let cfg = ctx.config;
    let t = state.t;
    let dynamics = match cfg.scorer {
        Scorer::AdamW => AdamWDynamics::from_config(&ctx.optimizer.adamw),
        Scorer::Sgd => AdamWDynamics::plain_sgd(),
        Scorer::Random => return Err(Error::invalid("random selection has no scores")),
    };
    let model = ctx.model;
    let train = ctx.data.train;

    let probe = {
        let n_val = ctx.data.val.len();
        let mut rng = RngStream::named(cfg.seed, "probe").child(t as u64).rng();
        let mut ids = sample_indices(&mut rng, n_val, cfg.probe_size.min(n_val)).into_vec();
        ids.sort_unstable();
        ids
    };
    let probe_grad = model.batch_grad(theta, ctx.data.val, &probe)?;

    let grads = model.per_sample_grads(theta, train, candidates)?;
    let mut sim_theta = theta.to_vec();
    let mut sim_state = state.clone();
    let g_bar = mean_rows(&grads, ReductionOrder::Forward);
    let lr = ctx.optimizer.schedule.lr(t);
    ctx.optimizer.step(&mut sim_theta, &g_bar, &mut sim_state)?;
    let factors = diag_factors(&sim_state.m, &sim_state.v, t, &dynamics)?;
    let b = cfg.retained as f64;

    let lookahead = RngStream::named(cfg.seed, "lookahead").child(t as u64);
    let mut future = Vec::with_capacity(cfg.horizon);
    for j in 1..=cfg.horizon {
        let mut rng = lookahead.child(j as u64).rng();
        let ids = sample_indices(&mut rng, train.len(), cfg.retained.min(train.len())).into_vec();
        let psg = model.per_sample_grads(&sim_theta, train, &ids)?;
        let g = mean_rows(&psg, ReductionOrder::Forward);
        let step_lr = ctx.optimizer.schedule.lr(t + j);
        ctx.optimizer.step(&mut sim_theta, &g, &mut sim_state)?;
        future.push(StepRecord {
            t: t + j,
            sample_ids: ids,
            per_sample_grads: psg,
            g,
            m: sim_state.m.clone(),
            v: sim_state.v.clone(),
            lr: step_lr,
        });
    }

    let scores: Vec<f64> = (0..candidates.len())
        .into_par_iter()
        .map(|r| {
            let g_hat: Vec<f64> = grads.row(r).iter().map(|x| x / b).collect();
            let mut z = push_state(&g_hat, &g_bar, &factors, lr, &dynamics)?;
            for step in &future {
                z = propagate_step(&z, step, &dynamics, &Ggn as &dyn Curvature)?.0;
            }
            Ok(math::dot(&probe_grad, &z.theta))
        })
        .collect::<Result<_>>()?;
    let n = candidates.len() as u64;
    Ok((scores, cfg.horizon as u64, n * cfg.horizon as u64))
}

/// Indices of the `keep` highest finite scores; ties go to the lower sample id.
fn top_by_score(ids: &[usize], scores: &[f64], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ids.len()).filter(|&i| scores[i].is_finite()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(ids[a].cmp(&ids[b])));
    order.truncate(keep);
    order.sort_unstable();
    order
}

/// Online selection: at every step draw `N` candidates, keep `B`, and take
/// the real optimizer step on the kept batch.
pub fn select_online(
    data: SelectionData<'_>,
    spec: &ModelSpec,
    optimizer: &OptimizerConfig,
    config: &SelectionConfig,
) -> Result<SelectionTrace> {
    config.validate()?;
    optimizer.validate()?;
    let model = Model::new(spec.clone())?;
    let n = data.train.len();
    let (cand_n, keep) = (config.candidates, config.retained);
    let mut notices = Vec::new();
    let with_replacement = cand_n > n;
    if with_replacement {
        notices.push(format!(
            "candidate size {cand_n} exceeds the pool of {n}; drawing with replacement"
        ));
    }
    let steps_per_epoch = (n / cand_n).max(1);
    let ctx = Lookahead {
        model: &model,
        data,
        optimizer,
        config,
    };

    let mut theta = model.init_params();
    let mut state = OptimState::new(model.param_count());
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let (mut simulated, mut products) = (0u64, 0u64);
    let draw = RngStream::named(config.seed, "candidates");

    for epoch in 0..config.epochs {
        let mut rng = draw.child(epoch as u64).rng();
        let perm: Vec<usize> = if with_replacement {
            (0..cand_n).map(|_| rng.random_range(0..n)).collect()
        } else {
            sample_indices(&mut rng, n, n).into_vec()
        };
        for k in 0..steps_per_epoch {
            let cands = &perm[k * cand_n..(k + 1) * cand_n];
            let t = state.t;
            let (ids, scores) = if keep == cand_n {
                (cands.to_vec(), Vec::new())
            } else if config.scorer == Scorer::Random {
                let mut rng = RngStream::named(config.seed, "random").child(t as u64).rng();
                let mut pos = sample_indices(&mut rng, cand_n, keep).into_vec();
                pos.sort_unstable();
                (pos.iter().map(|&i| cands[i]).collect(), Vec::new())
            } else {
                let before = state_digest(&theta, &state);
                let (scores, sim, prod) = score_candidates(&ctx, &theta, &state, cands)?;
                if state_digest(&theta, &state) != before {
                    return Err(Error::Determinism(format!(
                        "scoring at step {t} changed the training state"
                    )));
                }
                simulated += sim;
                products += prod;
                let excluded = scores.iter().filter(|s| !s.is_finite()).count();
                if excluded > 0 {
                    notices.push(format!(
                        "step {t}: {excluded} candidates with non-finite scores excluded"
                    ));
                }
                let pos = top_by_score(cands, &scores, keep);
                if pos.len() < keep {
                    return Err(Error::numeric(Some(t), "too few candidates with finite scores"));
                }
                (
                    pos.iter().map(|&i| cands[i]).collect(),
                    pos.iter().map(|&i| scores[i]).collect(),
                )
            };
            let grads = model.per_sample_grads(&theta, data.train, &ids)?;
            let g = mean_rows(&grads, ReductionOrder::Forward);
            optimizer.step(&mut theta, &g, &mut state)?;
            steps.push(StepChoice { t, ids, scores });
        }
        epochs.push(evaluate(&model, &theta, data, epoch)?);
    }
    finish_trace(steps, epochs, notices, (simulated, products), theta)
}

/// Plain training on `train` with a fresh shuffled schedule, evaluated after
/// every epoch.
pub fn train_with_eval(
    data: SelectionData<'_>,
    spec: &ModelSpec,
    optimizer: &OptimizerConfig,
    batch_size: usize,
    epochs: usize,
    seed: u64,
) -> Result<SelectionTrace> {
    optimizer.validate()?;
    let model = Model::new(spec.clone())?;
    let schedule = make_schedule(data.train.len(), batch_size, epochs, seed)?;
    let per_epoch = schedule.steps_per_epoch();
    let mut theta = model.init_params();
    let mut state = OptimState::new(model.param_count());
    let mut metrics = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let range = epoch * per_epoch..(epoch + 1) * per_epoch;
        train_segment(
            &model,
            data.train,
            optimizer,
            &schedule,
            &mut theta,
            &mut state,
            range,
            None,
            LoopOptions::default(),
            None,
        )?;
        metrics.push(evaluate(&model, &theta, data, epoch)?);
    }
    let steps = schedule
        .steps()
        .iter()
        .enumerate()
        .map(|(t, ids)| StepChoice {
            t,
            ids: ids.clone(),
            scores: Vec::new(),
        })
        .collect();
    finish_trace(steps, metrics, Vec::new(), (0, 0), theta)
}

/// Per-sample AdamW-influence totals from a reference run on the full pool:
/// each occurrence's score against the mean validation gradient, summed.
/// Samples never visited get 0.
pub fn offline_scores(
    data: SelectionData<'_>,
    spec: &ModelSpec,
    optimizer: &OptimizerConfig,
    batch_size: usize,
    epochs: usize,
    seed: u64,
    mask: MaskSpec,
) -> Result<Vec<f64>> {
    let config = RunConfig {
        model: spec.clone(),
        optimizer: optimizer.clone(),
        schedule: make_schedule(data.train.len(), batch_size, epochs, seed)?,
        mask,
    };
    let run = record_in_memory(data.train, &config, false)?;
    let model = Model::new(spec.clone())?;
    let mask = run.trajectory.manifest.build_mask()?;
    let val_ids: Vec<usize> = (0..data.val.len()).collect();
    let vg = validation_gradients(&model, &run.theta_final, data.val, &val_ids, &mask)?;
    let mean = Matrix::from_rows(&[mean_gradient(&vg)])?;
    let dynamics = AdamWDynamics::from_config(&optimizer.adamw);
    let (set, _) = backward_adamw(&run.trajectory, &dynamics, &Ggn, None)?;
    let scores = score_matrix(&set, &mean)?;
    let mut totals = vec![0.0; data.train.len()];
    for (r, rec) in set.records.iter().enumerate() {
        totals[rec.sample] += scores.get(r, 0);
    }
    Ok(totals)
}

/// Ids removed when keeping `keep_ratio` of the pool: the lowest totals,
/// ties by lower id. Returned sorted.
pub fn offline_removed(totals: &[f64], keep_ratio: f64) -> Result<Vec<usize>> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::invalid(format!("keep ratio {keep_ratio} outside (0, 1]")));
    }
    let n = totals.len();
    let keep = ((keep_ratio * n as f64).round() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| totals[a].total_cmp(&totals[b]).then(a.cmp(&b)));
    let mut removed = order[..n - keep].to_vec();
    removed.sort_unstable();
    Ok(removed)
}

/// Offline selection: drop the most harmful samples by total score and
/// retrain from the initialization on the rest. Step ids in the trace refer
/// to the original pool.
#[allow(clippy::too_many_arguments)]
pub fn select_offline(
    data: SelectionData<'_>,
    spec: &ModelSpec,
    optimizer: &OptimizerConfig,
    totals: &[f64],
    keep_ratio: f64,
    batch_size: usize,
    epochs: usize,
    seed: u64,
) -> Result<SelectionTrace> {
    if totals.len() != data.train.len() {
        return Err(Error::invalid("one total score per training sample is required"));
    }
    let removed = offline_removed(totals, keep_ratio)?;
    let kept: Vec<usize> = {
        let mut r = removed.iter().peekable();
        (0..totals.len())
            .filter(|i| {
                if r.peek() == Some(&i) {
                    r.next();
                    false
                } else {
                    true
                }
            })
            .collect()
    };
    let subset = data.train.subset(&kept)?;
    let mut trace = train_with_eval(
        SelectionData { train: &subset, ..data },
        spec,
        optimizer,
        batch_size.min(kept.len()),
        epochs,
        seed,
    )?;
    for step in &mut trace.steps {
        step.ids.iter_mut().for_each(|i| *i = kept[*i]);
    }
    if !removed.is_empty() {
        trace
            .notices
            .push(format!("removed {} of {} samples", removed.len(), totals.len()));
    }
    Ok(trace)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KSweepCell {
    pub horizon: usize,
    pub lr: f64,
    /// Test error at the best validation epoch, one per seed.
    pub errors: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KSweepTable {
    pub cells: Vec<KSweepCell>,
    pub seeds: Vec<u64>,
    /// Best horizon per learning rate, by mean error (ties: smaller K).
    pub argmin: Vec<(f64, usize)>,
    /// Best horizon per seed and learning rate, `[seed][lr]`, in the order of
    /// the input learning rates.
    pub argmin_per_seed: Vec<Vec<usize>>,
}

impl KSweepTable {
    /// Whether `best K` never decreases as the learning rate decreases, for
    /// each seed. Learning rates are taken in descending order.
    pub fn monotone_per_seed(&self) -> Vec<bool> {
        let mut order: Vec<usize> = (0..self.argmin.len()).collect();
        order.sort_by(|&a, &b| self.argmin[b].0.total_cmp(&self.argmin[a].0));
        self.argmin_per_seed
            .iter()
            .map(|ks| order.windows(2).all(|w| ks[w[0]] <= ks[w[1]]))
            .collect()
    }
}

fn argmin_k(pairs: impl Iterator<Item = (usize, f64)>) -> usize {
    pairs
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|p| p.0)
        .expect("at least one horizon")
}

/// Online AdamW-influence selection over a grid of horizons and constant
/// learning rates. `base.seed` is replaced by each of `seeds`, which also
/// seed the model initialization.
pub fn k_sweep(
    data: SelectionData<'_>,
    spec: &ModelSpec,
    optimizer: &OptimizerConfig,
    base: &SelectionConfig,
    horizons: &[usize],
    lrs: &[f64],
    seeds: &[u64],
) -> Result<KSweepTable> {
    if let Some(lr) = lrs.iter().find(|&&lr| !(lr > 0.0 && lr.is_finite())) {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    if horizons.is_empty() || lrs.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("sweep grid is empty"));
    }
    let grid: Vec<(usize, usize, u64)> = horizons
        .iter()
        .enumerate()
        .flat_map(|(ki, _)| (0..lrs.len()).flat_map(move |li| seeds.iter().map(move |&s| (ki, li, s))))
        .collect();
    let results: Vec<f64> = grid
        .par_iter()
        .map(|&(ki, li, seed)| {
            let mut cfg = base.clone();
            cfg.horizon = horizons[ki];
            cfg.seed = seed;
            cfg.scorer = Scorer::AdamW;
            let mut opt = optimizer.clone();
            opt.schedule = LrSchedule::Constant { lr: lrs[li] };
            let mut spec = spec.clone();
            spec.init_seed = seed;
            Ok(select_online(data, &spec, &opt, &cfg)?.test_error)
        })
        .collect::<Result<_>>()?;
    let mut by_cell: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for (&(ki, li, _), &e) in grid.iter().zip(&results) {
        by_cell.entry((ki, li)).or_default().push(e);
    }
    let cells: Vec<KSweepCell> = by_cell
        .iter()
        .map(|(&(ki, li), errors)| {
            let (mean, std) = math::mean_std(errors);
            KSweepCell {
                horizon: horizons[ki],
                lr: lrs[li],
                errors: errors.clone(),
                mean,
                std,
            }
        })
        .collect();
    let argmin = (0..lrs.len())
        .map(|li| {
            let best = argmin_k((0..horizons.len()).map(|ki| (horizons[ki], math::mean_std(&by_cell[&(ki, li)]).0)));
            (lrs[li], best)
        })
        .collect();
    let argmin_per_seed = (0..seeds.len())
        .map(|si| {
            (0..lrs.len())
                .map(|li| argmin_k((0..horizons.len()).map(|ki| (horizons[ki], by_cell[&(ki, li)][si]))))
                .collect()
        })
        .collect();
    Ok(KSweepTable {
        cells,
        seeds: seeds.to_vec(),
        argmin,
        argmin_per_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_blobs;

    fn toy(seed: u64) -> (Dataset, Dataset, Dataset) {
        let all = gen_blobs(240, 4, 3, 1.0, seed).unwrap();
        let split = |a: usize, b: usize| all.subset(&(a..b).collect::<Vec<_>>()).unwrap();
        (split(0, 160), split(160, 200), split(200, 240))
    }

    fn cfg(n: usize, b: usize, k: usize, scorer: Scorer) -> SelectionConfig {
        SelectionConfig {
            candidates: n,
            retained: b,
            horizon: k,
            scorer,
            probe_size: 8,
            epochs: 2,
            seed: 3,
        }
    }

    #[test]
    fn config_bounds() {
        assert!(cfg(8, 9, 0, Scorer::AdamW).validate().is_err());
        assert!(cfg(8, 0, 0, Scorer::AdamW).validate().is_err());
        assert!(cfg(8, 8, 0, Scorer::AdamW).validate().is_ok());
    }

    #[test]
    fn selecting_everything_is_plain_training() {
        let (train, val, test) = toy(0);
        let data = SelectionData {
            train: &train,
            val: &val,
            test: &test,
        };
        let spec = ModelSpec::mlp(4, &[5], 3, 1);
        let opt = OptimizerConfig::adamw(1e-2);
        let trace = select_online(data, &spec, &opt, &cfg(16, 16, 3, Scorer::AdamW)).unwrap();
        assert_eq!(trace.simulated_steps, 0);
        let model = Model::new(spec).unwrap();
        let mut theta = model.init_params();
        let mut state = OptimState::new(model.param_count());
        for step in &trace.steps {
            assert_eq!(step.ids.len(), 16);
            let g = model.batch_grad(&theta, &train, &step.ids).unwrap();
            opt.step(&mut theta, &g, &mut state).unwrap();
        }
        assert_eq!(theta, trace.theta_final);
    }

    #[test]
    fn traces_are_reproducible_and_sized() {
        let (train, val, test) = toy(1);
        let data = SelectionData {
            train: &train,
            val: &val,
            test: &test,
        };
        let spec = ModelSpec::mlp(4, &[5], 3, 1);
        let opt = OptimizerConfig::adamw(1e-2);
        for scorer in [Scorer::AdamW, Scorer::Sgd, Scorer::Random] {
            let c = cfg(16, 6, 2, scorer);
            let a = select_online(data, &spec, &opt, &c).unwrap();
            let b = select_online(data, &spec, &opt, &c).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.steps.len(), 2 * (160 / 16));
            assert!(a.steps.iter().all(|s| s.ids.len() == 6));
        }
    }

    #[test]
    fn horizon_zero_is_the_immediate_update_rule() {
        let (train, val, test) = toy(2);
        let data = SelectionData {
            train: &train,
            val: &val,
            test: &test,
        };
        let model = Model::new(ModelSpec::mlp(4, &[5], 3, 1)).unwrap();
        let opt = OptimizerConfig::adamw(1e-2);
        let config = cfg(10, 4, 0, Scorer::Sgd);
        let ctx = Lookahead {
            model: &model,
            data,
            optimizer: &opt,
            config: &config,
        };
        let theta = model.init_params();
        let state = OptimState::new(model.param_count());
        let cands: Vec<usize> = (20..30).collect();
        let (scores, sim, prod) = score_candidates(&ctx, &theta, &state, &cands).unwrap();
        assert_eq!((sim, prod), (0, 0));
        // Plain-SGD push: θ̇ = η ĝ, so the score is η/B · probe · g_z.
        let mut rng = RngStream::named(config.seed, "probe").child(0).rng();
        let mut probe = sample_indices(&mut rng, val.len(), 8).into_vec();
        probe.sort_unstable();
        let pg = model.batch_grad(&theta, &val, &probe).unwrap();
        for (z, s) in cands.iter().zip(&scores) {
            let gz = model.grad(&theta, train.sample(*z)).unwrap();
            let want = 1e-2 / 4.0 * math::dot(&pg, &gz);
            assert!((s - want).abs() <= 1e-12 * want.abs().max(1e-12), "{s} vs {want}");
        }
    }

    #[test]
    fn scoring_cost_is_linear_in_horizon() {
        let (train, val, test) = toy(3);
        let data = SelectionData {
            train: &train,
            val: &val,
            test: &test,
        };
        let model = Model::new(ModelSpec::mlp(4, &[5], 3, 1)).unwrap();
        let opt = OptimizerConfig::adamw(1e-2);
        let theta = model.init_params();
        let state = OptimState::new(model.param_count());
        let cands: Vec<usize> = (0..12).collect();
        for k in [1, 2, 5] {
            let config = cfg(12, 4, k, Scorer::AdamW);
            let ctx = Lookahead {
                model: &model,
                data,
                optimizer: &opt,
                config: &config,
            };
            let digest = state_digest(&theta, &state);
            let (_, sim, prod) = score_candidates(&ctx, &theta, &state, &cands).unwrap();
            assert_eq!(state_digest(&theta, &state), digest);
            assert_eq!((sim, prod), (k as u64, 12 * k as u64));
        }
    }

    #[test]
    fn top_b_breaks_ties_by_id() {
        let ids = [9, 4, 7, 2];
        let scores = [1.0, 1.0, f64::NAN, 0.5];
        assert_eq!(top_by_score(&ids, &scores, 1), vec![1]);
        assert_eq!(top_by_score(&ids, &scores, 3), vec![0, 1, 3]);
    }

    #[test]
    fn offline_removal_and_full_keep() {
        assert_eq!(offline_removed(&[0.3, -1.0, 2.0, -1.0], 0.5).unwrap(), vec![1, 3]);
        assert!(offline_removed(&[1.0], 0.0).is_err());
        assert!(offline_removed(&[1.0], 1.5).is_err());
        let (train, val, test) = toy(4);
        let data = SelectionData {
            train: &train,
            val: &val,
            test: &test,
        };
        let spec = ModelSpec::mlp(4, &[5], 3, 1);
        let opt = OptimizerConfig::adamw(1e-2);
        let totals: Vec<f64> = (0..train.len()).map(|i| (i as f64).sin()).collect();
        let full = select_offline(data, &spec, &opt, &totals, 1.0, 16, 2, 5).unwrap();
        let base = train_with_eval(data, &spec, &opt, 16, 2, 5).unwrap();
        assert_eq!(full.theta_final, base.theta_final);
        assert_eq!(full.epochs, base.epochs);
    }

    #[test]
    fn k_sweep_rejects_zero_lr() {
        let (train, val, test) = toy(5);
        let data = SelectionData {
            train: &train,
            val: &val,
            test: &test,
        };
        let spec = ModelSpec::mlp(4, &[5], 3, 1);
        let opt = OptimizerConfig::adamw(1e-2);
        let err = k_sweep(
            data,
            &spec,
            &opt,
            &cfg(16, 8, 0, Scorer::AdamW),
            &[0, 1],
            &[1e-2, 0.0],
            &[0],
        );
        assert!(err.is_err());
    }

    #[test]
    fn k_sweep_with_inactive_selection_is_flat() {
        let (train, val, test) = toy(6);
        let data = SelectionData {
            train: &train,
            val: &val,
            test: &test,
        };
        let spec = ModelSpec::mlp(4, &[5], 3, 1);
        let opt = OptimizerConfig::adamw(1e-2);
        let table = k_sweep(
            data,
            &spec,
            &opt,
            &cfg(16, 16, 0, Scorer::AdamW),
            &[0, 2, 5],
            &[1e-2, 1e-3],
            &[0, 1],
        )
        .unwrap();
        for li in [1e-2, 1e-3] {
            let errs: Vec<&Vec<f64>> = table.cells.iter().filter(|c| c.lr == li).map(|c| &c.errors).collect();
            assert!(errs.windows(2).all(|w| w[0] == w[1]));
        }
        assert!(table.monotone_per_seed().iter().all(|&m| m));
    }
}

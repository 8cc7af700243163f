//! Fidelity statistics, error decomposition, learning-rate factor sweeps
//! and the closed-form error proxy.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::backward::{AttributionRecord, AttributionSet};
use crate::attribution::curvature::Curvature;
use crate::attribution::factors::AdamWDynamics;
use crate::attribution::forward::{propagate_sample, Propagation};
use crate::attribution::score::ScoreTable;
use crate::error::{Error, Result};
use crate::math;
use crate::oracle::TslooRecord;
use crate::trajectory::StepSource;

/// Width of decomposition bins, in steps.
pub const BIN_WIDTH: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub estimator: String,
    /// Spearman ρ over samples, one entry per validation point with a
    /// defined correlation.
    pub per_val: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub num_samples: usize,
    /// Validation points whose correlation was undefined.
    pub skipped_val: usize,
}

/// Spearman ρ between estimator scores and TSLOO loss deltas over samples,
/// per validation point, then mean ± std over validation points.
pub fn fidelity(estimator: &str, scores: &ScoreTable, tsloo: &[TslooRecord]) -> Result<FidelityReport> {
    if tsloo.is_empty() {
        return Err(Error::invalid("no TSLOO records"));
    }
    let index: HashMap<(usize, usize), usize> = scores.keys.iter().enumerate().map(|(i, &k)| (k, i)).collect();
    let missing: Vec<String> = tsloo
        .iter()
        .filter(|r| !index.contains_key(&(r.t_star, r.sample)))
        .map(|r| format!("(sample {}, step {})", r.sample, r.t_star))
        .collect();
    if !missing.is_empty() {
        return Err(Error::invalid(format!(
            "estimator scores missing for {}",
            missing.join(", ")
        )));
    }
    let n_val = tsloo[0].loss_deltas.len();
    if tsloo.iter().any(|r| r.loss_deltas.len() != n_val) || scores.num_val() != n_val {
        return Err(Error::invalid("validation point counts differ"));
    }
    let rows: Vec<usize> = tsloo.iter().map(|r| index[&(r.t_star, r.sample)]).collect();
    let mut per_val = Vec::with_capacity(n_val);
    let mut skipped = 0;
    for v in 0..n_val {
        let est: Vec<f64> = rows.iter().map(|&i| scores.scores.get(i, v)).collect();
        let truth: Vec<f64> = tsloo.iter().map(|r| r.loss_deltas[v]).collect();
        match math::spearman_rho(&est, &truth) {
            Ok(rho) => per_val.push(rho),
            Err(Error::UndefinedCorrelation(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if per_val.is_empty() {
        return Err(Error::UndefinedCorrelation(
            "no validation point has a defined correlation".into(),
        ));
    }
    let (mean, std) = math::mean_std(&per_val);
    Ok(FidelityReport {
        estimator: estimator.to_string(),
        per_val,
        mean,
        std,
        num_samples: tsloo.len(),
        skipped_val: skipped,
    })
}

/// Error components of one sample against an aggregated validation loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionSample {
    pub sample: usize,
    pub t_star: usize,
    pub abs_err_sgd: f64,
    /// `|Err_SGD| − |Err_AdamW|`: optimizer mismatch.
    pub green: f64,
    /// `|v · (Δθ − Δθ̂_AdamW)|`: update-estimation error.
    pub blue: f64,
    /// Residual, `|Err_SGD| − green − blue`.
    pub grey: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionBin {
    pub start: usize,
    pub end: usize,
    pub count: usize,
    pub abs_err_sgd: f64,
    pub green: f64,
    pub blue: f64,
    pub grey: f64,
}

impl DecompositionBin {
    /// Component with the largest absolute mean: "green", "blue" or "grey".
    pub fn largest(&self) -> &'static str {
        let (g, b, r) = (self.green.abs(), self.blue.abs(), self.grey.abs());
        if b >= g && b >= r {
            "blue"
        } else if g >= r {
            "green"
        } else {
            "grey"
        }
    }

    /// `|green| / (|green| + |blue| + |grey|)`.
    pub fn green_share(&self) -> f64 {
        let total = self.green.abs() + self.blue.abs() + self.grey.abs();
        if total == 0.0 {
            0.0
        } else {
            self.green.abs() / total
        }
    }
}

fn lookup<'a>(set: &'a AttributionSet, r: &TslooRecord) -> Result<&'a AttributionRecord> {
    set.find(r.sample, r.t_star).ok_or_else(|| {
        Error::invalid(format!(
            "{} attribution missing for (sample {}, step {})",
            set.estimator.name(),
            r.sample,
            r.t_star
        ))
    })
}

/// Per-sample decomposition. `val_grad` is the aggregate validation gradient
/// at `θ_T` (restricted like the attributions); the matching TSLOO target is
/// the mean of each record's loss deltas.
pub fn decompose_samples(
    tsloo: &[TslooRecord],
    theta_final: &[f64],
    sgd: &AttributionSet,
    adamw: &AttributionSet,
    val_grad: &[f64],
) -> Result<Vec<DecompositionSample>> {
    tsloo
        .iter()
        .map(|r| {
            let (s, a) = (lookup(sgd, r)?, lookup(adamw, r)?);
            if r.theta_prime.len() != theta_final.len() || a.delta.len() != theta_final.len() {
                return Err(Error::invalid("decomposition needs full-dimensional Δθ and Δθ̂"));
            }
            let truth = r.loss_deltas.iter().sum::<f64>() / r.loss_deltas.len() as f64;
            let err_sgd = (s.score(val_grad) - truth).abs();
            let err_adam = (a.score(val_grad) - truth).abs();
            let dtheta = r.delta_theta(theta_final);
            let blue = math::dot(val_grad, &math::sub(&dtheta, &a.delta)).abs();
            let green = err_sgd - err_adam;
            Ok(DecompositionSample {
                sample: r.sample,
                t_star: r.t_star,
                abs_err_sgd: err_sgd,
                green,
                blue,
                grey: err_sgd - green - blue,
            })
        })
        .collect()
}

/// Means of the per-sample components in bins of `BIN_WIDTH` steps.
pub fn bin_decomposition(samples: &[DecompositionSample]) -> Vec<DecompositionBin> {
    let mut bins: BTreeMap<usize, Vec<&DecompositionSample>> = BTreeMap::new();
    for s in samples {
        bins.entry(s.t_star / BIN_WIDTH).or_default().push(s);
    }
    bins.into_iter()
        .map(|(k, xs)| {
            let n = xs.len() as f64;
            let mean = |f: fn(&DecompositionSample) -> f64| xs.iter().map(|s| f(s)).sum::<f64>() / n;
            DecompositionBin {
                start: k * BIN_WIDTH,
                end: (k + 1) * BIN_WIDTH,
                count: xs.len(),
                abs_err_sgd: mean(|s| s.abs_err_sgd),
                green: mean(|s| s.green),
                blue: mean(|s| s.blue),
                grey: mean(|s| s.grey),
            }
        })
        .collect()
}

pub fn error_decomposition(
    tsloo: &[TslooRecord],
    theta_final: &[f64],
    sgd: &AttributionSet,
    adamw: &AttributionSet,
    val_grad: &[f64],
) -> Result<Vec<DecompositionBin>> {
    Ok(bin_decomposition(&decompose_samples(
        tsloo,
        theta_final,
        sgd,
        adamw,
        val_grad,
    )?))
}

/// One learning rate's oracle and estimator outputs.
pub struct SweepInput<'a> {
    pub lr: f64,
    pub tsloo: &'a [TslooRecord],
    pub theta_final: &'a [f64],
    pub adamw: &'a AttributionSet,
    pub val_grad: &'a [f64],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub t: usize,
    pub count: usize,
    pub error_norm: f64,
    /// Spearman over this step's samples; `None` when fewer than two usable
    /// samples or undefined.
    pub intra_rho: Option<f64>,
    /// Rolling mean (window 5) over the defined `intra_rho` values.
    pub intra_rho_smoothed: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub lr: f64,
    pub points: Vec<SweepPoint>,
    pub notices: Vec<String>,
}

impl SweepCurve {
    pub fn mean_error_norm(&self) -> f64 {
        self.points.iter().map(|p| p.error_norm).sum::<f64>() / self.points.len().max(1) as f64
    }

    fn rhos(&self) -> Vec<(usize, f64)> {
        self.points
            .iter()
            .filter_map(|p| p.intra_rho.map(|r| (p.t, r)))
            .collect()
    }

    /// Mean intra-step ρ over the first and last fifth of the step range.
    pub fn quintile_means(&self, num_steps: usize) -> (f64, f64) {
        let q = (num_steps / 5).max(1);
        let rhos = self.rhos();
        let mean = |f: &dyn Fn(usize) -> bool| {
            let xs: Vec<f64> = rhos.iter().filter(|(t, _)| f(*t)).map(|&(_, r)| r).collect();
            math::mean_std(&xs).0
        };
        (mean(&|t| t < q), mean(&|t| t >= num_steps - q))
    }

    /// Minimum intra-step ρ over the last `k` steps.
    pub fn min_rho_last(&self, num_steps: usize, k: usize) -> Option<f64> {
        self.rhos()
            .into_iter()
            .filter(|&(t, _)| t + k >= num_steps)
            .map(|(_, r)| r)
            .reduce(f64::min)
    }
}

/// Per-step error norms `‖Δθ − Δθ̂‖₂` and intra-step rank agreement.
pub fn factor_sweep(inputs: &[SweepInput<'_>]) -> Result<Vec<SweepCurve>> {
    if inputs.len() < 2 {
        return Err(Error::invalid("factor sweep needs at least two learning rates"));
    }
    inputs.iter().map(sweep_one).collect()
}

fn sweep_one(input: &SweepInput<'_>) -> Result<SweepCurve> {
    let mut by_step: BTreeMap<usize, Vec<(f64, f64, f64)>> = BTreeMap::new();
    let mut notices = Vec::new();
    for r in input.tsloo {
        let a = lookup(input.adamw, r)?;
        let dtheta = r.delta_theta(input.theta_final);
        let err = math::norm2(&math::sub(&dtheta, &a.delta));
        let truth = r.loss_deltas.iter().sum::<f64>() / r.loss_deltas.len() as f64;
        by_step
            .entry(r.t_star)
            .or_default()
            .push((err, a.score(input.val_grad), truth));
    }
    let mut points: Vec<SweepPoint> = by_step
        .into_iter()
        .map(|(t, xs)| {
            let error_norm = xs.iter().map(|x| x.0).sum::<f64>() / xs.len() as f64;
            // Zero-gradient samples carry no rank information.
            let usable: Vec<&(f64, f64, f64)> = xs.iter().filter(|x| !(x.1 == 0.0 && x.2 == 0.0)).collect();
            let intra_rho = if usable.len() < 2 {
                notices.push(format!(
                    "step {t}: fewer than two usable samples, intra-step rho skipped"
                ));
                None
            } else {
                let est: Vec<f64> = usable.iter().map(|x| x.1).collect();
                let truth: Vec<f64> = usable.iter().map(|x| x.2).collect();
                math::spearman_rho(&est, &truth).ok()
            };
            SweepPoint {
                t,
                count: xs.len(),
                error_norm,
                intra_rho,
                intra_rho_smoothed: None,
            }
        })
        .collect();
    let defined: Vec<usize> = (0..points.len()).filter(|&i| points[i].intra_rho.is_some()).collect();
    let rhos: Vec<f64> = defined.iter().map(|&i| points[i].intra_rho.expect("defined")).collect();
    if !rhos.is_empty() {
        let window = 5.min(rhos.len());
        let smooth = math::rolling_mean(&rhos, window)?;
        for (k, &i) in defined.iter().enumerate().skip(window - 1) {
            points[i].intra_rho_smoothed = Some(smooth[k + 1 - window]);
        }
    }
    Ok(SweepCurve {
        lr: input.lr,
        points,
        notices,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyAggregation {
    /// `‖Σ_t r_t‖₂`.
    #[default]
    Total,
    /// `Σ_t ‖r_t‖₂`.
    PerStep,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyRecord {
    pub sample: usize,
    pub t_star: usize,
    pub proxy: f64,
    pub error_norm: f64,
}

/// Accumulated per-step residual magnitudes
/// `r_i = Σ_t η_t (‖θ̇_t‖² / √v̂_{t,i} + [H_t θ̇_t]_i² / v̂_{t,i})`
/// over `t = t* + 1 … T − 1`.
pub fn error_proxy<S: StepSource + ?Sized>(
    prop: &Propagation,
    src: &S,
    dynamics: &AdamWDynamics,
    aggregation: ProxyAggregation,
) -> Result<f64> {
    let t_end = src.num_steps();
    if prop.states.len() != t_end - prop.t_star || prop.curvature_products.len() + 1 != prop.states.len() {
        return Err(Error::invalid(format!(
            "propagation from step {} does not cover the trajectory end",
            prop.t_star
        )));
    }
    let n = prop.states[0].dim();
    let floor2 = dynamics.eps_floor * dynamics.eps_floor;
    let mut total = vec![0.0; n];
    let mut per_step_sum = 0.0;
    for (k, t) in (prop.t_star + 1..t_end).enumerate() {
        let step = src.step(t)?;
        let theta_dot = &prop.states[k].theta;
        let h = &prop.curvature_products[k];
        let (_, c2) = dynamics.bias_corrections(t);
        let sq_norm = math::dot(theta_dot, theta_dot);
        let r_t: Vec<f64> = step
            .v
            .iter()
            .zip(h)
            .map(|(&v, &hi)| {
                let v_hat = (v / c2).max(floor2);
                step.lr * (sq_norm / v_hat.sqrt() + hi * hi / v_hat)
            })
            .collect();
        match aggregation {
            ProxyAggregation::Total => math::axpy(1.0, &r_t, &mut total),
            ProxyAggregation::PerStep => per_step_sum += math::norm2(&r_t),
        }
    }
    Ok(match aggregation {
        ProxyAggregation::Total => math::norm2(&total),
        ProxyAggregation::PerStep => per_step_sum,
    })
}

/// Proxy and ground-truth error for every TSLOO record, in parallel.
pub fn proxy_records<S: StepSource + ?Sized>(
    src: &S,
    tsloo: &[TslooRecord],
    theta_final: &[f64],
    adamw: &AttributionSet,
    dynamics: &AdamWDynamics,
    curvature: &dyn Curvature,
    aggregation: ProxyAggregation,
) -> Result<Vec<ProxyRecord>> {
    tsloo
        .par_iter()
        .map(|r| {
            let a = lookup(adamw, r)?;
            let prop = propagate_sample(src, r.sample, r.t_star, dynamics, curvature)?;
            let proxy = error_proxy(&prop, src, dynamics, aggregation)?;
            let error_norm = math::norm2(&math::sub(&r.delta_theta(theta_final), &a.delta));
            Ok(ProxyRecord {
                sample: r.sample,
                t_star: r.t_star,
                proxy,
                error_norm,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyFit {
    /// Slope of `log(error)` against `log(proxy)`.
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub rho: f64,
    pub used: usize,
    pub dropped: usize,
}

/// Least-squares line through `(log proxy, log error)` plus Spearman ρ.
/// Non-positive entries are dropped and counted.
pub fn proxy_fit(records: &[ProxyRecord]) -> Result<ProxyFit> {
    let usable: Vec<&ProxyRecord> = records.iter().filter(|r| r.proxy > 0.0 && r.error_norm > 0.0).collect();
    let dropped = records.len() - usable.len();
    if usable.len() < 3 {
        return Err(Error::invalid(format!(
            "{} usable points, need at least 3",
            usable.len()
        )));
    }
    let x: Vec<f64> = usable.iter().map(|r| r.proxy.ln()).collect();
    let y: Vec<f64> = usable.iter().map(|r| r.error_norm.ln()).collect();
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("proxy values are all equal"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    let rho = math::spearman_rho(
        &usable.iter().map(|r| r.proxy).collect::<Vec<_>>(),
        &usable.iter().map(|r| r.error_norm).collect::<Vec<_>>(),
    )?;
    Ok(ProxyFit {
        slope,
        intercept,
        r2,
        rho,
        used: usable.len(),
        dropped,
    })
}

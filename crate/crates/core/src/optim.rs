//! SGD and AdamW steppers with exposed state, and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant {
        lr: f64,
    },
    /// Linear ramp over `warmup_steps` to `base_lr`, then linear decay towards
    /// zero at `total_steps`.
    WarmupLinear {
        base_lr: f64,
        warmup_steps: usize,
        total_steps: usize,
    },
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule::Constant { lr }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LrSchedule::Constant { lr } if !(lr > 0.0 && lr.is_finite()) => {
                Err(Error::invalid(format!("learning rate must be positive, got {lr}")))
            }
            LrSchedule::WarmupLinear {
                base_lr,
                warmup_steps,
                total_steps,
            } => {
                if !(base_lr > 0.0 && base_lr.is_finite()) {
                    Err(Error::invalid(format!("learning rate must be positive, got {base_lr}")))
                } else if warmup_steps > total_steps {
                    Err(Error::invalid("warmup longer than the schedule"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    pub fn lr(&self, t: usize) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::WarmupLinear {
                base_lr,
                warmup_steps,
                total_steps,
            } => {
                if t < warmup_steps {
                    base_lr * (t + 1) as f64 / warmup_steps as f64
                } else {
                    let remaining = total_steps.saturating_sub(t).max(1);
                    base_lr * remaining as f64 / (total_steps - warmup_steps).max(1) as f64
                }
            }
        }
    }

    pub fn base_lr(&self) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::WarmupLinear { base_lr, .. } => base_lr,
        }
    }

    /// Same shape with a different peak rate.
    pub fn with_base_lr(&self, lr: f64) -> Self {
        match *self {
            LrSchedule::Constant { .. } => LrSchedule::Constant { lr },
            LrSchedule::WarmupLinear {
                warmup_steps,
                total_steps,
                ..
            } => LrSchedule::WarmupLinear {
                base_lr: lr,
                warmup_steps,
                total_steps,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Denominator forced to 1 and bias correction disabled; with
    /// `beta1 = 0` and no weight decay the step is exactly an SGD step.
    #[serde(default)]
    pub plain_sgd: bool,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.95
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
            plain_sgd: false,
        }
    }
}

impl AdamWConfig {
    pub fn plain_sgd() -> Self {
        AdamWConfig {
            beta1: 0.0,
            beta2: 0.0,
            eps: default_eps(),
            weight_decay: 0.0,
            plain_sgd: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("eps must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight decay must be nonnegative"));
        }
        Ok(())
    }

    /// `(1 − β1^{t+1}, 1 − β2^{t+1})`, or `(1, 1)` in plain-sgd mode.
    pub fn bias_corrections(&self, t: usize) -> (f64, f64) {
        if self.plain_sgd {
            return (1.0, 1.0);
        }
        let e = (t + 1) as i32;
        (1.0 - self.beta1.powi(e), 1.0 - self.beta2.powi(e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[serde(rename = "adamw")]
    AdamW,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    #[serde(default)]
    pub adamw: AdamWConfig,
    pub schedule: LrSchedule,
}

impl OptimizerConfig {
    pub fn adamw(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::AdamW,
            adamw: AdamWConfig::default(),
            schedule: LrSchedule::constant(lr),
        }
    }

    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            adamw: AdamWConfig::default(),
            schedule: LrSchedule::constant(lr),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adamw.validate()?;
        self.schedule.validate()
    }

    /// One training step at index `state.t`. SGD runs still advance the
    /// moment estimates (shadow moments) so AdamW-side quantities exist for
    /// every recorded trajectory.
    pub fn step(&self, theta: &mut [f64], g: &[f64], state: &mut OptimState) -> Result<()> {
        let lr = self.schedule.lr(state.t);
        match self.kind {
            OptimizerKind::AdamW => adamw_step(theta, g, state, &self.adamw, lr),
            OptimizerKind::Sgd => {
                sgd_step(theta, g, lr, state.t)?;
                update_moments(state, g, &self.adamw);
                state.t += 1;
                Ok(())
            }
        }
    }
}

/// Raw AdamW moments and the index of the next step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: usize,
}

impl OptimState {
    pub fn new(p: usize) -> Self {
        OptimState {
            m: vec![0.0; p],
            v: vec![0.0; p],
            t: 0,
        }
    }
}

fn update_moments(state: &mut OptimState, g: &[f64], cfg: &AdamWConfig) {
    for ((m, v), &gi) in state.m.iter_mut().zip(state.v.iter_mut()).zip(g) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
    }
}

pub fn adamw_step(theta: &mut [f64], g: &[f64], state: &mut OptimState, cfg: &AdamWConfig, lr: f64) -> Result<()> {
    if theta.len() != g.len() || state.m.len() != g.len() || state.v.len() != g.len() {
        return Err(Error::invalid("optimizer dimension mismatch"));
    }
    let t = state.t;
    let mut next = state.clone();
    update_moments(&mut next, g, cfg);
    let (c1, c2) = cfg.bias_corrections(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    let new_theta: Vec<f64> = theta
        .iter()
        .zip(next.m.iter().zip(&next.v))
        .map(|(&th, (&m, &v))| {
            let step = if cfg.plain_sgd {
                m
            } else {
                (m / c1) / ((v / c2).sqrt() + cfg.eps)
            };
            decay * th - lr * step
        })
        .collect();
    if !new_theta.iter().all(|x| x.is_finite()) || !next.v.iter().all(|x| x.is_finite()) {
        return Err(Error::numeric(Some(t), "non-finite AdamW update"));
    }
    theta.copy_from_slice(&new_theta);
    next.t = t + 1;
    *state = next;
    Ok(())
}

pub fn sgd_step(theta: &mut [f64], g: &[f64], lr: f64, step: usize) -> Result<()> {
    if theta.len() != g.len() {
        return Err(Error::invalid("optimizer dimension mismatch"));
    }
    if theta.iter().zip(g).any(|(t, gi)| !(t - lr * gi).is_finite()) {
        return Err(Error::numeric(Some(step), "non-finite SGD update"));
    }
    for (t, gi) in theta.iter_mut().zip(g) {
        *t -= lr * gi;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut theta = vec![1.0, -2.0, 3.0];
        let mut st = OptimState::new(3);
        adamw_step(&mut theta, &[0.0; 3], &mut st, &AdamWConfig::default(), 0.1).unwrap();
        assert_eq!(theta, vec![1.0, -2.0, 3.0]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn pure_decoupled_decay() {
        let mut theta = vec![1.0, -2.0, 3.0];
        let mut st = OptimState::new(3);
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        adamw_step(&mut theta, &[0.0; 3], &mut st, &cfg, 0.1).unwrap();
        for (a, b) in theta.iter().zip([0.99, -1.98, 2.97]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn first_step_is_sign_step() {
        let g = [0.3, -2.0, 1e-3, -5e-2];
        let mut theta = vec![0.0; 4];
        let mut st = OptimState::new(4);
        let cfg = AdamWConfig::default();
        let eta = 0.01;
        adamw_step(&mut theta, &g, &mut st, &cfg, eta).unwrap();
        for (th, gi) in theta.iter().zip(g) {
            let update = -th;
            assert!((update - eta * gi.signum()).abs() <= eta * cfg.eps / gi.abs());
        }
    }

    #[test]
    fn bias_correction_exponent_is_t_plus_one() {
        let cfg = AdamWConfig::default();
        assert_eq!(cfg.bias_corrections(0), (1.0 - 0.9, 1.0 - 0.95));
        let (c1, c2) = cfg.bias_corrections(2);
        assert!((c1 - (1.0 - 0.9f64.powi(3))).abs() < 1e-16);
        assert!((c2 - (1.0 - 0.95f64.powi(3))).abs() < 1e-16);
    }

    #[test]
    fn sgd_examples() {
        let mut theta = vec![1.0, 2.0];
        sgd_step(&mut theta, &[0.0, 0.0], 0.3, 0).unwrap();
        assert_eq!(theta, vec![1.0, 2.0]);
        let mut theta = vec![1.0];
        sgd_step(&mut theta, &[2.0], 0.5, 0).unwrap();
        assert_eq!(theta, vec![0.0]);
        assert!(matches!(
            sgd_step(&mut theta, &[f64::INFINITY], 0.5, 7),
            Err(Error::Numeric { step: Some(7), .. })
        ));
    }

    #[test]
    fn sgd_on_half_square_decays_geometrically() {
        let mut theta = vec![1.0];
        for t in 0..10 {
            let g = theta.clone();
            sgd_step(&mut theta, &g, 0.1, t).unwrap();
        }
        assert!((theta[0] - 0.9f64.powi(10)).abs() < 1e-15);
    }

    #[test]
    fn nonfinite_adamw_update_names_step() {
        let mut theta = vec![1.0];
        let mut st = OptimState::new(1);
        st.t = 4;
        let err = adamw_step(&mut theta, &[f64::NAN], &mut st, &AdamWConfig::default(), 0.1).unwrap_err();
        assert!(matches!(err, Error::Numeric { step: Some(4), .. }));
        assert_eq!(theta, vec![1.0]);
        assert_eq!(st.t, 4);
    }

    #[test]
    fn warmup_schedule_is_positive() {
        let s = LrSchedule::WarmupLinear {
            base_lr: 1e-3,
            warmup_steps: 5,
            total_steps: 20,
        };
        s.validate().unwrap();
        assert!((0..20).all(|t| s.lr(t) > 0.0));
        assert!((s.lr(4) - 1e-3).abs() < 1e-18);
        assert!(s.lr(19) < s.lr(6));
        assert!(LrSchedule::constant(0.0).validate().is_err());
    }

    proptest! {
        #[test]
        fn plain_sgd_mode_is_bitwise_sgd(
            theta in prop::collection::vec(-10.0f64..10.0, 1..8),
            seed in any::<u64>(),
            lr in 1e-4f64..1.0,
        ) {
            let g: Vec<f64> = theta.iter().enumerate()
                .map(|(i, x)| (x * 1.7 + (seed.wrapping_add(i as u64) % 97) as f64 * 0.01).sin())
                .collect();
            let mut a = theta.clone();
            let mut st = OptimState::new(theta.len());
            adamw_step(&mut a, &g, &mut st, &AdamWConfig::plain_sgd(), lr).unwrap();
            let mut b = theta.clone();
            sgd_step(&mut b, &g, lr, 0).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn second_moment_stays_nonnegative(gs in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 1..20)) {
            let mut theta = vec![0.0; 3];
            let mut st = OptimState::new(3);
            for g in &gs {
                adamw_step(&mut theta, g, &mut st, &AdamWConfig::default(), 1e-3).unwrap();
                prop_assert!(st.v.iter().all(|&v| v >= 0.0));
            }
            prop_assert_eq!(st.t, gs.len());
        }
    }
}

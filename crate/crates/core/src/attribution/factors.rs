//! Linearized AdamW step: diagonal factors, push states and the one-step
//! transition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::AdamWConfig;

/// Default floor for `√v̂` inside the `1/(2√v̂)` factor of `S_t`.
pub const DEFAULT_EPS_FLOOR: f64 = 1e-12;

/// Hyperparameters the recurrences linearize around.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWDynamics {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// `D = 1`, `S = 0`, no bias correction.
    pub plain_sgd: bool,
    pub eps_floor: f64,
}

impl AdamWDynamics {
    pub fn from_config(cfg: &AdamWConfig) -> Self {
        AdamWDynamics {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            plain_sgd: cfg.plain_sgd,
            eps_floor: DEFAULT_EPS_FLOOR,
        }
    }

    /// The AdamW dynamics that coincide with plain SGD.
    pub fn plain_sgd() -> Self {
        AdamWDynamics::from_config(&AdamWConfig::plain_sgd())
    }

    pub fn bias_corrections(&self, t: usize) -> (f64, f64) {
        if self.plain_sgd {
            return (1.0, 1.0);
        }
        let e = (t + 1) as i32;
        (1.0 - self.beta1.powi(e), 1.0 - self.beta2.powi(e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagFactors {
    /// `1/(√v̂ + ε)`.
    pub d: Vec<f64>,
    /// `m̂ / (2√v̂ (√v̂ + ε)²)`, with `√v̂` floored in the first factor.
    pub s: Vec<f64>,
    pub c1: f64,
    pub c2: f64,
}

pub fn diag_factors(m: &[f64], v: &[f64], t: usize, dynamics: &AdamWDynamics) -> Result<DiagFactors> {
    if m.len() != v.len() {
        return Err(Error::invalid("moment vectors differ in length"));
    }
    let (c1, c2) = dynamics.bias_corrections(t);
    if dynamics.plain_sgd {
        return Ok(DiagFactors {
            d: vec![1.0; m.len()],
            s: vec![0.0; m.len()],
            c1,
            c2,
        });
    }
    let mut d = Vec::with_capacity(m.len());
    let mut s = Vec::with_capacity(m.len());
    for (&mi, &vi) in m.iter().zip(v) {
        if vi < 0.0 {
            return Err(Error::numeric(Some(t), "negative second moment"));
        }
        let sq = (vi / c2).sqrt();
        let denom = sq + dynamics.eps;
        d.push(1.0 / denom);
        s.push((mi / c1) / (2.0 * sq.max(dynamics.eps_floor) * denom * denom));
    }
    Ok(DiagFactors { d, s, c1, c2 })
}

/// A perturbation of the augmented state `(θ, m, v)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PushState {
    pub theta: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl PushState {
    pub fn zeros(n: usize) -> Self {
        PushState {
            theta: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().chain(&self.m).chain(&self.v).all(|x| x.is_finite())
    }

    pub fn scaled(&self, alpha: f64) -> PushState {
        let f = |x: &Vec<f64>| x.iter().map(|v| alpha * v).collect();
        PushState {
            theta: f(&self.theta),
            m: f(&self.m),
            v: f(&self.v),
        }
    }

    /// `[θ̇; ṁ; v̇]` as one vector.
    pub fn stacked(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(3 * self.dim());
        out.extend_from_slice(&self.theta);
        out.extend_from_slice(&self.m);
        out.extend_from_slice(&self.v);
        out
    }
}

/// State perturbation right after step `t*` when the batch gradient is
/// changed by `−ε·ĝ`, per unit `ε`. `g_hat` is the per-sample gradient
/// already divided by the batch size.
pub fn push_state(
    g_hat: &[f64],
    g_t: &[f64],
    factors: &DiagFactors,
    lr: f64,
    dynamics: &AdamWDynamics,
) -> Result<PushState> {
    let n = g_hat.len();
    if g_t.len() != n || factors.d.len() != n {
        return Err(Error::invalid("push-state inputs differ in dimension"));
    }
    let (b1, b2) = (dynamics.beta1, dynamics.beta2);
    let m: Vec<f64> = g_hat.iter().map(|&x| -(1.0 - b1) * x).collect();
    let v: Vec<f64> = g_hat
        .iter()
        .zip(g_t)
        .map(|(&x, &g)| -2.0 * (1.0 - b2) * g * x)
        .collect();
    let theta = theta_dot(&m, &v, factors, lr);
    Ok(PushState { theta, m, v })
}

/// `−η (D ṁ / c1 − S v̇ / c2)`.
fn theta_dot(m: &[f64], v: &[f64], f: &DiagFactors, lr: f64) -> Vec<f64> {
    m.iter()
        .zip(v)
        .zip(f.d.iter().zip(&f.s))
        .map(|((&mi, &vi), (&d, &s))| -lr * (d * mi / f.c1 - s * vi / f.c2))
        .collect()
}

/// One application of the linearized step `A_t` to `z`, given
/// `h = H_t θ̇`. Returns the state after step `t`.
pub fn transition(
    z: &PushState,
    h: &[f64],
    g_t: &[f64],
    factors: &DiagFactors,
    lr: f64,
    dynamics: &AdamWDynamics,
) -> PushState {
    let (b1, b2) = (dynamics.beta1, dynamics.beta2);
    let m: Vec<f64> = z.m.iter().zip(h).map(|(&mp, &hi)| b1 * mp + (1.0 - b1) * hi).collect();
    let v: Vec<f64> =
        z.v.iter()
            .zip(h.iter().zip(g_t))
            .map(|(&vp, (&hi, &g))| b2 * vp + 2.0 * (1.0 - b2) * g * hi)
            .collect();
    let decay = 1.0 - lr * dynamics.weight_decay;
    let step = theta_dot(&m, &v, factors, lr);
    let theta = z.theta.iter().zip(&step).map(|(&th, &s)| decay * th + s).collect();
    PushState { theta, m, v }
}

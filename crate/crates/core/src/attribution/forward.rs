//! Forward propagation of a single push state through recorded steps.

use crate::attribution::curvature::Curvature;
use crate::attribution::factors::{diag_factors, push_state, transition, AdamWDynamics, PushState};
use crate::error::{Error, Result};
use crate::trajectory::{StepRecord, StepSource};

/// Push state for removing `sample` from `step` (per unit ε).
pub fn injection(step: &StepRecord, sample: usize, dynamics: &AdamWDynamics) -> Result<PushState> {
    let r = step
        .position(sample)
        .ok_or_else(|| Error::invalid(format!("sample {sample} is not in the batch of step {}", step.t)))?;
    let b = step.batch_size() as f64;
    let g_hat: Vec<f64> = step.per_sample_grads.row(r).iter().map(|x| x / b).collect();
    let f = diag_factors(&step.m, &step.v, step.t, dynamics)?;
    push_state(&g_hat, &step.g, &f, step.lr, dynamics)
}

/// Apply step `step`'s linearized update to `z`. Returns the new state and
/// the curvature product `H_t θ̇` that was used.
pub fn propagate_step(
    z: &PushState,
    step: &StepRecord,
    dynamics: &AdamWDynamics,
    curvature: &dyn Curvature,
) -> Result<(PushState, Vec<f64>)> {
    let h = curvature.apply(step, &z.theta)?;
    let f = diag_factors(&step.m, &step.v, step.t, dynamics)?;
    let next = transition(z, &h, &step.g, &f, step.lr, dynamics);
    if !next.is_finite() {
        return Err(Error::numeric(Some(step.t), "non-finite propagated state"));
    }
    Ok((next, h))
}

/// States after steps `t_star, t_star + 1, …, t_end − 1`.
#[derive(Clone, Debug)]
pub struct Propagation {
    pub t_star: usize,
    pub states: Vec<PushState>,
    /// `H_t θ̇_t` for `t = t_star + 1 … t_end − 1`, where `θ̇_t` is the state
    /// entering step `t`.
    pub curvature_products: Vec<Vec<f64>>,
}

impl Propagation {
    pub fn final_state(&self) -> &PushState {
        self.states.last().expect("at least the injected state")
    }

    /// `θ̇_t` entering step `t`, for `t ∈ [t_star + 1, t_end]`.
    pub fn theta_dot_at(&self, t: usize) -> Option<&[f64]> {
        t.checked_sub(self.t_star + 1)
            .and_then(|k| self.states.get(k))
            .map(|z| z.theta.as_slice())
    }
}

/// Propagate `z0`, the state right after step `t_star`, through steps
/// `t_star + 1 .. t_end`.
pub fn forward_propagate<S: StepSource + ?Sized>(
    z0: PushState,
    src: &S,
    t_star: usize,
    t_end: usize,
    dynamics: &AdamWDynamics,
    curvature: &dyn Curvature,
) -> Result<Propagation> {
    if t_end > src.num_steps() || t_star >= t_end {
        return Err(Error::invalid(format!(
            "propagation range {t_star}..{t_end} outside the trajectory of {} steps",
            src.num_steps()
        )));
    }
    let mut states = vec![z0];
    let mut products = Vec::with_capacity(t_end - t_star - 1);
    for t in t_star + 1..t_end {
        let step = src.step(t)?;
        let (next, h) = propagate_step(states.last().expect("nonempty"), &step, dynamics, curvature)?;
        states.push(next);
        products.push(h);
    }
    Ok(Propagation {
        t_star,
        states,
        curvature_products: products,
    })
}

/// Inject `sample` at `t_star` and propagate to the end of the trajectory.
pub fn propagate_sample<S: StepSource + ?Sized>(
    src: &S,
    sample: usize,
    t_star: usize,
    dynamics: &AdamWDynamics,
    curvature: &dyn Curvature,
) -> Result<Propagation> {
    let step = src.step(t_star)?;
    let z0 = injection(&step, sample, dynamics)?;
    forward_propagate(z0, src, t_star, src.num_steps(), dynamics, curvature)
}

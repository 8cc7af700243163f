//! Influence estimators for SGD and AdamW trajectories.

pub mod backward;
pub mod curvature;
pub mod ensemble;
pub mod factors;
pub mod forward;
pub mod mask;
pub mod score;

pub use backward::{
    backward_adamw, backward_sgd, AttributionRecord, AttributionSet, BackwardStats, Estimator, Targets,
};
pub use curvature::{Curvature, ExactHessian, Ggn};
pub use ensemble::{ensemble_attribute, MaskedSource};
pub use factors::{diag_factors, push_state, AdamWDynamics, DiagFactors, PushState};
pub use forward::{forward_propagate, injection, propagate_sample, propagate_step, Propagation};
pub use mask::{build_mask, Mask, MaskSpec};
pub use score::{score_matrix, validation_gradients, ScoreTable};

//! Grouped activation modulation, Gaussian weight perturbation, and the
//! sigma-targeting penalty.

mod grasp;
mod penalty;
mod stoch;

pub use grasp::{grasp_forward, linear, GraspLayer, GraspMode, GraspVars, GAMMA_GUARD};
pub use penalty::{noise_aware_penalty, NoiseAwareLossConfig, PenaltyTerm, TargetScale};
pub use stoch::{stoch_forward, Noise, StochLayer, StochVars, SIGMA_FLOOR, SIGMA_INIT};

/// Deterministic comparator: per-row trainable means, `sigma ≡ 0`.
pub fn make_deterministic_baseline(
    d_in: usize,
    d_out: usize,
    groups: usize,
    seed: u64,
) -> crate::Result<StochLayer> {
    StochLayer::deterministic_baseline("baseline", d_in, d_out, groups, seed)
}

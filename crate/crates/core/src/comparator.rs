//! Classical extended-matching adaptive controller for the wing-rock
//! plant: gradient parameter update driven by `∂V/∂x2`, a smooth
//! projection keeping the input-gain estimate above its floor, and the
//! swapping correction term in the input. The experimental baseline for
//! the event-triggered scheme.

use crate::control::{
    wingrock_dphi_dtheta, wingrock_dv_dx2, wingrock_feedback,
};
use crate::plant::{wingrock_regressor, ParamVec, StateVec};
use crate::Error;

/// Tunables of the extended-matching design.
#[derive(Clone, Copy, Debug)]
pub struct ComparatorConfig {
    /// Adaptation gain.
    pub gamma: f64,
    /// Projection margin; the estimate satisfies `θ̂5 ≥ κ − ε` for all t.
    pub eps_proj: f64,
    pub kappa: f64,
    pub l_gain: f64,
    pub mu: f64,
}

impl ComparatorConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.gamma >= 0.0) {
            return Err(Error::Validation("gamma must be >= 0".into()));
        }
        if !(self.eps_proj > 0.0 && self.eps_proj < self.kappa) {
            return Err(Error::Validation(
                "eps_proj must lie in (0, kappa)".into(),
            ));
        }
        Ok(())
    }
}

/// Continuous adaptation law and input: `dθ̂_i/dt = γ·(∂V/∂x2)·ζ_i` for
/// the drift parameters, the projected variant for the input gain, and
/// `u = k(θ̂, x) + μ⁻¹γ·(∂V/∂x2)·(∂φ/∂θ̂)·ζ`.
pub fn comparator_rhs(
    theta_em: &ParamVec,
    x: &StateVec,
    cfg: &ComparatorConfig,
) -> Result<(ParamVec, f64), Error> {
    // integrator stages may probe marginally below the floor, where the
    // projection factor is exactly zero; only a genuine breach is an error
    if theta_em[4] < cfg.kappa - 1.1 * cfg.eps_proj {
        return Err(Error::Domain(format!(
            "projection invariant breached: theta_5 = {} < {}",
            theta_em[4],
            cfg.kappa - cfg.eps_proj
        )));
    }
    let zeta = wingrock_regressor(x);
    let dv2 = wingrock_dv_dx2(theta_em, x, cfg.l_gain);
    let mut dtheta = &zeta * (cfg.gamma * dv2);
    // projection on the fifth component
    let unguarded = theta_em[4] >= cfg.kappa || dv2 * zeta[4] >= 0.0;
    if !unguarded {
        let factor = 1.0 - (1.0_f64).min((cfg.kappa - theta_em[4]) / cfg.eps_proj);
        dtheta[4] *= factor.max(0.0);
    }
    let swap = wingrock_dphi_dtheta(theta_em, x[0], x[1], cfg.l_gain).dot(&zeta);
    let u = wingrock_feedback(theta_em, x, cfg.l_gain, cfg.mu)?
        + cfg.gamma * dv2 * swap / cfg.mu;
    Ok((dtheta, u))
}

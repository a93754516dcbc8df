//! Hybrid closed-loop simulation: integrates the certainty-equivalence
//! loop between events and localizes the regulation trigger
//! `V(θ̂(τ_i), x(t)) = V(θ̂(τ_i), x(τ_i)) + a(x(τ_i))` to produce the
//! event sequence.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::control::FeedbackLaw;
use crate::integrator::{integrate_dense, DenseStep, IntegratorConfig, StepOutcome};
use crate::plant::{measure, NoiseSpec, ParamVec, PlantModel, StateVec};
use crate::Error;

/// Why a segment ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    /// The inter-event horizon `T` elapsed without a trigger crossing.
    TimeoutT,
    /// The Lyapunov rise condition fired before the horizon.
    LyapunovTrigger,
}

impl std::fmt::Display for EventKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EventKind::TimeoutT => write!(f, "timeout"),
            EventKind::LyapunovTrigger => write!(f, "trigger"),
        }
    }
}

/// Threshold function `a(x) = a2·|x|² + a4·|x|⁴`; positive definite when
/// `a2 > 0`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TriggerSpec {
    pub a2: f64,
    pub a4: f64,
}

impl TriggerSpec {
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.a2 > 0.0) || !(self.a4 >= 0.0) {
            return Err(Error::Validation(format!(
                "trigger needs a2 > 0 and a4 >= 0, got a2 = {}, a4 = {}",
                self.a2, self.a4
            )));
        }
        Ok(())
    }

    pub fn threshold(&self, x: &StateVec) -> f64 {
        let n2 = x.norm_squared();
        self.a2 * n2 + self.a4 * n2 * n2
    }
}

/// One inter-event interval: the coupled dense solution on `[t0, t1]`
/// under a frozen estimate.
#[derive(Clone, Debug)]
pub struct Segment {
    pub t0: f64,
    pub t1: f64,
    pub theta_hat: ParamVec,
    pub n_state: usize,
    pub(crate) state0: DVector<f64>,
    pub(crate) steps: Vec<DenseStep>,
}

impl Segment {
    /// Full coupled state (plant + co-integrated auxiliaries) at `t`.
    pub fn eval_full(&self, t: f64) -> DVector<f64> {
        debug_assert!(t >= self.t0 - 1e-12 && t <= self.t1 + 1e-12);
        if self.steps.is_empty() {
            return self.state0.clone();
        }
        let t = t.clamp(self.t0, self.t1);
        let idx = self
            .steps
            .partition_point(|s| s.t1() < t)
            .min(self.steps.len() - 1);
        self.steps[idx].eval(t)
    }

    /// Plant state at `t`.
    pub fn eval_x(&self, t: f64) -> StateVec {
        let full = self.eval_full(t);
        full.rows(0, self.n_state).into_owned()
    }

    pub fn steps(&self) -> &[DenseStep] {
        &self.steps
    }
}

/// Dense piecewise record of a run: segments, event times, event kinds.
///
/// Event times are strictly increasing with `τ_0 = 0` implied; the state
/// is continuous across events (only the estimate switches).
#[derive(Clone, Debug, Default)]
pub struct HybridTrajectory {
    pub segments: Vec<Segment>,
    pub event_times: Vec<f64>,
    pub event_kinds: Vec<EventKind>,
}

impl HybridTrajectory {
    pub fn t_end(&self) -> f64 {
        self.segments.last().map_or(0.0, |s| s.t1)
    }

    fn segment_at(&self, t: f64) -> &Segment {
        let idx = self
            .segments
            .partition_point(|s| s.t1 < t)
            .min(self.segments.len() - 1);
        &self.segments[idx]
    }

    pub fn eval_x(&self, t: f64) -> StateVec {
        self.segment_at(t).eval_x(t)
    }

    pub fn eval_full(&self, t: f64) -> DVector<f64> {
        self.segment_at(t).eval_full(t)
    }

    /// Estimate in force at time `t` (constant within each segment).
    pub fn theta_hat_at(&self, t: f64) -> &ParamVec {
        &self.segment_at(t).theta_hat
    }
}

/// Co-integrated auxiliary ODE block (identifier state, or nothing).
pub trait AuxOde {
    fn dim(&self) -> usize;
    /// Writes d(aux)/dt given time, the measured plant state, the applied
    /// input, and the current auxiliary values.
    fn rhs(&self, t: f64, x_meas: &StateVec, u: &DVector<f64>, aux: &[f64], out: &mut [f64]);
}

/// Empty auxiliary block.
pub struct NoAux;

impl AuxOde for NoAux {
    fn dim(&self) -> usize {
        0
    }
    fn rhs(&self, _t: f64, _x: &StateVec, _u: &DVector<f64>, _aux: &[f64], _out: &mut [f64]) {}
}

/// Outcome of one segment integration.
pub struct SegmentOutcome {
    pub segment: Segment,
    pub t_next: f64,
    pub kind: EventKind,
    /// Coupled state at `t_next`.
    pub end_state: DVector<f64>,
    /// `V(θ̂, x̂(t*)) − V(θ̂, x̂(τ_i)) − a(x̂(τ_i))` at a trigger event.
    pub trigger_residual: Option<f64>,
}

/// Scans one accepted step for the first upward crossing of `h` and
/// bisects it to within `event_tol`. `h(t)` must be continuous;
/// crossings that graze zero between samples can be missed, which is why
/// eight interior samples per step are checked in addition to the
/// endpoints.
fn scan_step_for_crossing(
    step: &DenseStep,
    t_hi: f64,
    h_fn: &impl Fn(f64, &DVector<f64>) -> f64,
    event_tol: f64,
) -> Option<f64> {
    const SAMPLES: usize = 9; // endpoints plus 8 interior points
    let t_stop = step.t1().min(t_hi);
    if t_stop <= step.t0 {
        return None;
    }
    let mut prev_t = step.t0;
    let mut prev_h = h_fn(prev_t, &step.eval(prev_t));
    if prev_h > 0.0 {
        // crossing at the very start of the step (caught from the
        // previous step's endpoint sampling)
        return Some(step.t0);
    }
    for k in 1..=SAMPLES {
        let t = step.t0 + (t_stop - step.t0) * k as f64 / SAMPLES as f64;
        let h = h_fn(t, &step.eval(t));
        if h > 0.0 {
            // bisect [prev_t, t]
            let (mut lo, mut hi) = (prev_t, t);
            let mut h_lo = prev_h;
            while hi - lo > event_tol {
                let mid = 0.5 * (lo + hi);
                let hm = h_fn(mid, &step.eval(mid));
                if hm > 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                    h_lo = hm;
                }
            }
            let _ = h_lo;
            return Some(hi);
        }
        prev_t = t;
        prev_h = h;
    }
    None
}

/// Post-hoc trigger search over recorded dense steps: returns the first
/// time where `V(θ̂, x̂(t)) − v0 − a0` crosses zero from below, refined to
/// `event_tol`, or `None` if the trigger function stays negative.
#[allow(clippy::too_many_arguments)]
pub fn detect_trigger(
    steps: &[DenseStep],
    n_state: usize,
    law: &FeedbackLaw,
    theta_hat: &ParamVec,
    v0: f64,
    a0: f64,
    noise: &NoiseSpec,
    event_tol: f64,
    t_hi: f64,
) -> Option<f64> {
    let h_fn = |t: f64, y: &DVector<f64>| {
        let x = y.rows(0, n_state).into_owned();
        let xm = measure(&x, t, noise);
        law.v(theta_hat, &xm) - v0 - a0
    };
    for step in steps {
        if step.t0 >= t_hi {
            break;
        }
        if let Some(t) = scan_step_for_crossing(step, t_hi, &h_fn, event_tol) {
            return Some(t);
        }
    }
    None
}

/// Integrates the closed loop `dx/dt = f(x, k(θ̂, x̂)) + g(x, k(θ̂, x̂))·θ`
/// on `[tau_i, t_stop]` with the estimate frozen, co-integrating the
/// auxiliary block, and stopping early at the regulation trigger.
///
/// `t_stop` is `min(τ_i + T, t_final)`; the caller decides whether a
/// timeout end constitutes an event. With `trigger = None` (or when
/// `x̂(τ_i) = 0`) the segment always runs to `t_stop`.
#[allow(clippy::too_many_arguments)]
pub fn integrate_segment(
    plant: &PlantModel,
    law: &FeedbackLaw,
    theta_hat: &ParamVec,
    state0: &DVector<f64>,
    aux: &dyn AuxOde,
    tau_i: f64,
    t_stop: f64,
    trigger: Option<&TriggerSpec>,
    noise: &NoiseSpec,
    cfg: &IntegratorConfig,
) -> Result<SegmentOutcome, Error> {
    let n = plant.n;
    debug_assert_eq!(state0.len(), n + aux.dim());
    if !state0.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteState { t: tau_i });
    }

    let x0 = state0.rows(0, n).into_owned();
    let x0_meas = measure(&x0, tau_i, noise);
    // r_i := tau_i + T when the segment starts at the origin
    let trigger_armed = trigger.is_some() && x0_meas.norm() > 0.0;
    let v0 = law.v(theta_hat, &x0_meas);
    let a0 = trigger.map_or(0.0, |tr| tr.threshold(&x0_meas));

    let mut aux_out = vec![0.0; aux.dim()];
    let rhs = |t: f64, y: &DVector<f64>, dy: &mut DVector<f64>| {
        let x = y.rows(0, n).into_owned();
        let xm = measure(&x, t, noise);
        let u = law.k(theta_hat, &xm);
        let xdot = plant.xdot(&x, &u, plant.ground_truth());
        dy.rows_mut(0, n).copy_from(&xdot);
        if !aux_out.is_empty() {
            aux.rhs(t, &xm, &u, y.as_slice().split_at(n).1, &mut aux_out);
            dy.rows_mut(n, aux_out.len())
                .copy_from_slice(&aux_out);
        }
    };

    let h_fn = |t: f64, y: &DVector<f64>| {
        let x = y.rows(0, n).into_owned();
        let xm = measure(&x, t, noise);
        law.v(theta_hat, &xm) - v0 - a0
    };

    let event_tol = cfg.event_tol;
    let inspect = |step: &DenseStep| {
        if !trigger_armed {
            return StepOutcome::Continue;
        }
        match scan_step_for_crossing(step, t_stop, &h_fn, event_tol) {
            Some(t_cross) => StepOutcome::Halt(t_cross),
            None => StepOutcome::Continue,
        }
    };

    let out = integrate_dense(rhs, tau_i, state0, t_stop, cfg, inspect)?;
    let fired = out.t_end < t_stop;
    let kind = if fired {
        EventKind::LyapunovTrigger
    } else {
        EventKind::TimeoutT
    };
    let trigger_residual = if fired {
        Some(h_fn(out.t_end, &out.y_end))
    } else {
        None
    };
    Ok(SegmentOutcome {
        segment: Segment {
            t0: tau_i,
            t1: out.t_end,
            theta_hat: theta_hat.clone(),
            n_state: n,
            state0: state0.clone(),
            steps: out.steps,
        },
        t_next: out.t_end,
        kind,
        end_state: out.y_end,
        trigger_residual,
    })
}

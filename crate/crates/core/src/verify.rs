//! Post-hoc verification of the closed-loop guarantees on a completed
//! run: switch bound, event schedule, per-segment Lyapunov decay,
//! post-settling residual, exponential envelope, null-space monotonicity,
//! update contraction, and the global estimate bound. Failures are
//! reported, never thrown.

use serde::Serialize;

use crate::run::{input_at, RunOutput};
use crate::scenario::{ControllerKind, RunSetup};
use crate::Error;

/// Largest admissible envelope constant; a decaying run stays orders of
/// magnitude below, a limit cycle blows past it on a long horizon.
pub const ENVELOPE_C_MAX: f64 = 1e6;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub measured: f64,
    pub threshold: f64,
    pub note: String,
}

impl CheckResult {
    fn leq(name: &str, measured: f64, threshold: f64, note: String) -> Self {
        CheckResult {
            name: name.to_string(),
            pass: measured <= threshold,
            measured,
            threshold,
            note,
        }
    }
}

fn sample_times(t0: f64, t1: f64, per_unit: usize) -> Vec<f64> {
    let count = ((t1 - t0) * per_unit as f64).ceil().max(32.0) as usize;
    (0..=count)
        .map(|k| t0 + (t1 - t0) * k as f64 / count as f64)
        .collect()
}

/// Runs every check enabled for the scenario's controller and noise
/// setting.
pub fn verify_guarantees(setup: &RunSetup, out: &RunOutput) -> Vec<CheckResult> {
    let mut checks = Vec::new();
    let noiseless = setup.noise.is_zero();
    match setup.controller {
        ControllerKind::BalsiExact | ControllerKind::NominalKnownTheta => {
            checks.push(check_gaps(setup, out));
            checks.push(check_zeno(setup, out));
            if noiseless {
                checks.push(check_switch_count(setup, out));
                checks.push(check_segment_decay(setup, out));
                checks.push(check_settled_residual(setup, out));
                checks.push(check_envelope(setup, out));
                checks.push(check_nullspace_monotone(out));
                checks.push(check_contraction(setup, out));
                checks.push(check_global_bound(setup, out));
            }
        }
        // the switch-count and contraction guarantees are proved for the
        // exact update only; the regularized run keeps the schedule and
        // boundedness checks
        ControllerKind::BalsiRegularized => {
            checks.push(check_gaps(setup, out));
            checks.push(check_zeno(setup, out));
            if noiseless {
                checks.push(check_envelope(setup, out));
                checks.push(check_global_bound(setup, out));
            }
        }
        ControllerKind::ExtendedMatching | ControllerKind::OpenLoop => {
            checks.push(check_envelope(setup, out));
        }
    }
    checks
}

/// (a) number of estimate switches is at most the parameter count.
fn check_switch_count(setup: &RunSetup, out: &RunOutput) -> CheckResult {
    let l = setup.plant.l as f64;
    CheckResult::leq(
        "switch_count",
        out.switch_count() as f64,
        l,
        format!("{} events total", out.events.len()),
    )
}

/// (b) consecutive events are at most `T` apart.
fn check_gaps(setup: &RunSetup, out: &RunOutput) -> CheckResult {
    let t = setup.t_horizon;
    let mut prev = 0.0;
    let mut worst: f64 = 0.0;
    for ev in &out.events {
        worst = worst.max(ev.t - prev - t);
        prev = ev.t;
    }
    CheckResult::leq(
        "inter_event_gap",
        worst,
        1e-9 * t.max(1.0),
        "max excess of tau_{i+1} - tau_i over T".into(),
    )
}

/// (b') Zeno exclusion: `τ_i ≥ (i − l)·T`, one `event_tol` per event.
fn check_zeno(setup: &RunSetup, out: &RunOutput) -> CheckResult {
    let l = setup.plant.l;
    let t = setup.t_horizon;
    let mut worst: f64 = 0.0;
    for (k, ev) in out.events.iter().enumerate() {
        let i = k + 1;
        let bound = (i as f64 - l as f64) * t;
        let slack = i as f64 * setup.integrator.event_tol;
        worst = worst.max(bound - ev.t - slack);
    }
    CheckResult::leq(
        "zeno_bound",
        worst,
        0.0,
        "max violation of tau_i >= (i-l) T".into(),
    )
}

/// (c) on segments whose terminal update left the estimate unchanged the
/// CLF decays at the nominal rate.
fn check_segment_decay(setup: &RunSetup, out: &RunOutput) -> CheckResult {
    let sigma = setup.law.sigma;
    let mut worst: f64 = 0.0;
    let mut n_checked = 0;
    for (idx, seg) in out.traj.segments.iter().enumerate() {
        let Some(ev) = out.events.get(idx) else {
            break;
        };
        if ev.switched {
            continue;
        }
        let v0 = setup.law.v(&seg.theta_hat, &seg.eval_x(seg.t0));
        if v0 < 1e-18 {
            continue;
        }
        n_checked += 1;
        for t in sample_times(seg.t0, seg.t1, 400) {
            let v = setup.law.v(&seg.theta_hat, &seg.eval_x(t));
            worst = worst.max(v * (2.0 * sigma * (t - seg.t0)).exp() / v0);
        }
    }
    CheckResult::leq(
        "segment_decay",
        worst,
        1.0 + 1e-6,
        format!("max V·e^{{2σΔt}}/V0 over {n_checked} unswitched segments"),
    )
}

/// (d) after the last switch, `g(x(t), u(t))·(θ − θ_s)` vanishes.
fn check_settled_residual(setup: &RunSetup, out: &RunOutput) -> CheckResult {
    let tau = out.settling_time();
    let theta_s = out.theta_final();
    let xi = setup.plant.ground_truth() - &theta_s;
    let mut worst: f64 = 0.0;
    for t in sample_times(tau, out.traj.t_end(), 1000) {
        let x = out.traj.eval_x(t);
        let u = nalgebra::DVector::from_vec(vec![input_at(setup, out, t)]);
        worst = worst.max((setup.plant.g(&x, &u) * &xi).norm());
    }
    CheckResult::leq(
        "settled_g_residual",
        worst,
        1e-6,
        format!("max |g(x,u)(θ−θ_s)| on [{tau:.3}, t_final]"),
    )
}

/// (e) after the last switch the state obeys an exponential envelope
/// `|x(t)| ≤ c·e^{−σ(t−τ)}|x(τ)|` with a bounded fitted constant.
fn check_envelope(setup: &RunSetup, out: &RunOutput) -> CheckResult {
    let tau = out.settling_time();
    let sigma = setup.law.sigma;
    let x_tau = out.traj.eval_x(tau).norm();
    if x_tau < 1e-12 {
        return CheckResult::leq(
            "exponential_envelope",
            0.0,
            ENVELOPE_C_MAX,
            "state already at the origin at settling".into(),
        );
    }
    let mut c: f64 = 0.0;
    for t in sample_times(tau, out.traj.t_end(), 1000) {
        let ratio = out.traj.eval_x(t).norm() / ((-sigma * (t - tau)).exp() * x_tau);
        c = c.max(ratio);
    }
    CheckResult::leq(
        "exponential_envelope",
        c,
        ENVELOPE_C_MAX,
        format!("fitted one-sided constant from τ = {tau:.3}"),
    )
}

/// (f) null spaces of the accumulated Gram matrix only shrink, and
/// shrink strictly at every switch.
fn check_nullspace_monotone(out: &RunOutput) -> CheckResult {
    let mut violations = 0usize;
    let mut prev: Option<usize> = out.ident_shape.map(|(l, _)| l);
    for ev in &out.events {
        let Some(dim) = ev.nullspace_dim else {
            continue;
        };
        if let Some(p) = prev {
            if dim > p || (ev.switched && dim >= p) {
                violations += 1;
            }
        }
        // a re-initialization starts a fresh Gram matrix with a full
        // null space; the inclusion chain restarts there
        prev = if ev.reinitialized {
            out.ident_shape.map(|(l, _)| l)
        } else {
            Some(dim)
        };
    }
    CheckResult::leq(
        "nullspace_monotone",
        violations as f64,
        0.0,
        "events violating monotone/strict null-space decrease".into(),
    )
}

/// (g) every update moves the estimate by at most the distance from the
/// previous estimate to the true parameters, up to the solver tolerance
/// and the measured drift of the numerical constraint set.
fn check_contraction(setup: &RunSetup, out: &RunOutput) -> CheckResult {
    let theta = setup.plant.ground_truth();
    let mut worst: f64 = 0.0;
    for ev in &out.events {
        let before = nalgebra::DVector::from_vec(ev.theta_before.clone());
        let after = nalgebra::DVector::from_vec(ev.theta_after.clone());
        let step = (&after - &before).norm();
        let allowed = (theta - &before).norm()
            + setup.update.qp_tol
            + ev.truth_projection_gap.unwrap_or(0.0);
        worst = worst.max(step - allowed);
    }
    CheckResult::leq(
        "update_contraction",
        worst,
        0.0,
        "max of |Δθ̂| − |θ − θ̂| − gap over events".into(),
    )
}

/// (h) the estimate never strays beyond `2^l` times the initial error.
fn check_global_bound(setup: &RunSetup, out: &RunOutput) -> CheckResult {
    let theta = setup.plant.ground_truth();
    let init = (theta - &setup.theta_hat0).norm();
    let cap = 2f64.powi(setup.plant.l as i32) * init;
    let mut worst = 0.0;
    for ev in &out.events {
        let after = nalgebra::DVector::from_vec(ev.theta_after.clone());
        worst = f64::max(worst, (theta - &after).norm());
    }
    CheckResult::leq(
        "estimate_global_bound",
        worst,
        cap + 1e-6 * (1.0 + cap),
        format!("max |θ̂ − θ| vs 2^l·|θ̂0 − θ| = {cap:.3e}"),
    )
}

/// The run report: event table, output paths, and check results.
#[derive(Serialize)]
pub struct RunReport {
    pub controller: String,
    pub t_final: f64,
    pub n_events: usize,
    pub n_switches: usize,
    pub settling_time: f64,
    pub theta_final: Vec<f64>,
    pub estimate_error_final: f64,
    pub trajectory_csv: String,
    pub events_csv: String,
    pub events: Vec<crate::run::EventRecord>,
    pub checks: Vec<CheckResult>,
}

pub fn build_report(
    setup: &RunSetup,
    out: &RunOutput,
    checks: Vec<CheckResult>,
    trajectory_csv: String,
    events_csv: String,
) -> RunReport {
    let theta_final = out.theta_final();
    let err = (setup.plant.ground_truth() - &theta_final).norm();
    RunReport {
        controller: setup.controller.tag().to_string(),
        t_final: setup.t_final,
        n_events: out.events.len(),
        n_switches: out.switch_count(),
        settling_time: out.settling_time(),
        theta_final: theta_final.iter().cloned().collect(),
        estimate_error_final: err,
        trajectory_csv,
        events_csv,
        events: out.events.clone(),
        checks,
    }
}

impl RunReport {
    pub fn to_json(&self) -> Result<String, Error> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Validation(format!("report serialization: {e}")))
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

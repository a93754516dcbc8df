//! Orchestration of complete runs: the event-triggered adaptive loop with
//! the co-integrated identifier, the nominal known-parameter loop, the
//! open-loop reference, and the extended-matching comparator.

use nalgebra::DVector;
use serde::Serialize;

use crate::comparator::comparator_rhs;
use crate::identifier::{nullspace_dim, IdentifierOde, IdentifierState};
use crate::integrator::integrate_dense;
use crate::plant::{measure, ParamVec, StateVec};
use crate::qp::update_estimate;
use crate::scenario::{ControllerKind, RunSetup};
use crate::sim::{
    integrate_segment, EventKind, HybridTrajectory, NoAux, Segment, SegmentOutcome,
};
use crate::{Error, Result};

/// Everything recorded about one event.
#[derive(Clone, Debug, Serialize)]
pub struct EventRecord {
    pub index: usize,
    pub t: f64,
    pub kind: EventKind,
    pub theta_before: Vec<f64>,
    pub theta_after: Vec<f64>,
    /// Whether the update moved the estimate beyond the switch threshold.
    pub switched: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nullspace_dim: Option<usize>,
    /// Spectral norm of the accumulated Q.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q_norm: Option<f64>,
    /// `|Y − Q·θ_true|` against the simulation ground truth.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y_residual_true: Option<f64>,
    /// Distance of the true parameters from the numerical constraint set
    /// (exact mode; the honest slack for the contraction bound).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth_projection_gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trigger_residual: Option<f64>,
    /// Whether the identifier was re-initialized right after this event.
    pub reinitialized: bool,
}

/// A completed run: dense trajectory, event log, and layout metadata.
pub struct RunOutput {
    pub traj: HybridTrajectory,
    pub events: Vec<EventRecord>,
    /// Identifier block width in the coupled state (0 when absent).
    pub aux_dim: usize,
    /// Identifier shape `(l, j)` when the run carried one.
    pub ident_shape: Option<(usize, usize)>,
    /// Identifier time origin in force at the end of the run.
    pub ident_t_origin: f64,
}

impl RunOutput {
    /// Time of the last event at which the estimate changed, or 0.
    pub fn settling_time(&self) -> f64 {
        self.events
            .iter()
            .filter(|e| e.switched)
            .map(|e| e.t)
            .fold(0.0, f64::max)
    }

    /// Estimate in force after the final event.
    pub fn theta_final(&self) -> ParamVec {
        self.traj
            .segments
            .last()
            .map(|s| s.theta_hat.clone())
            .unwrap_or_default()
    }

    pub fn switch_count(&self) -> usize {
        self.events.iter().filter(|e| e.switched).count()
    }
}

const fn time_eps(t_final: f64) -> f64 {
    1e-9 * if t_final > 1.0 { t_final } else { 1.0 }
}

/// The applied input at time `t` of a completed run.
pub fn input_at(setup: &RunSetup, out: &RunOutput, t: f64) -> f64 {
    let x = out.traj.eval_x(t);
    let xm = measure(&x, t, &setup.noise);
    match setup.controller {
        ControllerKind::OpenLoop => 0.0,
        ControllerKind::ExtendedMatching => {
            let full = out.traj.eval_full(t);
            let theta_em = full.rows(setup.plant.n, setup.plant.l).into_owned();
            comparator_rhs(&theta_em, &xm, &setup.comparator)
                .map(|(_, u)| u)
                .unwrap_or(f64::NAN)
        }
        _ => setup.law.k(out.traj.theta_hat_at(t), &xm)[0],
    }
}

/// Estimate reported at time `t` (piecewise constant for the triggered
/// schemes, continuous for the comparator).
pub fn theta_at(setup: &RunSetup, out: &RunOutput, t: f64) -> ParamVec {
    match setup.controller {
        ControllerKind::ExtendedMatching => {
            let full = out.traj.eval_full(t);
            full.rows(setup.plant.n, setup.plant.l).into_owned()
        }
        _ => out.traj.theta_hat_at(t).clone(),
    }
}

/// Runs the scenario with the controller selected in it.
pub fn run_scenario(setup: &RunSetup) -> Result<RunOutput> {
    match setup.controller {
        ControllerKind::BalsiExact | ControllerKind::BalsiRegularized => run_balsi(setup),
        ControllerKind::NominalKnownTheta => run_triggered_loop(setup, false),
        ControllerKind::ExtendedMatching => run_comparator(setup),
        ControllerKind::OpenLoop => run_open_loop(setup),
    }
}

/// The full adaptive loop: integrate between events, update at events.
pub fn run_balsi(setup: &RunSetup) -> Result<RunOutput> {
    run_triggered_loop(setup, true)
}

fn run_triggered_loop(setup: &RunSetup, with_identifier: bool) -> Result<RunOutput> {
    let plant = &setup.plant;
    let n = plant.n;
    let l = plant.l;
    let j = plant.c.nrows();
    let eps = time_eps(setup.t_final);

    let mut ident_ode = IdentifierOde::new(plant);
    let aux_dim = if with_identifier {
        IdentifierState::dim(l, j)
    } else {
        0
    };

    let mut theta_hat = match setup.controller {
        ControllerKind::NominalKnownTheta => plant.ground_truth().clone(),
        _ => setup.theta_hat0.clone(),
    };
    let mut state = DVector::zeros(n + aux_dim);
    state.rows_mut(0, n).copy_from(&setup.x0);

    let mut traj = HybridTrajectory::default();
    let mut events = Vec::new();
    let mut t = 0.0;
    while t < setup.t_final - eps {
        let t_event = t + setup.t_horizon;
        let t_stop = t_event.min(setup.t_final);
        let aux: &dyn crate::sim::AuxOde = if with_identifier { &ident_ode } else { &NoAux };
        let seg = integrate_segment(
            plant,
            &setup.law,
            &theta_hat,
            &state,
            aux,
            t,
            t_stop,
            Some(&setup.trigger),
            &setup.noise,
            &setup.integrator,
        )
        .map_err(|e| Error::AtEvent {
            index: events.len(),
            source: Box::new(e),
        })?;
        let SegmentOutcome {
            segment,
            t_next,
            kind,
            end_state,
            trigger_residual,
        } = seg;
        state = end_state;

        let is_event = kind == EventKind::LyapunovTrigger || t_next < setup.t_final - eps;
        if !is_event {
            traj.segments.push(segment);
            break;
        }

        let index = events.len();
        let theta_before = theta_hat.clone();
        let mut record = EventRecord {
            index,
            t: t_next,
            kind,
            theta_before: theta_before.iter().cloned().collect(),
            theta_after: Vec::new(),
            switched: false,
            nullspace_dim: None,
            q_norm: None,
            y_residual_true: None,
            truth_projection_gap: None,
            trigger_residual,
            reinitialized: false,
        };

        if with_identifier {
            let ident = IdentifierState::from_slice(
                l,
                j,
                &state.as_slice()[n..],
                ident_ode.t_origin,
            );
            let q = ident.q_matrix();
            let lam_max = q
                .symmetric_eigenvalues()
                .iter()
                .cloned()
                .fold(0.0_f64, f64::max);
            record.q_norm = Some(lam_max);
            record.nullspace_dim = Some(nullspace_dim(&q, setup.update.rank_tol));
            record.y_residual_true =
                Some((&ident.y - &q * plant.ground_truth()).norm());
            if setup.update.mode == crate::qp::UpdateMode::Exact {
                if let Ok(proj) = crate::qp::exact_projection(
                    plant.ground_truth(),
                    &ident.y,
                    &q,
                    &plant.theta_set,
                    &setup.update,
                ) {
                    record.truth_projection_gap =
                        Some((proj - plant.ground_truth()).norm());
                }
            }

            let updated =
                update_estimate(&theta_hat, &ident.y, &q, &plant.theta_set, &setup.update)
                    .map_err(|e| Error::AtEvent {
                        index,
                        source: Box::new(e),
                    })?;
            record.switched =
                (&updated - &theta_hat).norm() > setup.update.switch_threshold();
            theta_hat = updated;

            if let Some(period) = setup.reinit_period {
                if t_next - ident_ode.t_origin >= period {
                    state.rows_mut(n, aux_dim).fill(0.0);
                    ident_ode.t_origin = t_next;
                    record.reinitialized = true;
                }
            }
        }
        record.theta_after = theta_hat.iter().cloned().collect();

        traj.segments.push(segment);
        traj.event_times.push(t_next);
        traj.event_kinds.push(kind);
        events.push(record);
        t = t_next;
    }

    if traj.segments.is_empty() {
        traj.segments.push(Segment {
            t0: 0.0,
            t1: 0.0,
            theta_hat,
            n_state: n,
            state0: state,
            steps: Vec::new(),
        });
    }

    Ok(RunOutput {
        traj,
        events,
        aux_dim,
        ident_shape: with_identifier.then_some((l, j)),
        ident_t_origin: ident_ode.t_origin,
    })
}

/// Joint integration of the plant and the continuously adapting
/// extended-matching controller over the whole horizon (no events).
pub fn run_comparator(setup: &RunSetup) -> Result<RunOutput> {
    let plant = &setup.plant;
    let n = plant.n;
    let l = plant.l;
    let cfg = &setup.comparator;
    cfg.validate()?;

    let mut state = DVector::zeros(n + l);
    state.rows_mut(0, n).copy_from(&setup.x0);
    state.rows_mut(n, l).copy_from(&setup.theta_hat0);

    let rhs = |t: f64, y: &DVector<f64>, dy: &mut DVector<f64>| {
        let x = y.rows(0, n).into_owned();
        let xm = measure(&x, t, &setup.noise);
        let theta_em = y.rows(n, l).into_owned();
        match comparator_rhs(&theta_em, &xm, cfg) {
            Ok((dtheta, u)) => {
                let xdot = plant.xdot(&x, &DVector::from_vec(vec![u]), plant.ground_truth());
                dy.rows_mut(0, n).copy_from(&xdot);
                dy.rows_mut(n, l).copy_from(&dtheta);
            }
            Err(_) => dy.fill(f64::NAN),
        }
    };
    let out = integrate_dense(
        rhs,
        0.0,
        &state,
        setup.t_final,
        &setup.integrator,
        |_| crate::integrator::StepOutcome::Continue,
    )?;
    let segment = Segment {
        t0: 0.0,
        t1: out.t_end,
        theta_hat: setup.theta_hat0.clone(),
        n_state: n,
        state0: state,
        steps: out.steps,
    };
    Ok(RunOutput {
        traj: HybridTrajectory {
            segments: vec![segment],
            event_times: Vec::new(),
            event_kinds: Vec::new(),
        },
        events: Vec::new(),
        aux_dim: l,
        ident_shape: None,
        ident_t_origin: 0.0,
    })
}

/// Open-loop reference: `u ≡ 0`, no events.
pub fn run_open_loop(setup: &RunSetup) -> Result<RunOutput> {
    let plant = &setup.plant;
    let n = plant.n;
    let u0 = DVector::zeros(plant.m);
    let rhs = |_t: f64, y: &DVector<f64>, dy: &mut DVector<f64>| {
        let x = y.rows(0, n).into_owned();
        dy.copy_from(&plant.xdot(&x, &u0, plant.ground_truth()));
    };
    let out = integrate_dense(
        rhs,
        0.0,
        &setup.x0.clone(),
        setup.t_final,
        &setup.integrator,
        |_| crate::integrator::StepOutcome::Continue,
    )?;
    let segment = Segment {
        t0: 0.0,
        t1: out.t_end,
        theta_hat: setup.theta_hat0.clone(),
        n_state: n,
        state0: setup.x0.clone(),
        steps: out.steps,
    };
    Ok(RunOutput {
        traj: HybridTrajectory {
            segments: vec![segment],
            event_times: Vec::new(),
            event_kinds: Vec::new(),
        },
        events: Vec::new(),
        aux_dim: 0,
        ident_shape: None,
        ident_t_origin: 0.0,
    })
}

/// Samples the measured state and applied input of a completed run, the
/// view the identifier saw; feeds the quadrature oracle.
pub fn xu_sampler<'a>(
    setup: &'a RunSetup,
    out: &'a RunOutput,
) -> impl Fn(f64) -> (StateVec, DVector<f64>) + Copy + 'a {
    move |t: f64| {
        let x = out.traj.eval_x(t);
        let xm = measure(&x, t, &setup.noise);
        let u = DVector::from_vec(vec![input_at(setup, out, t)]);
        (xm, u)
    }
}

/// Identifier quantities `(Y, Q)` read off the co-integrated state at `t`.
pub fn identifier_at(out: &RunOutput, plant_n: usize, t: f64) -> Option<IdentifierState> {
    let (l, j) = out.ident_shape?;
    let full = out.traj.eval_full(t);
    Some(IdentifierState::from_slice(
        l,
        j,
        &full.as_slice()[plant_n..],
        out.ident_t_origin,
    ))
}

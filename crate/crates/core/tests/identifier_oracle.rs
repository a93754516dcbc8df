//! Cross-checks of the ODE-propagated identifier quantities against the
//! defining double integrals evaluated by quadrature on stored
//! trajectories, plus the re-initialization window property.

use balsi::identifier::{IdentifierOde, IdentifierState};
use balsi::integrator::IntegratorConfig;
use balsi::plant::{lti_chain, NoiseSpec, ParamVec};
use balsi::quadrature::quadrature_oracle;
use balsi::run::{identifier_at, run_scenario, xu_sampler};
use balsi::scenario::preset;
use balsi::sim::integrate_segment;
use balsi::control::lti_law;
use nalgebra::DVector;

fn tight() -> IntegratorConfig {
    IntegratorConfig {
        rel_tol: 1e-11,
        abs_tol: 1e-13,
        max_step: 0.02,
        event_tol: 1e-9,
        max_steps: 10_000_000,
    }
}

// Scalar chain under its nominal law: propagate the identifier ODEs along
// the closed loop and compare (Y, Q) with trapezoid quadrature of the
// defining integrals over the same dense trajectory.
#[test]
fn scalar_chain_ode_matches_quadrature() {
    let theta = ParamVec::from_vec(vec![-1.0, 2.0]);
    let plant = lti_chain(1, 1.0, theta.clone()).unwrap();
    let law = lti_law(1, 0.5, 1.0).unwrap();
    let ode = IdentifierOde::new(&plant);
    let mut state = DVector::zeros(1 + ode_dim(&plant));
    state[0] = 1.3;
    let tau = 1.5;
    let out = integrate_segment(
        &plant,
        &law,
        &theta,
        &state,
        &ode,
        0.0,
        tau,
        None,
        &NoiseSpec::none(1),
        &tight(),
    )
    .unwrap();
    let ident = IdentifierState::from_slice(2, 1, &out.end_state.as_slice()[1..], 0.0);

    let seg = out.segment;
    let xu = |t: f64| {
        let x = seg.eval_x(t);
        let u = law.k(&theta, &x);
        (x, u)
    };
    let (y_ref, q_ref) = quadrature_oracle(&plant, xu, 0.0, tau, 2048).unwrap();
    let y_err = (&ident.y - &y_ref).norm() / y_ref.norm();
    let q_err = (ident.q_matrix() - &q_ref).norm() / q_ref.norm();
    assert!(y_err < 1e-5, "Y mismatch: {y_err}");
    assert!(q_err < 1e-5, "Q mismatch: {q_err}");
}

fn ode_dim(plant: &balsi::PlantModel) -> usize {
    IdentifierState::dim(plant.l, plant.c.nrows())
}

// Re-initializing at t1 and accumulating to t2 must reproduce a fresh
// batch over [t1, t2]: the quadrature oracle with shifted origin.
#[test]
fn reinitialized_window_matches_shifted_oracle() {
    let setup = preset("wingrock_ic2").unwrap().resolve().unwrap();
    let plant = &setup.plant;
    let theta_hat = setup.theta_hat0.clone();
    let (t1, t2) = (0.3, 0.7);

    // run the plant alone over [0, t2], recording the trajectory
    let plain = integrate_segment(
        plant,
        &setup.law,
        &theta_hat,
        &DVector::from_vec(vec![0.4, 0.0, 0.0]),
        &balsi::sim::NoAux,
        0.0,
        t2,
        None,
        &setup.noise,
        &tight(),
    )
    .unwrap();
    let seg = plain.segment;
    let xu = |t: f64| {
        let x = seg.eval_x(t);
        let u = setup.law.k(&theta_hat, &x);
        (x, u)
    };

    // co-integrate a fresh identifier from x(t1) with origin t1
    let mut ode = IdentifierOde::new(plant);
    ode.t_origin = t1;
    let mut state = DVector::zeros(3 + ode_dim(plant));
    state.rows_mut(0, 3).copy_from(&seg.eval_x(t1));
    let out = integrate_segment(
        plant,
        &setup.law,
        &theta_hat,
        &state,
        &ode,
        t1,
        t2,
        None,
        &setup.noise,
        &tight(),
    )
    .unwrap();
    let ident = IdentifierState::from_slice(5, 1, &out.end_state.as_slice()[3..], t1);

    let (y_ref, q_ref) = quadrature_oracle(plant, xu, t1, t2, 2048).unwrap();
    let y_err = (&ident.y - &y_ref).norm() / y_ref.norm();
    let q_err = (ident.q_matrix() - &q_ref).norm() / q_ref.norm();
    assert!(y_err < 1e-4, "shifted-window Y mismatch: {y_err}");
    assert!(q_err < 1e-4, "shifted-window Q mismatch: {q_err}");
}

// Identifier invariants along a complete adaptive run: Q stays PSD, its
// eigenvalues never decrease between events, and the noiseless
// consistency bound holds at every event.
#[test]
fn event_time_invariants_on_benchmark_run() {
    let setup = preset("wingrock_ic1").unwrap().resolve().unwrap();
    let out = run_scenario(&setup).unwrap();
    assert!(!out.events.is_empty());
    let mut prev_eigs: Option<Vec<f64>> = None;
    for ev in &out.events {
        let ident = identifier_at(&out, 3, ev.t).unwrap();
        let q = ident.q_matrix();
        let mut eigs: Vec<f64> = q.symmetric_eigenvalues().iter().cloned().collect();
        eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lam_max = eigs[eigs.len() - 1];
        assert!(
            eigs[0] >= -1e-9 * lam_max.max(1.0),
            "Q not PSD at t = {}: {eigs:?}",
            ev.t
        );
        if let Some(prev) = &prev_eigs {
            for (now, before) in eigs.iter().zip(prev) {
                assert!(
                    now >= &(before - 1e-9 * lam_max.max(1.0)),
                    "eigenvalue shrank between events"
                );
            }
        }
        prev_eigs = Some(eigs);

        let resid = ev.y_residual_true.unwrap();
        let bound = 1e-6 * (1.0 + ev.q_norm.unwrap());
        assert!(resid <= bound, "consistency at t = {}: {resid} > {bound}", ev.t);
    }
}

// The ODE-propagated quantities of the real run match the oracle at the
// first event, and refining the grid improves the match.
#[test]
fn benchmark_first_event_oracle_convergence() {
    let setup = preset("wingrock_ic2").unwrap().resolve().unwrap();
    let out = run_scenario(&setup).unwrap();
    let tau = out.events[0].t;
    let ident = identifier_at(&out, 3, tau).unwrap();
    let sampler = xu_sampler(&setup, &out);
    let mut errs = Vec::new();
    for grid in [128usize, 256] {
        let (y_ref, q_ref) = quadrature_oracle(&setup.plant, sampler, 0.0, tau, grid).unwrap();
        let e = ((&ident.y - &y_ref).norm() + (ident.q_matrix() - &q_ref).norm())
            / (y_ref.norm() + q_ref.norm());
        errs.push(e);
    }
    assert!(errs[1] < 1e-4, "256-grid relative error {}", errs[1]);
    assert!(errs[0] / errs[1] > 2.0, "no convergence: {errs:?}");
}

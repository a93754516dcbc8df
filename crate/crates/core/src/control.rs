//! Nominal certainty-equivalence feedback laws and their control Lyapunov
//! functions: the wing-rock backstepping design and the inductive design
//! for the controllable LTI chain.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::plant::{wingrock_regressor, InputVec, ParamVec, PlantModel, StateVec};
use crate::Error;

type LawMap<T> = Arc<dyn Fn(&ParamVec, &StateVec) -> T + Send + Sync>;

/// A stabilizing state feedback `k(θ, x)` together with its CLF `V(θ, x)`,
/// the state gradient of `V`, and the certified decay rate `σ`:
/// along the nominal closed loop `V̇ ≤ −2σV`.
#[derive(Clone)]
pub struct FeedbackLaw {
    k: LawMap<InputVec>,
    v: LawMap<f64>,
    grad_v: LawMap<StateVec>,
    pub sigma: f64,
}

impl FeedbackLaw {
    pub fn new(k: LawMap<InputVec>, v: LawMap<f64>, grad_v: LawMap<StateVec>, sigma: f64) -> Self {
        Self { k, v, grad_v, sigma }
    }

    pub fn k(&self, theta: &ParamVec, x: &StateVec) -> InputVec {
        (self.k)(theta, x)
    }

    pub fn v(&self, theta: &ParamVec, x: &StateVec) -> f64 {
        (self.v)(theta, x)
    }

    pub fn grad_v(&self, theta: &ParamVec, x: &StateVec) -> StateVec {
        (self.grad_v)(theta, x)
    }
}

// ---------------------------------------------------------------------------
// Wing-rock backstepping design
// ---------------------------------------------------------------------------

/// `β(θ, x1, x2) = 1 + θ3²x1²/2 + θ4²x2²/2`.
pub fn wingrock_beta(theta: &ParamVec, x1: f64, x2: f64) -> f64 {
    1.0 + 0.5 * theta[2] * theta[2] * x1 * x1 + 0.5 * theta[3] * theta[3] * x2 * x2
}

/// Virtual control for the actuator state:
/// `φ = −θ5⁻¹[(1+θ1)x1 + θ2x2] − θ5⁻¹(L + β + L²β²/4)(x2 + Lx1)`.
pub fn wingrock_phi(theta: &ParamVec, x1: f64, x2: f64, l_gain: f64) -> f64 {
    let b = wingrock_beta(theta, x1, x2);
    let s = x2 + l_gain * x1;
    (-((1.0 + theta[0]) * x1 + theta[1] * x2)
        - (l_gain + b + 0.25 * l_gain * l_gain * b * b) * s)
        / theta[4]
}

/// Analytic `∂φ/∂x1`.
pub fn wingrock_dphi_dx1(theta: &ParamVec, x1: f64, x2: f64, l_gain: f64) -> f64 {
    let b = wingrock_beta(theta, x1, x2);
    let s = x2 + l_gain * x1;
    let db = theta[2] * theta[2] * x1;
    let gain = l_gain + b + 0.25 * l_gain * l_gain * b * b;
    (-(1.0 + theta[0]) - (1.0 + 0.5 * l_gain * l_gain * b) * db * s - gain * l_gain) / theta[4]
}

/// Analytic `∂φ/∂x2`.
pub fn wingrock_dphi_dx2(theta: &ParamVec, x1: f64, x2: f64, l_gain: f64) -> f64 {
    let b = wingrock_beta(theta, x1, x2);
    let s = x2 + l_gain * x1;
    let db = theta[3] * theta[3] * x2;
    let gain = l_gain + b + 0.25 * l_gain * l_gain * b * b;
    (-theta[1] - (1.0 + 0.5 * l_gain * l_gain * b) * db * s - gain) / theta[4]
}

/// Analytic Jacobian of `φ` in the five parameters.
pub fn wingrock_dphi_dtheta(theta: &ParamVec, x1: f64, x2: f64, l_gain: f64) -> ParamVec {
    let b = wingrock_beta(theta, x1, x2);
    let s = x2 + l_gain * x1;
    let fac = 1.0 + 0.5 * l_gain * l_gain * b;
    ParamVec::from_vec(vec![
        -x1 / theta[4],
        -x2 / theta[4],
        -fac * theta[2] * x1 * x1 * s / theta[4],
        -fac * theta[3] * x2 * x2 * s / theta[4],
        -wingrock_phi(theta, x1, x2, l_gain) / theta[4],
    ])
}

fn wingrock_k_raw(theta: &ParamVec, x: &StateVec, l_gain: f64, mu: f64) -> f64 {
    let (x1, x2, x3) = (x[0], x[1], x[2]);
    let p1 = wingrock_dphi_dx1(theta, x1, x2, l_gain);
    let p2 = wingrock_dphi_dx2(theta, x1, x2, l_gain);
    let torque = wingrock_regressor(x).dot(theta);
    x3 - theta[4] * (x2 + l_gain * x1) / mu + p1 * x2 / mu + p2 * torque / mu
        - l_gain * (x3 - wingrock_phi(theta, x1, x2, l_gain)) / mu
}

/// Wing-rock backstepping feedback. Requires `θ5 > 0`.
pub fn wingrock_feedback(
    theta: &ParamVec,
    x: &StateVec,
    l_gain: f64,
    mu: f64,
) -> Result<f64, Error> {
    if theta[4] <= 0.0 {
        return Err(Error::Domain(format!(
            "wing-rock feedback needs theta_5 > 0, got {}",
            theta[4]
        )));
    }
    Ok(wingrock_k_raw(theta, x, l_gain, mu))
}

/// Wing-rock CLF `V = x1²/2 + (x2+Lx1)²/2 + (x3−φ)²/2`; decays at
/// rate `σ = L − 1` along the nominal loop.
pub fn wingrock_clf(theta: &ParamVec, x: &StateVec, l_gain: f64) -> f64 {
    let s = x[1] + l_gain * x[0];
    let e = x[2] - wingrock_phi(theta, x[0], x[1], l_gain);
    0.5 * (x[0] * x[0] + s * s + e * e)
}

fn wingrock_grad_v(theta: &ParamVec, x: &StateVec, l_gain: f64) -> StateVec {
    let s = x[1] + l_gain * x[0];
    let e = x[2] - wingrock_phi(theta, x[0], x[1], l_gain);
    StateVec::from_vec(vec![
        x[0] + s * l_gain - e * wingrock_dphi_dx1(theta, x[0], x[1], l_gain),
        s - e * wingrock_dphi_dx2(theta, x[0], x[1], l_gain),
        e,
    ])
}

/// `∂V/∂x2` of the wing-rock CLF; drives the extended-matching update.
pub fn wingrock_dv_dx2(theta: &ParamVec, x: &StateVec, l_gain: f64) -> f64 {
    let s = x[1] + l_gain * x[0];
    let e = x[2] - wingrock_phi(theta, x[0], x[1], l_gain);
    s - e * wingrock_dphi_dx2(theta, x[0], x[1], l_gain)
}

/// Packaged wing-rock law with `σ = L − 1`. Requires `L > 1`, `μ > 0`.
pub fn wingrock_law(l_gain: f64, mu: f64) -> Result<FeedbackLaw, Error> {
    if !(l_gain > 1.0) {
        return Err(Error::Domain(format!("L must exceed 1, got {l_gain}")));
    }
    if !(mu > 0.0) {
        return Err(Error::Domain(format!("mu must be > 0, got {mu}")));
    }
    let k = Arc::new(move |theta: &ParamVec, x: &StateVec| {
        InputVec::from_vec(vec![wingrock_k_raw(theta, x, l_gain, mu)])
    });
    let v =
        Arc::new(move |theta: &ParamVec, x: &StateVec| wingrock_clf(theta, x, l_gain));
    let grad = Arc::new(move |theta: &ParamVec, x: &StateVec| {
        wingrock_grad_v(theta, x, l_gain)
    });
    Ok(FeedbackLaw::new(k, v, grad, l_gain - 1.0))
}

// ---------------------------------------------------------------------------
// LTI chain design
// ---------------------------------------------------------------------------

/// Quadratic Lyapunov design `V = x'Px`, `u = k'x` for the chain, built so
/// that `A_cl'P + P·A_cl + 2σP = 0` holds exactly.
#[derive(Clone, Debug)]
pub struct LtiDesign {
    pub p: DMatrix<f64>,
    pub k_gain: DVector<f64>,
    pub sigma: f64,
}

fn chain_idx(i: usize, j: usize) -> usize {
    crate::plant::chain_param_index(i, j)
}

/// Inductive construction of `(P, k)` for the chain of order `n`.
///
/// Base case `p11 = 1/2`, `k1 = −(θ11+σ)/θ12`; each extension augments `P`
/// with the gain outer product and back-steps the new input coordinate.
pub fn lti_design(
    theta: &ParamVec,
    n: usize,
    sigma: f64,
    kappa: f64,
) -> Result<LtiDesign, Error> {
    if n == 0 {
        return Err(Error::Domain("chain needs n >= 1".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("sigma must be > 0, got {sigma}")));
    }
    let l = n * (n + 3) / 2;
    if theta.len() != l {
        return Err(Error::Domain(format!(
            "chain design for n = {n} needs {l} parameters, got {}",
            theta.len()
        )));
    }
    for i in 1..=n {
        if theta[chain_idx(i, i + 1)] < kappa {
            return Err(Error::Domain(format!(
                "super-diagonal theta_{{{i},{}}} below kappa",
                i + 1
            )));
        }
    }
    let th = |i: usize, j: usize| theta[chain_idx(i, j)];

    let mut p = DMatrix::from_element(1, 1, 0.5);
    let mut k = DVector::from_element(1, -(th(1, 1) + sigma) / th(1, 2));
    for m in 1..n {
        // extend the m-dimensional design to m+1
        let mut p_next = DMatrix::zeros(m + 1, m + 1);
        for i in 0..m {
            for j in 0..m {
                p_next[(i, j)] = p[(i, j)] + 0.5 * k[i] * k[j];
            }
            p_next[(i, m)] = -0.5 * k[i];
            p_next[(m, i)] = -0.5 * k[i];
        }
        p_next[(m, m)] = 0.5;

        let denom = th(m + 1, m + 2);
        let mut k_next = DVector::zeros(m + 1);
        for c in 1..=m {
            let mut s = 0.0;
            for i in c..=m {
                s += k[i - 1] * th(i, c);
            }
            if c > 1 {
                s += k[c - 2] * th(c - 1, c);
            }
            s += -2.0 * th(m, m + 1) * p[(m - 1, c - 1)] - th(m + 1, c) + sigma * k[c - 1];
            k_next[c - 1] = s / denom;
        }
        k_next[m] = (k[m - 1] * th(m, m + 1) - sigma - th(m + 1, m + 1)) / denom;
        p = p_next;
        k = k_next;
    }
    Ok(LtiDesign {
        p,
        k_gain: k,
        sigma,
    })
}

/// Open-loop matrix `A` and input column `b` of the chain.
pub fn lti_chain_matrices(theta: &ParamVec, n: usize) -> (DMatrix<f64>, DVector<f64>) {
    let th = |i: usize, j: usize| theta[chain_idx(i, j)];
    let mut a = DMatrix::zeros(n, n);
    for i in 1..=n {
        for j in 1..=i {
            a[(i - 1, j - 1)] = th(i, j);
        }
        if i < n {
            a[(i - 1, i)] = th(i, i + 1);
        }
    }
    let mut b = DVector::zeros(n);
    b[n - 1] = th(n, n + 1);
    (a, b)
}

/// Packaged chain law: `k(θ,x) = k̃(θ)'x`, `V(θ,x) = x'P(θ)x`, with the
/// design recomputed from the current estimate on every call.
pub fn lti_law(n: usize, sigma: f64, kappa: f64) -> Result<FeedbackLaw, Error> {
    if n == 0 || !(sigma > 0.0) {
        return Err(Error::Domain("lti law needs n >= 1 and sigma > 0".into()));
    }
    let k = Arc::new(move |theta: &ParamVec, x: &StateVec| {
        let d = lti_design(theta, n, sigma, kappa).expect("estimate left admissible set");
        InputVec::from_vec(vec![d.k_gain.dot(x)])
    });
    let v = Arc::new(move |theta: &ParamVec, x: &StateVec| {
        let d = lti_design(theta, n, sigma, kappa).expect("estimate left admissible set");
        (x.transpose() * d.p * x)[(0, 0)]
    });
    let grad = Arc::new(move |theta: &ParamVec, x: &StateVec| {
        let d = lti_design(theta, n, sigma, kappa).expect("estimate left admissible set");
        2.0 * d.p * x
    });
    Ok(FeedbackLaw::new(k, v, grad, sigma))
}

/// Residual `∇V·(f + g·θ) + 2σV` of the decay inequality along the nominal
/// closed loop; nonpositive values certify the design at `(θ, x)`.
pub fn lyapunov_decay_residual(
    plant: &PlantModel,
    law: &FeedbackLaw,
    theta: &ParamVec,
    x: &StateVec,
) -> f64 {
    let u = law.k(theta, x);
    let xdot = plant.xdot(x, &u, theta);
    law.grad_v(theta, x).dot(&xdot) + 2.0 * law.sigma * law.v(theta, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{lti_chain, wing_rock};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const L: f64 = 1.5;
    const MU: f64 = 15.0;

    fn benchmark_theta() -> ParamVec {
        ParamVec::from_vec(vec![-26.67, 0.76485, -2.9225, 0.0, 1.5])
    }

    #[test]
    fn feedback_vanishes_at_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let zero = StateVec::zeros(3);
        for _ in 0..100 {
            let mut th = benchmark_theta();
            for c in th.iter_mut() {
                *c *= 1.0 + 0.5 * rng.gen_range(-1.0..1.0);
            }
            th[4] = th[4].abs().max(1.0);
            let k = wingrock_feedback(&th, &zero, L, MU).unwrap();
            assert!(k.abs() < 1e-14, "k(theta,0) = {k}");
            assert_eq!(wingrock_clf(&th, &zero, L), 0.0);
        }
    }

    #[test]
    fn beta_at_origin_is_one() {
        assert_eq!(wingrock_beta(&benchmark_theta(), 0.0, 0.0), 1.0);
    }

    #[test]
    fn clf_reduces_on_manifold() {
        // with x3 = phi and x2 = -L x1 only the first square survives
        let th = benchmark_theta();
        let x1 = 0.3;
        let x2 = -L * x1;
        let x3 = wingrock_phi(&th, x1, x2, L);
        let v = wingrock_clf(&th, &StateVec::from_vec(vec![x1, x2, x3]), L);
        assert_relative_eq!(v, 0.5 * x1 * x1, max_relative = 1e-14);
    }

    // Frozen from an exact symbolic evaluation of the backstepping
    // formulas at theta = benchmark values, x = (0.4, 0, 0), L = 1.5,
    // mu = 15.
    #[test]
    fn feedback_matches_symbolic_oracle() {
        let th = benchmark_theta();
        let x = StateVec::from_vec(vec![0.4, 0.0, 0.0]);
        let k = wingrock_feedback(&th, &x, L, MU).unwrap();
        assert_relative_eq!(k, 3.06106678535165, max_relative = 1e-14);
        assert_relative_eq!(
            wingrock_clf(&th, &x, L),
            12.434638482943221,
            max_relative = 1e-14
        );
        assert_relative_eq!(
            wingrock_phi(&th, 0.4, 0.0, L),
            4.934498653955277,
            max_relative = 1e-14
        );
        assert_relative_eq!(
            wingrock_dphi_dx1(&th, 0.4, 0.0, L),
            8.38184196610763,
            max_relative = 1e-14
        );
        assert_relative_eq!(
            wingrock_dphi_dx2(&th, 0.4, 0.0, L),
            -3.6946244656300937,
            max_relative = 1e-14
        );

        // second point, estimate off by the benchmark factor 1.35
        let th2 = 1.35 * benchmark_theta();
        let x2 = StateVec::from_vec(vec![-0.35, -0.5, 0.05]);
        let k2 = wingrock_feedback(&th2, &x2, L, MU).unwrap();
        assert_relative_eq!(k2, -3.068392768217615, max_relative = 1e-13);
        assert_relative_eq!(
            wingrock_clf(&th2, &x2, L),
            5.118814656438529,
            max_relative = 1e-13
        );
    }

    #[test]
    fn feedback_rejects_nonpositive_theta5() {
        let mut th = benchmark_theta();
        th[4] = 0.0;
        assert!(wingrock_feedback(&th, &StateVec::zeros(3), L, MU).is_err());
    }

    #[test]
    fn phi_partials_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        for _ in 0..200 {
            let mut th = benchmark_theta();
            for c in th.iter_mut() {
                *c *= 1.0 + 0.5 * rng.gen_range(-1.0..1.0);
            }
            th[4] = th[4].abs().max(1.0);
            let (x1, x2) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));

            let fd1 = (wingrock_phi(&th, x1 + h, x2, L) - wingrock_phi(&th, x1 - h, x2, L))
                / (2.0 * h);
            let fd2 = (wingrock_phi(&th, x1, x2 + h, L) - wingrock_phi(&th, x1, x2 - h, L))
                / (2.0 * h);
            let a1 = wingrock_dphi_dx1(&th, x1, x2, L);
            let a2 = wingrock_dphi_dx2(&th, x1, x2, L);
            assert!((fd1 - a1).abs() / (1.0 + a1.abs()) < 1e-6);
            assert!((fd2 - a2).abs() / (1.0 + a2.abs()) < 1e-6);

            // parameter Jacobian
            let jac = wingrock_dphi_dtheta(&th, x1, x2, L);
            for p in 0..5 {
                let mut tp = th.clone();
                let mut tm = th.clone();
                tp[p] += h;
                tm[p] -= h;
                let fd = (wingrock_phi(&tp, x1, x2, L) - wingrock_phi(&tm, x1, x2, L))
                    / (2.0 * h);
                assert!(
                    (fd - jac[p]).abs() / (1.0 + jac[p].abs()) < 1e-5,
                    "dphi/dtheta_{p}: fd {fd} vs {}",
                    jac[p]
                );
            }
        }
    }

    #[test]
    fn feedback_continuous_across_absolute_value_loci() {
        let th = benchmark_theta();
        for &(x1, x2) in &[(0.0, 0.7), (0.5, 0.0), (0.0, 0.0)] {
            let eps = 1e-9;
            let base = StateVec::from_vec(vec![x1, x2, 0.3]);
            let k0 = wingrock_k_raw(&th, &base, L, MU);
            for sx in [-1.0, 1.0] {
                for sy in [-1.0, 1.0] {
                    let x = StateVec::from_vec(vec![x1 + sx * eps, x2 + sy * eps, 0.3]);
                    let k = wingrock_k_raw(&th, &x, L, MU);
                    assert!((k - k0).abs() < 1e-6, "jump {} at ({x1},{x2})", k - k0);
                }
            }
        }
    }

    #[test]
    fn decay_residual_nonpositive_on_samples() {
        let plant = wing_rock(1.0, MU, benchmark_theta()).unwrap();
        let law = wingrock_law(L, MU).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let mut x = StateVec::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            let norm = x.norm();
            if norm > 1.0 {
                x /= norm;
            }
            let th = benchmark_theta();
            let r = lyapunov_decay_residual(&plant, &law, &th, &x);
            let v = law.v(&th, &x);
            assert!(r <= 1e-8 * (1.0 + v), "residual {r} at x = {x:?}");
        }
        // x = 0 gives exactly zero
        let r0 = lyapunov_decay_residual(&plant, &law, &benchmark_theta(), &StateVec::zeros(3));
        assert_eq!(r0, 0.0);
    }

    #[test]
    fn laws_transfer_between_threads() {
        fn check<T: Send + Sync>() {}
        check::<FeedbackLaw>();
        check::<LtiDesign>();
    }

    #[test]
    fn lti_design_base_case() {
        let d = lti_design(&ParamVec::from_vec(vec![-1.0, 2.0]), 1, 0.5, 1.0).unwrap();
        assert_eq!(d.p[(0, 0)], 0.5);
        assert_relative_eq!(d.k_gain[0], 0.25, max_relative = 1e-15);
        // closed loop dx = -0.5 x
        let (a, b) = lti_chain_matrices(&ParamVec::from_vec(vec![-1.0, 2.0]), 1);
        let acl = a[(0, 0)] + b[0] * d.k_gain[0];
        assert_relative_eq!(acl, -0.5, max_relative = 1e-15);

        // plant already decaying at rate sigma needs no feedback
        let d2 = lti_design(&ParamVec::from_vec(vec![-0.5, 3.0]), 1, 0.5, 1.0).unwrap();
        assert_eq!(d2.k_gain[0], 0.0);
    }

    #[test]
    fn lti_design_satisfies_matrix_inequality() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 1..=4 {
            let l = n * (n + 3) / 2;
            for _ in 0..50 {
                let mut th = ParamVec::from_fn(l, |_, _| rng.gen_range(-3.0..3.0));
                for i in 1..=n {
                    th[chain_idx(i, i + 1)] = 1.0 + rng.gen_range(0.0..3.0);
                }
                let d = lti_design(&th, n, 0.5, 1.0).unwrap();
                let (a, b) = lti_chain_matrices(&th, n);
                let acl = a + b * d.k_gain.transpose();
                let m = acl.transpose() * &d.p + &d.p * acl + 2.0 * 0.5 * &d.p;
                let eig = m.symmetric_eigenvalues();
                assert!(eig.max() <= 1e-8, "n={n}: max eig {}", eig.max());
                let peig = d.p.symmetric_eigenvalues();
                assert!(peig.min() > 0.0, "P not positive definite");
            }
        }
    }

    #[test]
    fn lti_design_continuous_in_theta() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 3;
        let l = n * (n + 3) / 2;
        for _ in 0..20 {
            let mut th = ParamVec::from_fn(l, |_, _| rng.gen_range(-2.0..2.0));
            for i in 1..=n {
                th[chain_idx(i, i + 1)] = 1.0 + rng.gen_range(0.0..2.0);
            }
            let d0 = lti_design(&th, n, 0.5, 1.0).unwrap();
            let mut th2 = th.clone();
            for c in th2.iter_mut() {
                *c += 1e-8 * rng.gen_range(-1.0..1.0);
            }
            let d1 = lti_design(&th2, n, 0.5, 1.0).unwrap();
            assert!((&d1.p - &d0.p).amax() < 1e-4);
            assert!((&d1.k_gain - &d0.k_gain).amax() < 1e-4);
        }
    }

    #[test]
    fn lti_design_rejects_bad_superdiagonal() {
        let th = ParamVec::from_vec(vec![-1.0, 0.5]);
        assert!(lti_design(&th, 1, 0.5, 1.0).is_err());
    }

    #[test]
    fn lti_decay_residual_nonpositive() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let th = ParamVec::from_vec(vec![0.3, 1.5, -0.4, 0.8, 2.0]);
        let plant = lti_chain(2, 1.0, th.clone()).unwrap();
        let law = lti_law(2, 0.5, 1.0).unwrap();
        for _ in 0..100 {
            let x = StateVec::from_fn(2, |_, _| rng.gen_range(-2.0..2.0));
            let r = lyapunov_decay_residual(&plant, &law, &th, &x);
            assert!(r <= 1e-10 * (1.0 + law.v(&th, &x)), "residual {r}");
        }
    }
}

//! Plant abstraction `dx/dt = f(x,u) + g(x,u)·theta` with the admissible
//! parameter set, the selector matrix `C`, deterministic measurement
//! noise, and the two built-in benchmark plants (wing-rock, LTI chain).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Error;

pub type StateVec = DVector<f64>;
pub type InputVec = DVector<f64>;
pub type ParamVec = DVector<f64>;

type DynMap<T> = Arc<dyn Fn(&StateVec, &InputVec) -> T + Send + Sync>;

/// Closed box in parameter space; per-coordinate bounds may be infinite.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxSet {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, Error> {
        if lower.len() != upper.len() {
            return Err(Error::Domain("box bound dimensions differ".into()));
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(Error::Domain(format!(
                    "box bound {i} invalid: [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// The whole of R^dim.
    pub fn unbounded(dim: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; dim],
            upper: vec![f64::INFINITY; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self, i: usize) -> f64 {
        self.lower[i]
    }

    pub fn upper(&self, i: usize) -> f64 {
        self.upper[i]
    }

    pub fn contains(&self, v: &ParamVec) -> bool {
        v.len() == self.dim()
            && v.iter()
                .enumerate()
                .all(|(i, &c)| c >= self.lower[i] && c <= self.upper[i])
    }

    /// Euclidean projection: per-coordinate clamp.
    pub fn project(&self, v: &ParamVec) -> ParamVec {
        ParamVec::from_iterator(
            v.len(),
            v.iter()
                .enumerate()
                .map(|(i, &c)| c.clamp(self.lower[i], self.upper[i])),
        )
    }
}

/// Deterministic sinusoidal measurement error
/// `e(t) = amplitude · sin(2π·frequency·t) · direction`.
#[derive(Clone, Debug)]
pub struct NoiseSpec {
    pub amplitude: f64,
    pub frequency: f64,
    pub direction: StateVec,
}

impl NoiseSpec {
    pub fn none(n: usize) -> Self {
        Self {
            amplitude: 0.0,
            frequency: 0.0,
            direction: StateVec::zeros(n),
        }
    }

    pub fn new(amplitude: f64, frequency: f64, direction: StateVec) -> Result<Self, Error> {
        if !(amplitude >= 0.0) {
            return Err(Error::Domain(format!(
                "noise amplitude must be >= 0, got {amplitude}"
            )));
        }
        Ok(Self {
            amplitude,
            frequency,
            direction,
        })
    }

    pub fn is_zero(&self) -> bool {
        self.amplitude == 0.0
    }
}

/// Measured state `x + amplitude·sin(2π·frequency·t)·direction`.
pub fn measure(x: &StateVec, t: f64, noise: &NoiseSpec) -> StateVec {
    if noise.amplitude == 0.0 {
        return x.clone();
    }
    let e = noise.amplitude * (2.0 * std::f64::consts::PI * noise.frequency * t).sin();
    x + &noise.direction * e
}

/// A parametric plant `dx/dt = f(x,u) + g(x,u)·theta`.
///
/// The true parameter vector is carried for simulation and post-hoc
/// verification; controller and identifier code paths receive only
/// trajectories and estimates.
pub struct PlantModel {
    pub n: usize,
    pub m: usize,
    pub l: usize,
    f: DynMap<StateVec>,
    g: DynMap<DMatrix<f64>>,
    pub theta_set: BoxSet,
    pub c: DMatrix<f64>,
    theta_true: ParamVec,
}

impl PlantModel {
    /// Builds a plant and runs the construction checks: `f(0,0) = 0`,
    /// `g(0,0) = 0`, `theta_true` admissible, `C` full row rank, and
    /// `(I − C'(CC')⁻¹C)·g(x,u) = 0` within 1e-10 at 100 sample points.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n: usize,
        m: usize,
        l: usize,
        f: DynMap<StateVec>,
        g: DynMap<DMatrix<f64>>,
        theta_set: BoxSet,
        c: DMatrix<f64>,
        theta_true: ParamVec,
    ) -> Result<Self, Error> {
        if theta_set.dim() != l || theta_true.len() != l {
            return Err(Error::Domain("parameter dimension mismatch".into()));
        }
        if !theta_set.contains(&theta_true) {
            return Err(Error::Domain(
                "theta_true lies outside the admissible set".into(),
            ));
        }
        let j = c.nrows();
        if c.ncols() != n || j == 0 || j > n {
            return Err(Error::Domain("selector matrix C has bad shape".into()));
        }
        let x0 = StateVec::zeros(n);
        let u0 = InputVec::zeros(m);
        let f0 = f(&x0, &u0);
        let g0 = g(&x0, &u0);
        if f0.len() != n || f0.amax() > 1e-12 {
            return Err(Error::Domain("f(0,0) must vanish".into()));
        }
        if g0.nrows() != n || g0.ncols() != l || g0.amax() > 1e-12 {
            return Err(Error::Domain("g(0,0) must vanish".into()));
        }

        let cct = &c * c.transpose();
        let cct_inv = cct
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Domain("C must have full row rank".into()))?;
        let proj = DMatrix::identity(n, n) - c.transpose() * cct_inv * &c;
        let mut rng = ChaCha8Rng::seed_from_u64(0x5e1ec70);
        for _ in 0..100 {
            let x = StateVec::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let u = InputVec::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
            let residual = (&proj * g(&x, &u)).amax();
            if residual > 1e-10 {
                return Err(Error::Domain(format!(
                    "C does not capture the range of g: residual {residual:.3e}"
                )));
            }
        }

        Ok(Self {
            n,
            m,
            l,
            f,
            g,
            theta_set,
            c,
            theta_true,
        })
    }

    pub fn f(&self, x: &StateVec, u: &InputVec) -> StateVec {
        (self.f)(x, u)
    }

    pub fn g(&self, x: &StateVec, u: &InputVec) -> DMatrix<f64> {
        (self.g)(x, u)
    }

    /// Full right-hand side `f(x,u) + g(x,u)·theta`.
    pub fn xdot(&self, x: &StateVec, u: &InputVec, theta: &ParamVec) -> StateVec {
        self.f(x, u) + self.g(x, u) * theta
    }

    /// Ground-truth parameters. For the simulator right-hand side and
    /// post-hoc verification only; never feed this to control or
    /// identification logic.
    pub fn ground_truth(&self) -> &ParamVec {
        &self.theta_true
    }
}

/// Regressor row of the wing-rock torque equation.
pub fn wingrock_regressor(x: &StateVec) -> ParamVec {
    ParamVec::from_vec(vec![
        x[0],
        x[1],
        x[0].abs() * x[1],
        x[1].abs() * x[1],
        x[2],
    ])
}

/// Wing-rock roll dynamics with first-order actuator:
/// `dx1 = x2`, `dx2 = ζ(x)'θ`, `dx3 = −μ·x3 + μ·u`,
/// with `θ ∈ R⁴ × [κ, ∞)`.
pub fn wing_rock(kappa: f64, mu: f64, theta_true: ParamVec) -> Result<PlantModel, Error> {
    if !(kappa > 0.0) {
        return Err(Error::Domain(format!("kappa must be > 0, got {kappa}")));
    }
    if !(mu > 0.0) {
        return Err(Error::Domain(format!("mu must be > 0, got {mu}")));
    }
    if theta_true.len() != 5 {
        return Err(Error::Domain("wing-rock theta has 5 components".into()));
    }
    if theta_true[4] < kappa {
        return Err(Error::Domain(format!(
            "theta_5 = {} below kappa = {kappa}",
            theta_true[4]
        )));
    }
    let f = Arc::new(move |x: &StateVec, u: &InputVec| {
        StateVec::from_vec(vec![x[1], 0.0, -mu * x[2] + mu * u[0]])
    });
    let g = Arc::new(|x: &StateVec, _u: &InputVec| {
        let mut g = DMatrix::zeros(3, 5);
        g.row_mut(1).copy_from(&wingrock_regressor(x).transpose());
        g
    });
    let mut lower = vec![f64::NEG_INFINITY; 5];
    lower[4] = kappa;
    let theta_set = BoxSet::new(lower, vec![f64::INFINITY; 5])?;
    let c = DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 0.0]);
    PlantModel::new(3, 1, 5, f, g, theta_set, c, theta_true)
}

/// Flat index of `theta_{i,j}` (1-based `i`, `j <= i+1`) in the chain
/// parameter vector.
pub fn chain_param_index(i: usize, j: usize) -> usize {
    (i - 1) * (i + 2) / 2 + (j - 1)
}

/// Controllable single-input chain `dx_i = Σ_{j<=i} θ_{i,j} x_j + θ_{i,i+1} x_{i+1}`
/// with `x_{n+1} = u`, all super-diagonal gains bounded below by `κ`.
pub fn lti_chain(n: usize, kappa: f64, theta_true: ParamVec) -> Result<PlantModel, Error> {
    if n == 0 {
        return Err(Error::Domain("chain needs n >= 1".into()));
    }
    if !(kappa > 0.0) {
        return Err(Error::Domain(format!("kappa must be > 0, got {kappa}")));
    }
    let l = n * (n + 3) / 2;
    if theta_true.len() != l {
        return Err(Error::Domain(format!(
            "chain with n = {n} needs l = {l} parameters, got {}",
            theta_true.len()
        )));
    }
    for i in 1..=n {
        let v = theta_true[chain_param_index(i, i + 1)];
        if v < kappa {
            return Err(Error::Domain(format!(
                "super-diagonal theta_{{{i},{}}} = {v} below kappa = {kappa}",
                i + 1
            )));
        }
    }
    let f = Arc::new(move |_x: &StateVec, _u: &InputVec| StateVec::zeros(n));
    let g = Arc::new(move |x: &StateVec, u: &InputVec| {
        let mut g = DMatrix::zeros(n, l);
        for i in 1..=n {
            for j in 1..=i {
                g[(i - 1, chain_param_index(i, j))] = x[j - 1];
            }
            let next = if i < n { x[i] } else { u[0] };
            g[(i - 1, chain_param_index(i, i + 1))] = next;
        }
        g
    });
    let mut lower = vec![f64::NEG_INFINITY; l];
    for i in 1..=n {
        lower[chain_param_index(i, i + 1)] = kappa;
    }
    let theta_set = BoxSet::new(lower, vec![f64::INFINITY; l])?;
    let c = DMatrix::identity(n, n);
    PlantModel::new(n, 1, l, f, g, theta_set, c, theta_true)
}

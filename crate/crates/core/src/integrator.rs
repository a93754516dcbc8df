//! Adaptive Dormand–Prince 5(4) integrator with fourth-order dense output.
//!
//! The dense interpolant on every accepted step is what the trigger
//! localization bisects and what the quadrature oracle samples, so the
//! solver keeps all step polynomials instead of discrete nodes.

use nalgebra::DVector;

use crate::Error;

/// Tolerances and step limits for the adaptive integrator.
#[derive(Clone, Debug)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_step: f64,
    /// Bisection width for trigger localization (seconds).
    pub event_tol: f64,
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-9,
            abs_tol: 1e-11,
            max_step: 0.05,
            event_tol: 1e-9,
            max_steps: 10_000_000,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<(), Error> {
        for (name, v) in [
            ("rel_tol", self.rel_tol),
            ("abs_tol", self.abs_tol),
            ("max_step", self.max_step),
            ("event_tol", self.event_tol),
        ] {
            if !(v > 0.0) {
                return Err(Error::Validation(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.event_tol >= self.max_step {
            return Err(Error::Validation(format!(
                "event_tol ({}) must be smaller than max_step ({})",
                self.event_tol, self.max_step
            )));
        }
        Ok(())
    }
}

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
// Difference of the 5th and embedded 4th order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
// Dense-output weights for the quartic interpolant.
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

/// One accepted step with its quartic interpolant over `[t0, t0+h]`.
#[derive(Clone, Debug)]
pub struct DenseStep {
    pub t0: f64,
    pub h: f64,
    cont: [DVector<f64>; 5],
}

impl DenseStep {
    pub fn t1(&self) -> f64 {
        self.t0 + self.h
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.t0 && t <= self.t1()
    }

    /// Interpolated state at `t` (valid on `[t0, t1]`).
    pub fn eval(&self, t: f64) -> DVector<f64> {
        let s = (t - self.t0) / self.h;
        let s1 = 1.0 - s;
        // cont0 + s*(cont1 + s1*(cont2 + s*(cont3 + s1*cont4)))
        let mut acc = &self.cont[3] + &self.cont[4] * s1;
        acc = &self.cont[2] + acc * s;
        acc = &self.cont[1] + acc * s1;
        &self.cont[0] + acc * s
    }
}

/// Result of integrating one time span.
#[derive(Clone, Debug)]
pub struct Integration {
    pub steps: Vec<DenseStep>,
    pub t_end: f64,
    pub y_end: DVector<f64>,
    pub n_accepted: usize,
    pub n_rejected: usize,
}

/// What the per-step inspector tells the driver to do next.
pub enum StepOutcome {
    Continue,
    /// Stop the integration at the given interior time.
    Halt(f64),
}

fn error_norm(err: &DVector<f64>, y0: &DVector<f64>, y1: &DVector<f64>, cfg: &IntegratorConfig) -> f64 {
    let n = err.len();
    let mut acc = 0.0;
    for i in 0..n {
        let sc = cfg.abs_tol + cfg.rel_tol * y0[i].abs().max(y1[i].abs());
        let q = err[i] / sc;
        acc += q * q;
    }
    (acc / n as f64).sqrt()
}

fn initial_step(
    rhs: &mut impl FnMut(f64, &DVector<f64>, &mut DVector<f64>),
    t0: f64,
    y0: &DVector<f64>,
    f0: &DVector<f64>,
    span: f64,
    cfg: &IntegratorConfig,
) -> f64 {
    let n = y0.len();
    let sc =
        |y: &DVector<f64>| DVector::from_fn(n, |i, _| cfg.abs_tol + cfg.rel_tol * y[i].abs());
    let s = sc(y0);
    let d0 = (y0.component_div(&s)).norm() / (n as f64).sqrt();
    let d1 = (f0.component_div(&s)).norm() / (n as f64).sqrt();
    let mut h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    h0 = h0.min(span).min(cfg.max_step);
    let y1 = y0 + f0 * h0;
    let mut f1 = DVector::zeros(n);
    rhs(t0 + h0, &y1, &mut f1);
    let d2 = ((&f1 - f0).component_div(&s)).norm() / (n as f64).sqrt() / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    (100.0 * h0).min(h1).min(span).min(cfg.max_step)
}

/// Integrates `dy/dt = rhs(t, y)` from `t0` to `t_end`, handing every
/// accepted step to `inspect`, which may halt at an interior time (the
/// trigger localization path).
pub fn integrate_dense<F, C2>(
    mut rhs: F,
    t0: f64,
    y0: &DVector<f64>,
    t_end: f64,
    cfg: &IntegratorConfig,
    mut inspect: C2,
) -> Result<Integration, Error>
where
    F: FnMut(f64, &DVector<f64>, &mut DVector<f64>),
    C2: FnMut(&DenseStep) -> StepOutcome,
{
    let n = y0.len();
    if t_end < t0 {
        return Err(Error::Domain("integration span must be forward".into()));
    }
    let mut steps = Vec::new();
    if t_end == t0 {
        return Ok(Integration {
            steps,
            t_end,
            y_end: y0.clone(),
            n_accepted: 0,
            n_rejected: 0,
        });
    }

    let mut t = t0;
    let mut y = y0.clone();
    let mut k: Vec<DVector<f64>> = (0..7).map(|_| DVector::zeros(n)).collect();
    {
        let mut f0 = DVector::zeros(n);
        rhs(t, &y, &mut f0);
        if !f0.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteState { t });
        }
        k[0] = f0;
    }
    let mut h = initial_step(&mut rhs, t, &y, &k[0], t_end - t0, cfg);
    let mut n_accepted = 0usize;
    let mut n_rejected = 0usize;
    let mut just_rejected = false;
    let mut ytmp = DVector::zeros(n);

    while t < t_end {
        if n_accepted + n_rejected >= cfg.max_steps {
            return Err(Error::StepFailure { t, h });
        }
        let h_floor = 1e-14 * t.abs().max(1.0);
        if h < h_floor {
            return Err(Error::StepFailure { t, h });
        }
        if t + h > t_end {
            h = t_end - t;
        }

        for i in 1..7 {
            ytmp.copy_from(&y);
            for (j, kj) in k.iter().enumerate().take(i) {
                if A[i][j] != 0.0 {
                    ytmp.axpy(A[i][j] * h, kj, 1.0);
                }
            }
            let ti = t + C[i] * h;
            let (head, tail) = k.split_at_mut(i);
            let _ = head;
            rhs(ti, &ytmp, &mut tail[0]);
        }
        // k[6] is the derivative at the 5th-order solution (FSAL), and
        // ytmp currently holds that solution.
        let y_next = ytmp.clone();
        let finite = y_next.iter().all(|v| v.is_finite())
            && k.iter().all(|ki| ki.iter().all(|v| v.is_finite()));
        if !finite {
            // a non-finite trial is a rejection; if the step cannot
            // shrink further the state has genuinely blown up
            if h * 0.25 < h_floor {
                return Err(Error::NonFiniteState { t: t + h });
            }
            n_rejected += 1;
            just_rejected = true;
            h *= 0.25;
            continue;
        }
        let mut err = DVector::zeros(n);
        for (i, ki) in k.iter().enumerate() {
            if E[i] != 0.0 {
                err.axpy(E[i] * h, ki, 1.0);
            }
        }
        let err_norm = error_norm(&err, &y, &y_next, cfg);

        if err_norm <= 1.0 {
            // dense output coefficients
            let dy = &y_next - &y;
            let mut cont4 = DVector::zeros(n);
            for (i, ki) in k.iter().enumerate() {
                if D[i] != 0.0 {
                    cont4.axpy(D[i] * h, ki, 1.0);
                }
            }
            let cont2 = &k[0] * h - &dy;
            let cont3 = &dy - &k[6] * h - &cont2;
            let step = DenseStep {
                t0: t,
                h,
                cont: [y.clone(), dy, cont2, cont3, cont4],
            };
            n_accepted += 1;

            let outcome = inspect(&step);
            steps.push(step);
            match outcome {
                StepOutcome::Continue => {}
                StepOutcome::Halt(t_halt) => {
                    let y_end = steps.last().unwrap().eval(t_halt);
                    return Ok(Integration {
                        steps,
                        t_end: t_halt,
                        y_end,
                        n_accepted,
                        n_rejected,
                    });
                }
            }

            t += h;
            y = y_next;
            k.swap(0, 6);
            let fac = if just_rejected { 1.0 } else { 10.0 };
            let scale = if err_norm == 0.0 {
                fac
            } else {
                (0.9 * err_norm.powf(-0.2)).clamp(0.2, fac)
            };
            h = (h * scale).min(cfg.max_step);
            just_rejected = false;
        } else {
            n_rejected += 1;
            just_rejected = true;
            h *= (0.9 * err_norm.powf(-0.2)).clamp(0.2, 1.0);
        }
    }

    Ok(Integration {
        steps,
        t_end,
        y_end: y,
        n_accepted,
        n_rejected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cfg(rel: f64, abs: f64) -> IntegratorConfig {
        IntegratorConfig {
            rel_tol: rel,
            abs_tol: abs,
            max_step: 0.5,
            event_tol: 1e-9,
            max_steps: 1_000_000,
        }
    }

    #[test]
    fn config_validation() {
        assert!(IntegratorConfig::default().validate().is_ok());
        let c = IntegratorConfig {
            rel_tol: 0.0,
            ..IntegratorConfig::default()
        };
        assert!(c.validate().is_err());
        let c = IntegratorConfig {
            event_tol: IntegratorConfig::default().max_step,
            ..IntegratorConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn exponential_decay_to_tolerance() {
        let y0 = DVector::from_vec(vec![1.0]);
        let out = integrate_dense(
            |_t, y, dy| dy[0] = -2.0 * y[0],
            0.0,
            &y0,
            3.0,
            &cfg(1e-10, 1e-12),
            |_| StepOutcome::Continue,
        )
        .unwrap();
        assert_relative_eq!(out.y_end[0], (-6.0f64).exp(), max_relative = 1e-9);
    }

    #[test]
    fn dense_output_matches_exact_solution_between_nodes() {
        // linear oscillator, exact solution (cos t, -sin t)
        let y0 = DVector::from_vec(vec![1.0, 0.0]);
        let out = integrate_dense(
            |_t, y, dy| {
                dy[0] = y[1];
                dy[1] = -y[0];
            },
            0.0,
            &y0,
            6.0,
            &cfg(1e-10, 1e-12),
            |_| StepOutcome::Continue,
        )
        .unwrap();
        let mut worst: f64 = 0.0;
        for step in &out.steps {
            for m in 0..=8 {
                let t = step.t0 + step.h * m as f64 / 8.0;
                let y = step.eval(t);
                worst = worst.max((y[0] - t.cos()).abs()).max((y[1] + t.sin()).abs());
            }
        }
        assert!(worst < 1e-8, "dense output error {worst}");
    }

    #[test]
    fn interpolant_is_exact_on_cubics() {
        // dy/dt = 3t^2 - 2t, y = t^3 - t^2; one forced big step
        let y0 = DVector::from_vec(vec![0.0]);
        let c = IntegratorConfig {
            rel_tol: 1e-3,
            abs_tol: 1e-3,
            max_step: 1.0,
            event_tol: 1e-9,
            max_steps: 1000,
        };
        let out = integrate_dense(
            |t, _y, dy| dy[0] = 3.0 * t * t - 2.0 * t,
            0.0,
            &y0,
            1.0,
            &c,
            |_| StepOutcome::Continue,
        )
        .unwrap();
        for step in &out.steps {
            for m in 0..=10 {
                let t = step.t0 + step.h * m as f64 / 10.0;
                let y = step.eval(t);
                assert!((y[0] - (t * t * t - t * t)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn halt_truncates_at_interior_time() {
        let y0 = DVector::from_vec(vec![1.0]);
        let out = integrate_dense(
            |_t, y, dy| dy[0] = y[0],
            0.0,
            &y0,
            2.0,
            &cfg(1e-9, 1e-11),
            |step| {
                if step.t1() >= 0.5 {
                    StepOutcome::Halt(0.5)
                } else {
                    StepOutcome::Continue
                }
            },
        )
        .unwrap();
        assert_eq!(out.t_end, 0.5);
        assert_relative_eq!(out.y_end[0], 0.5f64.exp(), max_relative = 1e-9);
    }

    #[test]
    fn nonfinite_state_reported() {
        // finite escape: dy/dt = y^2, y(0) = 1 blows up at t = 1
        let y0 = DVector::from_vec(vec![1.0]);
        let r = integrate_dense(
            |_t, y, dy| dy[0] = y[0] * y[0],
            0.0,
            &y0,
            2.0,
            &cfg(1e-6, 1e-8),
            |_| StepOutcome::Continue,
        );
        match r {
            Err(Error::NonFiniteState { t }) => assert!(t > 0.9),
            Err(Error::StepFailure { t, .. }) => assert!(t > 0.9),
            other => panic!("expected blow-up error, got {other:?}"),
        }
    }

    #[test]
    fn zero_span_returns_initial_state() {
        let y0 = DVector::from_vec(vec![2.0]);
        let out = integrate_dense(
            |_t, y, dy| dy[0] = y[0],
            1.0,
            &y0,
            1.0,
            &cfg(1e-9, 1e-11),
            |_| StepOutcome::Continue,
        )
        .unwrap();
        assert_eq!(out.y_end, y0);
        assert!(out.steps.is_empty());
    }
}

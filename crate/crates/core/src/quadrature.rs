//! Direct double-integral evaluation of the identifier quantities
//! `Y = ∫∫ q'C'C p ds dt` and `Q = ∫∫ q'C'C q ds dt` by composite
//! trapezoid quadrature along a stored trajectory. Used only as a test
//! and verification oracle, never in the control loop.

use nalgebra::{DMatrix, DVector};

use crate::plant::{InputVec, PlantModel, StateVec};
use crate::Error;

/// Reference values for `(Y, Q)` over the window `[t_origin, tau]` on a
/// `grid × grid` mesh, with inner integrals of `Cf` and `Cg` taken by
/// cumulative trapezoid on the same nodes.
pub fn quadrature_oracle(
    plant: &PlantModel,
    xu: impl Fn(f64) -> (StateVec, InputVec),
    t_origin: f64,
    tau: f64,
    grid: usize,
) -> Result<(DVector<f64>, DMatrix<f64>), Error> {
    if tau < t_origin {
        return Err(Error::Domain("quadrature window must be forward".into()));
    }
    if grid < 16 {
        return Err(Error::Domain(format!("grid must be >= 16, got {grid}")));
    }
    let l = plant.l;
    let j = plant.c.nrows();
    if tau == t_origin {
        return Ok((DVector::zeros(l), DMatrix::zeros(l, l)));
    }

    let h = (tau - t_origin) / grid as f64;
    let npts = grid + 1;
    // node data: Cx, and cumulative integrals of Cg (j x l) and Cf (j)
    let mut cx = Vec::with_capacity(npts);
    let mut cum_g = Vec::with_capacity(npts);
    let mut cum_f = Vec::with_capacity(npts);
    let mut prev_cg: Option<(DMatrix<f64>, DVector<f64>)> = None;
    for k in 0..npts {
        let t = t_origin + h * k as f64;
        let (x, u) = xu(t);
        let cg = &plant.c * plant.g(&x, &u);
        let cf = &plant.c * plant.f(&x, &u);
        cx.push(&plant.c * &x);
        match prev_cg.take() {
            None => {
                cum_g.push(DMatrix::zeros(j, l));
                cum_f.push(DVector::zeros(j));
            }
            Some((pg, pf)) => {
                let g_acc: DMatrix<f64> = cum_g.last().unwrap() + (&pg + &cg) * (0.5 * h);
                let f_acc: DVector<f64> = cum_f.last().unwrap() + (&pf + &cf) * (0.5 * h);
                cum_g.push(g_acc);
                cum_f.push(f_acc);
            }
        }
        prev_cg = Some((cg, cf));
    }

    let weight = |k: usize| if k == 0 || k == grid { 0.5 * h } else { h };
    let mut y_ref = DVector::zeros(l);
    let mut q_ref = DMatrix::zeros(l, l);
    let mut dq = DMatrix::zeros(j, l);
    let mut dp = DVector::zeros(j);
    for a in 0..npts {
        let wa = weight(a);
        for b in 0..npts {
            let wb = weight(b);
            // q_C(t_a, t_b) and p_C(t_a, t_b)
            dq.copy_from(&cum_g[a]);
            dq -= &cum_g[b];
            dp.copy_from(&cx[a]);
            dp -= &cx[b];
            dp -= &cum_f[a];
            dp += &cum_f[b];
            let w = wa * wb;
            for col in 0..l {
                let qc = dq.column(col);
                y_ref[col] += w * qc.dot(&dp);
                for col2 in 0..=col {
                    let v = w * qc.dot(&dq.column(col2));
                    q_ref[(col, col2)] += v;
                }
            }
        }
    }
    for col in 0..l {
        for col2 in 0..col {
            q_ref[(col2, col)] = q_ref[(col, col2)];
        }
    }
    Ok((y_ref, q_ref))
}

/// Oracle with a Richardson self-check: evaluates at `grid` and `grid/2`
/// and reports `GridTooCoarse` when the extrapolated relative
/// disagreement exceeds `tol`.
pub fn quadrature_oracle_checked(
    plant: &PlantModel,
    xu: impl Fn(f64) -> (StateVec, InputVec) + Copy,
    t_origin: f64,
    tau: f64,
    grid: usize,
    tol: f64,
) -> Result<(DVector<f64>, DMatrix<f64>), Error> {
    let (y_f, q_f) = quadrature_oracle(plant, xu, t_origin, tau, grid)?;
    let (y_c, q_c) = quadrature_oracle(plant, xu, t_origin, tau, grid / 2)?;
    let scale = (y_f.norm() + q_f.norm()).max(1e-300);
    let disagreement = ((&y_f - &y_c).norm() + (&q_f - &q_c).norm()) / (3.0 * scale);
    if disagreement > tol {
        return Err(Error::GridTooCoarse { disagreement, tol });
    }
    Ok((y_f, q_f))
}

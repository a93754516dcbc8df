//! CSV emission: the trajectory table sampled on a fixed grid plus one
//! row per event, and the event log. Values are written with 17
//! significant digits so that identical runs produce identical bytes.

use std::io::Write;
use std::path::Path;

use crate::run::{input_at, theta_at, RunOutput};
use crate::scenario::RunSetup;
use crate::Result;

/// Decimal text with 17 significant digits.
pub fn fmt_g17(v: f64) -> String {
    format!("{v:.16e}")
}

fn row_times(setup: &RunSetup, out: &RunOutput) -> Vec<(f64, bool)> {
    let dt = setup.output_dt;
    let t_final = out.traj.t_end();
    let eps = 1e-9 * t_final.max(1.0);
    let n_rows = (t_final / dt + eps).floor() as usize;
    let mut times: Vec<(f64, bool)> = (0..=n_rows).map(|k| (k as f64 * dt, false)).collect();
    for &te in &out.traj.event_times {
        match times.binary_search_by(|(t, _)| t.partial_cmp(&te).unwrap()) {
            Ok(i) => times[i].1 = true,
            Err(i) => {
                // coincides with a grid time up to rounding, or is a
                // genuine interior event time
                if i > 0 && (te - times[i - 1].0).abs() <= eps {
                    times[i - 1].1 = true;
                } else if i < times.len() && (times[i].0 - te).abs() <= eps {
                    times[i].1 = true;
                } else {
                    times.insert(i, (te, true));
                }
            }
        }
    }
    times
}

/// Writes `t,x1..xn,u,theta_hat_1..theta_hat_l,V,event_flag,controller`
/// rows at the fixed output step plus one row per event.
pub fn emit_trajectory_csv(setup: &RunSetup, out: &RunOutput, path: &Path) -> Result<()> {
    let n = setup.plant.n;
    let l = setup.plant.l;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);

    let mut header = String::from("t");
    for i in 1..=n {
        header.push_str(&format!(",x{i}"));
    }
    header.push_str(",u");
    for i in 1..=l {
        header.push_str(&format!(",theta_hat_{i}"));
    }
    header.push_str(",V,event_flag,controller");
    writeln!(w, "{header}")?;

    let tag = setup.controller.tag();
    for (t, is_event) in row_times(setup, out) {
        let x = out.traj.eval_x(t);
        let u = input_at(setup, out, t);
        let theta = theta_at(setup, out, t);
        let v = setup.law.v(&theta, &x);
        let mut row = fmt_g17(t);
        for i in 0..n {
            row.push(',');
            row.push_str(&fmt_g17(x[i]));
        }
        row.push(',');
        row.push_str(&fmt_g17(u));
        for i in 0..l {
            row.push(',');
            row.push_str(&fmt_g17(theta[i]));
        }
        row.push(',');
        row.push_str(&fmt_g17(v));
        row.push_str(if is_event { ",1," } else { ",0," });
        row.push_str(tag);
        writeln!(w, "{row}")?;
    }
    w.flush()?;
    Ok(())
}

/// Event log: per event time, kind, switch flag, null-space dimension,
/// `|Q|`, the ground-truth residual `|Y − Qθ|`, the trigger residual,
/// and the estimate before and after the update.
pub fn emit_events_csv(setup: &RunSetup, out: &RunOutput, path: &Path) -> Result<()> {
    let l = setup.plant.l;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header = String::from(
        "index,t,kind,switched,nullspace_dim,q_norm,y_resid_true,truth_projection_gap,trigger_residual",
    );
    for i in 1..=l {
        header.push_str(&format!(",theta_before_{i}"));
    }
    for i in 1..=l {
        header.push_str(&format!(",theta_after_{i}"));
    }
    writeln!(w, "{header}")?;
    for ev in &out.events {
        let mut row = format!(
            "{},{},{},{}",
            ev.index,
            fmt_g17(ev.t),
            ev.kind,
            if ev.switched { 1 } else { 0 }
        );
        row.push(',');
        if let Some(d) = ev.nullspace_dim {
            row.push_str(&d.to_string());
        }
        row.push(',');
        if let Some(q) = ev.q_norm {
            row.push_str(&fmt_g17(q));
        }
        row.push(',');
        if let Some(r) = ev.y_residual_true {
            row.push_str(&fmt_g17(r));
        }
        row.push(',');
        if let Some(r) = ev.truth_projection_gap {
            row.push_str(&fmt_g17(r));
        }
        row.push(',');
        if let Some(r) = ev.trigger_residual {
            row.push_str(&fmt_g17(r));
        }
        for v in &ev.theta_before {
            row.push(',');
            row.push_str(&fmt_g17(*v));
        }
        for v in &ev.theta_after {
            row.push(',');
            row.push_str(&fmt_g17(*v));
        }
        writeln!(w, "{row}")?;
    }
    w.flush()?;
    Ok(())
}

//! `balsi-sim`: run event-triggered adaptive control scenarios, verify
//! the closed-loop guarantees of completed runs, print bundled presets,
//! and cross-check the identifier against the quadrature oracle.
//!
//! Exit codes: 0 success, 2 validation error, 3 numerical failure,
//! 4 check failures in `verify`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use balsi::csv::{emit_events_csv, emit_trajectory_csv};
use balsi::quadrature::quadrature_oracle;
use balsi::run::{identifier_at, run_scenario, xu_sampler, RunOutput};
use balsi::scenario::{preset, RunSetup, Scenario, PRESET_NAMES};
use balsi::verify::{build_report, verify_guarantees, CheckResult};
use balsi::Error;

#[derive(Parser)]
#[command(name = "balsi-sim", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario file; writes trajectory.csv, events.csv,
    /// report.json, and a copy of the scenario into the output directory
    Run {
        scenario: PathBuf,
        /// Output directory (created if missing)
        #[arg(long, default_value = "balsi_out")]
        out: PathBuf,
    },
    /// Re-run the scenario stored in a run directory and evaluate the
    /// closed-loop guarantee checks
    Verify { run_dir: PathBuf },
    /// Print a bundled scenario preset to stdout
    Preset { name: String },
    /// Compare the ODE-propagated identifier quantities at time tau with
    /// the quadrature oracle on an NxN grid
    Oracle {
        run_dir: PathBuf,
        #[arg(long)]
        tau: f64,
        #[arg(long, default_value_t = 256)]
        grid: usize,
    },
}

const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_CHECKS: u8 = 4;

fn exit_for(e: &Error) -> u8 {
    match e {
        Error::Parse(_) | Error::Validation(_) | Error::Domain(_) | Error::Io(_) => {
            EXIT_VALIDATION
        }
        Error::AtEvent { source, .. } => exit_for(source),
        _ => EXIT_NUMERICAL,
    }
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(exit_for(e))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run { scenario, out } => cmd_run(&scenario, &out),
        Cmd::Verify { run_dir } => cmd_verify(&run_dir),
        Cmd::Preset { name } => cmd_preset(&name),
        Cmd::Oracle { run_dir, tau, grid } => cmd_oracle(&run_dir, tau, grid),
    }
}

fn load_and_run(path: &Path) -> Result<(RunSetup, RunOutput), Error> {
    let scenario = Scenario::from_path(path)?;
    let setup = scenario.resolve()?;
    let out = run_scenario(&setup)?;
    Ok((setup, out))
}

fn print_checks(checks: &[CheckResult]) {
    for c in checks {
        println!(
            "check {:<24} {}  measured {: >12.5e}  threshold {: >12.5e}  ({})",
            c.name,
            if c.pass { "pass" } else { "FAIL" },
            c.measured,
            c.threshold,
            c.note
        );
    }
}

fn cmd_run(scenario_path: &Path, out_dir: &Path) -> ExitCode {
    let (setup, out) = match load_and_run(scenario_path) {
        Ok(v) => v,
        Err(e) => return fail(&e),
    };
    if let Err(e) = std::fs::create_dir_all(out_dir) {
        return fail(&e.into());
    }
    let traj_path = out_dir.join("trajectory.csv");
    let events_path = out_dir.join("events.csv");
    if let Err(e) = emit_trajectory_csv(&setup, &out, &traj_path) {
        return fail(&e);
    }
    if let Err(e) = emit_events_csv(&setup, &out, &events_path) {
        return fail(&e);
    }
    if let Err(e) = std::fs::copy(scenario_path, out_dir.join("scenario.toml")) {
        return fail(&e.into());
    }
    let checks = verify_guarantees(&setup, &out);
    let report = build_report(
        &setup,
        &out,
        checks,
        "trajectory.csv".to_string(),
        "events.csv".to_string(),
    );
    let json = match report.to_json() {
        Ok(j) => j,
        Err(e) => return fail(&e),
    };
    if let Err(e) = std::fs::write(out_dir.join("report.json"), json + "\n") {
        return fail(&e.into());
    }

    println!(
        "run complete: controller {}, {} events, {} switches, settling at t = {:.6}",
        report.controller, report.n_events, report.n_switches, report.settling_time
    );
    println!(
        "final estimate error |theta_hat - theta| = {:.6e}",
        report.estimate_error_final
    );
    print_checks(&report.checks);
    println!("outputs in {}", out_dir.display());
    ExitCode::SUCCESS
}

fn cmd_verify(run_dir: &Path) -> ExitCode {
    let (setup, out) = match load_and_run(&run_dir.join("scenario.toml")) {
        Ok(v) => v,
        Err(e) => return fail(&e),
    };
    let checks = verify_guarantees(&setup, &out);
    print_checks(&checks);
    let failed = checks.iter().filter(|c| !c.pass).count();
    if failed > 0 {
        eprintln!("{failed} check(s) failed");
        return ExitCode::from(EXIT_CHECKS);
    }
    println!("all {} checks passed", checks.len());
    ExitCode::SUCCESS
}

fn cmd_preset(name: &str) -> ExitCode {
    match preset(name) {
        Ok(s) => {
            print!("{}", s.to_toml());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("available presets: {}", PRESET_NAMES.join(", "));
            ExitCode::from(EXIT_VALIDATION)
        }
    }
}

fn cmd_oracle(run_dir: &Path, tau: f64, grid: usize) -> ExitCode {
    let (setup, out) = match load_and_run(&run_dir.join("scenario.toml")) {
        Ok(v) => v,
        Err(e) => return fail(&e),
    };
    if tau > out.traj.t_end() {
        return fail(&Error::Validation(format!(
            "tau = {tau} beyond the trajectory end {}",
            out.traj.t_end()
        )));
    }
    let Some(ident) = identifier_at(&out, setup.plant.n, tau) else {
        return fail(&Error::Validation(
            "this controller does not carry an identifier".into(),
        ));
    };
    if ident.t_origin != 0.0 {
        return fail(&Error::Validation(
            "oracle comparison needs a run without re-initialization".into(),
        ));
    }
    let sampler = xu_sampler(&setup, &out);
    let run_quadrature = |g: usize| quadrature_oracle(&setup.plant, sampler, 0.0, tau, g);
    let (y_ref, q_ref) = match run_quadrature(grid) {
        Ok(v) => v,
        Err(e) => return fail(&e),
    };
    let (y_coarse, q_coarse) = match run_quadrature(grid / 2) {
        Ok(v) => v,
        Err(e) => return fail(&e),
    };

    let q_ode = ident.q_matrix();
    let y_err = (&ident.y - &y_ref).norm() / y_ref.norm().max(1e-300);
    let q_err = (&q_ode - &q_ref).norm() / q_ref.norm().max(1e-300);
    let richardson = ((&y_ref - &y_coarse).norm() + (&q_ref - &q_coarse).norm())
        / (3.0 * (y_ref.norm() + q_ref.norm()).max(1e-300));
    println!("tau = {tau}, grid = {grid}");
    println!("relative |Y_ode - Y_ref| = {y_err:.6e}");
    println!("relative |Q_ode - Q_ref| = {q_err:.6e}");
    println!("quadrature self-estimate (Richardson vs grid/2) = {richardson:.6e}");
    if richardson > 1e-4 {
        println!("advisory: grid too coarse for 1e-4 quadrature accuracy; refine --grid");
    }
    ExitCode::SUCCESS
}

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use demix::certificate::{construct_certificate, invertibility_diagnostics, verify_certificate, VerifyOptions};
use demix::fejer::{invariant_suite, FejerKernel};
use demix::harness::{emit_grid, run_phase_transition_detailed, emit_trials, Format};
use demix::instance::Instance;
use demix::localize::{localize, DEFAULT_THRESHOLD};
use demix::sdp::{solve_demix, DemixProblem, SolverOptions};
use demix::signal::frequencies;
use demix::{DemixError, Result};

#[derive(Parser)]
#[command(name = "demix", version, about = "Demixing of two point-source channels by atomic norm minimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one instance and localize its sources.
    Demix(DemixArgs),
    /// Build and verify the dual certificate of an instance.
    Certify {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Success rates over K1, K2 in 1..=kmax.
    PhaseTransition {
        #[arg(long)]
        m: usize,
        #[arg(long)]
        kmax: usize,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Grid output; `.json` selects JSON, anything else CSV.
        #[arg(long)]
        out: PathBuf,
        /// Optional per-trial records (JSON or CSV by extension).
        #[arg(long)]
        trials_out: Option<PathBuf>,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Print the kernel coefficients and identity checks as CSV.
    KernelCheck {
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct DemixArgs {
    #[arg(long, conflicts_with_all = ["seed", "k1", "k2"])]
    instance: Option<PathBuf>,
    #[arg(long, requires_all = ["m", "k1", "k2"])]
    seed: Option<u64>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    k1: Option<usize>,
    #[arg(long)]
    k2: Option<usize>,
    /// Separation for generated instances; defaults to 1/(2M).
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct SolverArgs {
    #[arg(long)]
    eps_abs: Option<f64>,
    #[arg(long)]
    eps_rel: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    rho0: Option<f64>,
}

impl SolverArgs {
    fn options(&self) -> SolverOptions {
        let mut o = SolverOptions::default();
        if let Some(v) = self.eps_abs {
            o.eps_abs = v;
        }
        if let Some(v) = self.eps_rel {
            o.eps_rel = v;
        }
        if let Some(v) = self.max_iters {
            o.max_iters = v;
        }
        if let Some(v) = self.rho0 {
            o.rho0 = v;
            o.rho_min = o.rho_min.min(v);
            o.rho_max = o.rho_max.max(v);
        }
        o
    }
}

fn write_json(value: &Value, out: Option<&PathBuf>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| DemixError::Io {
            path: path.clone(),
            source: e,
        }),
        None => {
            let _ = std::io::stdout().write_all(text.as_bytes());
            Ok(())
        }
    }
}

/// Returns whether the solve converged.
fn cmd_demix(args: &DemixArgs) -> Result<bool> {
    let inst = match (&args.instance, args.seed) {
        (Some(path), _) => Instance::read(path)?,
        (None, Some(seed)) => {
            let m = args.m.unwrap_or(0);
            if m < 1 {
                return Err(DemixError::Parameter("--m must be at least 1".into()));
            }
            let delta = args.delta.unwrap_or(1.0 / (2.0 * m as f64));
            Instance::generate(seed, m, args.k1.unwrap_or(0), args.k2.unwrap_or(0), delta)?
        }
        (None, None) => return Err(DemixError::Parameter("either --instance or --seed is required".into())),
    };
    let (meas, _, _) = inst.measurement()?;
    let prob = DemixProblem::from_measurement(&meas)?;
    let sol = solve_demix(&prob, &args.solver.options())?;
    let localization = if sol.dual_reliable {
        let loc = localize(&prob.y, &prob.g, &sol.p, DEFAULT_THRESHOLD, 64 * prob.m)?;
        json!({
            "taus1": loc.taus1,
            "amps1": loc.amps1,
            "taus2": loc.taus2,
            "amps2": loc.amps2,
            "residual": loc.residual,
            "peak_values1": loc.peak_values1,
            "peak_values2": loc.peak_values2,
            "rank_deficient": loc.rank_deficient,
        })
    } else {
        Value::Null
    };
    let mut report = json!({
        "M": prob.m,
        "x1": sol.x1,
        "x2": sol.x2,
        "objective": sol.objective,
        "dual_objective": sol.dual_objective,
        "residuals": {
            "primal": sol.primal_residual,
            "dual": sol.dual_residual,
            "measurement": sol.measurement_residual,
            "duality_gap": sol.duality_gap(),
        },
        "iterations": sol.iterations,
        "converged": sol.converged,
        "rho": sol.rho,
        "p": sol.p,
        "localization": localization,
    });
    if args.instance.is_none() {
        report["instance"] = serde_json::to_value(&inst)?;
    }
    write_json(&report, args.out.as_ref())?;
    Ok(sol.converged)
}

fn cmd_certify(instance: &PathBuf, out: Option<&PathBuf>) -> Result<bool> {
    let inst = Instance::read(instance)?;
    let (m1, m2) = (inst.model(1)?, inst.model(2)?);
    let psf = inst.psf()?;
    let kern = FejerKernel::new(inst.m)?;
    let (taus1, taus2) = (m1.taus(), m2.taus());
    let (signs1, signs2) = (m1.signs(), m2.signs());
    let (sys, dual) = construct_certificate(&kern, &psf, &taus1, &signs1, &taus2, &signs2)?;
    let report = verify_certificate(&dual, &taus1, &taus2, &signs1, &signs2, &VerifyOptions::for_bandwidth(inst.m))?;
    let norms = invertibility_diagnostics(&sys)?;
    let mut value = serde_json::to_value(&report)?;
    value["norms"] = serde_json::to_value(&norms)?;
    value["condition"] = json!(sys.coefficients().map(|c| c.condition));
    write_json(&value, out)?;
    Ok(true)
}

fn cmd_phase_transition(
    m: usize,
    kmax: usize,
    trials: usize,
    seed: u64,
    out: &PathBuf,
    trials_out: Option<&PathBuf>,
    solver: &SolverArgs,
) -> Result<bool> {
    if m < 1 {
        return Err(DemixError::Parameter("--m must be at least 1".into()));
    }
    let (grid, results) = run_phase_transition_detailed(m, kmax, trials, seed, solver.options())?;
    emit_grid(&grid, out, Format::from_path(out))?;
    if let Some(path) = trials_out {
        emit_trials(&results, path, Format::from_path(path))?;
    }
    Ok(true)
}

fn cmd_kernel_check(m: usize, seed: u64) -> Result<bool> {
    let kern = FejerKernel::new(m)?;
    let mut text = String::from("n,s_n\n");
    for (n, s) in frequencies(m).zip(kern.coefficients()) {
        text.push_str(&format!("{n},{s}\n"));
    }
    text.push_str("\ncheck,value,tolerance,pass\n");
    let checks = invariant_suite(&kern, 100, seed);
    for c in &checks {
        text.push_str(&format!("{},{:e},{:e},{}\n", c.name, c.value, c.tolerance, c.pass));
    }
    let _ = std::io::stdout().write_all(text.as_bytes());
    Ok(checks.iter().all(|c| c.pass))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Demix(args) => cmd_demix(&args),
        Command::Certify { instance, out } => cmd_certify(&instance, out.as_ref()),
        Command::PhaseTransition {
            m,
            kmax,
            trials,
            seed,
            out,
            trials_out,
            solver,
        } => cmd_phase_transition(m, kmax, trials, seed, &out, trials_out.as_ref(), &solver),
        Command::KernelCheck { m, seed } => cmd_kernel_check(m, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! Command-line front end for the experiment harness.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use demix_core::harness::{
    self, ExperimentKind, ExperimentSpec, TrialKey, ARTIFACT_VERSION,
};
use demix_core::model::snr_db;
use demix_core::{DemixError, EnsembleKind};
use log::info;

#[derive(Parser)]
#[command(name = "demix", version, about = "Blind deconvolution of superposed signals: experiments and single solves")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Success rates over a grid of measurement lengths.
    PhaseTransition(Common),
    /// Relative error against noise level for one cell.
    NoiseSweep(Common),
    /// Median error traces for growing condition numbers.
    KappaStudy(Common),
    /// Local isometry, regularity, robustness and operator-norm probes.
    Probes(Common),
    /// Draw one instance, solve it, and write the iteration trace.
    Solve(SolveArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment spec in JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "L")]
    l: Option<usize>,
    #[arg(long = "K")]
    k: Option<usize>,
    #[arg(long = "N")]
    n: Option<usize>,
    #[arg(long)]
    s: Option<usize>,
    /// Noise level; replaces any sigma or snr_db list in the config.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Output file (a directory for probes). Defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Record wall-clock timings. Output is then no longer byte-identical.
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    common: Common,
    /// Trial index hashed into the instance seeds.
    #[arg(long, default_value_t = 0)]
    trial: usize,
}

/// Failure classes, each with its own exit status.
enum Failure {
    Spec(String),
    Io(String),
    Solver(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Spec(_) => 1,
            Failure::Io(_) => 2,
            Failure::Solver(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Spec(m) | Failure::Io(m) | Failure::Solver(m) => m,
        }
    }
}

impl From<DemixError> for Failure {
    fn from(e: DemixError) -> Self {
        let msg = e.to_string();
        match e {
            DemixError::InvalidParameter(_)
            | DemixError::DimensionMismatch { .. }
            | DemixError::Json(_)
            | DemixError::ChecksumMismatch { .. } => Failure::Spec(msg),
            DemixError::Io(_) | DemixError::Csv(_) => Failure::Io(msg),
            DemixError::ZeroMatrix
            | DemixError::NotConverged { .. }
            | DemixError::ProjectionNotConverged { .. }
            | DemixError::StepUnderflow { .. }
            | DemixError::NonFinite { .. }
            | DemixError::RejectionFailed { .. } => Failure::Solver(msg),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

fn build_spec(args: &Common, kind: Option<ExperimentKind>) -> Result<ExperimentSpec, Failure> {
    let mut spec = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
            ExperimentSpec::from_json(&text)?
        }
        None => ExperimentSpec::new(kind.unwrap_or(ExperimentKind::NoiseSweep)),
    };
    if let Some(kind) = kind {
        if spec.experiment != kind {
            return Err(Failure::Spec(format!(
                "config describes a {:?} experiment, not {:?}",
                spec.experiment, kind
            )));
        }
    }
    if let Some(v) = args.l {
        spec.l = vec![v];
    }
    if let Some(v) = args.k {
        spec.k = vec![v];
    }
    if let Some(v) = args.n {
        spec.n = vec![v];
    }
    if let Some(v) = args.s {
        spec.s = vec![v];
    }
    if let Some(v) = args.sigma {
        spec.sigma = vec![v];
        spec.snr_db.clear();
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    if let Some(v) = args.trials {
        spec.trials = v;
    }
    if let Some(v) = &args.out {
        spec.out = Some(v.clone());
    }
    spec.record_timing |= args.timing;
    Ok(spec)
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<(), Failure> {
    match out {
        Some(path) => std::fs::write(path, bytes).map_err(|e| io_failure(path, e)),
        None => std::io::stdout()
            .lock()
            .write_all(bytes)
            .map_err(|e| Failure::Io(format!("stdout: {e}"))),
    }
}

fn run_experiment(args: &Common, kind: ExperimentKind) -> Result<(), Failure> {
    let spec = build_spec(args, Some(kind))?;
    spec.validate()?;
    info!("running {kind:?} with spec {}", spec.hash());
    let out = spec.out.as_deref();
    match kind {
        ExperimentKind::PhaseTransition => emit(out, harness::run_phase_transition(&spec)?.to_csv(&spec).as_bytes()),
        ExperimentKind::NoiseSweep => emit(out, harness::run_noise_sweep(&spec)?.to_csv(&spec).as_bytes()),
        ExperimentKind::KappaStudy => emit(out, harness::run_kappa_study(&spec)?.to_csv(&spec).as_bytes()),
        ExperimentKind::Probes => {
            let runs = harness::run_probes(&spec)?;
            match out {
                Some(dir) => {
                    for path in harness::save_probe_runs(&spec, &runs, dir)? {
                        info!("wrote {}", path.display());
                    }
                    Ok(())
                }
                None => {
                    let mut bytes = spec.provenance_header().into_bytes();
                    for run in &runs {
                        for rep in &run.reports {
                            writeln!(bytes, "# {}", run.stem(rep)).expect("vec write");
                            rep.write_csv(&mut bytes)?;
                        }
                    }
                    emit(None, &bytes)
                }
            }
        }
    }
}

fn run_solve(args: &SolveArgs) -> Result<(), Failure> {
    let mut spec = build_spec(&args.common, None)?;
    if spec.l.is_empty() {
        if let ([s], [k], [n]) = (spec.s.as_slice(), spec.k.as_slice(), spec.n.as_slice()) {
            let l = 3 * s * (k + n);
            spec.l = vec![match spec.ensemble {
                EnsembleKind::Gaussian => l,
                EnsembleKind::HadamardType => l.next_power_of_two(),
            }];
        }
    }
    let (l, s, k, n) = spec.single_cell()?;
    let sigma = spec.sigmas().first().copied().unwrap_or(0.0);
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Failure::Spec(format!("sigma must be finite and non-negative, got {sigma}")));
    }
    let profile = vec![spec.block_scale(k, n); s];
    let key = TrialKey { l, s, k, n, param: sigma, trial: args.trial };
    let inst = harness::trial_instance(&key, spec.ensemble, &profile, sigma, spec.seed)?;
    let (_, trace, init_error) = harness::solve_instance(&inst, &spec.solver, None)?;

    let mut bytes = format!(
        "# generator={} experiment=solve seed={} trial={} spec_sha256={}\n",
        ARTIFACT_VERSION,
        spec.seed,
        args.trial,
        spec.hash()
    )
    .into_bytes();
    trace.write_csv_with(&mut bytes, spec.record_timing)?;
    emit(spec.out.as_deref(), &bytes)?;
    eprintln!(
        "L={l} s={s} K={k} N={n} sigma={sigma} snr_db={:.2}: init error {:.3e}, final error {:.3e} after {} iterations ({:?})",
        snr_db(&inst),
        init_error,
        trace.final_error(),
        trace.iterations(),
        trace.stop_reason
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::PhaseTransition(a) => run_experiment(a, ExperimentKind::PhaseTransition),
        Command::NoiseSweep(a) => run_experiment(a, ExperimentKind::NoiseSweep),
        Command::KappaStudy(a) => run_experiment(a, ExperimentKind::KappaStudy),
        Command::Probes(a) => run_experiment(a, ExperimentKind::Probes),
        Command::Solve(a) => run_solve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("demix: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

//! Acceptance runner: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use demix_core::harness::{self, median, ExperimentKind, ExperimentSpec, ProbeSelection};
use demix_core::init::{default_mu, spectral_init};
use demix_core::model::relative_error;
use demix_core::probes::MAX_EPSILON;
use demix_core::{generate_instance, make_ensemble, EnsembleKind};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn oracle_suite() -> Outcome {
    let mut failed = Vec::new();
    for (name, check) in common::ORACLE_CHECKS {
        if let Err(msg) = check() {
            failed.push(format!("{name}: {msg}"));
        }
    }
    let pass = failed.is_empty();
    let detail = if pass {
        format!("{} checks", common::ORACLE_CHECKS.len())
    } else {
        failed.join("; ")
    };
    outcome(pass, detail)
}

fn cell_spec(ensemble: EnsembleKind, l: usize, s: usize, kn: usize) -> ExperimentSpec {
    let mut spec = ExperimentSpec::new(ExperimentKind::PhaseTransition);
    spec.ensemble = ensemble;
    spec.l = vec![l];
    spec.s = vec![s];
    spec.k = vec![kn];
    spec.n = vec![kn];
    spec.trials = 25;
    spec
}

fn successes(spec: &ExperimentSpec) -> usize {
    harness::run_phase_transition(spec).expect("phase transition runs").cells[0].successes
}

fn noiseless_recovery() -> Outcome {
    let two = successes(&cell_spec(EnsembleKind::Gaussian, 120, 2, 10));
    let one = successes(&cell_spec(EnsembleKind::Gaussian, 60, 1, 10));
    outcome(
        two >= 22 && one >= 22,
        format!("s=2 L=120: {two}/25, s=1 L=60: {one}/25 (need >= 22)"),
    )
}

fn hadamard_recovery() -> Outcome {
    let ok = successes(&cell_spec(EnsembleKind::HadamardType, 128, 2, 16));
    outcome(ok >= 20, format!("{ok}/25 (need >= 20)"))
}

fn noise_linearity() -> Outcome {
    let mut spec = cell_spec(EnsembleKind::Gaussian, 240, 2, 10);
    spec.experiment = ExperimentKind::NoiseSweep;
    spec.snr_db = vec![10.0, 20.0, 30.0, 40.0];
    let slope = harness::run_noise_sweep(&spec).expect("noise sweep runs").log_error_slope();
    outcome((-1.2..=-0.8).contains(&slope), format!("slope {slope:.4} (need [-1.2, -0.8])"))
}

fn condition_number_effect() -> Outcome {
    let mut spec = cell_spec(EnsembleKind::Gaussian, 240, 2, 10);
    spec.experiment = ExperimentKind::KappaStudy;
    spec.kappa = vec![1.0, 5.0];
    spec.solver.step_init = Some(1.0);
    let res = harness::run_kappa_study(&spec).expect("kappa study runs");
    let (one, five) = (
        res.curves[0].median_iters_to_threshold,
        res.curves[1].median_iters_to_threshold,
    );
    outcome(five > one, format!("median iterations kappa=1: {one}, kappa=5: {five}"))
}

fn initialization_quality() -> Outcome {
    let (l, k, n, s) = (512, 8, 8, 2);
    let mut inside = 0;
    let mut errors = Vec::new();
    for seed in 0..100u64 {
        let ens = make_ensemble(l, k, n, s, EnsembleKind::Gaussian, seed).expect("ensemble");
        let inst = generate_instance(ens, &[1.0, 1.0], 0.0, 10_000 + seed).expect("instance");
        let init = spectral_init(&inst, default_mu(l)).expect("initialization");
        let ok = init
            .d_i
            .iter()
            .zip(inst.d_i0())
            .all(|(d, d0)| (0.9 * d0..=1.1 * d0).contains(d));
        inside += ok as usize;
        errors.push(relative_error(&init.pair(), &inst));
    }
    let med = median(&errors);
    outcome(
        inside >= 95 && med <= 0.3,
        format!("d_i in band in {inside}/100 runs (need >= 95), median init error {med:.3} (need <= 0.3)"),
    )
}

fn local_rip() -> Outcome {
    let mut spec = ExperimentSpec::new(ExperimentKind::Probes);
    spec.l = vec![1024];
    spec.k = vec![8];
    spec.n = vec![8];
    spec.probes = vec![ProbeSelection::LocalRip];
    spec.epsilon = MAX_EPSILON;
    spec.samples = 100;
    let runs = harness::run_probes(&spec).expect("probes run");
    let summary = &runs[0].reports[0].summary;
    outcome(
        summary.violations == 0,
        format!(
            "{} violations over {} samples, ratio range [{:.3}, {:.3}]",
            summary.violations, summary.count, summary.min, summary.max
        ),
    )
}

fn small_spec(kind: ExperimentKind) -> ExperimentSpec {
    let mut spec = ExperimentSpec::new(kind);
    spec.l = vec![48];
    spec.k = vec![4];
    spec.n = vec![4];
    spec.trials = 4;
    spec.seed = 17;
    spec.samples = 10;
    if kind != ExperimentKind::PhaseTransition {
        spec.sigma = vec![0.05];
    }
    spec.kappa = vec![1.0, 3.0];
    spec
}

fn csv_of(kind: ExperimentKind, dir: &std::path::Path) -> Vec<u8> {
    let spec = small_spec(kind);
    match kind {
        ExperimentKind::PhaseTransition => harness::run_phase_transition(&spec).unwrap().to_csv(&spec).into_bytes(),
        ExperimentKind::NoiseSweep => harness::run_noise_sweep(&spec).unwrap().to_csv(&spec).into_bytes(),
        ExperimentKind::KappaStudy => harness::run_kappa_study(&spec).unwrap().to_csv(&spec).into_bytes(),
        ExperimentKind::Probes => {
            let runs = harness::run_probes(&spec).unwrap();
            let mut bytes = Vec::new();
            for path in harness::save_probe_runs(&spec, &runs, dir).unwrap() {
                bytes.extend(std::fs::read(path).unwrap());
            }
            bytes
        }
    }
}

fn determinism() -> Outcome {
    let kinds = [
        ExperimentKind::PhaseTransition,
        ExperimentKind::NoiseSweep,
        ExperimentKind::KappaStudy,
        ExperimentKind::Probes,
    ];
    let mut differing = Vec::new();
    for kind in kinds {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        if csv_of(kind, a.path()) != csv_of(kind, b.path()) {
            differing.push(format!("{kind:?}"));
        }
    }
    let pass = differing.is_empty();
    let detail = if pass {
        format!("{} experiment kinds byte-identical", kinds.len())
    } else {
        format!("output differs for {}", differing.join(", "))
    };
    outcome(pass, detail)
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome, u64); 8] = [
        ("1 exactness oracles", oracle_suite, 10),
        ("2 noiseless recovery", noiseless_recovery, 120),
        ("3 hadamard-type recovery", hadamard_recovery, 120),
        ("4 noise linearity", noise_linearity, 300),
        ("5 condition-number effect", condition_number_effect, 180),
        ("6 initialization quality", initialization_quality, 60),
        ("7 local rip probe", local_rip, 60),
        ("8 determinism", determinism, 60),
    ];
    let mut failures = 0;
    for (name, run, limit) in criteria {
        let start = Instant::now();
        let res = run();
        let elapsed = start.elapsed();
        let in_time = elapsed < Duration::from_secs(limit);
        let pass = res.pass && in_time;
        failures += !pass as usize;
        println!(
            "{} criterion {name}: {} [{:.1}s, limit {limit}s]",
            if pass { "PASS" } else { "FAIL" },
            res.detail,
            elapsed.as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failures} failed", criteria.len() - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

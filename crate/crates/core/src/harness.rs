//! Seeded Monte-Carlo experiments: phase-transition grids, noise sweeps,
//! condition-number studies and probe runs, with CSV output.
//!
//! Every trial draws its ensemble and instance from seeds hashed from the
//! master seed and the trial's coordinates, so output is byte-identical across
//! runs regardless of thread scheduling.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DemixError, Result};
use crate::init::{default_mu, spectral_init_with, InitOptions};
use crate::model::{generate_instance, relative_error, snr_db, ProblemInstance};
use crate::operators::{make_ensemble, EnsembleKind};
use crate::probes::{self, NeighborhoodSpec, ProbeReport};
use crate::rng;
use crate::solver::{descend, SolverConfig, SolverTrace};

pub const ARTIFACT_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), "/", env!("CARGO_PKG_VERSION"));

pub const PHASE_HEADER: &str = "L,s,K,N,trials,successes,median_rel_error,median_iters,median_ms";
pub const NOISE_HEADER: &str = "sigma,snr_db,trial,rel_error,iters";
pub const KAPPA_HEADER: &str = "kappa,iter,median_rel_error";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    PhaseTransition,
    NoiseSweep,
    KappaStudy,
    Probes,
}

/// Optional replacements for the solver defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOverrides {
    pub mu: Option<f64>,
    pub rho: Option<f64>,
    pub step_init: Option<f64>,
    pub backtracking: Option<bool>,
    pub shrink: Option<f64>,
    pub sufficient_decrease: Option<f64>,
    pub max_iters: Option<usize>,
    pub stop_tol: Option<f64>,
}

impl SolverOverrides {
    fn apply(&self, cfg: &mut SolverConfig) {
        if let Some(v) = self.mu {
            cfg.mu = v;
        }
        if let Some(v) = self.rho {
            cfg.rho = v;
        }
        if let Some(v) = self.step_init {
            cfg.step_init = v;
        }
        if let Some(v) = self.backtracking {
            cfg.backtracking = v;
        }
        if let Some(v) = self.shrink {
            cfg.shrink = v;
        }
        if let Some(v) = self.sufficient_decrease {
            cfg.sufficient_decrease = v;
        }
        if let Some(v) = self.max_iters {
            cfg.max_iters = v;
        }
        if let Some(v) = self.stop_tol {
            cfg.stop_tol = v;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSelection {
    LocalRip,
    Regularity,
    Robustness,
    OperatorNorm,
}

/// Configuration of one experiment, read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub experiment: ExperimentKind,
    /// Measurement lengths. Empty means the default grid
    /// `round(c s (K + N))`, `c = 0.5, 0.75, ..., 4`.
    #[serde(rename = "L", default)]
    pub l: Vec<usize>,
    #[serde(default = "default_s")]
    pub s: Vec<usize>,
    #[serde(rename = "K", default = "default_dim")]
    pub k: Vec<usize>,
    #[serde(rename = "N", default = "default_dim")]
    pub n: Vec<usize>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub ensemble: EnsembleKind,
    /// Noise levels. Ignored when `snr_db` is given.
    #[serde(default)]
    pub sigma: Vec<f64>,
    /// Target SNRs in dB, converted to `sigma = 10^(-snr/20)`.
    #[serde(default)]
    pub snr_db: Vec<f64>,
    #[serde(default = "default_kappa")]
    pub kappa: Vec<f64>,
    /// Common block scale `d_i0`; defaults to `sqrt(K N)`, the typical size of
    /// a pair of standard Gaussian vectors.
    #[serde(default)]
    pub scale: Option<f64>,
    #[serde(default)]
    pub solver: SolverOverrides,
    #[serde(default = "default_threshold")]
    pub success_threshold: f64,
    #[serde(default)]
    pub seed: u64,
    /// Fills the `median_ms` column. Off by default because wall-clock time
    /// breaks byte-identical output.
    #[serde(default)]
    pub record_timing: bool,
    #[serde(default = "default_probe_list")]
    pub probes: Vec<ProbeSelection>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

fn default_s() -> Vec<usize> {
    vec![2]
}
fn default_dim() -> Vec<usize> {
    vec![10]
}
fn default_trials() -> usize {
    25
}
fn default_kappa() -> Vec<f64> {
    vec![1.0, 2.0, 5.0]
}
fn default_threshold() -> f64 {
    1e-3
}
fn default_probe_list() -> Vec<ProbeSelection> {
    vec![
        ProbeSelection::LocalRip,
        ProbeSelection::Regularity,
        ProbeSelection::Robustness,
        ProbeSelection::OperatorNorm,
    ]
}
fn default_epsilon() -> f64 {
    probes::MAX_EPSILON
}
fn default_samples() -> usize {
    100
}

fn invalid(msg: impl Into<String>) -> DemixError {
    DemixError::InvalidParameter(msg.into())
}

impl ExperimentSpec {
    pub fn new(experiment: ExperimentKind) -> Self {
        Self {
            experiment,
            l: Vec::new(),
            s: default_s(),
            k: default_dim(),
            n: default_dim(),
            trials: default_trials(),
            ensemble: EnsembleKind::Gaussian,
            sigma: Vec::new(),
            snr_db: Vec::new(),
            kappa: default_kappa(),
            scale: None,
            solver: SolverOverrides::default(),
            success_threshold: default_threshold(),
            seed: 0,
            record_timing: false,
            probes: default_probe_list(),
            epsilon: default_epsilon(),
            samples: default_samples(),
            out: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| invalid(format!("bad experiment spec: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the canonical JSON of the spec without its output path.
    pub fn hash(&self) -> String {
        let mut bare = self.clone();
        bare.out = None;
        let bytes = serde_json::to_vec(&bare).expect("spec serializes");
        rng::sha256_hex(&bytes)
    }

    /// Noise levels after resolving `snr_db`.
    pub fn sigmas(&self) -> Vec<f64> {
        if self.snr_db.is_empty() {
            self.sigma.clone()
        } else {
            self.snr_db.iter().map(|snr| 10f64.powf(-snr / 20.0)).collect()
        }
    }

    /// Measurement lengths for one `(s, K, N)` combination.
    pub fn l_grid(&self, s: usize, k: usize, n: usize) -> Vec<usize> {
        if !self.l.is_empty() {
            return self.l.clone();
        }
        let base = (s * (k + n)) as f64;
        let mut grid: Vec<usize> = (2..=16)
            .map(|q| (q as f64 * 0.25 * base).round() as usize)
            .map(|l| match self.ensemble {
                EnsembleKind::Gaussian => l,
                EnsembleKind::HadamardType => l.next_power_of_two(),
            })
            .collect();
        grid.dedup();
        grid
    }

    pub fn validate(&self) -> Result<()> {
        if self.s.is_empty() || self.k.is_empty() || self.n.is_empty() {
            return Err(invalid("dimension grids must be non-empty"));
        }
        if self.trials == 0 {
            return Err(invalid("trials must be at least 1"));
        }
        let dims = self.s.iter().chain(&self.k).chain(&self.n).chain(&self.l);
        if dims.clone().any(|&d| d == 0) {
            return Err(invalid("dimensions must be positive"));
        }
        if self.ensemble == EnsembleKind::HadamardType {
            let bad = self.l.iter().chain(&self.n).find(|d| !d.is_power_of_two());
            if let Some(d) = bad {
                return Err(invalid(format!(
                    "Hadamard-type ensembles need powers of two for L and N, got {d}"
                )));
            }
        }
        if !(self.success_threshold > 0.0) {
            return Err(invalid("success threshold must be positive"));
        }
        if self.sigma.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(invalid("noise levels must be finite and non-negative"));
        }
        if self.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(invalid("SNR values must be finite"));
        }
        if let Some(scale) = self.scale {
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(invalid("scale must be positive"));
            }
        }
        match self.experiment {
            ExperimentKind::PhaseTransition => {
                if self.sigmas().iter().any(|&s| s != 0.0) {
                    return Err(invalid("phase-transition grids are noiseless"));
                }
            }
            ExperimentKind::NoiseSweep => {
                if self.sigmas().is_empty() {
                    return Err(invalid("noise sweep needs sigma or snr_db values"));
                }
                self.single_cell()?;
            }
            ExperimentKind::KappaStudy => {
                if self.kappa.is_empty() || self.kappa.iter().any(|k| !(*k >= 1.0 && k.is_finite())) {
                    return Err(invalid("kappa values must be finite and at least 1"));
                }
                self.single_cell()?;
            }
            ExperimentKind::Probes => {
                NeighborhoodSpec::new(self.epsilon, 1.0)?;
                if self.probes.is_empty() {
                    return Err(invalid("no probes selected"));
                }
                if self.samples == 0 {
                    return Err(invalid("samples must be at least 1"));
                }
            }
        }
        Ok(())
    }

    pub fn single_cell(&self) -> Result<(usize, usize, usize, usize)> {
        if self.l.len() != 1 || self.s.len() != 1 || self.k.len() != 1 || self.n.len() != 1 {
            return Err(invalid(
                "this experiment needs exactly one value each of L, s, K and N",
            ));
        }
        Ok((self.l[0], self.s[0], self.k[0], self.n[0]))
    }

    /// Common block scale `d_i0` for a `(K, N)` cell.
    pub fn block_scale(&self, k: usize, n: usize) -> f64 {
        self.scale.unwrap_or(((k * n) as f64).sqrt())
    }

    /// Comment lines placed at the top of every output file.
    pub fn provenance_header(&self) -> String {
        let kind = serde_json::to_value(self.experiment).expect("kind serializes");
        format!(
            "# generator={} experiment={} seed={} spec_sha256={}\n",
            ARTIFACT_VERSION,
            kind.as_str().unwrap_or_default(),
            self.seed,
            self.hash()
        )
    }
}

/// Coordinates of one trial, hashed into its seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialKey {
    pub l: usize,
    pub s: usize,
    pub k: usize,
    pub n: usize,
    /// Noise level or condition number, by experiment.
    pub param: f64,
    pub trial: usize,
}

impl TrialKey {
    fn seeds(&self, master: u64) -> (u64, u64) {
        let coords = [
            self.l as u64,
            self.s as u64,
            self.k as u64,
            self.n as u64,
            self.param.to_bits(),
            self.trial as u64,
        ];
        let mut a = vec![0u64];
        a.extend_from_slice(&coords);
        let mut b = vec![1u64];
        b.extend_from_slice(&coords);
        (rng::derive_seed(master, &a), rng::derive_seed(master, &b))
    }
}

/// Result of one init-plus-descent run.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub key: TrialKey,
    pub rel_error: f64,
    pub iters: usize,
    pub ms: f64,
    pub snr_db: f64,
    pub init_error: f64,
    pub trace: Option<SolverTrace>,
    pub error: Option<String>,
}

impl TrialOutcome {
    pub fn success(&self, threshold: f64) -> bool {
        self.error.is_none() && self.rel_error <= threshold
    }
}

/// Builds the instance for one trial.
pub fn trial_instance(
    key: &TrialKey,
    kind: EnsembleKind,
    profile: &[f64],
    sigma: f64,
    master: u64,
) -> Result<ProblemInstance> {
    let (ens_seed, inst_seed) = key.seeds(master);
    let ens = make_ensemble(key.l, key.k, key.n, key.s, kind, ens_seed)?;
    generate_instance(ens, profile, sigma, inst_seed)
}

/// Initializes and descends on one instance with the spec's overrides.
pub fn solve_instance(
    inst: &ProblemInstance,
    overrides: &SolverOverrides,
    default_step: Option<f64>,
) -> Result<(crate::BlockPair, SolverTrace, f64)> {
    let l = inst.ensemble().l();
    let mu = overrides.mu.unwrap_or_else(|| default_mu(l));
    let init = spectral_init_with(inst, mu, InitOptions::default())?;
    let init_error = relative_error(&init.pair(), inst);
    let sigma = (inst.sigma() > 0.0).then_some(inst.sigma());
    let mut cfg = SolverConfig::from_init(&init, inst, sigma);
    cfg.mu = mu;
    if let Some(step) = default_step {
        cfg.step_init = step;
    }
    overrides.apply(&mut cfg);
    let (z, trace) = descend(&init, inst, &cfg)?;
    Ok((z, trace, init_error))
}

fn run_trial(
    key: TrialKey,
    spec: &ExperimentSpec,
    profile: &[f64],
    sigma: f64,
    default_step: Option<f64>,
    keep_trace: bool,
) -> TrialOutcome {
    let clock = Instant::now();
    let result = trial_instance(&key, spec.ensemble, profile, sigma, spec.seed).and_then(|inst| {
        let (_, trace, init_error) = solve_instance(&inst, &spec.solver, default_step)?;
        Ok((snr_db(&inst), trace, init_error))
    });
    let ms = clock.elapsed().as_secs_f64() * 1e3;
    match result {
        Ok((snr, trace, init_error)) => TrialOutcome {
            key,
            rel_error: trace.final_error(),
            iters: trace.iterations(),
            ms,
            snr_db: snr,
            init_error,
            trace: keep_trace.then_some(trace),
            error: None,
        },
        Err(e) => {
            warn!("trial {key:?} failed: {e}");
            TrialOutcome {
                key,
                rel_error: f64::INFINITY,
                iters: 0,
                ms,
                snr_db: f64::NAN,
                init_error: f64::NAN,
                trace: None,
                error: Some(e.to_string()),
            }
        }
    }
}

fn run_trials(
    spec: &ExperimentSpec,
    base: TrialKey,
    profile: &[f64],
    sigma: f64,
    default_step: Option<f64>,
    keep_trace: bool,
) -> Vec<TrialOutcome> {
    (0..spec.trials)
        .into_par_iter()
        .map(|trial| {
            let key = TrialKey { trial, ..base };
            run_trial(key, spec, profile, sigma, default_step, keep_trace)
        })
        .collect()
}

/// Median with the mean of the two middle values for even counts; `NaN` when
/// empty.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// One `(L, s, K, N)` cell of a phase-transition grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    #[serde(rename = "L")]
    pub l: usize,
    pub s: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub trials: usize,
    pub successes: usize,
    pub median_rel_error: f64,
    pub median_iters: f64,
    pub median_ms: Option<f64>,
}

impl CellResult {
    pub fn success_rate(&self) -> f64 {
        self.successes as f64 / self.trials as f64
    }
}

fn fmt_float(v: f64) -> String {
    format!("{v:e}")
}

#[derive(Debug, Clone)]
pub struct PhaseTransitionResult {
    pub cells: Vec<CellResult>,
    pub outcomes: Vec<Vec<TrialOutcome>>,
}

impl PhaseTransitionResult {
    pub fn to_csv(&self, spec: &ExperimentSpec) -> String {
        let mut out = spec.provenance_header();
        out.push_str(PHASE_HEADER);
        out.push('\n');
        for c in &self.cells {
            let ms = c.median_ms.map(|m| format!("{m:.3}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                c.l,
                c.s,
                c.k,
                c.n,
                c.trials,
                c.successes,
                fmt_float(c.median_rel_error),
                c.median_iters,
                ms
            );
        }
        out
    }
}

/// Noiseless success rates over an `(L, s)` grid for every `(K, N)`.
/// Cells run one after another; trials within a cell run in parallel.
pub fn run_phase_transition(spec: &ExperimentSpec) -> Result<PhaseTransitionResult> {
    spec.validate()?;
    let mut cells = Vec::new();
    let mut outcomes = Vec::new();
    for &k in &spec.k {
        for &n in &spec.n {
            for &s in &spec.s {
                let profile = vec![spec.block_scale(k, n); s];
                for l in spec.l_grid(s, k, n) {
                    let base = TrialKey { l, s, k, n, param: 0.0, trial: 0 };
                    let runs = run_trials(spec, base, &profile, 0.0, None, false);
                    let errors: Vec<f64> = runs.iter().map(|o| o.rel_error).collect();
                    let iters: Vec<f64> = runs.iter().map(|o| o.iters as f64).collect();
                    let ms: Vec<f64> = runs.iter().map(|o| o.ms).collect();
                    let cell = CellResult {
                        l,
                        s,
                        k,
                        n,
                        trials: spec.trials,
                        successes: runs.iter().filter(|o| o.success(spec.success_threshold)).count(),
                        median_rel_error: median(&errors),
                        median_iters: median(&iters),
                        median_ms: spec.record_timing.then(|| median(&ms)),
                    };
                    info!(
                        "cell L={l} s={s} K={k} N={n}: {}/{} successes",
                        cell.successes, cell.trials
                    );
                    cells.push(cell);
                    outcomes.push(runs);
                }
            }
        }
    }
    Ok(PhaseTransitionResult { cells, outcomes })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseLevelSummary {
    pub sigma: f64,
    pub median_snr_db: f64,
    pub median_rel_error: f64,
    pub median_iters: f64,
}

#[derive(Debug, Clone)]
pub struct NoiseSweepResult {
    pub levels: Vec<NoiseLevelSummary>,
    pub outcomes: Vec<Vec<TrialOutcome>>,
}

impl NoiseSweepResult {
    /// Per-trial rows followed, for every noise level, by a row whose `trial`
    /// column reads `median`.
    pub fn to_csv(&self, spec: &ExperimentSpec) -> String {
        let mut out = spec.provenance_header();
        out.push_str(NOISE_HEADER);
        out.push('\n');
        for (level, runs) in self.levels.iter().zip(&self.outcomes) {
            for o in runs {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    fmt_float(level.sigma),
                    fmt_float(o.snr_db),
                    o.key.trial,
                    fmt_float(o.rel_error),
                    o.iters
                );
            }
            let _ = writeln!(
                out,
                "{},{},median,{},{}",
                fmt_float(level.sigma),
                fmt_float(level.median_snr_db),
                fmt_float(level.median_rel_error),
                level.median_iters
            );
        }
        out
    }

    /// Least-squares slope of `20 log10(median delta)` against median SNR.
    pub fn log_error_slope(&self) -> f64 {
        let pts: Vec<(f64, f64)> = self
            .levels
            .iter()
            .filter(|l| l.median_snr_db.is_finite() && l.median_rel_error > 0.0)
            .map(|l| (l.median_snr_db, 20.0 * l.median_rel_error.log10()))
            .collect();
        least_squares_slope(&pts)
    }
}

pub fn least_squares_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

pub fn run_noise_sweep(spec: &ExperimentSpec) -> Result<NoiseSweepResult> {
    spec.validate()?;
    let (l, s, k, n) = spec.single_cell()?;
    let profile = vec![spec.block_scale(k, n); s];
    let mut levels = Vec::new();
    let mut outcomes = Vec::new();
    for sigma in spec.sigmas() {
        let base = TrialKey { l, s, k, n, param: sigma, trial: 0 };
        let runs = run_trials(spec, base, &profile, sigma, None, false);
        let pick = |f: fn(&TrialOutcome) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>());
        levels.push(NoiseLevelSummary {
            sigma,
            median_snr_db: pick(|o| o.snr_db),
            median_rel_error: pick(|o| o.rel_error),
            median_iters: pick(|o| o.iters as f64),
        });
        info!("sigma={sigma}: median error {}", levels.last().unwrap().median_rel_error);
        outcomes.push(runs);
    }
    Ok(NoiseSweepResult { levels, outcomes })
}

#[derive(Debug, Clone)]
pub struct KappaCurve {
    pub kappa: f64,
    /// Median relative error after `t` iterations, `t = 0..=max_iters`.
    pub median_errors: Vec<f64>,
    /// Median first iteration reaching the success threshold; runs that never
    /// reach it count as `+inf`.
    pub median_iters_to_threshold: f64,
}

#[derive(Debug, Clone)]
pub struct KappaStudyResult {
    pub curves: Vec<KappaCurve>,
    pub outcomes: Vec<Vec<TrialOutcome>>,
}

impl KappaStudyResult {
    pub fn to_csv(&self, spec: &ExperimentSpec) -> String {
        let mut out = spec.provenance_header();
        out.push_str(KAPPA_HEADER);
        out.push('\n');
        for c in &self.curves {
            for (t, e) in c.median_errors.iter().enumerate() {
                let _ = writeln!(out, "{},{},{}", c.kappa, t, fmt_float(*e));
            }
        }
        out
    }
}

/// Per-iteration median error traces for scale profiles `(1, ..., 1, kappa)`.
/// The initial stepsize defaults to 1.
pub fn run_kappa_study(spec: &ExperimentSpec) -> Result<KappaStudyResult> {
    spec.validate()?;
    let (l, s, k, n) = spec.single_cell()?;
    let sigma = spec.sigmas().first().copied().unwrap_or(0.0);
    let mut curves = Vec::new();
    let mut outcomes = Vec::new();
    for &kappa in &spec.kappa {
        let mut profile = vec![1.0; s];
        profile[s - 1] = kappa;
        let base = TrialKey { l, s, k, n, param: kappa, trial: 0 };
        let runs = run_trials(spec, base, &profile, sigma, Some(1.0), true);
        let traces: Vec<&SolverTrace> = runs.iter().filter_map(|o| o.trace.as_ref()).collect();
        let len = traces.iter().map(|t| t.rows.len()).max().unwrap_or(0);
        let median_errors = (0..len)
            .map(|t| median(&traces.iter().map(|tr| tr.error_at(t)).collect::<Vec<_>>()))
            .collect();
        let hits: Vec<f64> = runs
            .iter()
            .map(|o| {
                o.trace
                    .as_ref()
                    .and_then(|t| t.iterations_to(spec.success_threshold))
                    .map_or(f64::INFINITY, |i| i as f64)
            })
            .collect();
        curves.push(KappaCurve {
            kappa,
            median_errors,
            median_iters_to_threshold: median(&hits),
        });
        outcomes.push(runs);
    }
    Ok(KappaStudyResult { curves, outcomes })
}

/// Probe reports for every `(L, s, K, N)` cell; each cell uses trial 0's
/// instance.
#[derive(Debug, Clone)]
pub struct ProbeRun {
    pub key: TrialKey,
    pub reports: Vec<ProbeReport>,
}

impl ProbeRun {
    pub fn stem(&self, report: &ProbeReport) -> String {
        let name = serde_json::to_value(report.probe).expect("probe serializes");
        format!(
            "{}_L{}_s{}_K{}_N{}",
            name.as_str().unwrap_or_default(),
            self.key.l,
            self.key.s,
            self.key.k,
            self.key.n
        )
    }
}

pub fn run_probes(spec: &ExperimentSpec) -> Result<Vec<ProbeRun>> {
    spec.validate()?;
    let sigma = spec.sigmas().first().copied().unwrap_or(0.0);
    let mut runs = Vec::new();
    for &k in &spec.k {
        for &n in &spec.n {
            for &s in &spec.s {
                let profile = vec![spec.block_scale(k, n); s];
                for l in spec.l_grid(s, k, n) {
                    let key = TrialKey { l, s, k, n, param: sigma, trial: 0 };
                    let inst = trial_instance(&key, spec.ensemble, &profile, sigma, spec.seed)?;
                    let mut nb = NeighborhoodSpec::for_instance(&inst, spec.epsilon)?;
                    if let Some(mu) = spec.solver.mu {
                        nb.mu = mu;
                    }
                    let probe_seed = rng::derive_seed(spec.seed, &[2, l as u64, s as u64, k as u64, n as u64]);
                    let mut reports = Vec::new();
                    for p in &spec.probes {
                        reports.push(match p {
                            ProbeSelection::LocalRip => {
                                probes::probe_local_rip(&inst, &nb, spec.samples, probe_seed)?
                            }
                            ProbeSelection::Regularity => {
                                probes::probe_regularity(&inst, &nb, spec.samples, probe_seed)?
                            }
                            ProbeSelection::Robustness => probes::probe_robustness(&inst, spec.epsilon)?,
                            ProbeSelection::OperatorNorm => {
                                probes::probe_operator_norm(inst.ensemble(), 1e-8)?
                            }
                        });
                    }
                    runs.push(ProbeRun { key, reports });
                }
            }
        }
    }
    Ok(runs)
}

/// Writes probe reports as `<stem>.jsonl` and `<stem>.csv` files into `dir`,
/// each preceded by the provenance header.
pub fn save_probe_runs(spec: &ExperimentSpec, runs: &[ProbeRun], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let header = spec.provenance_header();
    let mut written = Vec::new();
    for run in runs {
        for rep in &run.reports {
            let stem = run.stem(rep);
            let mut jsonl = header.clone().into_bytes();
            rep.write_jsonl(&mut jsonl)?;
            let mut csv = header.clone().into_bytes();
            rep.write_csv(&mut csv)?;
            for (ext, bytes) in [("jsonl", jsonl), ("csv", csv)] {
                let path = dir.join(format!("{stem}.{ext}"));
                std::fs::write(&path, bytes)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

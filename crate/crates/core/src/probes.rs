//! Empirical checks of the local conditions behind the convergence analysis:
//! neighborhood membership, local RIP, local regularity, robustness of the
//! noise term and the operator-norm bound.
//!
//! Probes report, they do not assert. Out-of-regime violations are data.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DemixError, Result};
use crate::init::{leading_singular_triple, ITERATION_CAP, TRIPLE_TOL};
use crate::linalg;
use crate::model::{per_block_error, BlockPair, ProblemInstance};
use crate::operators::MeasurementEnsemble;
use crate::rng::{self, stream};
use crate::solver::{evaluate, gradient_at, SolverConfig};
use crate::C64;

/// Largest admissible neighborhood radius.
pub const MAX_EPSILON: f64 = 1.0 / 15.0;
/// Lower and upper local-RIP factors.
pub const RIP_BAND: (f64, f64) = (2.0 / 3.0, 1.5);
/// Redraws allowed per sample before giving up.
pub const REJECTION_CAP: usize = 1000;

const BISECTION_REL_TOL: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodSpec {
    pub epsilon: f64,
    pub mu: f64,
}

impl NeighborhoodSpec {
    pub fn new(epsilon: f64, mu: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon <= MAX_EPSILON) {
            return Err(DemixError::InvalidParameter(format!(
                "epsilon must lie in (0, 1/15], got {epsilon}"
            )));
        }
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(DemixError::InvalidParameter(format!("mu must be positive, got {mu}")));
        }
        Ok(Self { epsilon, mu })
    }

    /// `mu` set to the larger of the default tuning value and the truth's own
    /// incoherence, so that the truth lies in every neighborhood.
    pub fn for_instance(inst: &ProblemInstance, epsilon: f64) -> Result<Self> {
        let mu = crate::init::default_mu(inst.ensemble().l()).max(inst.incoherence_mu_h());
        Self::new(epsilon, mu)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Membership {
    /// `||h_i||, ||x_i|| <= 2 sqrt(d_i0)`.
    pub norm: bool,
    /// `sqrt(L) ||B h_i||_inf <= 4 sqrt(d_i0) mu`.
    pub incoherence: bool,
    /// `delta_i <= epsilon`.
    pub close: bool,
}

impl Membership {
    pub fn all(&self) -> bool {
        self.norm && self.incoherence && self.close
    }
}

pub fn in_neighborhoods(
    z: &BlockPair,
    inst: &ProblemInstance,
    spec: &NeighborhoodSpec,
) -> Result<Membership> {
    let ens = inst.ensemble();
    z.check_dims(ens)?;
    let root_l = (ens.l() as f64).sqrt();
    let mut m = Membership {
        norm: true,
        incoherence: true,
        close: true,
    };
    for (i, &d) in inst.d_i0().iter().enumerate() {
        let cap = 2.0 * d.sqrt();
        m.norm &= linalg::norm(z.h[i].view()) <= cap && linalg::norm(z.x[i].view()) <= cap;
        let spike = root_l * linalg::max_abs(ens.apply_b(z.h[i].view())?.view());
        m.incoherence &= spike <= 4.0 * d.sqrt() * spec.mu;
        m.close &= per_block_error(z, inst, i) <= spec.epsilon;
    }
    Ok(m)
}

fn max_block_error(z: &BlockPair, inst: &ProblemInstance) -> f64 {
    (0..z.num_blocks())
        .map(|i| per_block_error(z, inst, i))
        .fold(0.0, f64::max)
}

/// One neighborhood sample with the target it was bisected towards.
#[derive(Debug, Clone)]
pub struct NeighborhoodSample {
    pub z: BlockPair,
    pub target: f64,
    pub delta_max: f64,
}

fn perturb(truth: &BlockPair, dir: &BlockPair, r: f64) -> BlockPair {
    truth.add_scaled(r, dir)
}

fn draw_direction<R: Rng>(rng: &mut R, inst: &ProblemInstance) -> BlockPair {
    let ens = inst.ensemble();
    let mut dir = BlockPair::zeros(ens.s(), ens.k(), ens.n());
    for (i, &d) in inst.d_i0().iter().enumerate() {
        for (slot, len) in [(&mut dir.h[i], ens.k()), (&mut dir.x[i], ens.n())] {
            let g = rng::complex_normal_vec(rng, len);
            let scale = d.sqrt() / linalg::norm(g.view());
            *slot = g.mapv(|c| c * scale);
        }
    }
    dir
}

// Bisects the radius so that the largest blockwise error lands in
// [(1 - tol) target, target].
fn bisect_radius(inst: &ProblemInstance, dir: &BlockPair, target: f64) -> Option<(BlockPair, f64)> {
    let truth = inst.truth();
    let mut hi = target;
    let mut grown = 0;
    while max_block_error(&perturb(truth, dir, hi), inst) < target {
        hi *= 2.0;
        grown += 1;
        if grown > 60 {
            return None;
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let z = perturb(truth, dir, mid);
        let delta = max_block_error(&z, inst);
        if delta > target {
            hi = mid;
        } else if delta >= (1.0 - BISECTION_REL_TOL) * target {
            return Some((z, delta));
        } else {
            lo = mid;
        }
    }
    None
}

/// Draws `n_samples` points of `N_d ∩ N_mu ∩ N_eps` by perturbing the truth
/// along random directions, with the radius bisected so that
/// `max_i delta_i` hits a target drawn uniformly from `[0.2 eps, eps]`.
///
/// Sample `j` uses its own stream derived from `(seed, j)`, so the result
/// does not depend on thread scheduling.
pub fn sample_neighborhood(
    inst: &ProblemInstance,
    spec: &NeighborhoodSpec,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<NeighborhoodSample>> {
    (0..n_samples)
        .into_par_iter()
        .map(|j| sample_one(inst, spec, rng::derive_seed(seed, &[j as u64])))
        .collect()
}

fn sample_one(inst: &ProblemInstance, spec: &NeighborhoodSpec, seed: u64) -> Result<NeighborhoodSample> {
    let mut rng = rng::stream_rng(seed, stream::SAMPLER);
    let target = rng.random_range(0.2 * spec.epsilon..=spec.epsilon);
    for _ in 0..REJECTION_CAP {
        let dir = draw_direction(&mut rng, inst);
        let Some((z, delta_max)) = bisect_radius(inst, &dir, target) else {
            continue;
        };
        if delta_max > 0.0 && in_neighborhoods(&z, inst, spec)?.all() {
            return Ok(NeighborhoodSample { z, target, delta_max });
        }
    }
    Err(DemixError::RejectionFailed {
        attempts: REJECTION_CAP,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    LocalRip,
    Regularity,
    Robustness,
    OperatorNorm,
}

/// Dimensions and seeds needed to reproduce a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub s: usize,
    pub kind: String,
    pub ensemble_seed: Option<u64>,
    pub instance_seed: Option<u64>,
    pub probe_seed: Option<u64>,
    pub sigma: f64,
    pub mu: Option<f64>,
    pub epsilon: Option<f64>,
}

impl Provenance {
    fn new(ens: &MeasurementEnsemble, inst: Option<&ProblemInstance>) -> Self {
        Self {
            l: ens.l(),
            k: ens.k(),
            n: ens.n(),
            s: ens.s(),
            kind: ens.kind().to_string(),
            ensemble_seed: ens.seed(),
            instance_seed: inst.and_then(|i| i.seed()),
            probe_seed: None,
            sigma: inst.map_or(0.0, |i| i.sigma()),
            mu: None,
            epsilon: None,
        }
    }

    fn with_spec(mut self, spec: &NeighborhoodSpec, seed: u64) -> Self {
        self.mu = Some(spec.mu);
        self.epsilon = Some(spec.epsilon);
        self.probe_seed = Some(seed);
        self
    }
}

/// One probed quantity: passes iff `lower <= value <= upper`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub index: usize,
    /// `max_i delta_i` of the sample, or `NaN` when not sample based.
    pub delta: f64,
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
    pub pass: bool,
}

impl ProbeRecord {
    fn new(index: usize, delta: f64, value: f64, lower: f64, upper: f64) -> Self {
        Self {
            index,
            delta,
            value,
            lower,
            upper,
            pass: value >= lower && value <= upper,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub count: usize,
    pub violations: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probe: ProbeKind,
    pub provenance: Provenance,
    pub records: Vec<ProbeRecord>,
    pub summary: ProbeSummary,
}

pub const REPORT_CSV_HEADER: &str = "probe,index,delta,value,lower,upper,pass";

impl ProbeReport {
    fn new(probe: ProbeKind, provenance: Provenance, records: Vec<ProbeRecord>) -> Self {
        let count = records.len();
        let violations = records.iter().filter(|r| !r.pass).count();
        let (min, max, sum) = records.iter().fold(
            (f64::INFINITY, f64::NEG_INFINITY, 0.0),
            |(lo, hi, sum), r| (lo.min(r.value), hi.max(r.value), sum + r.value),
        );
        let summary = ProbeSummary {
            count,
            violations,
            min,
            max,
            mean: if count > 0 { sum / count as f64 } else { f64::NAN },
            pass: violations == 0,
        };
        Self {
            probe,
            provenance,
            records,
            summary,
        }
    }

    /// One JSON object per record, then a summary line carrying provenance.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, &serde_json::json!({ "probe": self.probe, "record": r }))?;
            writeln!(out)?;
        }
        let summary = serde_json::json!({
            "probe": self.probe,
            "provenance": self.provenance,
            "summary": self.summary,
        });
        serde_json::to_writer(&mut out, &summary)?;
        writeln!(out)?;
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        w.write_record(REPORT_CSV_HEADER.split(','))?;
        let probe = serde_json::to_value(self.probe)?;
        let probe = probe.as_str().unwrap_or_default().to_string();
        for r in &self.records {
            w.write_record([
                probe.clone(),
                r.index.to_string(),
                r.delta.to_string(),
                r.value.to_string(),
                r.lower.to_string(),
                r.upper.to_string(),
                r.pass.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `<stem>.jsonl` and `<stem>.csv` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let jsonl = std::fs::File::create(dir.join(format!("{stem}.jsonl")))?;
        self.write_jsonl(std::io::BufWriter::new(jsonl))?;
        let csv = std::fs::File::create(dir.join(format!("{stem}.csv")))?;
        self.write_csv(std::io::BufWriter::new(csv))
    }
}

/// Ratio `||A(X - X0)||^2 / ||X - X0||_F^2` for one point.
pub fn rip_ratio(z: &BlockPair, inst: &ProblemInstance) -> Result<f64> {
    let ens = inst.ensemble();
    let diff = z.lift().combine(C64::new(1.0, 0.0), &inst.truth().lift(), C64::new(-1.0, 0.0));
    let den = diff.frobenius_norm().powi(2);
    let num = linalg::norm_sqr(ens.forward(&diff)?.view());
    Ok(num / den)
}

pub fn probe_local_rip(
    inst: &ProblemInstance,
    spec: &NeighborhoodSpec,
    n_samples: usize,
    seed: u64,
) -> Result<ProbeReport> {
    let samples = sample_neighborhood(inst, spec, n_samples, seed)?;
    let records = samples
        .par_iter()
        .enumerate()
        .map(|(j, s)| {
            let ratio = rip_ratio(&s.z, inst)?;
            Ok(ProbeRecord::new(j, s.delta_max, ratio, RIP_BAND.0, RIP_BAND.1))
        })
        .collect::<Result<Vec<_>>>()?;
    let prov = Provenance::new(inst.ensemble(), Some(inst)).with_spec(spec, seed);
    Ok(ProbeReport::new(ProbeKind::LocalRip, prov, records))
}

/// Spectral norms `||A_i^*(e)||` of every block of the adjoint applied to the
/// noise.
pub fn noise_block_norms(inst: &ProblemInstance) -> Result<Vec<f64>> {
    let ens = inst.ensemble();
    let e = inst.noise();
    (0..ens.s())
        .map(|i| {
            let m = ens.lift_adjoint_i(e.view(), i)?;
            if m.iter().all(|c| *c == C64::new(0.0, 0.0)) {
                return Ok(0.0);
            }
            Ok(leading_singular_triple(m.view(), TRIPLE_TOL, ITERATION_CAP)?.value)
        })
        .collect()
}

/// The constants `(omega, c)` of the regularity inequality
/// `||grad F̃(z)||^2 >= omega [F̃(z) - c]_+`.
pub fn regularity_constants(inst: &ProblemInstance) -> Result<(f64, f64)> {
    let s = inst.ensemble().s() as f64;
    let adj = noise_block_norms(inst)?.into_iter().fold(0.0, f64::max);
    let omega = inst.d0() / 7000.0;
    let c = linalg::norm_sqr(inst.noise().view()) + 2000.0 * s * adj * adj;
    Ok((omega, c))
}

/// Objective configuration used by the regularity probe: true scales and
/// `rho = d0^2 + 2 ||e||^2`.
pub fn oracle_config(inst: &ProblemInstance, spec: &NeighborhoodSpec) -> SolverConfig {
    let e2 = linalg::norm_sqr(inst.noise().view());
    SolverConfig {
        mu: spec.mu,
        rho: inst.d0() * inst.d0() + 2.0 * e2,
        d_i: inst.d_i0().to_vec(),
        d: inst.d0(),
        step_init: 1.0,
        backtracking: true,
        shrink: 0.5,
        sufficient_decrease: 0.0,
        max_iters: 0,
        stop_tol: 0.0,
    }
}

/// Records `value = ||grad F̃||^2` against `lower = omega [F̃ - c]_+`.
pub fn probe_regularity(
    inst: &ProblemInstance,
    spec: &NeighborhoodSpec,
    n_samples: usize,
    seed: u64,
) -> Result<ProbeReport> {
    let (omega, c) = regularity_constants(inst)?;
    let cfg = oracle_config(inst, spec);
    let samples = sample_neighborhood(inst, spec, n_samples, seed)?;
    let records = samples
        .par_iter()
        .enumerate()
        .map(|(j, s)| {
            let ev = evaluate(&s.z, inst, &cfg)?;
            let g = gradient_at(&s.z, &ev, inst, &cfg)?;
            let rhs = omega * (ev.objective() - c).max(0.0);
            Ok(ProbeRecord::new(j, s.delta_max, g.norm_sqr(), rhs, f64::INFINITY))
        })
        .collect::<Result<Vec<_>>>()?;
    let prov = Provenance::new(inst.ensemble(), Some(inst)).with_spec(spec, seed);
    Ok(ProbeReport::new(ProbeKind::Regularity, prov, records))
}

/// `eps d0 / (10 sqrt(2) s kappa)`.
pub fn robustness_bound(inst: &ProblemInstance, epsilon: f64) -> f64 {
    let s = inst.ensemble().s() as f64;
    epsilon * inst.d0() / (10.0 * 2f64.sqrt() * s * inst.kappa())
}

/// One record per source: `||A_i^*(e)||` against the robustness bound.
pub fn probe_robustness(inst: &ProblemInstance, epsilon: f64) -> Result<ProbeReport> {
    let bound = robustness_bound(inst, epsilon);
    let records = noise_block_norms(inst)?
        .into_iter()
        .enumerate()
        .map(|(i, v)| ProbeRecord::new(i, f64::NAN, v, 0.0, bound))
        .collect();
    let mut prov = Provenance::new(inst.ensemble(), Some(inst));
    prov.epsilon = Some(epsilon);
    Ok(ProbeReport::new(ProbeKind::Robustness, prov, records))
}

/// `sqrt(s (N ln(NL/2) + c ln L))`, where `c` collects the failure-probability
/// exponent and the `ln s` term.
pub fn operator_norm_bound(l: usize, n: usize, s: usize, log_coeff: f64) -> f64 {
    let (l, n, s) = (l as f64, n as f64, s as f64);
    (s * (n * (n * l / 2.0).ln() + log_coeff * l.ln())).sqrt()
}

pub const OPERATOR_NORM_LOG_COEFF: f64 = 2.0;

pub fn probe_operator_norm(ens: &MeasurementEnsemble, tol: f64) -> Result<ProbeReport> {
    let est = ens.operator_norm_estimate(tol)?;
    let bound = operator_norm_bound(ens.l(), ens.n(), ens.s(), OPERATOR_NORM_LOG_COEFF);
    let records = vec![ProbeRecord::new(0, f64::NAN, est, 0.0, bound)];
    Ok(ProbeReport::new(ProbeKind::OperatorNorm, Provenance::new(ens, None), records))
}

/// Blockwise copy of `z` with `h_i` scaled by `alpha` and `x_i` by `1/alpha`.
pub fn rescale_blocks(z: &BlockPair, alpha: f64) -> BlockPair {
    BlockPair {
        h: z.h.iter().map(|h| h.mapv(|c| c * alpha)).collect(),
        x: z.x.iter().map(|x| x.mapv(|c| c / alpha)).collect(),
    }
}

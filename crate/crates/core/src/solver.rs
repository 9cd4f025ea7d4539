//! Regularized objective, Wirtinger gradients and gradient descent.
//!
//! The objective is `F~ = F + G` with the least-squares misfit
//! `F(h, x) = ||A(H(h, x)) - y||^2` and the penalty
//!
//! ```text
//! G = rho * sum_i [ G0(||h_i||^2 / 2d_i) + G0(||x_i||^2 / 2d_i)
//!                   + sum_l G0(L |b_l^* h_i|^2 / (8 d_i mu^2)) ],   G0(z) = max(z - 1, 0)^2
//! ```
//!
//! Gradients are taken with respect to the conjugated variables, so that
//! `F~(z + t w) - F~(z) = 2 t Re<w, grad F~(z)> + O(t^2)`.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{DemixError, Result};
use crate::init::{default_mu, InitOutput};
use crate::linalg;
use crate::model::{relative_error, BlockPair, ProblemInstance};
use crate::C64;

/// Smallest stepsize tried before backtracking gives up.
pub const MIN_STEP: f64 = 1e-18;

pub fn g0(z: f64) -> f64 {
    let t = (z - 1.0).max(0.0);
    t * t
}

pub fn g0_prime(z: f64) -> f64 {
    2.0 * (z - 1.0).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Incoherence parameter.
    pub mu: f64,
    /// Penalty weight.
    pub rho: f64,
    /// Per-source scale estimates.
    pub d_i: Vec<f64>,
    pub d: f64,
    /// Stepsize tried first at every iteration.
    pub step_init: f64,
    pub backtracking: bool,
    /// Backtracking shrink factor in (0, 1).
    pub shrink: f64,
    /// Armijo slope parameter; 0 accepts any non-increase of the objective.
    pub sufficient_decrease: f64,
    pub max_iters: usize,
    /// Stop once `||A(H(z_next) - H(z))|| < stop_tol * ||y||`.
    pub stop_tol: f64,
}

impl SolverConfig {
    /// Defaults built around the initializer's scale estimates:
    /// `rho = d^2 (1 + 2 sigma^2)` when the noise level is known, `d^2`
    /// otherwise; `step_init = 1 / (K + N)`; halving backtracking; 500
    /// iterations; stopping tolerance `1e-6`.
    pub fn from_init(init: &InitOutput, inst: &ProblemInstance, sigma: Option<f64>) -> Self {
        let ens = inst.ensemble();
        let d2 = init.d * init.d;
        let rho = match sigma {
            Some(s) => d2 + 2.0 * s * s * d2,
            None => d2,
        };
        Self {
            mu: default_mu(ens.l()),
            rho,
            d_i: init.d_i.clone(),
            d: init.d,
            step_init: 1.0 / (ens.k() + ens.n()) as f64,
            backtracking: true,
            shrink: 0.5,
            sufficient_decrease: 0.0,
            max_iters: 500,
            stop_tol: 1e-6,
        }
    }

    pub fn validate(&self, s: usize) -> Result<()> {
        let bad = |msg: String| Err(DemixError::InvalidParameter(msg));
        if !(self.mu > 0.0) {
            return bad(format!("mu must be positive, got {}", self.mu));
        }
        if !(self.rho >= 0.0) {
            return bad(format!("rho must be non-negative, got {}", self.rho));
        }
        if self.d_i.len() != s || self.d_i.iter().any(|d| !(*d > 0.0)) {
            return bad(format!("need {s} positive scale estimates, got {:?}", self.d_i));
        }
        if !(self.d > 0.0) {
            return bad(format!("d must be positive, got {}", self.d));
        }
        if !(self.step_init > 0.0) {
            return bad(format!("step_init must be positive, got {}", self.step_init));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return bad(format!("shrink factor must lie in (0, 1), got {}", self.shrink));
        }
        if !(self.sufficient_decrease >= 0.0 && self.sufficient_decrease < 1.0) {
            return bad(format!(
                "sufficient-decrease parameter must lie in [0, 1), got {}",
                self.sufficient_decrease
            ));
        }
        if !(self.stop_tol >= 0.0) {
            return bad(format!("stop_tol must be non-negative, got {}", self.stop_tol));
        }
        Ok(())
    }
}

/// Cached quantities of one objective evaluation, reused by the gradient.
#[derive(Debug, Clone)]
pub struct Evaluation {
    /// `A(H(h, x)) - y`.
    pub residual: Array1<C64>,
    bh: Vec<Array1<C64>>,
    ax: Vec<Array1<C64>>,
    pub loss_f: f64,
    pub loss_g: f64,
}

impl Evaluation {
    pub fn objective(&self) -> f64 {
        self.loss_f + self.loss_g
    }
}

fn penalty_args(cfg: &SolverConfig, l: usize, i: usize) -> (f64, f64) {
    let di = cfg.d_i[i];
    (1.0 / (2.0 * di), l as f64 / (8.0 * di * cfg.mu * cfg.mu))
}

/// Evaluates `F`, `G` and the residual at `z`.
pub fn evaluate(z: &BlockPair, inst: &ProblemInstance, cfg: &SolverConfig) -> Result<Evaluation> {
    let ens = inst.ensemble();
    z.check_dims(ens)?;
    let mut residual = inst.y().mapv(|v| -v);
    let mut bh = Vec::with_capacity(ens.s());
    let mut ax = Vec::with_capacity(ens.s());
    let mut loss_g = 0.0;
    for i in 0..ens.s() {
        let b = ens.apply_b(z.h[i].view())?;
        let a = ens.encode(i, z.x[i].view())?;
        for ((r, &bv), &av) in residual.iter_mut().zip(b.iter()).zip(a.iter()) {
            *r += bv * av.conj();
        }
        let (norm_w, spike_w) = penalty_args(cfg, ens.l(), i);
        let spikes: f64 = b.iter().map(|v| g0(spike_w * v.norm_sqr())).sum();
        loss_g += g0(norm_w * linalg::norm_sqr(z.h[i].view()))
            + g0(norm_w * linalg::norm_sqr(z.x[i].view()))
            + spikes;
        bh.push(b);
        ax.push(a);
    }
    Ok(Evaluation {
        loss_f: linalg::norm_sqr(residual.view()),
        loss_g: cfg.rho * loss_g,
        residual,
        bh,
        ax,
    })
}

/// Wirtinger gradient `(grad_h F~, grad_x F~)` from a cached evaluation.
pub fn gradient_at(
    z: &BlockPair,
    eval: &Evaluation,
    inst: &ProblemInstance,
    cfg: &SolverConfig,
) -> Result<BlockPair> {
    let ens = inst.ensemble();
    let r = &eval.residual;
    let conj_r = r.mapv(|v| v.conj());
    let mut gh = Vec::with_capacity(ens.s());
    let mut gx = Vec::with_capacity(ens.s());
    for i in 0..ens.s() {
        let (h, x) = (&z.h[i], &z.x[i]);
        // misfit part: A_i^*(r) x_i and (A_i^*(r))^* h_i
        let mut grad_h = ens.apply_b_adjoint((r * &eval.ax[i]).view())?;
        let mut grad_x = ens.encode_adjoint(i, (&conj_r * &eval.bh[i]).view())?;

        let (norm_w, spike_w) = penalty_args(cfg, ens.l(), i);
        let outer = cfg.rho / (2.0 * cfg.d_i[i]);
        let dh = g0_prime(norm_w * linalg::norm_sqr(h.view()));
        if dh != 0.0 {
            grad_h.scaled_add(C64::new(outer * dh, 0.0), h);
        }
        let mask: Array1<C64> = eval.bh[i]
            .iter()
            .map(|v| *v * g0_prime(spike_w * v.norm_sqr()))
            .collect();
        if mask.iter().any(|v| *v != C64::new(0.0, 0.0)) {
            let spread = ens.apply_b_adjoint(mask.view())?;
            let coef = outer * ens.l() as f64 / (4.0 * cfg.mu * cfg.mu);
            grad_h.scaled_add(C64::new(coef, 0.0), &spread);
        }
        let dx = g0_prime(norm_w * linalg::norm_sqr(x.view()));
        if dx != 0.0 {
            grad_x.scaled_add(C64::new(outer * dx, 0.0), x);
        }
        gh.push(grad_h);
        gx.push(grad_x);
    }
    Ok(BlockPair { h: gh, x: gx })
}

pub fn gradient(z: &BlockPair, inst: &ProblemInstance, cfg: &SolverConfig) -> Result<BlockPair> {
    let eval = evaluate(z, inst, cfg)?;
    gradient_at(z, &eval, inst, cfg)
}

/// Least-squares misfit `F`.
pub fn loss_f(z: &BlockPair, inst: &ProblemInstance) -> Result<f64> {
    let ens = inst.ensemble();
    z.check_dims(ens)?;
    let mut r = inst.y().mapv(|v| -v);
    for (i, (h, x)) in z.h.iter().zip(&z.x).enumerate() {
        r += &ens.lift_forward_rank1(h.view(), x.view(), i)?;
    }
    Ok(linalg::norm_sqr(r.view()))
}

/// Regularizer `G`.
pub fn loss_g(z: &BlockPair, inst: &ProblemInstance, cfg: &SolverConfig) -> Result<f64> {
    Ok(evaluate(z, inst, cfg)?.loss_g)
}

/// Full objective `F~ = F + G`.
pub fn objective(z: &BlockPair, inst: &ProblemInstance, cfg: &SolverConfig) -> Result<f64> {
    Ok(evaluate(z, inst, cfg)?.objective())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Measured change fell below the tolerance.
    Converged,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub objective: f64,
    pub loss_f: f64,
    pub loss_g: f64,
    /// Norm of the gradient that produced this iterate (at the initial row:
    /// the gradient at the starting point).
    pub grad_norm: f64,
    pub step: f64,
    pub rel_error: f64,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverTrace {
    pub rows: Vec<TraceRow>,
    pub stop_reason: StopReason,
}

pub const TRACE_HEADER: &str = "iter,objective,loss_f,loss_g,grad_norm,step,rel_error,elapsed_ms";

impl SolverTrace {
    /// Number of gradient steps taken.
    pub fn iterations(&self) -> usize {
        self.rows.len().saturating_sub(1)
    }

    pub fn final_error(&self) -> f64 {
        self.rows.last().map(|r| r.rel_error).unwrap_or(f64::NAN)
    }

    /// First iteration at which the relative error is at most `threshold`.
    pub fn iterations_to(&self, threshold: f64) -> Option<usize> {
        self.rows
            .iter()
            .find(|r| r.rel_error <= threshold)
            .map(|r| r.iter)
    }

    /// Relative error after `t` iterations, holding the final value once the
    /// run has stopped.
    pub fn error_at(&self, t: usize) -> f64 {
        self.rows
            .get(t)
            .or(self.rows.last())
            .map(|r| r.rel_error)
            .unwrap_or(f64::NAN)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        self.write_csv_with(out, true)
    }

    /// Like [`write_csv`](Self::write_csv); with `timing` off the
    /// `elapsed_ms` column is left empty so that reruns are byte-identical.
    pub fn write_csv_with<W: Write>(&self, out: W, timing: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(TRACE_HEADER.split(','))?;
        for r in &self.rows {
            w.write_record([
                r.iter.to_string(),
                format!("{:e}", r.objective),
                format!("{:e}", r.loss_f),
                format!("{:e}", r.loss_g),
                format!("{:e}", r.grad_norm),
                format!("{:e}", r.step),
                format!("{:e}", r.rel_error),
                if timing { format!("{:.3}", r.elapsed_ms) } else { String::new() },
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Wirtinger gradient descent from the spectral initial guess.
///
/// With backtracking each iteration starts at `cfg.step_init` and shrinks the
/// step until the objective does not increase. Stops when the change of the
/// measured signal `||A(H(z_next)) - A(H(z))||` drops below
/// `cfg.stop_tol * ||y||`, or after `cfg.max_iters` steps.
pub fn descend(
    init: &InitOutput,
    inst: &ProblemInstance,
    cfg: &SolverConfig,
) -> Result<(BlockPair, SolverTrace)> {
    descend_from(init.pair(), inst, cfg)
}

pub fn descend_from(
    start: BlockPair,
    inst: &ProblemInstance,
    cfg: &SolverConfig,
) -> Result<(BlockPair, SolverTrace)> {
    let ens = inst.ensemble();
    cfg.validate(ens.s())?;
    start.check_dims(ens)?;
    let clock = Instant::now();
    let y_norm = linalg::norm(inst.y().view());

    let mut z = start;
    let mut eval = evaluate(&z, inst, cfg)?;
    if !eval.objective().is_finite() {
        return Err(DemixError::NonFinite { iteration: 0 });
    }
    let mut grad = gradient_at(&z, &eval, inst, cfg)?;
    let mut rows = vec![TraceRow {
        iter: 0,
        objective: eval.objective(),
        loss_f: eval.loss_f,
        loss_g: eval.loss_g,
        grad_norm: grad.norm(),
        step: 0.0,
        rel_error: relative_error(&z, inst),
        elapsed_ms: 0.0,
    }];
    let mut stop_reason = StopReason::MaxIterations;

    for t in 1..=cfg.max_iters {
        let grad_sqr = grad.norm_sqr();
        let mut step = cfg.step_init;
        let (next, next_eval) = loop {
            let cand = z.add_scaled(-step, &grad);
            let ce = evaluate(&cand, inst, cfg)?;
            let value = ce.objective();
            if !cfg.backtracking {
                if !value.is_finite() {
                    return Err(DemixError::NonFinite { iteration: t });
                }
                break (cand, ce);
            }
            let target = eval.objective() - cfg.sufficient_decrease * 2.0 * step * grad_sqr;
            if value.is_finite() && value <= target {
                break (cand, ce);
            }
            step *= cfg.shrink;
            if step < MIN_STEP {
                return Err(DemixError::StepUnderflow {
                    iteration: t,
                    step,
                });
            }
        };
        // residual difference = A(H(z_next)) - A(H(z)); y cancels
        let change = linalg::norm((&next_eval.residual - &eval.residual).view());
        let grad_norm = grad_sqr.sqrt();
        z = next;
        eval = next_eval;
        rows.push(TraceRow {
            iter: t,
            objective: eval.objective(),
            loss_f: eval.loss_f,
            loss_g: eval.loss_g,
            grad_norm,
            step,
            rel_error: relative_error(&z, inst),
            elapsed_ms: clock.elapsed().as_secs_f64() * 1e3,
        });
        if change < cfg.stop_tol * y_norm || (change == 0.0 && grad_sqr == 0.0) {
            stop_reason = StopReason::Converged;
            break;
        }
        grad = gradient_at(&z, &eval, inst, cfg)?;
    }
    Ok((z, SolverTrace { rows, stop_reason }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::EnsembleKind;
    use crate::{generate_instance, make_ensemble, rng};
    use approx::assert_abs_diff_eq;

    fn setup(l: usize, s: usize, sigma: f64, seed: u64) -> (ProblemInstance, SolverConfig) {
        let ens = make_ensemble(l, 4, 3, s, EnsembleKind::Gaussian, seed).unwrap();
        let inst = generate_instance(ens, &vec![1.0; s], sigma, seed + 1).unwrap();
        let cfg = SolverConfig {
            mu: default_mu(l),
            rho: 1.0,
            d_i: inst.d_i0().to_vec(),
            d: inst.d0(),
            step_init: 1.0,
            backtracking: true,
            shrink: 0.5,
            sufficient_decrease: 0.0,
            max_iters: 50,
            stop_tol: 1e-6,
        };
        (inst, cfg)
    }

    #[test]
    fn g0_values() {
        assert_eq!(g0(0.5), 0.0);
        assert_eq!(g0(1.0), 0.0);
        assert_eq!(g0(2.0), 1.0);
        assert_eq!(g0_prime(2.0), 2.0);
        assert_eq!(g0_prime(0.3), 0.0);
        let h = 1e-6;
        let fd = (g0(1.5 + h) - g0(1.5 - h)) / (2.0 * h);
        assert!((fd - g0_prime(1.5)).abs() <= 1e-6);
    }

    #[test]
    fn misfit_at_truth_and_zero() {
        let (inst, _) = setup(32, 2, 0.0, 1);
        assert_abs_diff_eq!(loss_f(inst.truth(), &inst).unwrap(), 0.0, epsilon = 1e-24);
        let zero = BlockPair::zeros(2, 4, 3);
        assert_abs_diff_eq!(
            loss_f(&zero, &inst).unwrap(),
            linalg::norm_sqr(inst.y().view()),
            epsilon = 1e-12
        );
    }

    #[test]
    fn penalty_is_inactive_at_truth_and_activates_when_scaled() {
        let (inst, mut cfg) = setup(32, 2, 0.0, 2);
        cfg.mu = 2.0 * inst.incoherence_mu_h();
        assert_eq!(loss_g(inst.truth(), &inst, &cfg).unwrap(), 0.0);
        let mut big = inst.truth().clone();
        big.h[0].mapv_inplace(|v| v * 10.0);
        assert!(loss_g(&big, &inst, &cfg).unwrap() > 0.0);
    }

    #[test]
    fn gradient_vanishes_at_noiseless_truth() {
        let (inst, cfg) = setup(32, 2, 0.0, 3);
        let g = gradient(inst.truth(), &inst, &cfg).unwrap();
        assert!(g.norm() <= 1e-10, "gradient norm {}", g.norm());
    }

    #[test]
    fn penalty_gradient_is_exactly_zero_when_inactive() {
        let (inst, mut cfg) = setup(32, 1, 0.0, 4);
        let mut r = rng::stream_rng(9, 0);
        let z = BlockPair::new(
            vec![rng::complex_normal_vec(&mut r, 4).mapv(|v| v * 0.1)],
            vec![rng::complex_normal_vec(&mut r, 3).mapv(|v| v * 0.1)],
        )
        .unwrap();
        let with = gradient(&z, &inst, &cfg).unwrap();
        cfg.rho = 0.0;
        let without = gradient(&z, &inst, &cfg).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn misfit_is_invariant_under_blockwise_rescaling() {
        let (inst, _) = setup(32, 2, 0.1, 5);
        let mut r = rng::stream_rng(10, 0);
        let z = BlockPair::new(
            (0..2).map(|_| rng::complex_normal_vec(&mut r, 4)).collect(),
            (0..2).map(|_| rng::complex_normal_vec(&mut r, 3)).collect(),
        )
        .unwrap();
        let base = loss_f(&z, &inst).unwrap();
        for alpha in [-2.0, 0.25, 3.5] {
            let scaled = BlockPair::new(
                z.h.iter().map(|h| h.mapv(|v| v * alpha)).collect(),
                z.x.iter().map(|x| x.mapv(|v| v / alpha)).collect(),
            )
            .unwrap();
            assert_abs_diff_eq!(loss_f(&scaled, &inst).unwrap(), base, epsilon = 1e-10 * base.max(1.0));
        }
    }

    #[test]
    fn starting_at_truth_terminates_immediately() {
        let (inst, cfg) = setup(32, 2, 0.0, 6);
        let (z, trace) = descend_from(inst.truth().clone(), &inst, &cfg).unwrap();
        assert_eq!(trace.iterations(), 1);
        assert_eq!(trace.stop_reason, StopReason::Converged);
        assert_abs_diff_eq!(relative_error(&z, &inst), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let (inst, cfg) = setup(32, 2, 0.0, 7);
        for broken in [
            SolverConfig { shrink: 1.0, ..cfg.clone() },
            SolverConfig { step_init: 0.0, ..cfg.clone() },
            SolverConfig { mu: -1.0, ..cfg.clone() },
            SolverConfig { d_i: vec![1.0], ..cfg.clone() },
        ] {
            assert!(descend_from(inst.truth().clone(), &inst, &broken).is_err());
        }
    }

    #[test]
    fn diverging_constant_step_reports_non_finite() {
        let (inst, mut cfg) = setup(32, 1, 0.0, 8);
        cfg.backtracking = false;
        cfg.step_init = 1e150;
        cfg.max_iters = 20;
        let mut start = inst.truth().clone();
        start.h[0].mapv_inplace(|v| v * 3.0);
        match descend_from(start, &inst, &cfg) {
            Err(DemixError::NonFinite { .. }) => {}
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn trace_csv_has_expected_header() {
        let (inst, cfg) = setup(32, 1, 0.0, 9);
        let (_, trace) = descend_from(inst.truth().clone(), &inst, &cfg).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), TRACE_HEADER);
        assert_eq!(text.lines().count(), trace.rows.len() + 1);
    }
}

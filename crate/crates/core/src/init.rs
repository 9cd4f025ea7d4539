//! Spectral initialization followed by projection onto the incoherence ball.
//!
//! For each source the leading singular triple of `A_i^*(y)` estimates
//! `(d_i0, h_i0, x_i0)`; the channel estimate is then projected onto
//! `{z : sqrt(L) ||B z||_inf <= 2 sqrt(d_i) mu}`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;

use crate::error::{DemixError, Result};
use crate::linalg;
use crate::model::{BlockPair, ProblemInstance};
use crate::operators::MeasurementEnsemble;
use crate::C64;

pub const TRIPLE_TOL: f64 = 1e-10;
pub const PROJECTION_TOL: f64 = 1e-9;
pub const ITERATION_CAP: usize = 10_000;

/// Default incoherence parameter `6 sqrt(ln L)`.
pub fn default_mu(l: usize) -> f64 {
    6.0 * (l as f64).ln().max(0.0).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SingularTriple {
    pub value: f64,
    pub left: Array1<C64>,
    pub right: Array1<C64>,
}

/// Leading singular triple by power iteration on `M M^*`.
///
/// Starts from the normalized all-ones vector and stops once the eigen-residual
/// `||M M^* u - lambda u||` is below `tol * lambda` and successive Rayleigh
/// quotients agree to `tol` relative. The phase is fixed so that the
/// largest-modulus entry of `left` is real and non-negative.
pub fn leading_singular_triple(
    m: ArrayView2<C64>,
    tol: f64,
    max_iter: usize,
) -> Result<SingularTriple> {
    if !(tol > 0.0) {
        return Err(DemixError::InvalidParameter(format!(
            "singular-triple tolerance must be positive, got {tol}"
        )));
    }
    if linalg::frobenius_sqr(m) == 0.0 {
        return Err(DemixError::ZeroMatrix);
    }
    let gram: Array2<C64> = m.dot(&linalg::adjoint(m));
    let k = m.nrows();

    let mut u = Array1::from_elem(k, C64::new(1.0 / (k as f64).sqrt(), 0.0));
    if linalg::norm(gram.dot(&u).view()) == 0.0 {
        // all-ones lies in the null space of M^*; restart on the heaviest row
        let j = (0..k)
            .max_by(|&a, &b| gram[(a, a)].re.total_cmp(&gram[(b, b)].re))
            .unwrap_or(0);
        u.fill(C64::new(0.0, 0.0));
        u[j] = C64::new(1.0, 0.0);
    }

    let mut prev = f64::NAN;
    let mut converged = false;
    for _ in 0..max_iter {
        let w = gram.dot(&u);
        let lambda = linalg::inner(w.view(), u.view()).re;
        let residual = linalg::norm((&w - &u.mapv(|v| v * lambda)).view());
        let settled = (lambda - prev).abs() <= tol * lambda;
        prev = lambda;
        if residual <= tol * lambda && settled {
            converged = true;
            break;
        }
        let nw = linalg::norm(w.view());
        u = w.mapv(|v| v / nw);
    }
    if !converged {
        return Err(DemixError::NotConverged {
            what: "leading singular triple",
            iterations: max_iter,
            last_estimate: prev.max(0.0).sqrt(),
        });
    }

    let mut v = linalg::adjoint_mat_vec(m, u.view());
    let value = linalg::norm(v.view());
    v.mapv_inplace(|c| c / value);

    let pivot = u
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let rot = C64::from_polar(1.0, -u[pivot].arg());
    u.mapv_inplace(|c| c * rot);
    v.mapv_inplace(|c| c * rot);
    u[pivot] = C64::new(u[pivot].norm(), 0.0);

    Ok(SingularTriple {
        value,
        left: u,
        right: v,
    })
}

fn clip_to_box(w: &mut Array1<C64>, radius: f64) {
    for v in w.iter_mut() {
        let r = v.norm();
        if r > radius {
            *v *= radius / r;
        }
    }
}

fn project_range(ens: &MeasurementEnsemble, w: ArrayView1<C64>) -> Result<Array1<C64>> {
    ens.apply_b(ens.apply_b_adjoint(w)?.view())
}

/// Euclidean projection of `z0` onto `Q = {z : sqrt(L) ||B z||_inf <= bound}`.
///
/// Works in the image `w = B z`: `Q` maps to `range(B) ∩ box`, and since `B`
/// is an isometry onto its range the two projections coincide. Dykstra's
/// alternating projection with correction terms converges to the exact
/// projection onto the intersection, but slowly when many rows are active, so
/// its result is replaced by a KKT-certified solution of the same problem
/// whenever one is found.
pub fn project_mu_ball(
    ens: &MeasurementEnsemble,
    z0: ArrayView1<C64>,
    bound: f64,
    tol: f64,
    max_iter: usize,
) -> Result<Array1<C64>> {
    if !(bound > 0.0) {
        return Err(DemixError::InvalidParameter(format!(
            "projection bound must be positive, got {bound}"
        )));
    }
    let radius = bound / (ens.l() as f64).sqrt();
    let w0 = ens.apply_b(z0)?;
    if linalg::max_abs(w0.view()) <= radius {
        return Ok(z0.to_owned());
    }
    let scale = linalg::norm(w0.view());

    let mut x = w0;
    let mut p = Array1::<C64>::zeros(x.len());
    let mut q = Array1::<C64>::zeros(x.len());
    let mut converged = false;
    for _ in 0..max_iter {
        let y = project_range(ens, (&x + &p).view())?;
        p = &x + &p - &y;
        let mut next = &y + &q;
        clip_to_box(&mut next, radius);
        q = &y + &q - &next;

        let step = linalg::norm((&next - &x).view());
        x = next;
        if step <= tol * scale {
            converged = true;
            break;
        }
    }
    if let Some(z) = exact_projection(dense_b(ens)?.view(), z0, radius) {
        return pull_inside(ens, z, radius);
    }
    if converged {
        return pull_inside(ens, ens.apply_b_adjoint(x.view())?, radius);
    }
    let mut last = project_range(ens, x.view())?;
    clip_to_box(&mut last, radius);
    let last = pull_inside(ens, ens.apply_b_adjoint(last.view())?, radius)?;
    Err(DemixError::ProjectionNotConverged {
        iterations: max_iter,
        last_iterate: last.to_vec(),
    })
}

const BARRIER_ROUNDS: usize = 30;
const BARRIER_NEWTON_STEPS: usize = 100;
const MULTIPLIER_NEWTON_STEPS: usize = 60;

fn dense_b(ens: &MeasurementEnsemble) -> Result<Array2<C64>> {
    let mut b = Array2::<C64>::zeros((ens.l(), ens.k()));
    for k in 0..ens.k() {
        let mut e = Array1::<C64>::zeros(ens.k());
        e[k] = C64::new(1.0, 0.0);
        b.column_mut(k).assign(&ens.apply_b(e.view())?);
    }
    Ok(b)
}

// Exact projection used to finish Dykstra. A log-barrier Newton method in the
// 2K real coordinates of z follows the central path, which exposes the active
// rows and their multipliers lam_l = 2 / (t s_l). Newton's method on those
// multipliers then solves z = (I + sum_l lam_l b_l^* b_l)^{-1} z0 with
// |b_l z| = radius on the active rows. The result is returned only if it
// passes the KKT conditions, which certify it as the projection.
fn exact_projection(b: ArrayView2<C64>, z0: ArrayView1<C64>, radius: f64) -> Option<Array1<C64>> {
    let (t, x) = barrier_path(b, z0, radius)?;
    let k = b.ncols();
    let z = Array1::from_shape_fn(k, |r| C64::new(x[r], x[k + r]));
    let bz = b.dot(&z);
    let target = radius * radius;
    let lam: Vec<f64> = bz.iter().map(|v| 2.0 / (t * (target - v.norm_sqr()))).collect();
    let top = lam.iter().cloned().fold(0.0, f64::max);
    let mut active: Vec<usize> = (0..lam.len()).filter(|&l| lam[l] > 1e-6 * top).collect();
    active.sort_by(|&i, &j| lam[j].total_cmp(&lam[i]));
    active.truncate(2 * k);
    while !active.is_empty() {
        let lam0: Vec<f64> = active.iter().map(|&l| lam[l]).collect();
        if let Some((z, mult)) = multiplier_newton(b, z0, &active, &lam0, radius) {
            let bz = b.dot(&z);
            let feasible = bz.iter().all(|v| v.norm() <= radius * (1.0 + 1e-12));
            if feasible && mult.iter().all(|&m| m >= 0.0) {
                return Some(z);
            }
        }
        active.pop();
    }
    None
}

fn barrier_path(b: ArrayView2<C64>, z0: ArrayView1<C64>, radius: f64) -> Option<(f64, Array1<f64>)> {
    let (l_len, k) = b.dim();
    let dim = 2 * k;
    let x0 = Array1::from_shape_fn(dim, |i| if i < k { z0[i].re } else { z0[i - k].im });
    // Re(b_l z) = p_l . x and Im(b_l z) = q_l . x.
    let p = Array2::from_shape_fn((l_len, dim), |(l, i)| if i < k { b[[l, i]].re } else { -b[[l, i - k]].im });
    let q = Array2::from_shape_fn((l_len, dim), |(l, i)| if i < k { b[[l, i]].im } else { b[[l, i - k]].re });
    let target = radius * radius;
    let slack = |x: &Array1<f64>| -> Array1<f64> {
        let (pr, qr) = (p.dot(x), q.dot(x));
        Array1::from_shape_fn(l_len, |l| target - pr[l] * pr[l] - qr[l] * qr[l])
    };
    let merit = |t: f64, x: &Array1<f64>, s: &Array1<f64>| -> f64 {
        0.5 * t * (x - &x0).mapv(|v| v * v).sum() - s.mapv(f64::ln).sum()
    };

    let scale = x0.mapv(|v| v * v).sum().max(target);
    let mut t = l_len as f64 / scale;
    let mut x = Array1::<f64>::zeros(dim);
    for _ in 0..BARRIER_ROUNDS {
        for _ in 0..BARRIER_NEWTON_STEPS {
            let s = slack(&x);
            let (pr, qr) = (p.dot(&x), q.dot(&x));
            // Rows of `g` are the gradients of the slacks (up to sign).
            let g = Array2::from_shape_fn((l_len, dim), |(l, i)| 2.0 * (pr[l] * p[[l, i]] + qr[l] * q[[l, i]]));
            let inv = s.mapv(|v| 1.0 / v);
            let grad = (&x - &x0) * t + g.t().dot(&inv);
            let weigh = |m: &Array2<f64>, w: &Array1<f64>| m * &w.view().insert_axis(ndarray::Axis(1));
            let two_inv = &inv * 2.0;
            let hess = Array2::<f64>::eye(dim) * t
                + p.t().dot(&weigh(&p, &two_inv))
                + q.t().dot(&weigh(&q, &two_inv))
                + g.t().dot(&weigh(&g, &inv.mapv(|v| v * v)));
            let step = linalg::solve_real(hess, grad.mapv(|v| -v))?;
            let decrement = -grad.dot(&step);
            if decrement <= 1e-6 {
                break;
            }
            let current = merit(t, &x, &s);
            let mut alpha = 1.0;
            loop {
                let trial = &x + &(&step * alpha);
                let ts = slack(&trial);
                if ts.iter().all(|&v| v > 0.0) && merit(t, &trial, &ts) <= current - 0.25 * alpha * decrement {
                    x = trial;
                    break;
                }
                alpha *= 0.5;
                if alpha < 1e-14 {
                    return None;
                }
            }
        }
        if l_len as f64 / t <= 1e-10 * scale {
            return Some((t, x));
        }
        t *= 10.0;
    }
    Some((t, x))
}

fn multiplier_newton(
    b: ArrayView2<C64>,
    z0: ArrayView1<C64>,
    active: &[usize],
    lam0: &[f64],
    radius: f64,
) -> Option<(Array1<C64>, Vec<f64>)> {
    let (k, m) = (b.ncols(), active.len());
    // Column j of `a` is b_l^*, so that b_l z = a_j^* z.
    let a = Array2::from_shape_fn((k, m), |(r, j)| b[[active[j], r]].conj());
    let row = |z: ArrayView1<C64>, j: usize| -> C64 { (0..k).map(|r| a[[r, j]].conj() * z[r]).sum() };
    let target = radius * radius;
    let eval = |lam: &Array1<f64>| -> Option<(Array2<C64>, Array1<C64>, Vec<C64>, Array1<f64>)> {
        let mut gram = Array2::<C64>::eye(k);
        for j in 0..m {
            for r in 0..k {
                for c in 0..k {
                    gram[[r, c]] += a[[r, j]] * a[[c, j]].conj() * lam[j];
                }
            }
        }
        let chol = linalg::cholesky(gram.view())?;
        let z = linalg::cholesky_solve(chol.view(), z0);
        let w: Vec<C64> = (0..m).map(|j| row(z.view(), j)).collect();
        let phi = Array1::from_shape_fn(m, |j| w[j].norm_sqr() - target);
        Some((chol, z, w, phi))
    };
    let size = |phi: &Array1<f64>| phi.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));

    let mut lam = Array1::from(lam0.to_vec());
    let (mut chol, mut z, mut w, mut phi) = eval(&lam)?;
    for _ in 0..MULTIPLIER_NEWTON_STEPS {
        if size(&phi) <= 1e-13 * target {
            return Some((z, lam.to_vec()));
        }
        let solved: Vec<Array1<C64>> = (0..m).map(|j| linalg::cholesky_solve(chol.view(), a.column(j))).collect();
        let jac = Array2::from_shape_fn((m, m), |(i, j)| -2.0 * (w[i].conj() * row(solved[j].view(), i) * w[j]).re);
        let delta = linalg::solve_real(jac, phi.clone())?;
        let mut t = 1.0;
        loop {
            let trial = &lam - &(&delta * t);
            if let Some(next) = eval(&trial) {
                if size(&next.3) < size(&phi) {
                    lam = trial;
                    (chol, z, w, phi) = next;
                    break;
                }
            }
            t *= 0.5;
            if t < 1e-10 {
                return None;
            }
        }
    }
    None
}

// The constraint set is balanced and convex, so shrinking towards zero removes
// the residual infeasibility Dykstra leaves behind.
fn pull_inside(ens: &MeasurementEnsemble, z: Array1<C64>, radius: f64) -> Result<Array1<C64>> {
    let peak = linalg::max_abs(ens.apply_b(z.view())?.view());
    if peak <= radius {
        return Ok(z);
    }
    let mut factor = radius / peak;
    loop {
        let shrunk = z.mapv(|c| c * factor);
        if linalg::max_abs(ens.apply_b(shrunk.view())?.view()) <= radius {
            return Ok(shrunk);
        }
        factor *= 1.0 - f64::EPSILON * 4.0;
    }
}

/// Output of the spectral initializer.
#[derive(Debug, Clone, PartialEq)]
pub struct InitOutput {
    pub u0: Vec<Array1<C64>>,
    pub v0: Vec<Array1<C64>>,
    /// Estimated per-source scales `d_i`.
    pub d_i: Vec<f64>,
    /// `sqrt(sum d_i^2)`.
    pub d: f64,
}

impl InitOutput {
    pub fn pair(&self) -> BlockPair {
        BlockPair {
            h: self.u0.clone(),
            x: self.v0.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct InitOptions {
    pub triple_tol: f64,
    pub projection_tol: f64,
    pub max_iter: usize,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            triple_tol: TRIPLE_TOL,
            projection_tol: PROJECTION_TOL,
            max_iter: ITERATION_CAP,
        }
    }
}

/// Spectral initialization with default tolerances.
pub fn spectral_init(inst: &ProblemInstance, mu: f64) -> Result<InitOutput> {
    spectral_init_with(inst, mu, InitOptions::default())
}

pub fn spectral_init_with(
    inst: &ProblemInstance,
    mu: f64,
    opts: InitOptions,
) -> Result<InitOutput> {
    spectral_init_from(inst.ensemble(), inst.y().view(), mu, opts)
}

/// Spectral initialization from raw observations.
pub fn spectral_init_from(
    ens: &MeasurementEnsemble,
    y: ArrayView1<C64>,
    mu: f64,
    opts: InitOptions,
) -> Result<InitOutput> {
    if !(mu > 0.0) {
        return Err(DemixError::InvalidParameter(format!(
            "incoherence parameter must be positive, got {mu}"
        )));
    }
    let per_source = (0..ens.s())
        .into_par_iter()
        .map(|i| {
            let m = ens.lift_adjoint_i(y, i)?;
            let triple = leading_singular_triple(m.view(), opts.triple_tol, opts.max_iter)?;
            let root = triple.value.sqrt();
            let u = project_mu_ball(
                ens,
                triple.left.mapv(|c| c * root).view(),
                2.0 * root * mu,
                opts.projection_tol,
                opts.max_iter,
            )?;
            let v = triple.right.mapv(|c| c * root);
            Ok((u, v, triple.value))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut out = InitOutput {
        u0: Vec::with_capacity(ens.s()),
        v0: Vec::with_capacity(ens.s()),
        d_i: Vec::with_capacity(ens.s()),
        d: 0.0,
    };
    for (u, v, d) in per_source {
        out.u0.push(u);
        out.v0.push(v);
        out.d_i.push(d);
    }
    out.d = out.d_i.iter().map(|d| d * d).sum::<f64>().sqrt();
    Ok(out)
}

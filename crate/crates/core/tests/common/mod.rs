#![allow(dead_code)]

use std::f64::consts::PI;

use demix_core::operators::LiftedBlockDiag;
use demix_core::solver::{gradient, loss_f, loss_g, objective, SolverConfig};
use demix_core::{
    generate_instance, make_ensemble, BlockPair, EnsembleKind, MeasurementEnsemble, ProblemInstance, C64,
};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = std::result::Result<(), String>;

pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss<R: Rng>(r: &mut R) -> C64 {
    // Box-Muller, kept independent of the library's sampler
    let u1: f64 = r.random::<f64>().max(1e-300);
    let u2: f64 = r.random();
    let rad = (-u1.ln()).sqrt();
    c(rad * (2.0 * PI * u2).cos(), rad * (2.0 * PI * u2).sin())
}

pub fn gvec<R: Rng>(r: &mut R, n: usize) -> Array1<C64> {
    Array1::from_shape_fn(n, |_| gauss(r))
}

pub fn gmat<R: Rng>(r: &mut R, rows: usize, cols: usize) -> Array2<C64> {
    Array2::from_shape_fn((rows, cols), |_| gauss(r))
}

/// First `k` columns of the unitary `l`-point DFT, written out entry by entry.
pub fn dense_b(l: usize, k: usize) -> Array2<C64> {
    let s = 1.0 / (l as f64).sqrt();
    Array2::from_shape_fn((l, k), |(a, b)| {
        let ang = -2.0 * PI * ((a * b) % l) as f64 / l as f64;
        c(s * ang.cos(), s * ang.sin())
    })
}

pub fn matvec(m: &Array2<C64>, v: &Array1<C64>) -> Array1<C64> {
    Array1::from_shape_fn(m.nrows(), |i| (0..m.ncols()).map(|j| m[[i, j]] * v[j]).sum())
}

pub fn adj_matvec(m: &Array2<C64>, v: &Array1<C64>) -> Array1<C64> {
    Array1::from_shape_fn(m.ncols(), |j| (0..m.nrows()).map(|i| m[[i, j]].conj() * v[i]).sum())
}

pub fn dot(a: &Array1<C64>, b: &Array1<C64>) -> C64 {
    a.iter().zip(b).map(|(x, y)| x * y.conj()).sum()
}

pub fn vnorm(a: &Array1<C64>) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

pub fn mat_inner(a: &Array2<C64>, b: &Array2<C64>) -> C64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y.conj()).sum()
}

/// `A_i(Z)_l = b_l^* Z a_il = sum_{k,n} B[l,k] Z[k,n] conj(A[l,n])`.
pub fn dense_lift(b: &Array2<C64>, a: &Array2<C64>, z: &Array2<C64>) -> Array1<C64> {
    Array1::from_shape_fn(b.nrows(), |l| {
        let mut acc = c(0.0, 0.0);
        for k in 0..z.nrows() {
            for n in 0..z.ncols() {
                acc += b[[l, k]] * z[[k, n]] * a[[l, n]].conj();
            }
        }
        acc
    })
}

/// `A_i^*(w) = sum_l w_l b_l a_il^*`, entry `[k, n] = sum_l w_l conj(B[l,k]) A[l,n]`.
pub fn dense_lift_adjoint(b: &Array2<C64>, a: &Array2<C64>, w: &Array1<C64>) -> Array2<C64> {
    Array2::from_shape_fn((b.ncols(), a.ncols()), |(k, n)| {
        (0..b.nrows()).map(|l| w[l] * b[[l, k]].conj() * a[[l, n]]).sum()
    })
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn check_b_against_dense() -> Check {
    let (l, k) = (16, 5);
    let ens = make_ensemble(l, k, 2, 1, EnsembleKind::Gaussian, 0).unwrap();
    let b = dense_b(l, k);
    let mut r = rng(1);
    for _ in 0..5 {
        let h = gvec(&mut r, k);
        let fast = ens.apply_b(h.view()).unwrap();
        let err = vnorm(&(&fast - &matvec(&b, &h)));
        ensure(err <= 1e-12 * vnorm(&h), || format!("apply_B differs from dense by {err:e}"))?;
        let w = gvec(&mut r, l);
        let fast = ens.apply_b_adjoint(w.view()).unwrap();
        let err = vnorm(&(&fast - &adj_matvec(&b, &w)));
        ensure(err <= 1e-12 * vnorm(&w), || format!("apply_B^* differs from dense by {err:e}"))?;
    }
    Ok(())
}

pub fn check_b_isometry() -> Check {
    for (l, k) in [(16, 5), (37, 8), (64, 64)] {
        let ens = make_ensemble(l, k, 2, 1, EnsembleKind::Gaussian, 0).unwrap();
        let mut r = rng(2);
        let h = gvec(&mut r, k);
        let back = ens.apply_b_adjoint(ens.apply_b(h.view()).unwrap().view()).unwrap();
        let err = vnorm(&(&back - &h)) / vnorm(&h);
        ensure(err <= 1e-12, || format!("B^*B h != h at L={l}, K={k}: {err:e}"))?;
        for row in 0..l {
            let mut e = Array1::zeros(l);
            e[row] = c(1.0, 0.0);
            let bl = ens.apply_b_adjoint(e.view()).unwrap();
            let n2 = vnorm(&bl).powi(2);
            let want = k as f64 / l as f64;
            ensure((n2 - want).abs() <= 1e-12, || format!("||b_{row}||^2 = {n2}, want {want}"))?;
        }
    }
    Ok(())
}

fn ensembles() -> Vec<MeasurementEnsemble> {
    vec![
        make_ensemble(16, 3, 4, 2, EnsembleKind::Gaussian, 5).unwrap(),
        make_ensemble(32, 4, 8, 3, EnsembleKind::HadamardType, 6).unwrap(),
    ]
}

pub fn check_lift_against_dense() -> Check {
    let mut r = rng(3);
    for ens in ensembles() {
        let b = dense_b(ens.l(), ens.k());
        for i in 0..ens.s() {
            let a = ens.encoding_matrix(i).unwrap().into_owned();
            let z = gmat(&mut r, ens.k(), ens.n());
            let fast = ens.lift_forward_i(z.view(), i).unwrap();
            let err = vnorm(&(&fast - &dense_lift(&b, &a, &z)));
            ensure(err <= 1e-10 * vnorm(&fast), || format!("{} lift differs: {err:e}", ens.kind()))?;
            let w = gvec(&mut r, ens.l());
            let fast = ens.lift_adjoint_i(w.view(), i).unwrap();
            let dense = dense_lift_adjoint(&b, &a, &w);
            let err: f64 = (&fast - &dense).iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            ensure(err <= 1e-10 * vnorm(&w), || format!("{} adjoint lift differs: {err:e}", ens.kind()))?;
            let x = gvec(&mut r, ens.n());
            let via_encode = ens.encode(i, x.view()).unwrap();
            let err = vnorm(&(&via_encode - &matvec(&a, &x)));
            ensure(err <= 1e-10 * vnorm(&via_encode), || format!("encode differs: {err:e}"))?;
        }
    }
    Ok(())
}

pub fn check_adjoint_identity() -> Check {
    let mut r = rng(4);
    for ens in ensembles() {
        let blocks: Vec<Array2<C64>> = (0..ens.s()).map(|_| gmat(&mut r, ens.k(), ens.n())).collect();
        let big = LiftedBlockDiag { blocks };
        let w = gvec(&mut r, ens.l());
        let lhs = dot(&ens.forward(&big).unwrap(), &w);
        let rhs = big.inner(&ens.adjoint(w.view()).unwrap());
        let err = (lhs - rhs).norm() / lhs.norm();
        ensure(err <= 1e-12, || format!("{} adjoint identity off by {err:e}", ens.kind()))?;
    }
    Ok(())
}

pub fn check_rank_one_path() -> Check {
    let mut r = rng(5);
    for ens in ensembles() {
        for i in 0..ens.s() {
            let h = gvec(&mut r, ens.k());
            let x = gvec(&mut r, ens.n());
            let outer = Array2::from_shape_fn((ens.k(), ens.n()), |(a, b)| h[a] * x[b].conj());
            let general = ens.lift_forward_i(outer.view(), i).unwrap();
            let fast = ens.lift_forward_rank1(h.view(), x.view(), i).unwrap();
            let err = vnorm(&(&general - &fast)) / vnorm(&general);
            ensure(err <= 1e-12, || format!("rank-one path off by {err:e}"))?;
            let w = gvec(&mut r, ens.l());
            let m = ens.lift_adjoint_i(w.view(), i).unwrap();
            let right = ens.lift_adjoint_apply_right(w.view(), x.view(), i).unwrap();
            let want = Array1::from_shape_fn(ens.k(), |a| (0..ens.n()).map(|b| m[[a, b]] * x[b]).sum());
            ensure(vnorm(&(&right - &want)) <= 1e-10 * vnorm(&want), || "apply_right".into())?;
            let left = ens.lift_adjoint_apply_left(w.view(), h.view(), i).unwrap();
            let want =
                Array1::from_shape_fn(ens.n(), |b| (0..ens.k()).map(|a| m[[a, b]].conj() * h[a]).sum());
            ensure(vnorm(&(&left - &want)) <= 1e-10 * vnorm(&want), || "apply_left".into())?;
        }
    }
    Ok(())
}

/// `F^* A_i` must be `D_i H`: entries `+-1`, each row a constant sign times the
/// matching row of the Sylvester matrix.
pub fn check_hadamard_structure() -> Check {
    let (l, n) = (32, 8);
    let ens = make_ensemble(l, 4, n, 2, EnsembleKind::HadamardType, 9).unwrap();
    let f = dense_b(l, l);
    for i in 0..2 {
        let a = ens.encoding_matrix(i).unwrap().into_owned();
        for row in 0..l {
            let col_vals: Vec<C64> = (0..n)
                .map(|col| (0..l).map(|m| f[[m, row]].conj() * a[[m, col]]).sum())
                .collect();
            let sign = col_vals[0].re.signum();
            for (col, v) in col_vals.iter().enumerate() {
                let syl = if (row & col).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
                let err = (v - c(sign * syl, 0.0)).norm();
                ensure(err <= 1e-10, || format!("row {row} col {col}: {v}"))?;
            }
        }
    }
    Ok(())
}

/// A small instance with both penalty terms switched on.
pub fn penalized_setup(seed: u64) -> (ProblemInstance, SolverConfig) {
    let ens = make_ensemble(32, 4, 3, 2, EnsembleKind::Gaussian, seed).unwrap();
    let inst = generate_instance(ens, &[1.0, 2.0], 0.1, seed + 100).unwrap();
    let cfg = SolverConfig {
        mu: 0.6,
        rho: 3.0,
        d_i: inst.d_i0().iter().map(|d| 0.3 * d).collect(),
        d: 0.3 * inst.d0(),
        step_init: 1.0,
        backtracking: true,
        shrink: 0.5,
        sufficient_decrease: 0.0,
        max_iters: 10,
        stop_tol: 1e-6,
    };
    (inst, cfg)
}

pub fn random_pair<R: Rng>(r: &mut R, s: usize, k: usize, n: usize) -> BlockPair {
    BlockPair {
        h: (0..s).map(|_| gvec(r, k)).collect(),
        x: (0..s).map(|_| gvec(r, n)).collect(),
    }
}

pub fn check_objective_against_dense() -> Check {
    let (inst, cfg) = penalized_setup(11);
    let ens = inst.ensemble();
    let b = dense_b(ens.l(), ens.k());
    let mut r = rng(6);
    let z = random_pair(&mut r, ens.s(), ens.k(), ens.n());
    let mut resid = inst.y().mapv(|v| -v);
    for i in 0..ens.s() {
        let a = ens.encoding_matrix(i).unwrap().into_owned();
        let outer = Array2::from_shape_fn((ens.k(), ens.n()), |(p, q)| z.h[i][p] * z.x[i][q].conj());
        resid = resid + dense_lift(&b, &a, &outer);
    }
    let f_dense = vnorm(&resid).powi(2);
    let f = loss_f(&z, &inst).unwrap();
    ensure(rel(f, f_dense) <= 1e-12, || format!("F = {f}, dense {f_dense}"))?;

    let g0 = |v: f64| (v - 1.0).max(0.0).powi(2);
    let l = ens.l() as f64;
    let mut g_dense = 0.0;
    for i in 0..ens.s() {
        let di = cfg.d_i[i];
        let bh = matvec(&b, &z.h[i]);
        g_dense += g0(vnorm(&z.h[i]).powi(2) / (2.0 * di)) + g0(vnorm(&z.x[i]).powi(2) / (2.0 * di));
        g_dense += bh
            .iter()
            .map(|v| g0(l * v.norm_sqr() / (8.0 * di * cfg.mu * cfg.mu)))
            .sum::<f64>();
    }
    g_dense *= cfg.rho;
    let g = loss_g(&z, &inst, &cfg).unwrap();
    ensure(g > 0.0, || "penalty should be active".into())?;
    ensure(rel(g, g_dense) <= 1e-12, || format!("G = {g}, dense {g_dense}"))
}

/// Central differences of the objective along random directions against
/// `2 Re <w, grad>`.
pub fn check_gradient_finite_differences() -> Check {
    for seed in 0..10u64 {
        let (inst, cfg) = penalized_setup(20 + seed);
        let ens = inst.ensemble();
        let mut r = rng(30 + seed);
        let mut z = inst.truth().clone();
        let pert = random_pair(&mut r, ens.s(), ens.k(), ens.n());
        z = z.add_scaled(0.7, &pert);
        if seed % 2 == 0 {
            z.h[0] = z.h[0].mapv(|v| v * 2.0);
        }
        let w = random_pair(&mut r, ens.s(), ens.k(), ens.n());
        let grad = gradient(&z, &inst, &cfg).unwrap();
        let analytic = 2.0 * w.inner(&grad).re;
        let t = 1e-5;
        let up = objective(&z.add_scaled(t, &w), &inst, &cfg).unwrap();
        let down = objective(&z.add_scaled(-t, &w), &inst, &cfg).unwrap();
        let fd = (up - down) / (2.0 * t);
        let err = rel(fd, analytic);
        ensure(err <= 1e-5, || format!("seed {seed}: fd {fd} vs analytic {analytic} (rel {err:e})"))?;
        if seed == 0 {
            ensure(loss_g(&z, &inst, &cfg).unwrap() > 0.0, || "penalty inactive".into())?;
        }
    }
    Ok(())
}

/// Brute-force projection: every point of a shrinking 4-D grid is pulled
/// radially into the feasible set (which is balanced and convex) and the
/// closest candidate to `z0` becomes the next grid centre. The feasibility
/// test uses the explicit DFT columns.
pub fn brute_force_projection(b: &Array2<C64>, z0: [C64; 2], bound: f64) -> [C64; 2] {
    let root_l = (b.nrows() as f64).sqrt();
    let level = |z: [C64; 2]| {
        (0..b.nrows())
            .map(|l| root_l * (b[[l, 0]] * z[0] + b[[l, 1]] * z[1]).norm())
            .fold(0.0, f64::max)
    };
    let pull = |z: [C64; 2]| {
        let t = (bound / level(z)).min(1.0);
        [z[0] * t, z[1] * t]
    };
    let dist = |z: [C64; 2]| (z[0] - z0[0]).norm_sqr() + (z[1] - z0[1]).norm_sqr();
    let mut best = pull(z0);
    let mut half = 1.0;
    let steps = 6i32;
    while half > 1e-8 {
        let h = half / steps as f64;
        let centre = best;
        for a in -steps..=steps {
            for bb in -steps..=steps {
                for cc in -steps..=steps {
                    for d in -steps..=steps {
                        let z = pull([
                            centre[0] + c(a as f64 * h, bb as f64 * h),
                            centre[1] + c(cc as f64 * h, d as f64 * h),
                        ]);
                        if dist(z) < dist(best) {
                            best = z;
                        }
                    }
                }
            }
        }
        half *= 0.5;
    }
    best
}

/// Reference projection of `z0` onto `{2 ||B z||_inf <= 1.5}` at `L = 4, K = 2`,
/// computed with an external conic solver.
pub const PROJECTION_Z0: [(f64, f64); 2] = [(1.0, 0.5), (-0.8, 1.2)];
pub const PROJECTION_BOUND: f64 = 1.5;
pub const PROJECTION_REFERENCE: [(f64, f64); 2] = [(0.545695, 0.231546), (-0.531546, 0.745695)];

pub fn check_projection_oracle() -> Check {
    use demix_core::init::{project_mu_ball, ITERATION_CAP, PROJECTION_TOL};
    let ens = make_ensemble(4, 2, 1, 1, EnsembleKind::Gaussian, 0).unwrap();
    let z0 = [c(PROJECTION_Z0[0].0, PROJECTION_Z0[0].1), c(PROJECTION_Z0[1].0, PROJECTION_Z0[1].1)];
    let p = project_mu_ball(
        &ens,
        Array1::from_vec(z0.to_vec()).view(),
        PROJECTION_BOUND,
        PROJECTION_TOL,
        ITERATION_CAP,
    )
    .map_err(|e| e.to_string())?;
    let brute = brute_force_projection(&dense_b(4, 2), z0, PROJECTION_BOUND);
    let err = ((p[0] - brute[0]).norm_sqr() + (p[1] - brute[1]).norm_sqr()).sqrt();
    ensure(err <= 1e-4, || format!("Dykstra {p} vs brute force {brute:?}: {err:e}"))?;
    let reference = PROJECTION_REFERENCE.map(|(re, im)| c(re, im));
    let err = ((p[0] - reference[0]).norm_sqr() + (p[1] - reference[1]).norm_sqr()).sqrt();
    ensure(err <= 1e-4, || format!("Dykstra {p} vs frozen reference: {err:e}"))
}

pub fn check_singular_triple_oracle() -> Check {
    use demix_core::init::leading_singular_triple;
    let mut r = rng(7);
    for (k, n) in [(6, 5), (3, 9), (10, 10)] {
        let m = gmat(&mut r, k, n);
        let t = leading_singular_triple(m.view(), 1e-10, 10_000).map_err(|e| e.to_string())?;
        let nm = nalgebra::DMatrix::from_fn(k, n, |a, b| m[[a, b]]);
        let svd = nm.svd(true, true);
        let sigma = svd.singular_values.max();
        let idx = svd.singular_values.iter().position(|&v| v == sigma).unwrap();
        ensure(rel(t.value, sigma) <= 1e-8, || format!("sigma {} vs {sigma}", t.value))?;
        let u = svd.u.as_ref().unwrap().column(idx);
        let overlap: C64 = (0..k).map(|a| u[a].conj() * t.left[a]).sum();
        ensure((overlap.norm() - 1.0).abs() <= 1e-8, || format!("left overlap {}", overlap.norm()))?;
        let mv = matvec(&m, &t.right);
        let resid = vnorm(&(&mv - &t.left.mapv(|v| v * t.value)));
        ensure(resid <= 1e-7 * t.value, || format!("M v - sigma u = {resid:e}"))?;
    }
    Ok(())
}

pub const ORACLE_CHECKS: &[(&str, fn() -> Check)] = &[
    ("partial DFT vs dense", check_b_against_dense),
    ("B isometry and row norms", check_b_isometry),
    ("lift and adjoint vs dense", check_lift_against_dense),
    ("adjoint identity", check_adjoint_identity),
    ("rank-one vs general lift", check_rank_one_path),
    ("Hadamard-type structure", check_hadamard_structure),
    ("objective vs dense", check_objective_against_dense),
    ("gradient vs finite differences", check_gradient_finite_differences),
    ("projection vs brute force", check_projection_oracle),
    ("singular triple vs SVD", check_singular_triple_oracle),
];

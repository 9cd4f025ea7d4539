//! Small dense helpers over `ndarray` complex vectors and matrices.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::C64;

/// Inner product `<a, b> = b^* a = sum_k a_k conj(b_k)`.
pub fn inner(a: ArrayView1<C64>, b: ArrayView1<C64>) -> C64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y.conj()).sum()
}

pub fn norm_sqr(a: ArrayView1<C64>) -> f64 {
    a.iter().map(|v| v.norm_sqr()).sum()
}

pub fn norm(a: ArrayView1<C64>) -> f64 {
    norm_sqr(a).sqrt()
}

/// Trace inner product `<A, B> = tr(B^* A)`.
pub fn inner_mat(a: ArrayView2<C64>, b: ArrayView2<C64>) -> C64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y.conj()).sum()
}

pub fn frobenius_sqr(a: ArrayView2<C64>) -> f64 {
    a.iter().map(|v| v.norm_sqr()).sum()
}

/// Rank-one outer product `h x^*`.
pub fn outer(h: ArrayView1<C64>, x: ArrayView1<C64>) -> Array2<C64> {
    Array2::from_shape_fn((h.len(), x.len()), |(r, c)| h[r] * x[c].conj())
}

/// Conjugate transpose.
pub fn adjoint(m: ArrayView2<C64>) -> Array2<C64> {
    m.t().mapv(|v| v.conj())
}

pub fn mat_vec(m: ArrayView2<C64>, v: ArrayView1<C64>) -> Array1<C64> {
    m.dot(&v)
}

/// `m^* v` without materializing the adjoint.
pub fn adjoint_mat_vec(m: ArrayView2<C64>, v: ArrayView1<C64>) -> Array1<C64> {
    let mut out = Array1::zeros(m.ncols());
    for (row, &vr) in m.rows().into_iter().zip(v.iter()) {
        for (o, &a) in out.iter_mut().zip(row.iter()) {
            *o += a.conj() * vr;
        }
    }
    out
}

/// Largest entry modulus, `||v||_inf`.
pub fn max_abs(v: ArrayView1<C64>) -> f64 {
    v.iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Lower Cholesky factor of a Hermitian positive definite matrix, or `None`
/// if a pivot is not positive.
pub fn cholesky(m: ArrayView2<C64>) -> Option<Array2<C64>> {
    let n = m.nrows();
    let mut l = Array2::<C64>::zeros((n, n));
    for j in 0..n {
        let mut d = m[[j, j]].re;
        for k in 0..j {
            d -= l[[j, k]].norm_sqr();
        }
        if !(d > 0.0) {
            return None;
        }
        let d = d.sqrt();
        l[[j, j]] = C64::new(d, 0.0);
        for i in j + 1..n {
            let mut s = m[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]].conj();
            }
            l[[i, j]] = s / d;
        }
    }
    Some(l)
}

/// Solves `L L^* x = b` given the lower Cholesky factor `L`.
pub fn cholesky_solve(l: ArrayView2<C64>, b: ArrayView1<C64>) -> Array1<C64> {
    let n = l.nrows();
    let mut y = b.to_owned();
    for i in 0..n {
        for k in 0..i {
            let t = l[[i, k]] * y[k];
            y[i] -= t;
        }
        y[i] /= l[[i, i]];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            let t = l[[k, i]].conj() * y[k];
            y[i] -= t;
        }
        y[i] /= l[[i, i]];
    }
    y
}

/// Gaussian elimination with partial pivoting; `None` for a numerically
/// singular system.
pub fn solve_real(mut a: Array2<f64>, mut b: Array1<f64>) -> Option<Array1<f64>> {
    let n = a.nrows();
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(scale > 0.0) {
        return None;
    }
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[[i, col]].abs().total_cmp(&a[[j, col]].abs()))?;
        if a[[piv, col]].abs() <= 1e-14 * scale {
            return None;
        }
        if piv != col {
            for c in 0..n {
                a.swap([piv, c], [col, c]);
            }
            b.swap(piv, col);
        }
        for r in col + 1..n {
            let f = a[[r, col]] / a[[col, col]];
            if f != 0.0 {
                for c in col..n {
                    a[[r, c]] -= f * a[[col, c]];
                }
                b[r] -= f * b[col];
            }
        }
    }
    for r in (0..n).rev() {
        let mut s = b[r];
        for c in r + 1..n {
            s -= a[[r, c]] * b[c];
        }
        b[r] = s / a[[r, r]];
    }
    Some(b)
}

//! Structured linear operators for the bilinear measurement model.
//!
//! `B` is the first `K` columns of the unitary `L x L` DFT matrix and is never
//! stored; it is applied with a length-`L` FFT scaled by `1/sqrt(L)`. The
//! encoding matrices `A_i` are either dense complex Gaussian `L x N` matrices
//! or the structured product `F D_i H` (unitary DFT, random sign diagonal,
//! partial Sylvester-Hadamard), applied with one FWHT and one FFT.
//!
//! Conventions: `b_l` is the `l`-th column of `B^*` and `a_il` the `l`-th
//! column of `A_i^*`, so `(B h)_l = b_l^* h` and `(A_i x)_l = a_il^* x`. The
//! lifted operator is `A_i(Z)_l = b_l^* Z a_il`, hence for `Z = h x^*`
//! the `l`-th entry is `(B h)_l * conj((A_i x)_l)`.

use std::borrow::Cow;
use std::fmt;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, DemixError, Result};
use crate::linalg;
use crate::rng::{self, stream};
use crate::C64;

/// Iteration cap for power iterations on the lifted operator.
pub const POWER_ITERATION_CAP: usize = 10_000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleKind {
    #[default]
    Gaussian,
    HadamardType,
}

impl fmt::Display for EnsembleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnsembleKind::Gaussian => f.write_str("gaussian"),
            EnsembleKind::HadamardType => f.write_str("hadamard_type"),
        }
    }
}

#[derive(Clone)]
enum Encoding {
    /// One dense `L x N` matrix per source.
    Dense(Vec<Array2<C64>>),
    /// `A_i = F D_i H`: one `+-1` diagonal per source, shared partial Hadamard.
    Hadamard { signs: Vec<Array1<f64>> },
}

/// The measurement operators: implicit partial DFT `B` plus `s` encoding
/// matrices. Immutable after construction and safe to share across threads.
#[derive(Clone)]
pub struct MeasurementEnsemble {
    l: usize,
    k: usize,
    n: usize,
    s: usize,
    kind: EnsembleKind,
    seed: Option<u64>,
    encoding: Encoding,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    scale: f64,
}

impl fmt::Debug for MeasurementEnsemble {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MeasurementEnsemble")
            .field("L", &self.l)
            .field("K", &self.k)
            .field("N", &self.n)
            .field("s", &self.s)
            .field("kind", &self.kind)
            .field("seed", &self.seed)
            .finish()
    }
}

/// Block-diagonal matrix `blkdiag(Z_1, ..., Z_s)`, stored as `s` dense `K x N`
/// blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedBlockDiag {
    pub blocks: Vec<Array2<C64>>,
}

impl LiftedBlockDiag {
    pub fn zeros(s: usize, k: usize, n: usize) -> Self {
        Self {
            blocks: (0..s).map(|_| Array2::zeros((k, n))).collect(),
        }
    }

    /// `H(h, x)`: block `i` is the rank-one matrix `h_i x_i^*`.
    pub fn from_rank_one(h: &[Array1<C64>], x: &[Array1<C64>]) -> Self {
        Self {
            blocks: h
                .iter()
                .zip(x)
                .map(|(hi, xi)| linalg::outer(hi.view(), xi.view()))
                .collect(),
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| linalg::frobenius_sqr(b.view()))
            .sum::<f64>()
            .sqrt()
    }

    /// Trace inner product summed over blocks.
    pub fn inner(&self, other: &Self) -> C64 {
        self.blocks
            .iter()
            .zip(&other.blocks)
            .map(|(a, b)| linalg::inner_mat(a.view(), b.view()))
            .sum()
    }

    /// `alpha * self + beta * other`.
    pub fn combine(&self, alpha: C64, other: &Self, beta: C64) -> Self {
        Self {
            blocks: self
                .blocks
                .iter()
                .zip(&other.blocks)
                .map(|(a, b)| a.mapv(|v| v * alpha) + b.mapv(|v| v * beta))
                .collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for b in &mut self.blocks {
            b.mapv_inplace(|v| v * factor);
        }
    }
}

/// Returns true if `v` is a power of two.
fn is_pow2(v: usize) -> bool {
    v != 0 && v & (v - 1) == 0
}

/// In-place unnormalized fast Walsh-Hadamard transform (Sylvester ordering,
/// `H[j][k] = (-1)^{popcount(j & k)}`).
pub(crate) fn fwht(buf: &mut [C64]) {
    let len = buf.len();
    debug_assert!(is_pow2(len));
    let mut half = 1;
    while half < len {
        for start in (0..len).step_by(2 * half) {
            for j in start..start + half {
                let a = buf[j];
                let b = buf[j + half];
                buf[j] = a + b;
                buf[j + half] = a - b;
            }
        }
        half *= 2;
    }
}

impl MeasurementEnsemble {
    /// Draws a seeded ensemble.
    ///
    /// Gaussian: every entry of every `A_i` is i.i.d. CN(0,1). HadamardType:
    /// `A_i = F D_i H` where `H` holds the first `N` columns of the Sylvester
    /// Hadamard matrix of order `L` (entries `+-1`, column norm `sqrt(L)`),
    /// requiring `L` and `N` to be powers of two with `N <= L`.
    pub fn generate(
        l: usize,
        k: usize,
        n: usize,
        s: usize,
        kind: EnsembleKind,
        seed: u64,
    ) -> Result<Self> {
        validate_dims(l, k, n, s)?;
        let encoding = match kind {
            EnsembleKind::Gaussian => Encoding::Dense(
                (0..s)
                    .map(|i| {
                        let mut rng = rng::stream_rng(seed, stream::ENCODING + i as u64);
                        rng::complex_normal_mat(&mut rng, l, n)
                    })
                    .collect(),
            ),
            EnsembleKind::HadamardType => {
                if !is_pow2(l) || !is_pow2(n) || n > l {
                    return Err(DemixError::InvalidParameter(format!(
                        "Hadamard-type ensemble needs L, N powers of two with N <= L (got L={l}, N={n})"
                    )));
                }
                Encoding::Hadamard {
                    signs: (0..s)
                        .map(|i| {
                            let mut rng = rng::stream_rng(seed, stream::ENCODING + i as u64);
                            Array1::from_shape_fn(l, |_| {
                                if rng.random::<bool>() {
                                    1.0
                                } else {
                                    -1.0
                                }
                            })
                        })
                        .collect(),
                }
            }
        };
        Ok(Self::assemble(l, k, n, s, kind, Some(seed), encoding))
    }

    /// Wraps explicitly supplied `L x N` encoding matrices.
    pub fn from_matrices(l: usize, k: usize, matrices: Vec<Array2<C64>>) -> Result<Self> {
        let s = matrices.len();
        let n = matrices.first().map(|m| m.ncols()).unwrap_or(0);
        validate_dims(l, k, n, s)?;
        for m in &matrices {
            check_len("encoding matrix rows", l, m.nrows())?;
            check_len("encoding matrix cols", n, m.ncols())?;
        }
        Ok(Self::assemble(
            l,
            k,
            n,
            s,
            EnsembleKind::Gaussian,
            None,
            Encoding::Dense(matrices),
        ))
    }

    fn assemble(
        l: usize,
        k: usize,
        n: usize,
        s: usize,
        kind: EnsembleKind,
        seed: Option<u64>,
        encoding: Encoding,
    ) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            l,
            k,
            n,
            s,
            kind,
            seed,
            encoding,
            fft: planner.plan_fft_forward(l),
            ifft: planner.plan_fft_inverse(l),
            scale: 1.0 / (l as f64).sqrt(),
        }
    }

    pub fn l(&self) -> usize {
        self.l
    }
    pub fn k(&self) -> usize {
        self.k
    }
    pub fn n(&self) -> usize {
        self.n
    }
    pub fn s(&self) -> usize {
        self.s
    }
    pub fn kind(&self) -> EnsembleKind {
        self.kind
    }
    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    fn check_source(&self, i: usize) -> Result<()> {
        if i >= self.s {
            return Err(DemixError::InvalidParameter(format!(
                "source index {i} out of range (s = {})",
                self.s
            )));
        }
        Ok(())
    }

    /// Unitary forward DFT of a length-`L` buffer, in place.
    fn unitary_fft(&self, buf: &mut [C64]) {
        self.fft.process(buf);
        for v in buf.iter_mut() {
            *v *= self.scale;
        }
    }

    /// Unitary inverse DFT of a length-`L` buffer, in place.
    fn unitary_ifft(&self, buf: &mut [C64]) {
        self.ifft.process(buf);
        for v in buf.iter_mut() {
            *v *= self.scale;
        }
    }

    /// `B h`: zero-pad to length `L`, unitary FFT.
    pub fn apply_b(&self, h: ArrayView1<C64>) -> Result<Array1<C64>> {
        check_len("apply_B input", self.k, h.len())?;
        let mut buf = vec![C64::new(0.0, 0.0); self.l];
        for (b, &v) in buf.iter_mut().zip(h.iter()) {
            *b = v;
        }
        self.unitary_fft(&mut buf);
        Ok(Array1::from_vec(buf))
    }

    /// `B^* z`: unitary inverse FFT, keep the first `K` entries.
    pub fn apply_b_adjoint(&self, z: ArrayView1<C64>) -> Result<Array1<C64>> {
        check_len("apply_B_adjoint input", self.l, z.len())?;
        let mut buf = z.to_vec();
        self.unitary_ifft(&mut buf);
        buf.truncate(self.k);
        Ok(Array1::from_vec(buf))
    }

    /// `A_i x` in `C^L`.
    pub fn encode(&self, i: usize, x: ArrayView1<C64>) -> Result<Array1<C64>> {
        self.check_source(i)?;
        check_len("encoding input", self.n, x.len())?;
        Ok(match &self.encoding {
            Encoding::Dense(mats) => linalg::mat_vec(mats[i].view(), x),
            Encoding::Hadamard { signs } => {
                let mut buf = vec![C64::new(0.0, 0.0); self.l];
                for (b, &v) in buf.iter_mut().zip(x.iter()) {
                    *b = v;
                }
                fwht(&mut buf);
                for (b, &d) in buf.iter_mut().zip(signs[i].iter()) {
                    *b *= d;
                }
                self.unitary_fft(&mut buf);
                Array1::from_vec(buf)
            }
        })
    }

    /// `A_i^* w` in `C^N`.
    pub fn encode_adjoint(&self, i: usize, w: ArrayView1<C64>) -> Result<Array1<C64>> {
        self.check_source(i)?;
        check_len("encoding adjoint input", self.l, w.len())?;
        Ok(match &self.encoding {
            Encoding::Dense(mats) => linalg::adjoint_mat_vec(mats[i].view(), w),
            Encoding::Hadamard { signs } => {
                let mut buf = w.to_vec();
                self.unitary_ifft(&mut buf);
                for (b, &d) in buf.iter_mut().zip(signs[i].iter()) {
                    *b *= d;
                }
                fwht(&mut buf);
                buf.truncate(self.n);
                Array1::from_vec(buf)
            }
        })
    }

    /// Dense `L x N` view of `A_i` (materialized on demand for the structured
    /// ensemble).
    pub fn encoding_matrix(&self, i: usize) -> Result<Cow<'_, Array2<C64>>> {
        self.check_source(i)?;
        Ok(match &self.encoding {
            Encoding::Dense(mats) => Cow::Borrowed(&mats[i]),
            Encoding::Hadamard { .. } => {
                let mut m = Array2::zeros((self.l, self.n));
                let mut e = Array1::zeros(self.n);
                for c in 0..self.n {
                    e.fill(C64::new(0.0, 0.0));
                    e[c] = C64::new(1.0, 0.0);
                    let col = self.encode(i, e.view())?;
                    m.column_mut(c).assign(&col);
                }
                Cow::Owned(m)
            }
        })
    }

    /// `A_i(Z)` for a general `K x N` matrix: `M = B Z` column by column, then
    /// entry `l` is `sum_n M[l, n] conj(A_i[l, n])`.
    pub fn lift_forward_i(&self, z: ArrayView2<C64>, i: usize) -> Result<Array1<C64>> {
        self.check_source(i)?;
        check_len("lift_forward rows", self.k, z.nrows())?;
        check_len("lift_forward cols", self.n, z.ncols())?;
        let a = self.encoding_matrix(i)?;
        let mut out = Array1::<C64>::zeros(self.l);
        for (col_z, col_a) in z.axis_iter(Axis(1)).zip(a.axis_iter(Axis(1))) {
            let bz = self.apply_b(col_z)?;
            for ((o, &m), &av) in out.iter_mut().zip(bz.iter()).zip(col_a.iter()) {
                *o += m * av.conj();
            }
        }
        Ok(out)
    }

    /// `A_i(h x^*) = (B h) .* conj(A_i x)` in `O(L log L + L N)`.
    pub fn lift_forward_rank1(
        &self,
        h: ArrayView1<C64>,
        x: ArrayView1<C64>,
        i: usize,
    ) -> Result<Array1<C64>> {
        let bh = self.apply_b(h)?;
        let ax = self.encode(i, x)?;
        Ok(bh * ax.mapv(|v| v.conj()))
    }

    /// `A_i^*(z) = B^* diag(z) A_i` as a dense `K x N` matrix.
    pub fn lift_adjoint_i(&self, z: ArrayView1<C64>, i: usize) -> Result<Array2<C64>> {
        self.check_source(i)?;
        check_len("lift_adjoint input", self.l, z.len())?;
        let a = self.encoding_matrix(i)?;
        let mut out = Array2::zeros((self.k, self.n));
        for (c, col_a) in a.axis_iter(Axis(1)).enumerate() {
            let weighted = &z * &col_a;
            out.column_mut(c).assign(&self.apply_b_adjoint(weighted.view())?);
        }
        Ok(out)
    }

    /// `A_i^*(z) x = B^*(z .* (A_i x))` without forming the `K x N` matrix.
    pub fn lift_adjoint_apply_right(
        &self,
        z: ArrayView1<C64>,
        x: ArrayView1<C64>,
        i: usize,
    ) -> Result<Array1<C64>> {
        check_len("lift_adjoint_apply_right residual", self.l, z.len())?;
        let ax = self.encode(i, x)?;
        self.apply_b_adjoint((&z * &ax).view())
    }

    /// `(A_i^*(z))^* h = A_i^*(conj(z) .* (B h))` without forming the matrix.
    pub fn lift_adjoint_apply_left(
        &self,
        z: ArrayView1<C64>,
        h: ArrayView1<C64>,
        i: usize,
    ) -> Result<Array1<C64>> {
        check_len("lift_adjoint_apply_left residual", self.l, z.len())?;
        let bh = self.apply_b(h)?;
        let w: Array1<C64> = z.iter().zip(bh.iter()).map(|(a, b)| a.conj() * b).collect();
        self.encode_adjoint(i, w.view())
    }

    /// `A(Z) = sum_i A_i(Z_i)`.
    pub fn forward(&self, z: &LiftedBlockDiag) -> Result<Array1<C64>> {
        check_len("forward block count", self.s, z.num_blocks())?;
        let mut out = Array1::zeros(self.l);
        for (i, block) in z.blocks.iter().enumerate() {
            out += &self.lift_forward_i(block.view(), i)?;
        }
        Ok(out)
    }

    /// `A^*(z) = blkdiag(A_1^*(z), ..., A_s^*(z))`.
    pub fn adjoint(&self, z: ArrayView1<C64>) -> Result<LiftedBlockDiag> {
        let blocks = (0..self.s)
            .map(|i| self.lift_adjoint_i(z, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(LiftedBlockDiag { blocks })
    }

    /// Estimates `||A||` by power iteration on `A^* A` over block-diagonal
    /// matrices. Stops when the eigen-residual `||A^*A x - lambda x||` of the
    /// unit iterate drops below `tol`.
    pub fn operator_norm_estimate(&self, tol: f64) -> Result<f64> {
        self.operator_norm_estimate_capped(tol, POWER_ITERATION_CAP)
    }

    pub fn operator_norm_estimate_capped(&self, tol: f64, max_iter: usize) -> Result<f64> {
        if !(tol > 0.0) {
            return Err(DemixError::InvalidParameter(format!(
                "power-iteration tolerance must be positive, got {tol}"
            )));
        }
        let mut rng = rng::stream_rng(0, stream::POWER);
        let mut x = LiftedBlockDiag {
            blocks: (0..self.s)
                .map(|_| rng::complex_normal_mat(&mut rng, self.k, self.n))
                .collect(),
        };
        x.scale(1.0 / x.frobenius_norm());
        let mut prev = f64::NAN;
        for _ in 0..max_iter {
            let ax = self.forward(&x)?;
            let rayleigh = linalg::norm_sqr(ax.view());
            let mut next = self.adjoint(ax.view())?;
            // Eigen-residual of A*A at the unit iterate bounds the eigenvalue error.
            let residual = next
                .blocks
                .iter()
                .zip(&x.blocks)
                .map(|(g, v)| g.iter().zip(v).map(|(a, b)| (a - b * rayleigh).norm_sqr()).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if residual < tol {
                return Ok(rayleigh.sqrt());
            }
            prev = rayleigh;
            let nrm = next.frobenius_norm();
            if nrm == 0.0 {
                return Ok(0.0);
            }
            next.scale(1.0 / nrm);
            x = next;
        }
        Err(DemixError::NotConverged {
            what: "operator norm power iteration",
            iterations: max_iter,
            last_estimate: prev.max(0.0).sqrt(),
        })
    }
}

fn validate_dims(l: usize, k: usize, n: usize, s: usize) -> Result<()> {
    if l == 0 || k == 0 || n == 0 || s == 0 {
        return Err(DemixError::InvalidParameter(format!(
            "all dimensions must be positive (L={l}, K={k}, N={n}, s={s})"
        )));
    }
    if k > l {
        return Err(DemixError::InvalidParameter(format!(
            "channel dimension K={k} exceeds L={l}"
        )));
    }
    Ok(())
}

/// Convenience constructor mirroring [`MeasurementEnsemble::generate`].
pub fn make_ensemble(
    l: usize,
    k: usize,
    n: usize,
    s: usize,
    kind: EnsembleKind,
    seed: u64,
) -> Result<MeasurementEnsemble> {
    MeasurementEnsemble::generate(l, k, n, s, kind, seed)
}

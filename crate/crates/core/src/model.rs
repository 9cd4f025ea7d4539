//! Problem instances, the measurement map and error metrics.

use std::fs;
use std::path::Path;

use log::warn;
use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, DemixError, Result};
use crate::linalg;
use crate::operators::{EnsembleKind, LiftedBlockDiag, MeasurementEnsemble};
use crate::rng::{self, stream};
use crate::C64;

/// Stacked unknowns `(h, x)`: `s` channel blocks in `C^K` and `s` signal
/// blocks in `C^N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockPair {
    pub h: Vec<Array1<C64>>,
    pub x: Vec<Array1<C64>>,
}

impl BlockPair {
    pub fn new(h: Vec<Array1<C64>>, x: Vec<Array1<C64>>) -> Result<Self> {
        check_len("block pair block count", h.len(), x.len())?;
        Ok(Self { h, x })
    }

    pub fn zeros(s: usize, k: usize, n: usize) -> Self {
        Self {
            h: vec![Array1::zeros(k); s],
            x: vec![Array1::zeros(n); s],
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.h.len()
    }

    /// Checks the block counts and lengths against an ensemble.
    pub fn check_dims(&self, ens: &MeasurementEnsemble) -> Result<()> {
        check_len("block pair h blocks", ens.s(), self.h.len())?;
        check_len("block pair x blocks", ens.s(), self.x.len())?;
        for (h, x) in self.h.iter().zip(&self.x) {
            check_len("block pair h length", ens.k(), h.len())?;
            check_len("block pair x length", ens.n(), x.len())?;
        }
        Ok(())
    }

    /// `H(h, x)`, the block-diagonal lift.
    pub fn lift(&self) -> LiftedBlockDiag {
        LiftedBlockDiag::from_rank_one(&self.h, &self.x)
    }

    pub fn norm_sqr(&self) -> f64 {
        self.h
            .iter()
            .chain(&self.x)
            .map(|v| linalg::norm_sqr(v.view()))
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// `<self, other> = other^* self` over the stacked vector.
    pub fn inner(&self, other: &Self) -> C64 {
        self.h
            .iter()
            .chain(&self.x)
            .zip(other.h.iter().chain(&other.x))
            .map(|(a, b)| linalg::inner(a.view(), b.view()))
            .sum()
    }

    /// `self + alpha * dir`.
    pub fn add_scaled(&self, alpha: f64, dir: &Self) -> Self {
        let step = |a: &Array1<C64>, b: &Array1<C64>| a + &b.mapv(|v| v * alpha);
        Self {
            h: self.h.iter().zip(&dir.h).map(|(a, b)| step(a, b)).collect(),
            x: self.x.iter().zip(&dir.x).map(|(a, b)| step(a, b)).collect(),
        }
    }
}

/// Ground truth, noise and observation for one demixing problem.
#[derive(Debug, Clone)]
pub struct ProblemInstance {
    ensemble: MeasurementEnsemble,
    truth: BlockPair,
    d_i0: Vec<f64>,
    d0: f64,
    kappa: f64,
    sigma: f64,
    noise: Array1<C64>,
    y: Array1<C64>,
    mu_h: f64,
    seed: Option<u64>,
    scale_profile: Vec<f64>,
}

impl ProblemInstance {
    /// Builds an instance from a user-supplied truth and noise vector.
    /// Unbalanced blocks (`||h_i|| != ||x_i||`) are rebalanced along the
    /// scaling ambiguity, which leaves `h_i x_i^*` unchanged.
    pub fn from_truth(
        ensemble: MeasurementEnsemble,
        truth: BlockPair,
        noise: Array1<C64>,
        sigma: f64,
    ) -> Result<Self> {
        truth.check_dims(&ensemble)?;
        check_len("noise length", ensemble.l(), noise.len())?;
        let mut truth = truth;
        for i in 0..truth.num_blocks() {
            let nh = linalg::norm(truth.h[i].view());
            let nx = linalg::norm(truth.x[i].view());
            if nh == 0.0 || nx == 0.0 {
                return Err(DemixError::InvalidParameter(format!(
                    "ground-truth block {i} is zero"
                )));
            }
            if ((nh - nx) / nh.max(nx)).abs() > 1e-12 {
                warn!("rebalancing ground-truth block {i}: ||h|| = {nh:e}, ||x|| = {nx:e}");
                let scale = (nx / nh).sqrt();
                truth.h[i].mapv_inplace(|v| v * scale);
                truth.x[i].mapv_inplace(|v| v / scale);
            }
        }
        Self::assemble(ensemble, truth, noise, sigma, None, None)
    }

    fn assemble(
        ensemble: MeasurementEnsemble,
        truth: BlockPair,
        noise: Array1<C64>,
        sigma: f64,
        seed: Option<u64>,
        scale_profile: Option<Vec<f64>>,
    ) -> Result<Self> {
        let d_i0: Vec<f64> = truth
            .h
            .iter()
            .zip(&truth.x)
            .map(|(h, x)| linalg::norm(h.view()) * linalg::norm(x.view()))
            .collect();
        let d0 = d_i0.iter().map(|d| d * d).sum::<f64>().sqrt();
        let max = d_i0.iter().cloned().fold(f64::MIN, f64::max);
        let min = d_i0.iter().cloned().fold(f64::MAX, f64::min);
        let y = measure(&ensemble, &truth, noise.view())?;
        let mu_h = incoherence(&ensemble, &truth.h)?;
        Ok(Self {
            scale_profile: scale_profile.unwrap_or_else(|| d_i0.clone()),
            ensemble,
            truth,
            d_i0,
            d0,
            kappa: max / min,
            sigma,
            noise,
            y,
            mu_h,
            seed,
        })
    }

    pub fn ensemble(&self) -> &MeasurementEnsemble {
        &self.ensemble
    }
    pub fn truth(&self) -> &BlockPair {
        &self.truth
    }
    /// Per-source scales `d_i0 = ||h_i0|| ||x_i0||`.
    pub fn d_i0(&self) -> &[f64] {
        &self.d_i0
    }
    pub fn d0(&self) -> f64 {
        self.d0
    }
    pub fn kappa(&self) -> f64 {
        self.kappa
    }
    pub fn sigma(&self) -> f64 {
        self.sigma
    }
    pub fn noise(&self) -> &Array1<C64> {
        &self.noise
    }
    pub fn y(&self) -> &Array1<C64> {
        &self.y
    }
    pub fn seed(&self) -> Option<u64> {
        self.seed
    }
    /// Incoherence `mu_h` of the ground-truth channels.
    pub fn incoherence_mu_h(&self) -> f64 {
        self.mu_h
    }

    /// Describes how to regenerate this instance exactly, if it was drawn by
    /// [`generate_instance`] from a seeded ensemble.
    pub fn recipe(&self) -> Option<InstanceRecipe> {
        let ensemble_seed = self.ensemble.seed()?;
        let seed = self.seed?;
        Some(InstanceRecipe {
            format_version: RECIPE_VERSION,
            l: self.ensemble.l(),
            k: self.ensemble.k(),
            n: self.ensemble.n(),
            s: self.ensemble.s(),
            kind: self.ensemble.kind(),
            ensemble_seed,
            instance_seed: seed,
            sigma: self.sigma,
            scale_profile: self.scale_profile.clone(),
            y_sha256: observation_digest(&self.y),
        })
    }
}

/// Draws a balanced ground truth with `||h_i0|| = ||x_i0|| = sqrt(scale_i)`
/// and complex Gaussian noise `e ~ CN(0, sigma^2 d_0^2 / L I_L)`.
pub fn generate_instance(
    ensemble: MeasurementEnsemble,
    scale_profile: &[f64],
    sigma: f64,
    seed: u64,
) -> Result<ProblemInstance> {
    check_len("scale profile length", ensemble.s(), scale_profile.len())?;
    if scale_profile.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
        return Err(DemixError::InvalidParameter(format!(
            "scale profile entries must be positive and finite: {scale_profile:?}"
        )));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(DemixError::InvalidParameter(format!(
            "noise level must be non-negative, got {sigma}"
        )));
    }
    let (k, n, l) = (ensemble.k(), ensemble.n(), ensemble.l());
    let mut h = Vec::with_capacity(scale_profile.len());
    let mut x = Vec::with_capacity(scale_profile.len());
    for (i, &p) in scale_profile.iter().enumerate() {
        let mut rng = rng::stream_rng(seed, stream::TRUTH + i as u64);
        let mut hi = rng::complex_normal_vec(&mut rng, k);
        let mut xi = rng::complex_normal_vec(&mut rng, n);
        let target = p.sqrt();
        let sh = target / linalg::norm(hi.view());
        let sx = target / linalg::norm(xi.view());
        hi.mapv_inplace(|v| v * sh);
        xi.mapv_inplace(|v| v * sx);
        h.push(hi);
        x.push(xi);
    }
    let d0 = scale_profile.iter().map(|d| d * d).sum::<f64>().sqrt();
    let noise = if sigma == 0.0 {
        Array1::zeros(l)
    } else {
        let mut rng = rng::stream_rng(seed, stream::NOISE);
        let std = sigma * d0 / (l as f64).sqrt();
        rng::complex_normal_vec(&mut rng, l).mapv(|v| v * std)
    };
    ProblemInstance::assemble(
        ensemble,
        BlockPair { h, x },
        noise,
        sigma,
        Some(seed),
        Some(scale_profile.to_vec()),
    )
}

/// `y = sum_i A_i(h_i x_i^*) + e` through the rank-one fast path.
pub fn measure(
    ens: &MeasurementEnsemble,
    z: &BlockPair,
    e: ndarray::ArrayView1<C64>,
) -> Result<Array1<C64>> {
    z.check_dims(ens)?;
    check_len("noise length", ens.l(), e.len())?;
    let mut out = e.to_owned();
    for (i, (h, x)) in z.h.iter().zip(&z.x).enumerate() {
        out += &ens.lift_forward_rank1(h.view(), x.view(), i)?;
    }
    Ok(out)
}

/// `||h x^* - h0 x0^*||_F^2` from Gram quantities, never forming `K x N`
/// matrices.
pub fn rank_one_distance_sqr(
    h: &Array1<C64>,
    x: &Array1<C64>,
    h0: &Array1<C64>,
    x0: &Array1<C64>,
) -> f64 {
    let cross = linalg::inner(h.view(), h0.view()) * linalg::inner(x0.view(), x.view());
    let val = linalg::norm_sqr(h.view()) * linalg::norm_sqr(x.view())
        + linalg::norm_sqr(h0.view()) * linalg::norm_sqr(x0.view())
        - 2.0 * cross.re;
    val.max(0.0)
}

/// Global relative error `||H(h,x) - H(h0,x0)||_F / d_0`.
pub fn relative_error(z: &BlockPair, inst: &ProblemInstance) -> f64 {
    let t = &inst.truth;
    let total: f64 = (0..t.num_blocks())
        .map(|i| rank_one_distance_sqr(&z.h[i], &z.x[i], &t.h[i], &t.x[i]))
        .sum();
    total.sqrt() / inst.d0
}

/// Relative error of block `i`, normalized by `d_i0`.
pub fn per_block_error(z: &BlockPair, inst: &ProblemInstance, i: usize) -> f64 {
    let t = &inst.truth;
    rank_one_distance_sqr(&z.h[i], &z.x[i], &t.h[i], &t.x[i]).sqrt() / inst.d_i0[i]
}

/// `20 log10(||y|| / ||e||)`; `+inf` for a noiseless instance.
pub fn snr_db(inst: &ProblemInstance) -> f64 {
    let ne = linalg::norm(inst.noise.view());
    if ne == 0.0 {
        return f64::INFINITY;
    }
    20.0 * (linalg::norm(inst.y.view()) / ne).log10()
}

/// The alternative SNR measure `1 / sigma^2`.
pub fn inverse_noise_power(inst: &ProblemInstance) -> f64 {
    1.0 / (inst.sigma * inst.sigma)
}

/// `max_i sqrt(L) ||B h_i||_inf / ||h_i||`.
pub fn incoherence(ens: &MeasurementEnsemble, h: &[Array1<C64>]) -> Result<f64> {
    let root_l = (ens.l() as f64).sqrt();
    let mut mu = 0.0f64;
    for hi in h {
        let bh = ens.apply_b(hi.view())?;
        mu = mu.max(root_l * linalg::max_abs(bh.view()) / linalg::norm(hi.view()));
    }
    Ok(mu)
}

pub fn incoherence_mu_h(inst: &ProblemInstance) -> f64 {
    inst.mu_h
}

const RECIPE_VERSION: u32 = 1;

/// Self-describing record sufficient to regenerate a [`ProblemInstance`]
/// bit-for-bit. The observation digest guards against silent drift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecipe {
    pub format_version: u32,
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub s: usize,
    pub kind: EnsembleKind,
    pub ensemble_seed: u64,
    pub instance_seed: u64,
    pub sigma: f64,
    pub scale_profile: Vec<f64>,
    pub y_sha256: String,
}

impl InstanceRecipe {
    /// Regenerates the instance and verifies the observation digest.
    pub fn rebuild(&self) -> Result<ProblemInstance> {
        let ens = MeasurementEnsemble::generate(
            self.l,
            self.k,
            self.n,
            self.s,
            self.kind,
            self.ensemble_seed,
        )?;
        let inst = generate_instance(ens, &self.scale_profile, self.sigma, self.instance_seed)?;
        let digest = observation_digest(inst.y());
        if digest != self.y_sha256 {
            return Err(DemixError::ChecksumMismatch {
                stored: self.y_sha256.clone(),
                regenerated: digest,
            });
        }
        Ok(inst)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

fn observation_digest(y: &Array1<C64>) -> String {
    let mut bytes = Vec::with_capacity(16 * y.len());
    for v in y.iter() {
        bytes.extend_from_slice(&v.re.to_le_bytes());
        bytes.extend_from_slice(&v.im.to_le_bytes());
    }
    rng::sha256_hex(&bytes)
}

//! Ground-truth linear-Gaussian system and dataset samplers.
//!
//! Inputs `x ~ N(0, I)` drive measured latents `l = A*^T x + eta_l`, which are
//! read out into recordings `r = H*^T l + eta_r`; the task target is
//! `y = beta*^T x + eta_y`. `A*` is kept orthonormal, so only its column space
//! carries meaning.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, gaussian_matrix, gaussian_vector, haar_frame, psd_factor};
use crate::rng::{Purpose, SeedTree};
use crate::textfmt::TextDoc;

/// Brain samples recorded per hour of scanning (one stimulus every 2 s).
pub const SAMPLES_PER_HOUR: f64 = 1800.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub d_x: usize,
    pub d_l: usize,
    pub d_r: usize,
    /// `d_x x d_l`, orthonormal columns.
    pub a_star: DMatrix<f64>,
    /// `d_l x d_r` measurement map.
    pub h_star: DMatrix<f64>,
    pub beta_star: DVector<f64>,
    /// Latent noise covariance, `d_l x d_l`.
    pub sigma_l: DMatrix<f64>,
    pub sigma_r2: f64,
    pub sigma_y2: f64,
}

impl ModelParams {
    /// Assembles and validates a parameter set.
    pub fn new(
        a_star: DMatrix<f64>,
        h_star: DMatrix<f64>,
        beta_star: DVector<f64>,
        sigma_l: DMatrix<f64>,
        sigma_r2: f64,
        sigma_y2: f64,
    ) -> Result<Self> {
        let params = Self {
            d_x: a_star.nrows(),
            d_l: a_star.ncols(),
            d_r: h_star.ncols(),
            a_star,
            h_star,
            beta_star,
            sigma_l,
            sigma_r2,
            sigma_y2,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let (d_x, d_l, d_r) = (self.d_x, self.d_l, self.d_r);
        if d_l == 0 || d_l >= d_x || d_l > d_r {
            return Err(Error::Dimension(format!(
                "need 0 < d_l < d_x and d_l <= d_r, got d_x={d_x}, d_l={d_l}, d_r={d_r}"
            )));
        }
        if self.a_star.shape() != (d_x, d_l)
            || self.h_star.shape() != (d_l, d_r)
            || self.beta_star.len() != d_x
            || self.sigma_l.shape() != (d_l, d_l)
        {
            return Err(Error::Dimension("parameter shapes disagree".into()));
        }
        let gram = self.a_star.transpose() * &self.a_star;
        if (gram - DMatrix::identity(d_l, d_l)).amax() > 1e-10 {
            return Err(Error::Dimension("A* columns are not orthonormal".into()));
        }
        if linalg::numerical_rank(&self.h_star, 1e-10) < d_l {
            return Err(Error::Rank(format!("H* has rank below d_l = {d_l}")));
        }
        if (&self.sigma_l - self.sigma_l.transpose()).amax() > 1e-12 {
            return Err(Error::InvalidArgument("latent noise covariance is not symmetric".into()));
        }
        let min_eig = self.sigma_l.clone().symmetric_eigenvalues().min();
        if min_eig < -1e-12 * self.sigma_l.amax().max(1.0) {
            return Err(Error::InvalidArgument("latent noise covariance is not PSD".into()));
        }
        if !(self.sigma_r2 >= 0.0) || !(self.sigma_y2 >= 0.0) {
            return Err(Error::InvalidArgument("noise variances must be >= 0".into()));
        }
        Ok(())
    }

    /// Orthogonal projector onto `col(A*)`.
    pub fn latent_projector(&self) -> DMatrix<f64> {
        linalg::projector(&self.a_star)
    }

    /// `A*^T beta*`, the latent coordinates of the aligned part of the task.
    pub fn latent_task_coords(&self) -> DVector<f64> {
        self.a_star.tr_mul(&self.beta_star)
    }

    /// `(I - P_{A*}) beta*`.
    pub fn misaligned_component(&self) -> DVector<f64> {
        &self.beta_star - &self.a_star * self.latent_task_coords()
    }

    /// Per-channel recording noise covariance `H*^T Sigma_l H* + sigma_r^2 I`.
    pub fn recording_noise_cov(&self) -> DMatrix<f64> {
        let mut psi = self.h_star.transpose() * &self.sigma_l * &self.h_star;
        for i in 0..self.d_r {
            psi[(i, i)] += self.sigma_r2;
        }
        psi
    }

    pub fn to_text(&self, comments: &[String]) -> String {
        let mut doc = TextDoc::new();
        doc.comments.push("brainvalue model".into());
        doc.comments.extend(comments.iter().cloned());
        doc.push_scalar("d_x", self.d_x as f64);
        doc.push_scalar("d_l", self.d_l as f64);
        doc.push_scalar("d_r", self.d_r as f64);
        doc.push_scalar("sigma_r2", self.sigma_r2);
        doc.push_scalar("sigma_y2", self.sigma_y2);
        doc.push_matrix("a_star", self.a_star.clone());
        doc.push_matrix("h_star", self.h_star.clone());
        doc.push_vector("beta_star", &self.beta_star);
        doc.push_matrix("sigma_l", self.sigma_l.clone());
        doc.render()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let doc = TextDoc::parse(text)?;
        let params = Self {
            d_x: doc.count("d_x")?,
            d_l: doc.count("d_l")?,
            d_r: doc.count("d_r")?,
            a_star: doc.matrix("a_star")?.clone(),
            h_star: doc.matrix("h_star")?.clone(),
            beta_star: doc.vector("beta_star")?,
            sigma_l: doc.matrix("sigma_l")?.clone(),
            sigma_r2: doc.scalar("sigma_r2")?,
            sigma_y2: doc.scalar("sigma_y2")?,
        };
        params.validate()?;
        Ok(params)
    }
}

/// Test-time input covariance `c_on P_{A*} + c_off (I - P_{A*})` plus label noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestSpec {
    pub c_on: f64,
    pub c_off: f64,
    pub sigma_test2: f64,
}

impl TestSpec {
    pub fn isotropic(sigma_test2: f64) -> Self {
        Self {
            c_on: 1.0,
            c_off: 1.0,
            sigma_test2,
        }
    }

    /// `(1 - tau) P_{A*} + tau P_{A*perp}`.
    pub fn shift(tau: f64, sigma_test2: f64) -> Self {
        Self {
            c_on: 1.0 - tau,
            c_off: tau,
            sigma_test2,
        }
    }

    pub fn on_subspace(sigma_test2: f64) -> Self {
        Self::shift(0.0, sigma_test2)
    }

    pub fn off_subspace(sigma_test2: f64) -> Self {
        Self::shift(1.0, sigma_test2)
    }

    pub fn validate(&self, d_x: usize, d_l: usize) -> Result<()> {
        if !(self.c_on >= 0.0 && self.c_off >= 0.0 && self.sigma_test2 >= 0.0) {
            return Err(Error::InvalidArgument(format!("invalid test spec {self:?}")));
        }
        if !(self.trace(d_x, d_l) > 0.0) {
            return Err(Error::InvalidArgument("test covariance has zero trace".into()));
        }
        Ok(())
    }

    pub fn trace_on(&self, d_l: usize) -> f64 {
        self.c_on * d_l as f64
    }

    pub fn trace_off(&self, d_x: usize, d_l: usize) -> f64 {
        self.c_off * (d_x - d_l) as f64
    }

    pub fn trace(&self, d_x: usize, d_l: usize) -> f64 {
        self.trace_on(d_l) + self.trace_off(d_x, d_l)
    }

    pub fn is_isotropic_shape(&self) -> bool {
        self.c_on == self.c_off
    }

    /// Dense `d_x x d_x` covariance.
    pub fn covariance(&self, params: &ModelParams) -> DMatrix<f64> {
        let p = params.latent_projector();
        let eye = DMatrix::<f64>::identity(params.d_x, params.d_x);
        &p * self.c_on + (eye - &p) * self.c_off
    }

    /// `v^T Sigma_test v` without forming the covariance.
    pub fn quad_form(&self, params: &ModelParams, v: &DVector<f64>) -> f64 {
        let on = params.a_star.tr_mul(v).norm_squared();
        let total = v.norm_squared();
        self.c_on * on + self.c_off * (total - on)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LatentNoise {
    Isotropic(f64),
    Diagonal(Vec<f64>),
}

impl LatentNoise {
    fn covariance(&self, d_l: usize) -> Result<DMatrix<f64>> {
        match self {
            LatentNoise::Isotropic(v) if *v >= 0.0 => Ok(DMatrix::identity(d_l, d_l) * *v),
            LatentNoise::Diagonal(d) if d.len() == d_l && d.iter().all(|v| *v >= 0.0) => {
                Ok(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
            }
            other => Err(Error::InvalidArgument(format!(
                "latent noise {other:?} is not a valid {d_l}-dimensional covariance"
            ))),
        }
    }
}

fn default_pool_width() -> usize {
    1
}

fn default_pool_weight() -> f64 {
    1.0
}

/// Recipe for [`build_random_model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub d_x: usize,
    pub d_l: usize,
    pub d_r: usize,
    pub misalignment: f64,
    /// `|beta*|^2 / sigma_y^2`; `inf` gives noiseless labels.
    pub snr_task: f64,
    pub latent_noise: LatentNoise,
    pub sigma_r2: f64,
    #[serde(default = "default_pool_width")]
    pub pool_width: usize,
    #[serde(default = "default_pool_weight")]
    pub pool_weight: f64,
}

/// Pooling readout: channel `j` sums a window of up to `pool_width`
/// consecutive latents, scaled by `weight`.
///
/// Windows cycle through the `d_l + pool_width - 1` placements of a width-`w`
/// window sliding over `0..d_l` (clipped at both edges), which keeps the map at
/// rank `d_l` whenever `d_r >= d_l + pool_width - 1`. With `pool_width = 1`
/// this is the block map `weight * [I | I | ... ]`.
pub fn pooling_matrix(d_l: usize, d_r: usize, pool_width: usize, weight: f64) -> DMatrix<f64> {
    let w = pool_width.max(1) as i64;
    let placements = d_l as i64 + w - 1;
    let mut h = DMatrix::zeros(d_l, d_r);
    for j in 0..d_r {
        let start = (j as i64 % placements) - (w - 1);
        let lo = start.max(0);
        let hi = (start + w - 1).min(d_l as i64 - 1);
        for l in lo..=hi {
            h[(l as usize, j)] = weight;
        }
    }
    h
}

/// Draws a model with orthonormal `A*`, unit-norm `beta*` at misalignment `m`
/// exactly, and a pooling readout.
pub fn build_random_model(spec: &ModelSpec, seed: u64) -> Result<ModelParams> {
    let (d_x, d_l, d_r) = (spec.d_x, spec.d_l, spec.d_r);
    if d_l == 0 || d_l >= d_x || d_l > d_r || spec.pool_width == 0 {
        return Err(Error::Dimension(format!(
            "need 0 < d_l < d_x, d_l <= d_r and pool_width >= 1, got d_x={d_x}, d_l={d_l}, d_r={d_r}, pool_width={}",
            spec.pool_width
        )));
    }
    let m = spec.misalignment;
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Misalignment {
            requested: m,
            norm: 1.0,
        });
    }
    if !(spec.snr_task > 0.0) || !(spec.sigma_r2 >= 0.0) || !(spec.pool_weight > 0.0) {
        return Err(Error::InvalidArgument(
            "snr_task and pool_weight must be > 0 and sigma_r2 >= 0".into(),
        ));
    }
    let sigma_l = spec.latent_noise.covariance(d_l)?;
    let tree = SeedTree::new(seed);

    let a_star = haar_frame(&mut tree.rng(Purpose::LatentMap), d_x, d_l);
    let u_on = a_star.column(0).into_owned();
    let mut rng = tree.rng(Purpose::TaskVector);
    let u_off = loop {
        let g = gaussian_vector(&mut rng, d_x);
        let off = &g - &a_star * a_star.tr_mul(&g);
        let norm = off.norm();
        if norm > 1e-8 {
            break off / norm;
        }
    };
    let beta_star = u_on * (1.0 - m * m).sqrt() + u_off * m;

    let h_star = pooling_matrix(d_l, d_r, spec.pool_width, spec.pool_weight);
    let sigma_y2 = if spec.snr_task.is_infinite() {
        0.0
    } else {
        beta_star.norm_squared() / spec.snr_task
    };
    ModelParams::new(a_star, h_star, beta_star, sigma_l, spec.sigma_r2, sigma_y2)
}

/// Norm of the task vector outside the measured latent subspace.
pub fn misalignment(params: &ModelParams) -> f64 {
    params.misaligned_component().norm()
}

/// `|beta*|^2 / sigma_y^2`.
pub fn snr_task(params: &ModelParams) -> Result<f64> {
    if params.sigma_y2 == 0.0 {
        return Err(Error::DivideByZero("task label noise variance is zero".into()));
    }
    Ok(params.beta_star.norm_squared() / params.sigma_y2)
}

/// Average over channels of stimulus variance `(H*^T H*)_jj` over noise
/// variance `(H*^T Sigma_l H* + sigma_r^2 I)_jj`.
pub fn snr_brain(params: &ModelParams) -> Result<f64> {
    let h = &params.h_star;
    let sh = &params.sigma_l * h;
    let mut acc = 0.0;
    for j in 0..params.d_r {
        let col = h.column(j);
        let signal = col.norm_squared();
        let noise = col.dot(&sh.column(j)) + params.sigma_r2;
        if noise == 0.0 {
            return Err(Error::DivideByZero(format!("channel {j} has zero noise variance")));
        }
        acc += signal / noise;
    }
    Ok(acc / params.d_r as f64)
}

/// Stylised visual-fMRI system: 64x64 images, 10k stimulus-driven voxels, each
/// summing 4 latents, latent noise `0.5 I` and measurement noise 0.4.
///
/// With `variance_split` the voxel gain is instead scaled so that an average
/// voxel's single-trial variance is 40% stimulus, 40% measurement and 20%
/// neural.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FmriPreset {
    /// `SNR_T / SNR_B`.
    pub snr_ratio: f64,
    pub misalignment: f64,
    pub hours: f64,
    /// `d_l / d_x`.
    #[serde(default = "FmriPreset::default_latent_ratio")]
    pub latent_ratio: f64,
    #[serde(default)]
    pub variance_split: bool,
}

impl FmriPreset {
    pub const D_X: usize = 4096;
    pub const D_L: usize = 410;
    pub const D_R: usize = 10_000;
    pub const LATENT_NOISE: f64 = 0.5;
    pub const SIGMA_R2: f64 = 0.4;
    pub const POOL_WIDTH: usize = 4;

    fn default_latent_ratio() -> f64 {
        Self::D_L as f64 / Self::D_X as f64
    }

    pub fn new(snr_ratio: f64, misalignment: f64, hours: f64) -> Self {
        Self {
            snr_ratio,
            misalignment,
            hours,
            latent_ratio: Self::default_latent_ratio(),
            variance_split: false,
        }
    }

    pub fn d_l(&self) -> usize {
        (self.latent_ratio * Self::D_X as f64).round() as usize
    }

    pub fn n_b(&self) -> Result<u64> {
        if !(self.hours >= 0.0) {
            return Err(Error::InvalidArgument(format!("hours = {} < 0", self.hours)));
        }
        Ok(brain_samples_for_hours(self.hours))
    }

    /// Builds the model and returns it with the brain sample count for `hours`.
    pub fn build(&self, seed: u64) -> Result<(ModelParams, u64)> {
        let n_b = self.n_b()?;
        if !(self.snr_ratio > 0.0) {
            return Err(Error::InvalidArgument("snr_ratio must be > 0".into()));
        }
        let d_l = self.d_l();
        let weight = if self.variance_split {
            (Self::SIGMA_R2 / mean_window(d_l, Self::D_R, Self::POOL_WIDTH)).sqrt()
        } else {
            1.0
        };
        let spec = ModelSpec {
            d_x: Self::D_X,
            d_l,
            d_r: Self::D_R,
            misalignment: self.misalignment,
            snr_task: 1.0,
            latent_noise: LatentNoise::Isotropic(Self::LATENT_NOISE),
            sigma_r2: Self::SIGMA_R2,
            pool_width: Self::POOL_WIDTH,
            pool_weight: weight,
        };
        let mut params = build_random_model(&spec, seed)?;
        let snr_b = snr_brain(&params)?;
        params.sigma_y2 = params.beta_star.norm_squared() / (self.snr_ratio * snr_b);
        Ok((params, n_b))
    }
}

pub fn brain_samples_for_hours(hours: f64) -> u64 {
    (SAMPLES_PER_HOUR * hours).floor() as u64
}

fn mean_window(d_l: usize, d_r: usize, pool_width: usize) -> f64 {
    pooling_matrix(d_l, d_r, pool_width, 1.0).sum() / d_r as f64
}

/// `(params, n_B)` for the fMRI preset at the given SNR ratio, misalignment and
/// recording hours.
pub fn build_fmri_preset(
    snr_ratio: f64,
    misalignment: f64,
    hours: f64,
    seed: u64,
) -> Result<(ModelParams, u64)> {
    FmriPreset::new(snr_ratio, misalignment, hours).build(seed)
}

/// Desk-scale system used to check the closed forms by simulation:
/// `d_x = 8, d_l = 5, d_r = 8`, unit task SNR, the fMRI pooling/noise shape,
/// and a readout gain tuned so that `SNR_T / SNR_B` hits `snr_ratio`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmallPreset {
    pub misalignment: f64,
    #[serde(default = "SmallPreset::default_snr_ratio")]
    pub snr_ratio: f64,
}

impl SmallPreset {
    pub const D_X: usize = 8;
    pub const D_L: usize = 5;
    pub const D_R: usize = 8;

    fn default_snr_ratio() -> f64 {
        1.83
    }

    pub fn new(misalignment: f64) -> Self {
        Self {
            misalignment,
            snr_ratio: Self::default_snr_ratio(),
        }
    }

    pub fn build(&self, seed: u64) -> Result<ModelParams> {
        let target = 1.0 / self.snr_ratio;
        let shape = pooling_matrix(Self::D_L, Self::D_R, FmriPreset::POOL_WIDTH, 1.0);
        let counts: Vec<f64> = (0..Self::D_R).map(|j| shape.column(j).sum()).collect();
        let snr_at = |w2: f64| {
            counts
                .iter()
                .map(|c| w2 * c / (FmriPreset::LATENT_NOISE * w2 * c + FmriPreset::SIGMA_R2))
                .sum::<f64>()
                / counts.len() as f64
        };
        let sup = snr_at(1e12);
        if !(target > 0.0 && target < sup) {
            return Err(Error::InvalidArgument(format!(
                "brain SNR {target} is unreachable (supremum {sup})"
            )));
        }
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        while snr_at(hi) < target {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if snr_at(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let spec = ModelSpec {
            d_x: Self::D_X,
            d_l: Self::D_L,
            d_r: Self::D_R,
            misalignment: self.misalignment,
            snr_task: 1.0,
            latent_noise: LatentNoise::Isotropic(FmriPreset::LATENT_NOISE),
            sigma_r2: FmriPreset::SIGMA_R2,
            pool_width: FmriPreset::POOL_WIDTH,
            pool_weight: (0.5 * (lo + hi)).sqrt(),
        };
        build_random_model(&spec, seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BrainDataset {
    /// `n_B x d_x`.
    pub x: DMatrix<f64>,
    /// `n_B x d_r`.
    pub r: DMatrix<f64>,
}

impl BrainDataset {
    pub fn new(x: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        if x.nrows() != r.nrows() || x.nrows() == 0 {
            return Err(Error::Dimension(format!(
                "brain dataset needs matching nonzero row counts, got {} and {}",
                x.nrows(),
                r.nrows()
            )));
        }
        Ok(Self { x, r })
    }

    pub fn n_b(&self) -> usize {
        self.x.nrows()
    }

    pub fn moments(&self) -> BrainMoments {
        BrainMoments {
            n: self.n_b(),
            xtx: self.x.tr_mul(&self.x),
            xtr: self.x.tr_mul(&self.r),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    /// `n_T x d_x`.
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl TaskDataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() || y.is_empty() {
            return Err(Error::Dimension(format!(
                "task dataset needs matching nonzero row counts, got {} and {}",
                x.nrows(),
                y.len()
            )));
        }
        Ok(Self { x, y })
    }

    pub fn n_t(&self) -> usize {
        self.y.len()
    }

    pub fn moments(&self) -> TaskMoments {
        TaskMoments {
            n: self.n_t(),
            xtx: self.x.tr_mul(&self.x),
            xty: self.x.tr_mul(&self.y),
        }
    }
}

/// `X^T X` and `X^T R` of a brain dataset: all the encoding fit reads.
#[derive(Debug, Clone, PartialEq)]
pub struct BrainMoments {
    pub n: usize,
    pub xtx: DMatrix<f64>,
    pub xtr: DMatrix<f64>,
}

/// `X^T X` and `X^T y` of a task dataset: all the task fits read.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskMoments {
    pub n: usize,
    pub xtx: DMatrix<f64>,
    pub xty: DVector<f64>,
}

pub fn sample_brain_with<R: Rng + ?Sized>(
    params: &ModelParams,
    n_b: usize,
    rng: &mut R,
) -> Result<BrainDataset> {
    if n_b == 0 {
        return Err(Error::InvalidArgument("n_B must be >= 1".into()));
    }
    let x = gaussian_matrix(rng, n_b, params.d_x);
    let eta_l = gaussian_matrix(rng, n_b, params.d_l) * psd_factor(&params.sigma_l).transpose();
    let latents = &x * &params.a_star + eta_l;
    let mut r = latents * &params.h_star;
    if params.sigma_r2 > 0.0 {
        r += gaussian_matrix(rng, n_b, params.d_r) * params.sigma_r2.sqrt();
    }
    BrainDataset::new(x, r)
}

pub fn sample_task_with<R: Rng + ?Sized>(
    params: &ModelParams,
    n_t: usize,
    rng: &mut R,
) -> Result<TaskDataset> {
    if n_t == 0 {
        return Err(Error::InvalidArgument("n_T must be >= 1".into()));
    }
    let x = gaussian_matrix(rng, n_t, params.d_x);
    let mut y = &x * &params.beta_star;
    if params.sigma_y2 > 0.0 {
        y += gaussian_vector(rng, n_t) * params.sigma_y2.sqrt();
    }
    TaskDataset::new(x, y)
}

/// `n_B` i.i.d. brain pairs, deterministic in `seed`.
pub fn sample_brain_dataset(params: &ModelParams, n_b: usize, seed: u64) -> Result<BrainDataset> {
    sample_brain_with(params, n_b, &mut SeedTree::new(seed).rng(Purpose::Brain))
}

/// `n_T` i.i.d. task pairs, deterministic in `seed` and independent of the
/// brain draw made from the same seed.
pub fn sample_task_dataset(params: &ModelParams, n_t: usize, seed: u64) -> Result<TaskDataset> {
    sample_task_with(params, n_t, &mut SeedTree::new(seed).rng(Purpose::Task))
}

/// Lower-triangular Bartlett factor `L` with `L L^T ~ Wishart(I_p, n)`.
fn bartlett_factor<R: Rng + ?Sized>(rng: &mut R, p: usize, n: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(p, p);
    for i in 0..p {
        let chi = ChiSquared::new((n - i) as f64).expect("n >= p");
        l[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            l[(i, j)] = rng.sample(StandardNormal);
        }
    }
    l
}

/// Draws dataset moments directly from their exact joint law instead of
/// materialising rows: `X^T X = L L^T` is Wishart by the Bartlett construction
/// and, given it, `X^T E = L Z F^T` for standard normal `Z` and any factor
/// `F F^T` of the row noise covariance. Falls back to row sampling when
/// `n < d_x`.
#[derive(Debug, Clone)]
pub struct MomentSampler<'a> {
    params: &'a ModelParams,
    signal_map: DMatrix<f64>,
    noise_factor: DMatrix<f64>,
}

impl<'a> MomentSampler<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        Self {
            params,
            signal_map: &params.a_star * &params.h_star,
            noise_factor: psd_factor(&params.recording_noise_cov()),
        }
    }

    pub fn params(&self) -> &ModelParams {
        self.params
    }

    pub fn brain<R: Rng + ?Sized>(&self, n_b: usize, rng: &mut R) -> Result<BrainMoments> {
        let p = self.params.d_x;
        if n_b < p {
            return Ok(sample_brain_with(self.params, n_b, rng)?.moments());
        }
        let l = bartlett_factor(rng, p, n_b);
        let xtx = &l * l.transpose();
        let z = gaussian_matrix(rng, p, self.params.d_r);
        let xtr = &xtx * &self.signal_map + &l * z * self.noise_factor.transpose();
        Ok(BrainMoments { n: n_b, xtx, xtr })
    }

    pub fn task<R: Rng + ?Sized>(&self, n_t: usize, rng: &mut R) -> Result<TaskMoments> {
        let p = self.params.d_x;
        if n_t < p {
            return Ok(sample_task_with(self.params, n_t, rng)?.moments());
        }
        let l = bartlett_factor(rng, p, n_t);
        let xtx = &l * l.transpose();
        let mut xty = &xtx * &self.params.beta_star;
        if self.params.sigma_y2 > 0.0 {
            xty += &l * gaussian_vector(rng, p) * self.params.sigma_y2.sqrt();
        }
        Ok(TaskMoments { n: n_t, xtx, xty })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(m: f64) -> ModelSpec {
        ModelSpec {
            d_x: 8,
            d_l: 5,
            d_r: 8,
            misalignment: m,
            snr_task: 1.0,
            latent_noise: LatentNoise::Isotropic(0.5),
            sigma_r2: 0.4,
            pool_width: 4,
            pool_weight: 1.0,
        }
    }

    #[test]
    fn zero_misalignment_lies_in_latent_span() {
        let p = build_random_model(&small_spec(0.0), 1).unwrap();
        assert!(misalignment(&p) < 1e-12);
    }

    #[test]
    fn unit_snr_gives_unit_label_noise() {
        let p = build_random_model(&small_spec(0.3), 2).unwrap();
        assert!((p.sigma_y2 - 1.0).abs() < 1e-12);
        assert!((snr_task(&p).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthonormal_over_many_seeds() {
        for seed in 0..100 {
            let p = build_random_model(&small_spec(0.2), seed).unwrap();
            let gram = p.a_star.transpose() * &p.a_star;
            assert!((gram - DMatrix::identity(5, 5)).amax() < 1e-10, "seed {seed}");
        }
    }

    #[test]
    fn misalignment_is_exact() {
        for m in [0.0, 0.05, 0.5, 1.0] {
            for seed in 0..5 {
                let p = build_random_model(&small_spec(m), seed).unwrap();
                assert!((misalignment(&p) - m).abs() < 1e-10);
                assert!((p.beta_star.norm() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            build_random_model(&small_spec(1.2), 0),
            Err(Error::Misalignment { .. })
        ));
        let mut s = small_spec(0.1);
        s.d_l = 8;
        assert!(matches!(build_random_model(&s, 0), Err(Error::Dimension(_))));
        let mut s = small_spec(0.1);
        s.d_r = 4;
        assert!(matches!(build_random_model(&s, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn pooling_is_full_rank_and_block_for_unit_width() {
        let h = pooling_matrix(5, 8, 4, 1.0);
        assert_eq!(linalg::numerical_rank(&h, 1e-10), 5);
        let b = pooling_matrix(3, 6, 1, 2.0);
        for j in 0..6 {
            for l in 0..3 {
                assert_eq!(b[(l, j)], if l == j % 3 { 2.0 } else { 0.0 });
            }
        }
        // the 410/4 fMRI shape is where a cyclic window would lose rank
        let f = pooling_matrix(410, 1000, 4, 1.0);
        assert_eq!(linalg::numerical_rank(&f, 1e-10), 410);
    }

    #[test]
    fn snr_brain_identity_readout() {
        // H* = I, Sigma_l = s I: each channel has SNR 1 / (s + sigma_r2)
        let a = haar_frame(&mut SeedTree::new(0).rng(Purpose::LatentMap), 4, 3);
        let beta = a.column(0).into_owned();
        let p = ModelParams::new(
            a,
            DMatrix::identity(3, 3),
            beta,
            DMatrix::identity(3, 3) * 0.3,
            0.2,
            1.0,
        )
        .unwrap();
        assert!((snr_brain(&p).unwrap() - 1.0 / 0.5).abs() < 1e-12);
    }

    #[test]
    fn snr_brain_grows_with_readout_gain() {
        let p = build_random_model(&small_spec(0.1), 4).unwrap();
        let mut q = p.clone();
        q.h_star *= 2.0;
        assert!(snr_brain(&q).unwrap() > snr_brain(&p).unwrap());
    }

    #[test]
    fn zero_noise_variance_is_an_error() {
        let mut p = build_random_model(&small_spec(0.1), 4).unwrap();
        p.sigma_y2 = 0.0;
        assert!(matches!(snr_task(&p), Err(Error::DivideByZero(_))));
        p.sigma_l = DMatrix::zeros(5, 5);
        p.sigma_r2 = 0.0;
        assert!(matches!(snr_brain(&p), Err(Error::DivideByZero(_))));
    }

    #[test]
    fn noiseless_channels_are_exact() {
        let mut p = build_random_model(&small_spec(0.1), 5).unwrap();
        p.sigma_l = DMatrix::zeros(5, 5);
        p.sigma_r2 = 0.0;
        p.sigma_y2 = 0.0;
        let b = sample_brain_dataset(&p, 20, 9).unwrap();
        assert!((&b.r - &b.x * &p.a_star * &p.h_star).amax() < 1e-12);
        let t = sample_task_dataset(&p, 20, 9).unwrap();
        assert!((&t.y - &t.x * &p.beta_star).amax() < 1e-12);
    }

    #[test]
    fn datasets_are_deterministic() {
        let p = build_random_model(&small_spec(0.1), 5).unwrap();
        assert_eq!(sample_brain_dataset(&p, 30, 3).unwrap(), sample_brain_dataset(&p, 30, 3).unwrap());
        assert_eq!(sample_task_dataset(&p, 30, 3).unwrap(), sample_task_dataset(&p, 30, 3).unwrap());
        assert_ne!(sample_task_dataset(&p, 30, 3).unwrap(), sample_task_dataset(&p, 30, 4).unwrap());
    }

    #[test]
    fn single_row_task_dataset() {
        let p = build_random_model(&small_spec(0.1), 5).unwrap();
        assert_eq!(sample_task_dataset(&p, 1, 0).unwrap().n_t(), 1);
        assert!(sample_task_dataset(&p, 0, 0).is_err());
    }

    #[test]
    fn fmri_preset_shape() {
        let preset = FmriPreset::new(0.1, 0.05, 0.0);
        assert_eq!(preset.d_l(), 410);
        assert_eq!(preset.n_b().unwrap(), 0);
        assert_eq!(FmriPreset::new(0.1, 0.05, 1000.0).n_b().unwrap(), 1_800_000);
        assert_eq!(FmriPreset::new(0.1, 0.05, 0.5006).n_b().unwrap(), 901);
        assert!(FmriPreset::new(0.1, 0.05, -1.0).n_b().is_err());
    }

    #[test]
    fn small_preset_hits_snr_ratio() {
        let p = SmallPreset::new(0.05).build(3).unwrap();
        let ratio = snr_task(&p).unwrap() / snr_brain(&p).unwrap();
        assert!((ratio - 1.83).abs() < 1e-9);
        assert!((misalignment(&p) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn text_round_trip() {
        let p = build_random_model(&small_spec(0.25), 8).unwrap();
        let text = p.to_text(&["seed 8".into()]);
        assert_eq!(ModelParams::from_text(&text).unwrap(), p);
    }
}

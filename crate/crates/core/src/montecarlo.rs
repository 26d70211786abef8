//! Monte Carlo risk estimates with replicate-level bootstrap intervals.
//!
//! A run is `replicates x trials` independent draws. Trial `t` of replicate
//! `r` takes its generators from `SeedTree::new(seed).child(r).child(t)`, so
//! results do not depend on thread count or scheduling. Replicate means are
//! summed in trial order and the 95% interval is the percentile bootstrap of
//! the replicate means.

use std::fmt;
use std::io;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimators::{
    fit_befs_hard_moments, fit_encoding_moments, fit_tos_moments, risk_of, EncodingModel, SoftSolver,
};
use crate::linmodel::{sample_brain_with, sample_task_with, BrainMoments, ModelParams, MomentSampler, TaskMoments, TestSpec};
use crate::rng::{Purpose, SeedTree};
use crate::theory::{derive_quantities, optimal_lambda, TheoryQuantities};
use crate::valuation::equivalent_task_samples;

pub const BOOTSTRAP_RESAMPLES: usize = 10_000;
pub const CONFIDENCE: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaPolicy {
    Fixed(f64),
    TheoryOptimal,
    Hard,
    Tos,
}

impl LambdaPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            LambdaPolicy::Fixed(_) => "fixed",
            LambdaPolicy::TheoryOptimal => "theory-optimal",
            LambdaPolicy::Hard => "hard",
            LambdaPolicy::Tos => "tos",
        }
    }
}

/// How trial datasets are drawn. Both modes sample the same joint law of the
/// cross-product moments the fitters consume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DataMode {
    /// Wishart moments drawn directly; cost independent of sample size.
    #[default]
    Moments,
    /// Explicit rows, reduced to moments.
    Rows,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct McConfig {
    pub trials: usize,
    pub replicates: usize,
    pub seed: u64,
    pub data_mode: DataMode,
}

impl McConfig {
    pub fn new(trials: usize, replicates: usize, seed: u64) -> Self {
        Self {
            trials,
            replicates,
            seed,
            data_mode: DataMode::Moments,
        }
    }

    pub fn with_mode(mut self, data_mode: DataMode) -> Self {
        self.data_mode = data_mode;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.trials == 0 || self.replicates == 0 {
            return Err(Error::InvalidArgument(format!(
                "need at least one trial and replicate, got {} x {}",
                self.trials, self.replicates
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskEstimate {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub trials: usize,
    pub replicates: usize,
    pub seed: u64,
    pub config_hash: String,
    /// Ridge strength actually used, when the policy has one.
    pub lambda: Option<f64>,
    pub replicate_means: Vec<f64>,
}

impl RiskEstimate {
    pub fn contains(&self, value: f64) -> bool {
        self.ci_low <= value && value <= self.ci_high
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub min: f64,
    pub max: f64,
    pub points: usize,
}

impl GridSpec {
    /// `2 * half_width + 1` points at constant `ratio` centred on `center`.
    pub fn centered(center: f64, ratio: f64, half_width: usize) -> Self {
        let span = ratio.powi(half_width as i32);
        Self {
            min: center / span,
            max: center * span,
            points: 2 * half_width + 1,
        }
    }

    pub fn values(&self) -> Result<Vec<f64>> {
        if !(self.min > 0.0 && self.max >= self.min && self.max.is_finite()) || self.points == 0 {
            return Err(Error::InvalidArgument(format!("invalid lambda grid {self:?}")));
        }
        if self.points == 1 {
            return Ok(vec![self.min]);
        }
        let ratio = self.ratio();
        let grid: Vec<f64> = (0..self.points).map(|i| self.min * ratio.powi(i as i32)).collect();
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument(format!("lambda grid {self:?} is not strictly ascending")));
        }
        Ok(grid)
    }

    /// Ratio between consecutive points.
    pub fn ratio(&self) -> f64 {
        if self.points < 2 {
            1.0
        } else {
            (self.max / self.min).powf(1.0 / (self.points - 1) as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaCurve {
    pub grid: Vec<f64>,
    pub risks: Vec<RiskEstimate>,
    pub best_lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalValue {
    pub v_t: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub risk: RiskEstimate,
}

/// Digest of every input that determines a run, as lowercase hex.
pub fn config_hash(parts: &[&dyn fmt::Debug]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(format!("{p:?}\u{1f}").as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect::<String>()[..16].to_string()
}

fn params_digest(params: &ModelParams) -> String {
    params.to_text(&[])
}

struct TrialData<'a> {
    params: &'a ModelParams,
    sampler: Option<MomentSampler<'a>>,
}

impl<'a> TrialData<'a> {
    fn new(params: &'a ModelParams, mode: DataMode) -> Self {
        Self {
            params,
            sampler: (mode == DataMode::Moments).then(|| MomentSampler::new(params)),
        }
    }

    fn brain(&self, node: &SeedTree, n_b: usize) -> Result<BrainMoments> {
        let mut rng = node.rng(Purpose::Brain);
        match &self.sampler {
            Some(s) => s.brain(n_b, &mut rng),
            None => Ok(sample_brain_with(self.params, n_b, &mut rng)?.moments()),
        }
    }

    fn task(&self, node: &SeedTree, n_t: usize) -> Result<TaskMoments> {
        let mut rng = node.rng(Purpose::Task);
        match &self.sampler {
            Some(s) => s.task(n_t, &mut rng),
            None => Ok(sample_task_with(self.params, n_t, &mut rng)?.moments()),
        }
    }
}

/// Runs `trial` for every `(replicate, trial)` pair and returns, per
/// replicate, the trial-ordered mean of each output coordinate.
fn replicate_means<F>(cfg: &McConfig, width: usize, trial: F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&SeedTree) -> Result<Vec<f64>> + Sync,
{
    let root = SeedTree::new(cfg.seed);
    let mut out = Vec::with_capacity(cfg.replicates);
    for r in 0..cfg.replicates {
        let rep = root.child(r as u64);
        let results: Vec<Result<Vec<f64>>> = (0..cfg.trials)
            .into_par_iter()
            .map(|t| trial(&rep.child(t as u64)))
            .collect();
        let mut sums = vec![0.0; width];
        for (t, res) in results.into_iter().enumerate() {
            let vals = res.map_err(|e| e.in_trial((r * cfg.trials + t) as u64))?;
            for (s, v) in sums.iter_mut().zip(vals) {
                *s += v;
            }
        }
        out.push(sums.into_iter().map(|s| s / cfg.trials as f64).collect());
    }
    Ok(out)
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap of the mean of `samples`.
pub fn bootstrap_ci(samples: &[f64], seed: u64) -> (f64, f64, f64) {
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let mut rng = SeedTree::new(seed).rng(Purpose::Bootstrap);
    let mut boots: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .map(|_| (0..n).map(|_| samples[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    boots.sort_by(f64::total_cmp);
    let tail = (1.0 - CONFIDENCE) / 2.0;
    let lo = quantile(&boots, tail).min(mean);
    let hi = quantile(&boots, 1.0 - tail).max(mean);
    (mean, lo, hi)
}

fn summarize(means: Vec<f64>, cfg: &McConfig, hash: String, lambda: Option<f64>) -> RiskEstimate {
    let (mean, ci_low, ci_high) = bootstrap_ci(&means, cfg.seed);
    RiskEstimate {
        mean,
        ci_low,
        ci_high,
        trials: cfg.trials,
        replicates: cfg.replicates,
        seed: cfg.seed,
        config_hash: hash,
        lambda,
        replicate_means: means,
    }
}

fn check_sizes(params: &ModelParams, policy: &LambdaPolicy, n_b: usize, n_t: usize) -> Result<()> {
    let needs_brain = !matches!(policy, LambdaPolicy::Tos);
    if needs_brain && n_b <= params.d_x {
        return Err(Error::SingularDesign(format!(
            "encoding fit needs more than {} brain samples, got {n_b}",
            params.d_x
        )));
    }
    let floor = match policy {
        LambdaPolicy::Tos => params.d_x,
        LambdaPolicy::Hard => params.d_l,
        LambdaPolicy::Fixed(l) if *l == 0.0 => params.d_x,
        _ => 0,
    };
    if n_t <= floor {
        return Err(Error::SingularDesign(format!(
            "{} fit needs more than {floor} task samples, got {n_t}",
            policy.name()
        )));
    }
    Ok(())
}

/// Mean exact risk of the estimator picked by `policy`, with fresh brain and
/// task datasets in every trial.
pub fn estimate_risk(
    params: &ModelParams,
    test: &TestSpec,
    n_b: usize,
    n_t: usize,
    policy: LambdaPolicy,
    cfg: &McConfig,
) -> Result<RiskEstimate> {
    cfg.validate()?;
    test.validate(params.d_x, params.d_l)?;
    check_sizes(params, &policy, n_b, n_t)?;
    let lambda = match policy {
        LambdaPolicy::Fixed(l) => Some(l),
        LambdaPolicy::TheoryOptimal => {
            let q = derive_quantities(params)?;
            Some(optimal_lambda(&q, n_b as f64, n_t as f64)?)
        }
        LambdaPolicy::Hard | LambdaPolicy::Tos => None,
    };
    let data = TrialData::new(params, cfg.data_mode);
    let k = params.d_l;
    let means = replicate_means(cfg, 1, |node| {
        let task = data.task(node, n_t)?;
        let beta = match policy {
            LambdaPolicy::Tos => fit_tos_moments(&task)?.beta_hat,
            LambdaPolicy::Hard => {
                let enc = fit_encoding_moments(&data.brain(node, n_b)?, k)?;
                fit_befs_hard_moments(&task, &enc)?.beta_hat
            }
            LambdaPolicy::Fixed(_) | LambdaPolicy::TheoryOptimal => {
                let enc = fit_encoding_moments(&data.brain(node, n_b)?, k)?;
                SoftSolver::new(&task, &enc).solve(lambda.unwrap_or(0.0))?
            }
        };
        Ok(vec![risk_of(&beta, params, test)])
    })?;
    let hash = config_hash(&[
        &"estimate_risk",
        &params_digest(params),
        test,
        &n_b,
        &n_t,
        &policy,
        &lambda,
        cfg,
    ]);
    Ok(summarize(means.into_iter().map(|v| v[0]).collect(), cfg, hash, lambda))
}

/// Hard-constrained risk with the encoder held fixed, averaging over task
/// draws only.
pub fn estimate_hard_risk_given(
    params: &ModelParams,
    test: &TestSpec,
    enc: &EncodingModel,
    n_t: usize,
    cfg: &McConfig,
) -> Result<RiskEstimate> {
    cfg.validate()?;
    if n_t <= enc.rank() {
        return Err(Error::SingularDesign(format!(
            "hard fit needs more than {} task samples, got {n_t}",
            enc.rank()
        )));
    }
    let data = TrialData::new(params, cfg.data_mode);
    let means = replicate_means(cfg, 1, |node| {
        let fit = fit_befs_hard_moments(&data.task(node, n_t)?, enc)?;
        Ok(vec![risk_of(&fit.beta_hat, params, test)])
    })?;
    let hash = config_hash(&[&"hard_given", &params_digest(params), test, &enc.a_hat, &n_t, cfg]);
    Ok(summarize(means.into_iter().map(|v| v[0]).collect(), cfg, hash, None))
}

/// Soft-constrained risk on a log-spaced ridge grid. Each trial fits one
/// encoder and reuses its datasets across every grid point.
pub fn grid_search_lambda(
    params: &ModelParams,
    test: &TestSpec,
    n_b: usize,
    n_t: usize,
    grid_spec: &GridSpec,
    cfg: &McConfig,
) -> Result<LambdaCurve> {
    cfg.validate()?;
    test.validate(params.d_x, params.d_l)?;
    let grid = grid_spec.values()?;
    check_sizes(params, &LambdaPolicy::Fixed(grid[0]), n_b, n_t)?;
    let data = TrialData::new(params, cfg.data_mode);
    let k = params.d_l;
    let means = replicate_means(cfg, grid.len(), |node| {
        let task = data.task(node, n_t)?;
        let enc = fit_encoding_moments(&data.brain(node, n_b)?, k)?;
        let solver = SoftSolver::new(&task, &enc);
        grid.iter()
            .map(|&l| Ok(risk_of(&solver.solve(l)?, params, test)))
            .collect()
    })?;
    let risks: Vec<RiskEstimate> = grid
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let hash = config_hash(&[
                &"grid_search_lambda",
                &params_digest(params),
                test,
                &n_b,
                &n_t,
                &l,
                cfg,
            ]);
            summarize(means.iter().map(|m| m[i]).collect(), cfg, hash, Some(l))
        })
        .collect();
    let mut best = 0;
    for (i, r) in risks.iter().enumerate() {
        if r.mean < risks[best].mean {
            best = i;
        }
    }
    Ok(LambdaCurve {
        best_lambda: grid[best],
        grid,
        risks,
    })
}

/// Equivalent extra task samples implied by the empirical risk of the
/// theory-optimal soft student.
pub fn empirical_value(
    params: &ModelParams,
    test: &TestSpec,
    n_b: usize,
    n_t: usize,
    cfg: &McConfig,
) -> Result<EmpiricalValue> {
    let risk = estimate_risk(params, test, n_b, n_t, LambdaPolicy::TheoryOptimal, cfg)?;
    let q = derive_quantities(params)?;
    value_from_estimate(&q, test, n_t, risk)
}

/// Maps a risk estimate and its interval through the task-only inversion.
pub fn value_from_estimate(
    q: &TheoryQuantities,
    test: &TestSpec,
    n_t: usize,
    risk: RiskEstimate,
) -> Result<EmpiricalValue> {
    let n_t = n_t as f64;
    let invert = |r: f64| equivalent_task_samples(q, test, r).map(|n| n - n_t);
    let v_t = invert(risk.mean)?;
    let ci_low = invert(risk.ci_high)?;
    let ci_high = if risk.ci_low > test.sigma_test2 {
        invert(risk.ci_low)?
    } else {
        f64::INFINITY
    };
    Ok(EmpiricalValue {
        v_t,
        ci_low,
        ci_high,
        risk,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RiskRow {
    pub config_hash: String,
    #[serde(rename = "n_B")]
    pub n_b: usize,
    #[serde(rename = "n_T")]
    pub n_t: usize,
    pub lambda_policy: String,
    pub lambda: Option<f64>,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub trials: usize,
    pub replicates: usize,
    pub seed: u64,
}

impl RiskRow {
    pub fn new(est: &RiskEstimate, n_b: usize, n_t: usize, policy: &str) -> Self {
        Self {
            config_hash: est.config_hash.clone(),
            n_b,
            n_t,
            lambda_policy: policy.into(),
            lambda: est.lambda,
            mean: est.mean,
            ci_low: est.ci_low,
            ci_high: est.ci_high,
            trials: est.trials,
            replicates: est.replicates,
            seed: est.seed,
        }
    }
}

pub fn write_risk_csv<W: io::Write>(rows: &[RiskRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record([
            "config_hash",
            "n_B",
            "n_T",
            "lambda_policy",
            "lambda",
            "mean",
            "ci_low",
            "ci_high",
            "trials",
            "replicates",
            "seed",
        ])?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

//! Experiment configuration files.
//!
//! One TOML file describes one experiment: the model, the sweep axes and the
//! Monte Carlo settings. See `docs/config.md` for the full format.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use brainvalue_core::budget::FMRI_TASK_COST;
use brainvalue_core::linmodel::{brain_samples_for_hours, FmriPreset, ModelSpec, SmallPreset};
use brainvalue_core::montecarlo::GridSpec;
use brainvalue_core::{derive_quantities, McConfig, ModelParams, TestSpec, TheoryQuantities};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    SavingsSweep,
    RobustnessSweep,
    BudgetSweep,
    LambdaCurve,
    ValidateEmpirical,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::SavingsSweep => "savings_sweep",
            ExperimentKind::RobustnessSweep => "robustness_sweep",
            ExperimentKind::BudgetSweep => "budget_sweep",
            ExperimentKind::LambdaCurve => "lambda_curve",
            ExperimentKind::ValidateEmpirical => "validate_empirical",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Fmri,
    Small,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: Preset,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub misalignment: Option<f64>,
    /// `SNR_T / SNR_B`; presets only.
    pub snr_ratio: Option<f64>,
    /// Recording hours at 1800 samples per hour.
    pub hours: Option<f64>,
    /// `d_l / d_x`; fMRI preset only.
    pub dim_ratio: Option<f64>,
    #[serde(default)]
    pub variance_split: bool,
    /// Brain samples; overrides `hours`.
    pub n_b: Option<u64>,
    /// Full recipe for `preset = "custom"`.
    pub spec: Option<ModelSpec>,
}

fn default_seed() -> u64 {
    1
}

/// Axis values that change the model for one sweep point.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ModelPoint {
    pub misalignment: Option<f64>,
    pub snr_ratio: Option<f64>,
    pub dim_ratio: Option<f64>,
    pub hours: Option<f64>,
    pub n_b: Option<u64>,
}

pub struct Built {
    pub params: ModelParams,
    pub q: TheoryQuantities,
    pub n_b: f64,
}

impl ModelConfig {
    pub fn d_x(&self) -> usize {
        match self.preset {
            Preset::Fmri => FmriPreset::D_X,
            Preset::Small => SmallPreset::D_X,
            Preset::Custom => self.spec.as_ref().map_or(0, |s| s.d_x),
        }
    }

    fn fmri(&self, p: &ModelPoint) -> FmriPreset {
        let mut preset = FmriPreset::new(
            p.snr_ratio.or(self.snr_ratio).unwrap_or(0.1),
            p.misalignment.or(self.misalignment).unwrap_or(0.05),
            p.hours.or(self.hours).unwrap_or(1000.0),
        );
        if let Some(r) = p.dim_ratio.or(self.dim_ratio) {
            preset.latent_ratio = r;
        }
        preset.variance_split = self.variance_split;
        preset
    }

    /// Brain sample count at `p` without building the model.
    pub fn n_b(&self, p: &ModelPoint) -> anyhow::Result<u64> {
        if let Some(n) = p.n_b {
            return Ok(n);
        }
        if let Some(h) = p.hours {
            return Ok(brain_samples_for_hours(h));
        }
        if let Some(n) = self.n_b {
            return Ok(n);
        }
        match self.preset {
            Preset::Fmri => Ok(self.fmri(p).n_b()?),
            Preset::Small => Ok(self.hours.map_or(10_000, brain_samples_for_hours)),
            Preset::Custom => match self.hours {
                Some(h) => Ok(brain_samples_for_hours(h)),
                None => bail!("model.n_b or model.hours is required for preset \"custom\""),
            },
        }
    }

    pub fn build(&self, p: &ModelPoint) -> anyhow::Result<Built> {
        let params = match self.preset {
            Preset::Fmri => self.fmri(p).build(self.seed)?.0,
            Preset::Small => SmallPreset {
                misalignment: p.misalignment.or(self.misalignment).unwrap_or(0.05),
                snr_ratio: p.snr_ratio.or(self.snr_ratio).unwrap_or(1.83),
            }
            .build(self.seed)?,
            Preset::Custom => {
                let mut spec = self.spec.clone().context("model.spec is required for preset \"custom\"")?;
                if let Some(m) = p.misalignment {
                    spec.misalignment = m;
                }
                brainvalue_core::linmodel::build_random_model(&spec, self.seed)?
            }
        };
        let q = derive_quantities(&params)?;
        let n_b = self.n_b(p)? as f64;
        Ok(Built { params, q, n_b })
    }

    fn describe(&self) -> String {
        match self.preset {
            Preset::Fmri => {
                let f = self.fmri(&ModelPoint::default());
                format!(
                    "fmri preset (d_x={}, d_l={}, d_r={}), m={}, SNR_T/SNR_B={}, {} h, seed {}",
                    FmriPreset::D_X,
                    f.d_l(),
                    FmriPreset::D_R,
                    f.misalignment,
                    f.snr_ratio,
                    f.hours,
                    self.seed
                )
            }
            Preset::Small => format!(
                "small preset (d_x={}, d_l={}, d_r={}), m={}, SNR_T/SNR_B={}, seed {}",
                SmallPreset::D_X,
                SmallPreset::D_L,
                SmallPreset::D_R,
                self.misalignment.unwrap_or(0.05),
                self.snr_ratio.unwrap_or(1.83),
                self.seed
            ),
            Preset::Custom => match &self.spec {
                Some(s) => format!(
                    "custom model (d_x={}, d_l={}, d_r={}), m={}, SNR_T={}, seed {}",
                    s.d_x, s.d_l, s.d_r, s.misalignment, s.snr_task, self.seed
                ),
                None => "custom model (missing spec)".into(),
            },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axes {
    #[serde(default, alias = "n_B")]
    pub n_b: Vec<u64>,
    #[serde(default, alias = "n_T")]
    pub n_t: Vec<f64>,
    #[serde(default)]
    pub hours: Vec<f64>,
    #[serde(default, alias = "misalignment")]
    pub m: Vec<f64>,
    #[serde(default)]
    pub snr_ratio: Vec<f64>,
    #[serde(default)]
    pub dim_ratio: Vec<f64>,
    #[serde(default)]
    pub tau: Vec<f64>,
    /// Named test covariances: `isotropic`, `on`, `off`.
    #[serde(default)]
    pub tests: Vec<String>,
    #[serde(default)]
    pub cost_ratio: Vec<f64>,
    #[serde(default)]
    pub budget: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_trials() -> usize {
    10_000
}

fn default_replicates() -> usize {
    10
}

impl Default for McSection {
    fn default() -> Self {
        Self {
            trials: default_trials(),
            replicates: default_replicates(),
            seed: default_seed(),
        }
    }
}

impl McSection {
    pub fn config(&self) -> McConfig {
        McConfig::new(self.trials, self.replicates, self.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetSource {
    Finite,
    Empirical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSection {
    /// Cost of one task label; brain samples cost `cost_ratio * c_t`.
    #[serde(default = "default_task_cost")]
    pub c_t: f64,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default = "default_zoom_rounds")]
    pub zoom_rounds: usize,
    #[serde(default = "default_budget_source")]
    pub source: BudgetSource,
}

fn default_task_cost() -> f64 {
    FMRI_TASK_COST
}

fn default_grid_points() -> usize {
    64
}

fn default_zoom_rounds() -> usize {
    4
}

fn default_budget_source() -> BudgetSource {
    BudgetSource::Finite
}

impl Default for BudgetSection {
    fn default() -> Self {
        Self {
            c_t: default_task_cost(),
            grid_points: default_grid_points(),
            zoom_rounds: default_zoom_rounds(),
            source: default_budget_source(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaGridSection {
    #[serde(default = "default_center")]
    pub center: f64,
    #[serde(default = "default_ratio")]
    pub ratio: f64,
    #[serde(default = "default_half_width")]
    pub half_width: usize,
}

fn default_center() -> f64 {
    1.0
}

fn default_ratio() -> f64 {
    1.25
}

fn default_half_width() -> usize {
    40
}

impl Default for LambdaGridSection {
    fn default() -> Self {
        Self {
            center: default_center(),
            ratio: default_ratio(),
            half_width: default_half_width(),
        }
    }
}

impl LambdaGridSection {
    pub fn spec(&self) -> GridSpec {
        GridSpec::centered(self.center, self.ratio, self.half_width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestSection {
    /// Irreducible test-label noise added to every risk.
    #[serde(default)]
    pub sigma_test2: f64,
}

impl Default for TestSection {
    fn default() -> Self {
        Self { sigma_test2: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub model: ModelConfig,
    #[serde(default)]
    pub axes: Axes,
    #[serde(default)]
    pub mc: McSection,
    #[serde(default)]
    pub budget: BudgetSection,
    #[serde(default)]
    pub lambda_grid: LambdaGridSection,
    #[serde(default)]
    pub test: TestSection,
    pub output: Option<PathBuf>,
}

/// A named test covariance for the robustness and validation sweeps.
pub fn named_test(name: &str, sigma_test2: f64) -> anyhow::Result<TestSpec> {
    Ok(match name {
        "isotropic" => TestSpec::isotropic(sigma_test2),
        "on" => TestSpec::on_subspace(sigma_test2),
        "off" => TestSpec::off_subspace(sigma_test2),
        other => bail!("unknown test covariance {other:?} (expected isotropic, on or off)"),
    })
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Structural checks that do not need a built model.
    pub fn validate(&self) -> anyhow::Result<()> {
        let m = &self.model;
        let a = &self.axes;
        match m.preset {
            Preset::Custom => {
                if m.spec.is_none() {
                    bail!("model.spec: required for preset \"custom\"");
                }
                if m.n_b.is_none() && m.hours.is_none() && a.n_b.is_empty() && a.hours.is_empty() {
                    bail!("model.n_b: required for preset \"custom\" (or give model.hours or an n_b/hours axis)");
                }
                for (key, set) in [
                    ("model.snr_ratio", m.snr_ratio.is_some()),
                    ("model.dim_ratio", m.dim_ratio.is_some()),
                    ("model.misalignment", m.misalignment.is_some()),
                    ("axes.snr_ratio", !a.snr_ratio.is_empty()),
                    ("axes.dim_ratio", !a.dim_ratio.is_empty()),
                ] {
                    if set {
                        bail!("{key}: not supported by preset \"custom\" (set it in model.spec)");
                    }
                }
            }
            Preset::Small => {
                if m.dim_ratio.is_some() || !a.dim_ratio.is_empty() {
                    bail!("dim_ratio: the small preset has fixed dimensions");
                }
                if m.spec.is_some() {
                    bail!("model.spec: only used with preset \"custom\"");
                }
            }
            Preset::Fmri => {
                if m.spec.is_some() {
                    bail!("model.spec: only used with preset \"custom\"");
                }
            }
        }
        if !a.n_b.is_empty() && !a.hours.is_empty() {
            bail!("axes.n_b and axes.hours: give one brain-sample axis, not both");
        }
        for name in &a.tests {
            named_test(name, 0.0).context("axes.tests")?;
        }
        if let Some(bad) = a.tau.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            bail!("axes.tau: {bad} is outside [0, 1]");
        }
        if !(self.test.sigma_test2 >= 0.0) {
            bail!("test.sigma_test2: must be >= 0");
        }
        if self.mc.trials == 0 || self.mc.replicates == 0 {
            bail!("mc: trials and replicates must be >= 1");
        }
        if !(self.budget.c_t > 0.0) {
            bail!("budget.c_t: must be > 0");
        }
        if !(self.lambda_grid.center > 0.0 && self.lambda_grid.ratio > 1.0) {
            bail!("lambda_grid: need center > 0 and ratio > 1");
        }
        Ok(())
    }

    /// Brain-sample axis of the sweep, or the model's own count.
    pub fn brain_points(&self) -> Vec<ModelPoint> {
        if !self.axes.n_b.is_empty() {
            self.axes.n_b.iter().map(|&n| ModelPoint { n_b: Some(n), ..Default::default() }).collect()
        } else if !self.axes.hours.is_empty() {
            self.axes.hours.iter().map(|&h| ModelPoint { hours: Some(h), ..Default::default() }).collect()
        } else {
            vec![ModelPoint::default()]
        }
    }

    /// Test covariances for sweeps that take them, labelled for the CSV.
    pub fn tests(&self) -> anyhow::Result<Vec<(String, TestSpec)>> {
        let s2 = self.test.sigma_test2;
        let mut out = Vec::new();
        for name in &self.axes.tests {
            out.push((name.clone(), named_test(name, s2)?));
        }
        for &t in &self.axes.tau {
            out.push((format!("tau={t}"), TestSpec::shift(t, s2)));
        }
        if out.is_empty() {
            out.push(("isotropic".into(), TestSpec::isotropic(s2)));
        }
        Ok(out)
    }

    /// Panels of a savings sweep: axis name, CSV stem and model points.
    pub fn savings_panels(&self) -> Vec<(&'static str, Vec<(f64, ModelPoint)>)> {
        let a = &self.axes;
        let mut panels = Vec::new();
        if !a.hours.is_empty() {
            panels.push(("hours", a.hours.iter().map(|&v| (v, ModelPoint { hours: Some(v), ..Default::default() })).collect()));
        }
        if !a.n_b.is_empty() {
            panels.push(("n_b", a.n_b.iter().map(|&v| (v as f64, ModelPoint { n_b: Some(v), ..Default::default() })).collect()));
        }
        if !a.m.is_empty() {
            panels.push(("misalignment", a.m.iter().map(|&v| (v, ModelPoint { misalignment: Some(v), ..Default::default() })).collect()));
        }
        if !a.snr_ratio.is_empty() {
            panels.push(("snr_ratio", a.snr_ratio.iter().map(|&v| (v, ModelPoint { snr_ratio: Some(v), ..Default::default() })).collect()));
        }
        if !a.dim_ratio.is_empty() {
            panels.push(("dim_ratio", a.dim_ratio.iter().map(|&v| (v, ModelPoint { dim_ratio: Some(v), ..Default::default() })).collect()));
        }
        if panels.is_empty() {
            panels.push(("base", vec![(f64::NAN, ModelPoint::default())]));
        }
        panels
    }

    /// Human-readable plan: point counts, cost estimate and regime warnings.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        let a = &self.axes;
        let d_x = self.model.d_x();
        let _ = writeln!(out, "experiment: {}", self.experiment.name());
        let _ = writeln!(out, "model: {}", self.model.describe());
        let mut warnings = Vec::new();
        let n_t = a.n_t.len();
        let mut builds = usize::from(self.experiment != ExperimentKind::SavingsSweep);
        let mut mc_trials = 0usize;
        let per_estimate = self.mc.trials * self.mc.replicates;
        let points = match self.experiment {
            ExperimentKind::SavingsSweep => {
                let mut total = 0;
                let panels = self.savings_panels();
                if panels.iter().any(|(axis, _)| matches!(*axis, "hours" | "n_b" | "base")) {
                    builds += 1;
                }
                for (axis, pts) in panels {
                    if !matches!(axis, "hours" | "n_b" | "base") {
                        builds += pts.len();
                    }
                    let _ = writeln!(out, "panel {axis}: {} values x {n_t} n_T = {} points", pts.len(), pts.len() * n_t);
                    total += pts.len() * n_t;
                }
                total
            }
            ExperimentKind::RobustnessSweep => {
                let tests = self.tests().map_or(0, |t| t.len());
                let b = self.brain_points().len();
                let _ = writeln!(out, "{b} brain sizes x {tests} test covariances x {n_t} n_T");
                b * tests * n_t
            }
            ExperimentKind::BudgetSweep => {
                let (c, b) = (a.cost_ratio.len(), a.budget.len());
                let _ = writeln!(out, "{c} cost ratios x {b} budgets, grid ({} points, {} zoom rounds) and asymptotic", self.budget.grid_points, self.budget.zoom_rounds);
                if self.budget.source == BudgetSource::Empirical {
                    mc_trials = c * b * self.budget.grid_points * (self.budget.zoom_rounds + 1) * per_estimate;
                }
                if c == 0 {
                    warnings.push("axes.cost_ratio is empty: zero points".to_string());
                }
                if b == 0 {
                    warnings.push("axes.budget is empty: zero points".to_string());
                }
                c * b
            }
            ExperimentKind::LambdaCurve => {
                let grid = 2 * self.lambda_grid.half_width + 1;
                let b = self.brain_points().len();
                let _ = writeln!(out, "{b} brain sizes x {n_t} n_T, lambda grid of {grid} points (ratio {})", self.lambda_grid.ratio);
                mc_trials = b * n_t * per_estimate;
                b * n_t * grid
            }
            ExperimentKind::ValidateEmpirical => {
                let tests = self.tests().map_or(0, |t| t.len());
                let b = self.brain_points().len();
                let _ = writeln!(out, "{b} brain sizes x {tests} test covariances x {n_t} n_T, soft and task-only");
                mc_trials = 2 * b * tests * n_t * per_estimate;
                b * tests * n_t
            }
        };
        if self.experiment != ExperimentKind::BudgetSweep {
            if n_t == 0 {
                warnings.push("axes.n_t is empty: zero points".to_string());
            }
            for &v in &a.n_t {
                if d_x > 0 && !(v > (d_x + 1) as f64) {
                    warnings.push(format!("axes.n_t = {v} <= d_x + 1 = {}: out of regime", d_x + 1));
                }
            }
        }
        for &b in &a.budget {
            let need = self.budget.c_t * (d_x + 2) as f64;
            if b < need {
                warnings.push(format!("axes.budget = {b} < {need:.4}: cannot buy d_x + 2 task labels"));
            }
        }
        let _ = writeln!(out, "points: {points}");
        let _ = writeln!(out, "estimated cost: {builds} model build(s), {mc_trials} Monte Carlo trials");
        if self.model.preset == Preset::Fmri {
            let _ = writeln!(out, "note: each fMRI-scale model build takes several seconds");
        }
        if points == 0 {
            warnings.push("sweep has zero points".to_string());
        }
        warnings.dedup();
        if warnings.is_empty() {
            let _ = writeln!(out, "warnings: none");
        } else {
            let _ = writeln!(out, "warnings:");
            for w in warnings {
                let _ = writeln!(out, "  {w}");
            }
        }
        out
    }
}

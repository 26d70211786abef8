//! Sweep drivers. Each experiment turns a config into in-memory CSV files so
//! nothing is written unless the whole run succeeds.

use anyhow::anyhow;
use brainvalue_core::budget::{
    asymptotic_allocation, grid_allocation, write_budget_csv, BudgetGrid, BudgetRow, BudgetSpec, RiskSource,
};
use brainvalue_core::montecarlo::{estimate_risk, grid_search_lambda, value_from_estimate};
use brainvalue_core::theory::{befs_finite_risk, optimal_lambda, tos_risk};
use brainvalue_core::valuation::{savings_curve, SavingsMode};
use brainvalue_core::{LambdaPolicy, RiskEstimate, TestSpec};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{BudgetSource, Built, ExperimentConfig, ExperimentKind, ModelPoint};

#[derive(Debug, Clone, Serialize)]
pub struct ErrorRow {
    pub file: String,
    pub point: String,
    pub source: String,
    pub message: String,
}

pub struct CsvFile {
    pub name: String,
    pub bytes: Vec<u8>,
    pub rows: usize,
}

#[derive(Default)]
pub struct Artifacts {
    pub files: Vec<CsvFile>,
    pub errors: Vec<ErrorRow>,
    pub points: usize,
    /// Points where every requested quantity failed.
    pub failed_points: usize,
}

impl Artifacts {
    fn push_csv<T: Serialize>(&mut self, name: &str, header: &[&str], rows: &[T]) -> anyhow::Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if rows.is_empty() {
            w.write_record(header)?;
        }
        for r in rows {
            w.serialize(r)?;
        }
        self.files.push(CsvFile {
            name: name.to_string(),
            bytes: w.into_inner().map_err(|e| anyhow!("{e}"))?,
            rows: rows.len(),
        });
        Ok(())
    }

    fn absorb(&mut self, errors: Vec<ErrorRow>, failed: bool) {
        self.points += 1;
        self.failed_points += failed as usize;
        self.errors.extend(errors);
    }
}

struct PointErrors {
    file: String,
    point: String,
    errors: Vec<ErrorRow>,
}

impl PointErrors {
    fn new(file: &str, point: String) -> Self {
        Self {
            file: file.to_string(),
            point,
            errors: Vec::new(),
        }
    }

    fn take<T, E: std::fmt::Display>(&mut self, source: &str, r: Result<T, E>) -> Option<T> {
        match r {
            Ok(v) => Some(v),
            Err(e) => {
                self.errors.push(ErrorRow {
                    file: self.file.clone(),
                    point: self.point.clone(),
                    source: source.to_string(),
                    message: e.to_string(),
                });
                None
            }
        }
    }
}

pub fn run(cfg: &ExperimentConfig) -> anyhow::Result<Artifacts> {
    match cfg.experiment {
        ExperimentKind::SavingsSweep => savings_sweep(cfg),
        ExperimentKind::RobustnessSweep => robustness_sweep(cfg),
        ExperimentKind::BudgetSweep => budget_sweep(cfg),
        ExperimentKind::LambdaCurve => lambda_curve(cfg),
        ExperimentKind::ValidateEmpirical => validate_empirical(cfg),
    }
}

fn with_brain(base: &Built, cfg: &ExperimentConfig, p: &ModelPoint) -> anyhow::Result<f64> {
    if p.n_b.is_none() && p.hours.is_none() {
        return Ok(base.n_b);
    }
    Ok(cfg.model.n_b(p)? as f64)
}

fn label(value: Option<f64>) -> String {
    value.map_or("base".into(), |v| v.to_string())
}

const SAVINGS_HEADER: &[&str] = &[
    "axis",
    "value",
    "n_B",
    "n_T",
    "delta",
    "lambda_opt",
    "v_T_asymptotic",
    "percent_saved_asymptotic",
    "v_T_finite",
    "percent_saved_finite",
];

#[derive(Serialize)]
struct SavingsRow {
    axis: &'static str,
    value: Option<f64>,
    #[serde(rename = "n_B")]
    n_b: f64,
    #[serde(rename = "n_T")]
    n_t: f64,
    delta: Option<f64>,
    lambda_opt: Option<f64>,
    #[serde(rename = "v_T_asymptotic")]
    v_t_asymptotic: Option<f64>,
    percent_saved_asymptotic: Option<f64>,
    #[serde(rename = "v_T_finite")]
    v_t_finite: Option<f64>,
    percent_saved_finite: Option<f64>,
}

fn savings_sweep(cfg: &ExperimentConfig) -> anyhow::Result<Artifacts> {
    let panels = cfg.savings_panels();
    let needs_base = panels.iter().any(|(axis, _)| matches!(*axis, "hours" | "n_b" | "base"));
    let base = if needs_base { Some(cfg.model.build(&ModelPoint::default())?) } else { None };
    let iso = TestSpec::isotropic(cfg.test.sigma_test2);
    let mut art = Artifacts::default();
    for (axis, points) in panels {
        let file = format!("savings_{axis}.csv");
        let models: Vec<anyhow::Result<Option<Built>>> = points
            .par_iter()
            .map(|(_, p)| match axis {
                "hours" | "n_b" | "base" => Ok(None),
                _ => cfg.model.build(p).map(Some),
            })
            .collect();
        let mut rows = Vec::new();
        for ((value, p), model) in points.iter().zip(models) {
            let value = (!value.is_nan()).then_some(*value);
            let owned;
            let (built, n_b) = match model {
                Ok(Some(m)) => {
                    owned = m;
                    (&owned, owned.n_b)
                }
                Ok(None) => {
                    let b = base.as_ref().expect("base model is built for brain-size panels");
                    (b, with_brain(b, cfg, p)?)
                }
                Err(e) => {
                    for &n_t in &cfg.axes.n_t {
                        let mut pe = PointErrors::new(&file, format!("{axis}={} n_T={n_t}", label(value)));
                        pe.take::<(), _>("model", Err(format!("{e:#}")));
                        art.absorb(pe.errors, true);
                        rows.push(SavingsRow {
                            axis,
                            value,
                            n_b: f64::NAN,
                            n_t,
                            delta: None,
                            lambda_opt: None,
                            v_t_asymptotic: None,
                            percent_saved_asymptotic: None,
                            v_t_finite: None,
                            percent_saved_finite: None,
                        });
                    }
                    continue;
                }
            };
            let q = &built.q;
            let asym = savings_curve(q, &iso, n_b, &cfg.axes.n_t, SavingsMode::Asymptotic);
            let fin = savings_curve(q, &iso, n_b, &cfg.axes.n_t, SavingsMode::FiniteTheory);
            for ((&n_t, a), f) in cfg.axes.n_t.iter().zip(asym).zip(fin) {
                let mut pe = PointErrors::new(&file, format!("{axis}={} n_T={n_t}", label(value)));
                let a = pe.take("asymptotic", a);
                let f = pe.take("finite", f);
                let lambda = optimal_lambda(q, n_b, n_t).ok();
                art.absorb(pe.errors, a.is_none() && f.is_none());
                rows.push(SavingsRow {
                    axis,
                    value,
                    n_b,
                    n_t,
                    delta: Some(q.delta),
                    lambda_opt: lambda,
                    v_t_asymptotic: a.map(|r| r.v_t),
                    percent_saved_asymptotic: a.map(|r| r.percent_saved),
                    v_t_finite: f.map(|r| r.v_t),
                    percent_saved_finite: f.map(|r| r.percent_saved),
                });
            }
        }
        art.push_csv(&file, SAVINGS_HEADER, &rows)?;
    }
    Ok(art)
}

const ROBUSTNESS_HEADER: &[&str] = &[
    "n_B",
    "n_T",
    "tau_or_test_id",
    "v_T_asymptotic",
    "percent_saved_asymptotic",
    "v_T_finite",
    "percent_saved_finite",
];

#[derive(Serialize)]
struct RobustnessRow {
    #[serde(rename = "n_B")]
    n_b: f64,
    #[serde(rename = "n_T")]
    n_t: f64,
    tau_or_test_id: String,
    #[serde(rename = "v_T_asymptotic")]
    v_t_asymptotic: Option<f64>,
    percent_saved_asymptotic: Option<f64>,
    #[serde(rename = "v_T_finite")]
    v_t_finite: Option<f64>,
    percent_saved_finite: Option<f64>,
}

fn robustness_sweep(cfg: &ExperimentConfig) -> anyhow::Result<Artifacts> {
    let base = cfg.model.build(&ModelPoint::default())?;
    let tests = cfg.tests()?;
    let file = "robustness.csv";
    let mut art = Artifacts::default();
    let mut rows = Vec::new();
    for p in cfg.brain_points() {
        let n_b = with_brain(&base, cfg, &p)?;
        for (id, test) in &tests {
            let asym = savings_curve(&base.q, test, n_b, &cfg.axes.n_t, SavingsMode::Asymptotic);
            let fin = savings_curve(&base.q, test, n_b, &cfg.axes.n_t, SavingsMode::FiniteTheory);
            for ((&n_t, a), f) in cfg.axes.n_t.iter().zip(asym).zip(fin) {
                let mut pe = PointErrors::new(file, format!("n_B={n_b} {id} n_T={n_t}"));
                let a = pe.take("asymptotic", a);
                let f = pe.take("finite", f);
                art.absorb(pe.errors, a.is_none() && f.is_none());
                rows.push(RobustnessRow {
                    n_b,
                    n_t,
                    tau_or_test_id: id.clone(),
                    v_t_asymptotic: a.map(|r| r.v_t),
                    percent_saved_asymptotic: a.map(|r| r.percent_saved),
                    v_t_finite: f.map(|r| r.v_t),
                    percent_saved_finite: f.map(|r| r.percent_saved),
                });
            }
        }
    }
    art.push_csv(file, ROBUSTNESS_HEADER, &rows)?;
    Ok(art)
}

fn budget_sweep(cfg: &ExperimentConfig) -> anyhow::Result<Artifacts> {
    let base = cfg.model.build(&ModelPoint::default())?;
    let iso = TestSpec::isotropic(cfg.test.sigma_test2);
    let grid = BudgetGrid {
        points: cfg.budget.grid_points,
        zoom_rounds: cfg.budget.zoom_rounds,
    };
    let source = match cfg.budget.source {
        BudgetSource::Finite => RiskSource::FiniteTheory,
        BudgetSource::Empirical => RiskSource::Empirical(cfg.mc.config()),
    };
    let file = "budget.csv";
    let specs: Vec<BudgetSpec> = cfg
        .axes
        .cost_ratio
        .iter()
        .flat_map(|&r| {
            cfg.axes.budget.iter().map(move |&b| BudgetSpec {
                c_b: r * cfg.budget.c_t,
                c_t: cfg.budget.c_t,
                budget: b,
            })
        })
        .collect();
    let results: Vec<_> = specs
        .par_iter()
        .map(|spec| {
            let g = grid_allocation(&base.params, &base.q, &iso, spec, &grid, &source);
            let a = asymptotic_allocation(&base.q, &iso, spec);
            (spec, g, a)
        })
        .collect();
    let mut art = Artifacts::default();
    let mut rows = Vec::new();
    for (spec, g, a) in results {
        let mut pe = PointErrors::new(file, format!("c_B/c_T={} B={}", spec.c_b / spec.c_t, spec.budget));
        let g = pe.take("grid", g);
        let a = pe.take("asymptotic", a);
        art.absorb(pe.errors, g.is_none() && a.is_none());
        rows.extend(g.iter().chain(a.iter()).map(|r| BudgetRow::new(spec, r)));
    }
    let mut buf = Vec::new();
    write_budget_csv(&rows, &mut buf)?;
    art.files.push(CsvFile {
        name: file.into(),
        bytes: buf,
        rows: rows.len(),
    });
    Ok(art)
}

const LAMBDA_HEADER: &[&str] = &[
    "n_B",
    "n_T",
    "lambda",
    "risk_mean",
    "risk_ci_low",
    "risk_ci_high",
    "risk_finite",
    "config_hash",
    "seed",
];

#[derive(Serialize)]
struct LambdaRow {
    #[serde(rename = "n_B")]
    n_b: usize,
    #[serde(rename = "n_T")]
    n_t: usize,
    lambda: f64,
    risk_mean: f64,
    risk_ci_low: f64,
    risk_ci_high: f64,
    risk_finite: Option<f64>,
    config_hash: String,
    seed: u64,
}

const SCHEDULE_HEADER: &[&str] = &["n_B", "n_T", "lambda_best", "lambda_theory", "grid_steps"];

#[derive(Serialize)]
struct ScheduleRow {
    #[serde(rename = "n_B")]
    n_b: usize,
    #[serde(rename = "n_T")]
    n_t: usize,
    lambda_best: f64,
    lambda_theory: Option<f64>,
    grid_steps: Option<f64>,
}

/// Sample counts the Monte Carlo drivers accept.
fn whole(v: f64, what: &str) -> anyhow::Result<usize> {
    if v >= 1.0 && v.fract() == 0.0 && v <= usize::MAX as f64 {
        Ok(v as usize)
    } else {
        Err(anyhow!("{what} = {v} is not a positive whole number"))
    }
}

fn lambda_curve(cfg: &ExperimentConfig) -> anyhow::Result<Artifacts> {
    let base = cfg.model.build(&ModelPoint::default())?;
    let test = TestSpec::isotropic(cfg.test.sigma_test2);
    let grid = cfg.lambda_grid.spec();
    let mc = cfg.mc.config();
    let mut art = Artifacts::default();
    let (mut curve_rows, mut schedule_rows) = (Vec::new(), Vec::new());
    for p in cfg.brain_points() {
        let n_b = with_brain(&base, cfg, &p)?;
        for &n_t in &cfg.axes.n_t {
            let mut pe = PointErrors::new("lambda_curve.csv", format!("n_B={n_b} n_T={n_t}"));
            let curve = pe.take(
                "empirical",
                whole(n_b, "n_B")
                    .and_then(|nb| Ok((nb, whole(n_t, "n_T")?)))
                    .and_then(|(nb, nt)| Ok((nb, nt, grid_search_lambda(&base.params, &test, nb, nt, &grid, &mc)?))),
            );
            let failed = curve.is_none();
            if let Some((nb, nt, curve)) = curve {
                for r in &curve.risks {
                    let lambda = r.lambda.unwrap_or(f64::NAN);
                    curve_rows.push(LambdaRow {
                        n_b: nb,
                        n_t: nt,
                        lambda,
                        risk_mean: r.mean,
                        risk_ci_low: r.ci_low,
                        risk_ci_high: r.ci_high,
                        risk_finite: befs_finite_risk(&base.q, &test, n_b, n_t, lambda).ok(),
                        config_hash: r.config_hash.clone(),
                        seed: r.seed,
                    });
                }
                let theory = pe.take("theory", optimal_lambda(&base.q, n_b, n_t));
                schedule_rows.push(ScheduleRow {
                    n_b: nb,
                    n_t: nt,
                    lambda_best: curve.best_lambda,
                    lambda_theory: theory,
                    grid_steps: theory.map(|t| (curve.best_lambda / t).ln() / grid.ratio().ln()),
                });
            }
            art.absorb(pe.errors, failed);
        }
    }
    art.push_csv("lambda_curve.csv", LAMBDA_HEADER, &curve_rows)?;
    art.push_csv("lambda_schedule.csv", SCHEDULE_HEADER, &schedule_rows)?;
    Ok(art)
}

const VALIDATE_HEADER: &[&str] = &[
    "n_B",
    "n_T",
    "tau_or_test_id",
    "lambda_opt",
    "risk_empirical_mean",
    "risk_empirical_ci_low",
    "risk_empirical_ci_high",
    "risk_finite",
    "tos_risk_empirical_mean",
    "tos_risk_empirical_ci_low",
    "tos_risk_empirical_ci_high",
    "tos_risk_finite",
    "v_T_empirical_mean",
    "v_T_empirical_ci_low",
    "v_T_empirical_ci_high",
    "v_T_finite",
    "v_T_asymptotic",
    "config_hash",
    "seed",
];

#[derive(Serialize)]
struct ValidateRow {
    #[serde(rename = "n_B")]
    n_b: f64,
    #[serde(rename = "n_T")]
    n_t: f64,
    tau_or_test_id: String,
    lambda_opt: Option<f64>,
    risk_empirical_mean: Option<f64>,
    risk_empirical_ci_low: Option<f64>,
    risk_empirical_ci_high: Option<f64>,
    risk_finite: Option<f64>,
    tos_risk_empirical_mean: Option<f64>,
    tos_risk_empirical_ci_low: Option<f64>,
    tos_risk_empirical_ci_high: Option<f64>,
    tos_risk_finite: Option<f64>,
    #[serde(rename = "v_T_empirical_mean")]
    v_t_empirical_mean: Option<f64>,
    #[serde(rename = "v_T_empirical_ci_low")]
    v_t_empirical_ci_low: Option<f64>,
    #[serde(rename = "v_T_empirical_ci_high")]
    v_t_empirical_ci_high: Option<f64>,
    #[serde(rename = "v_T_finite")]
    v_t_finite: Option<f64>,
    #[serde(rename = "v_T_asymptotic")]
    v_t_asymptotic: Option<f64>,
    config_hash: Option<String>,
    seed: u64,
}

fn validate_empirical(cfg: &ExperimentConfig) -> anyhow::Result<Artifacts> {
    let base = cfg.model.build(&ModelPoint::default())?;
    let tests = cfg.tests()?;
    let mc = cfg.mc.config();
    let file = "validate_empirical.csv";
    let mut art = Artifacts::default();
    let mut rows = Vec::new();
    for p in cfg.brain_points() {
        let n_b = with_brain(&base, cfg, &p)?;
        for (id, test) in &tests {
            for &n_t in &cfg.axes.n_t {
                let mut pe = PointErrors::new(file, format!("n_B={n_b} {id} n_T={n_t}"));
                let sizes = pe.take("sizes", whole(n_b, "n_B").and_then(|nb| Ok((nb, whole(n_t, "n_T")?))));
                let estimate = |policy| -> anyhow::Result<RiskEstimate> {
                    let (nb, nt) = sizes.ok_or_else(|| anyhow!("invalid sample sizes"))?;
                    Ok(estimate_risk(&base.params, test, nb, nt, policy, &mc)?)
                };
                let soft = pe.take("empirical", estimate(LambdaPolicy::TheoryOptimal));
                let tos = pe.take("empirical-tos", estimate(LambdaPolicy::Tos));
                let value = soft.clone().and_then(|s| {
                    let nt = sizes.map_or(0, |s| s.1);
                    pe.take("empirical-value", value_from_estimate(&base.q, test, nt, s))
                });
                let lambda = pe.take("lambda", optimal_lambda(&base.q, n_b, n_t));
                let risk_finite = lambda.and_then(|l| pe.take("finite", befs_finite_risk(&base.q, test, n_b, n_t, l)));
                let tos_finite = pe.take("finite-tos", tos_risk(&base.q, test, n_t));
                let fin = savings_curve(&base.q, test, n_b, &[n_t], SavingsMode::FiniteTheory).pop();
                let asym = savings_curve(&base.q, test, n_b, &[n_t], SavingsMode::Asymptotic).pop();
                let fin = fin.and_then(|r| pe.take("finite-value", r));
                let asym = asym.and_then(|r| pe.take("asymptotic-value", r));
                art.absorb(pe.errors, soft.is_none() && tos.is_none() && fin.is_none());
                rows.push(ValidateRow {
                    n_b,
                    n_t,
                    tau_or_test_id: id.clone(),
                    lambda_opt: lambda,
                    risk_empirical_mean: soft.as_ref().map(|s| s.mean),
                    risk_empirical_ci_low: soft.as_ref().map(|s| s.ci_low),
                    risk_empirical_ci_high: soft.as_ref().map(|s| s.ci_high),
                    risk_finite,
                    tos_risk_empirical_mean: tos.as_ref().map(|s| s.mean),
                    tos_risk_empirical_ci_low: tos.as_ref().map(|s| s.ci_low),
                    tos_risk_empirical_ci_high: tos.as_ref().map(|s| s.ci_high),
                    tos_risk_finite: tos_finite,
                    v_t_empirical_mean: value.as_ref().map(|v| v.v_t),
                    v_t_empirical_ci_low: value.as_ref().map(|v| v.ci_low),
                    v_t_empirical_ci_high: value.as_ref().map(|v| v.ci_high),
                    v_t_finite: fin.map(|r| r.v_t),
                    v_t_asymptotic: asym.map(|r| r.v_t),
                    config_hash: soft.as_ref().map(|s| s.config_hash.clone()),
                    seed: mc.seed,
                });
            }
        }
    }
    art.push_csv(file, VALIDATE_HEADER, &rows)?;
    Ok(art)
}

//! Splitting a fixed budget between brain recordings and task labels.
//!
//! Brain data is worth buying only when the favorability
//! `F = (c_T / c_B) ((d_x - d_l) / d_x) (sigma_y^2 / delta)` exceeds one. The
//! large-budget optimum is then `n_B = (D / m^2)(sqrt(F) - 1)` with
//! `D = (d_x - d_l) delta`, independent of the budget.

use std::io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linmodel::{ModelParams, TestSpec};
use crate::montecarlo::{estimate_risk, LambdaPolicy, McConfig};
use crate::theory::{befs_finite_risk, optimal_lambda, tos_risk, TheoryQuantities};
use crate::valuation::equivalent_task_samples;

/// Cost of one task label at $15 per hour and two seconds per label.
pub const FMRI_TASK_COST: f64 = 15.0 / 1800.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetSpec {
    pub c_b: f64,
    pub c_t: f64,
    pub budget: f64,
}

impl BudgetSpec {
    /// Task labels at [`FMRI_TASK_COST`], brain samples `cost_ratio` times
    /// dearer.
    pub fn fmri_labels(cost_ratio: f64, budget: f64) -> Self {
        Self {
            c_b: cost_ratio * FMRI_TASK_COST,
            c_t: FMRI_TASK_COST,
            budget,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c_b > 0.0 && self.c_t > 0.0 && self.budget >= 0.0) || !self.budget.is_finite() {
            return Err(Error::InvalidArgument(format!("invalid budget {self:?}")));
        }
        Ok(())
    }

    pub fn cost(&self, n_b: u64, n_t: u64) -> f64 {
        self.c_b * n_b as f64 + self.c_t * n_t as f64
    }

    /// Task samples left after buying `n_b` brain samples.
    pub fn task_samples_after(&self, n_b: u64) -> u64 {
        let rest = self.budget - self.c_b * n_b as f64;
        if rest <= 0.0 {
            return 0;
        }
        let mut n_t = (rest / self.c_t * (1.0 + 1e-12)).floor() as u64;
        while n_t > 0 && self.cost(n_b, n_t) > self.budget * (1.0 + 1e-12) {
            n_t -= 1;
        }
        n_t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FavorabilityKind {
    Finite,
    /// `delta = 0`: unbounded favorability.
    Infinite,
    /// `delta < 0`: the collection condition fails regardless of cost.
    NegativeDelta,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Favorability {
    pub value: f64,
    pub kind: FavorabilityKind,
}

impl Favorability {
    pub fn favors_collection(&self) -> bool {
        match self.kind {
            FavorabilityKind::Finite => self.value > 1.0,
            FavorabilityKind::Infinite => true,
            FavorabilityKind::NegativeDelta => false,
        }
    }
}

pub fn favorability(q: &TheoryQuantities, spec: &BudgetSpec) -> Favorability {
    let d_x = q.d_x as f64;
    let num = spec.c_t / spec.c_b * (d_x - q.d_l as f64) / d_x * q.sigma_y2;
    if q.delta == 0.0 {
        Favorability {
            value: f64::INFINITY,
            kind: FavorabilityKind::Infinite,
        }
    } else {
        Favorability {
            value: num / q.delta,
            kind: if q.delta > 0.0 {
                FavorabilityKind::Finite
            } else {
                FavorabilityKind::NegativeDelta
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AllocationMethod {
    Grid,
    Asymptotic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetReport {
    pub favorability: Favorability,
    pub n_b_opt: u64,
    pub n_t_opt: u64,
    pub risk_at_opt: f64,
    /// Extra money an all-task design would need to match `risk_at_opt`.
    pub extra_budget: f64,
    pub percent_budget_saved: f64,
    pub method: AllocationMethod,
    /// Why no brain data is collected, when that is the outcome.
    pub reason: Option<String>,
}

fn percent_of(budget: f64, extra: f64) -> f64 {
    if extra == f64::INFINITY {
        100.0
    } else {
        100.0 * extra / (budget + extra)
    }
}

/// Risk of the theory-optimal student, or of the task-only student when
/// `n_b = 0`.
pub fn allocation_risk(q: &TheoryQuantities, test: &TestSpec, n_b: u64, n_t: u64) -> Result<f64> {
    if n_b == 0 {
        return tos_risk(q, test, n_t as f64);
    }
    let lambda = optimal_lambda(q, n_b as f64, n_t as f64)?;
    befs_finite_risk(q, test, n_b as f64, n_t as f64, lambda)
}

/// Large-budget optimum and the equivalent extra budget it buys.
pub fn asymptotic_allocation(q: &TheoryQuantities, test: &TestSpec, spec: &BudgetSpec) -> Result<BudgetReport> {
    spec.validate()?;
    let min_t = q.d_x as u64 + 2;
    if spec.task_samples_after(0) < min_t {
        return Err(Error::BudgetTooSmall {
            budget: spec.budget,
            required: spec.c_t * min_t as f64,
        });
    }
    let fav = favorability(q, spec);
    let d = (q.d_x - q.d_l) as f64 * q.delta;
    let (n_b, extra, reason) = match fav.kind {
        FavorabilityKind::NegativeDelta => (0, 0.0, Some("delta <= 0: brain data does not pay".to_string())),
        _ if !fav.favors_collection() => (0, 0.0, Some(format!("favorability {:.4} <= 1", fav.value))),
        FavorabilityKind::Infinite => (0, 0.0, Some("delta = 0: optimum is unbounded".to_string())),
        FavorabilityKind::Finite => {
            let raw = (d / q.m2) * (fav.value.sqrt() - 1.0);
            let v_inf = if q.m2 > 0.0 {
                q.sigma_y2 * ((q.d_x - q.d_l) as f64).powi(2) / (q.d_x as f64 * q.m2)
            } else {
                f64::INFINITY
            };
            let extra = spec.c_t * v_inf * (1.0 - (1.0 / fav.value).sqrt()).powi(2);
            let n_b = if raw.is_finite() { raw.round() as u64 } else { u64::MAX };
            (n_b, extra, None)
        }
    };
    // Capped so that the remaining task samples still leave n_T >= d_x + 2.
    let max_b = ((spec.budget - spec.c_t * min_t as f64) / spec.c_b).floor().max(0.0) as u64;
    let mut n_b = n_b.min(max_b);
    while n_b > 0 && spec.task_samples_after(n_b) < min_t {
        n_b -= 1;
    }
    let n_t = spec.task_samples_after(n_b);
    let risk = allocation_risk(q, test, n_b, n_t)?;
    Ok(BudgetReport {
        favorability: fav,
        n_b_opt: n_b,
        n_t_opt: n_t,
        risk_at_opt: risk,
        extra_budget: extra,
        percent_budget_saved: percent_of(spec.budget, extra),
        method: AllocationMethod::Asymptotic,
        reason,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetGrid {
    /// Geometric points in `n_B` on top of `n_B = 0`.
    pub points: usize,
    /// Rounds of geometric refinement around the incumbent optimum.
    pub zoom_rounds: usize,
}

impl Default for BudgetGrid {
    fn default() -> Self {
        Self {
            points: 64,
            zoom_rounds: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RiskSource {
    FiniteTheory,
    Empirical(McConfig),
}

fn geometric_counts(lo: u64, hi: u64, points: usize) -> Vec<u64> {
    if hi < lo {
        return Vec::new();
    }
    let (l, h) = ((lo.max(1)) as f64, hi as f64);
    let mut out: Vec<u64> = (0..points)
        .map(|i| {
            let t = if points > 1 { i as f64 / (points - 1) as f64 } else { 0.0 };
            (l * (h / l).powf(t)).round() as u64
        })
        .filter(|&n| n >= lo && n <= hi)
        .collect();
    out.push(lo);
    out.push(hi);
    out.sort_unstable();
    out.dedup();
    out
}

/// Minimum-risk feasible `(n_B, n_T)` over a geometric grid in `n_B` with the
/// remaining budget spent on task labels. Ties go to the smaller `n_B`.
pub fn grid_allocation(
    params: &ModelParams,
    q: &TheoryQuantities,
    test: &TestSpec,
    spec: &BudgetSpec,
    grid: &BudgetGrid,
    source: &RiskSource,
) -> Result<BudgetReport> {
    spec.validate()?;
    let min_t = q.d_x as u64 + 2;
    let all_task = spec.task_samples_after(0);
    if all_task < min_t {
        return Err(Error::BudgetTooSmall {
            budget: spec.budget,
            required: spec.c_t * min_t as f64,
        });
    }
    let max_b = ((spec.budget - spec.c_t * min_t as f64) / spec.c_b).floor().max(0.0) as u64;
    let min_b = match source {
        RiskSource::FiniteTheory => 1,
        RiskSource::Empirical(_) => q.d_x as u64 + 1,
    };
    let risk_at = |n_b: u64| -> Result<Option<f64>> {
        let n_t = spec.task_samples_after(n_b);
        if n_t < min_t {
            return Ok(None);
        }
        match source {
            RiskSource::FiniteTheory => match allocation_risk(q, test, n_b, n_t) {
                Ok(r) => Ok(Some(r)),
                Err(Error::DegenerateSchedule { .. }) => Ok(None),
                Err(e) => Err(e),
            },
            RiskSource::Empirical(cfg) => {
                let policy = if n_b == 0 { LambdaPolicy::Tos } else { LambdaPolicy::TheoryOptimal };
                match estimate_risk(params, test, n_b as usize, n_t as usize, policy, cfg) {
                    Ok(r) => Ok(Some(r.mean)),
                    Err(Error::DegenerateSchedule { .. }) => Ok(None),
                    Err(e) => Err(e),
                }
            }
        }
    };

    let mut candidates = vec![0];
    candidates.extend(geometric_counts(min_b, max_b, grid.points));
    let mut evaluated: Vec<(u64, f64)> = Vec::new();
    let visit = |counts: &[u64], evaluated: &mut Vec<(u64, f64)>| -> Result<()> {
        for &n_b in counts {
            if evaluated.iter().any(|(b, _)| *b == n_b) {
                continue;
            }
            if let Some(r) = risk_at(n_b)? {
                evaluated.push((n_b, r));
            }
        }
        evaluated.sort_by_key(|(b, _)| *b);
        Ok(())
    };
    visit(&candidates, &mut evaluated)?;
    let best_index = |ev: &[(u64, f64)]| {
        let mut best = 0;
        for (i, (_, r)) in ev.iter().enumerate() {
            if *r < ev[best].1 {
                best = i;
            }
        }
        best
    };
    for _ in 0..grid.zoom_rounds {
        let i = best_index(&evaluated);
        let lo = if i > 0 { evaluated[i - 1].0 } else { evaluated[i].0 };
        let hi = evaluated.get(i + 1).map_or(evaluated[i].0, |e| e.0);
        if hi - lo <= 2 {
            break;
        }
        let lo = lo.max(min_b);
        visit(&geometric_counts(lo, hi, grid.points), &mut evaluated)?;
    }
    let (n_b, risk) = evaluated[best_index(&evaluated)];
    let n_t = spec.task_samples_after(n_b);
    let fav = favorability(q, spec);
    let extra = if n_b == 0 {
        0.0
    } else {
        match equivalent_task_samples(q, test, risk) {
            Ok(n_equiv) => (spec.c_t * (n_equiv - all_task as f64)).max(0.0),
            Err(_) => f64::INFINITY,
        }
    };
    Ok(BudgetReport {
        favorability: fav,
        n_b_opt: n_b,
        n_t_opt: n_t,
        risk_at_opt: risk,
        extra_budget: extra,
        percent_budget_saved: percent_of(spec.budget, extra),
        method: AllocationMethod::Grid,
        reason: (n_b == 0).then(|| "all-task allocation has the lowest risk".to_string()),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BudgetRow {
    #[serde(rename = "B")]
    pub budget: f64,
    #[serde(rename = "c_B")]
    pub c_b: f64,
    #[serde(rename = "c_T")]
    pub c_t: f64,
    #[serde(rename = "F")]
    pub favorability: f64,
    #[serde(rename = "n_B_opt")]
    pub n_b_opt: u64,
    #[serde(rename = "n_T_opt")]
    pub n_t_opt: u64,
    pub risk: f64,
    pub extra_budget: f64,
    pub percent_budget_saved: f64,
    pub method: AllocationMethod,
}

impl BudgetRow {
    pub fn new(spec: &BudgetSpec, report: &BudgetReport) -> Self {
        Self {
            budget: spec.budget,
            c_b: spec.c_b,
            c_t: spec.c_t,
            favorability: report.favorability.value,
            n_b_opt: report.n_b_opt,
            n_t_opt: report.n_t_opt,
            risk: report.risk_at_opt,
            extra_budget: report.extra_budget,
            percent_budget_saved: report.percent_budget_saved,
            method: report.method,
        }
    }
}

pub fn write_budget_csv<W: io::Write>(rows: &[BudgetRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record([
            "B",
            "c_B",
            "c_T",
            "F",
            "n_B_opt",
            "n_T_opt",
            "risk",
            "extra_budget",
            "percent_budget_saved",
            "method",
        ])?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linmodel::{build_random_model, LatentNoise, ModelSpec};
    use crate::theory::derive_quantities;

    fn instance(m: f64, snr: f64) -> (ModelParams, TheoryQuantities) {
        let spec = ModelSpec {
            d_x: 20,
            d_l: 4,
            d_r: 20,
            misalignment: m,
            snr_task: snr,
            latent_noise: LatentNoise::Isotropic(0.5),
            sigma_r2: 0.4,
            pool_width: 1,
            pool_weight: 1.0,
        };
        let p = build_random_model(&spec, 11).unwrap();
        let q = derive_quantities(&p).unwrap();
        (p, q)
    }

    #[test]
    fn favorability_substitution() {
        let (_, mut q) = instance(0.1, 1.0);
        q.d_x = 10;
        q.d_l = 1;
        q.sigma_y2 = 10.0;
        q.delta = 1.0;
        let f = favorability(&q, &BudgetSpec { c_b: 2.0, c_t: 2.0, budget: 1.0 });
        assert!((f.value - 9.0).abs() < 1e-12 && f.favors_collection());
        q.delta = 0.0;
        assert_eq!(favorability(&q, &BudgetSpec { c_b: 2.0, c_t: 2.0, budget: 1.0 }).kind, FavorabilityKind::Infinite);
    }

    #[test]
    fn extra_budget_at_f_four() {
        let (_, mut q) = instance(0.1, 1.0);
        let d_x = q.d_x as f64;
        let null = (q.d_x - q.d_l) as f64;
        // choose c_B so that F = 4 exactly
        let c_b = null / d_x * q.sigma_y2 / q.delta / 4.0;
        let spec = BudgetSpec { c_b, c_t: 1.0, budget: 1e7 };
        let r = asymptotic_allocation(&q, &TestSpec::isotropic(0.0), &spec).unwrap();
        assert!((r.favorability.value - 4.0).abs() < 1e-12);
        let v_inf = q.sigma_y2 * null * null / (d_x * q.m2);
        assert!((r.extra_budget - v_inf / 4.0).abs() < 1e-9 * v_inf);
        q.delta *= 100.0;
        let r = asymptotic_allocation(&q, &TestSpec::isotropic(0.0), &spec).unwrap();
        assert!(!r.favorability.favors_collection());
        assert_eq!((r.n_b_opt, r.extra_budget), (0, 0.0));
    }

    #[test]
    fn asymptotic_optimum_saturates_in_budget() {
        let (_, q) = instance(0.1, 1.0);
        let test = TestSpec::isotropic(0.0);
        let a = asymptotic_allocation(&q, &test, &BudgetSpec { c_b: 0.25, c_t: 1.0, budget: 1e6 }).unwrap();
        let b = asymptotic_allocation(&q, &test, &BudgetSpec { c_b: 0.25, c_t: 1.0, budget: 1e8 }).unwrap();
        assert!(a.n_b_opt > 0);
        assert_eq!(a.n_b_opt, b.n_b_opt);
        assert!(b.percent_budget_saved < a.percent_budget_saved);
    }

    #[test]
    fn grid_tracks_asymptotic_optimum_at_large_budget() {
        let (p, q) = instance(0.1, 1.0);
        let test = TestSpec::isotropic(0.0);
        let spec = BudgetSpec { c_b: 0.25, c_t: 1.0, budget: 1e7 };
        let asy = asymptotic_allocation(&q, &test, &spec).unwrap();
        let grid = grid_allocation(&p, &q, &test, &spec, &BudgetGrid::default(), &RiskSource::FiniteTheory).unwrap();
        let rel = (grid.n_b_opt as f64 / asy.n_b_opt as f64 - 1.0).abs();
        assert!(rel < 0.1, "grid {} vs asymptotic {}", grid.n_b_opt, asy.n_b_opt);
        assert!(spec.cost(grid.n_b_opt, grid.n_t_opt) <= spec.budget);
    }

    #[test]
    fn unfavorable_costs_collect_nothing() {
        let (p, q) = instance(0.1, 5.0);
        let test = TestSpec::isotropic(0.0);
        let d_x = q.d_x as f64;
        let f1_cost = (d_x - q.d_l as f64) / d_x * q.sigma_y2 / q.delta;
        for scale in [1.0, 1.5, 10.0] {
            let spec = BudgetSpec { c_b: f1_cost * scale, c_t: 1.0, budget: 1e6 };
            let g = grid_allocation(&p, &q, &test, &spec, &BudgetGrid::default(), &RiskSource::FiniteTheory).unwrap();
            assert_eq!(g.n_b_opt, 0, "scale {scale}");
            assert_eq!(g.percent_budget_saved, 0.0);
        }
    }

    #[test]
    fn tiny_budget_is_rejected() {
        let (p, q) = instance(0.1, 5.0);
        let spec = BudgetSpec { c_b: 1.0, c_t: 1.0, budget: 21.0 };
        let err = grid_allocation(&p, &q, &TestSpec::isotropic(0.0), &spec, &BudgetGrid::default(), &RiskSource::FiniteTheory);
        assert!(matches!(err, Err(Error::BudgetTooSmall { .. })));
        let err = asymptotic_allocation(&q, &TestSpec::isotropic(0.0), &spec);
        assert!(matches!(err, Err(Error::BudgetTooSmall { .. })));
    }

    #[test]
    fn asymptotic_optimum_beyond_budget_keeps_task_regime() {
        let (_, q) = instance(0.1, 1.0);
        let spec = BudgetSpec { c_b: 0.25, c_t: 1.0, budget: 40.0 };
        let r = asymptotic_allocation(&q, &TestSpec::isotropic(0.0), &spec).unwrap();
        assert_eq!(r.n_t_opt, q.d_x as u64 + 2);
        assert_eq!(r.n_b_opt, 72);
        assert!(r.risk_at_opt.is_finite());
    }

    #[test]
    fn feasibility_is_exact() {
        let spec = BudgetSpec { c_b: 0.3, c_t: 0.1, budget: 1.0 };
        for n_b in 0..4 {
            let n_t = spec.task_samples_after(n_b);
            assert!(spec.cost(n_b, n_t) <= spec.budget * (1.0 + 1e-12));
            assert!(spec.cost(n_b, n_t + 1) > spec.budget * (1.0 + 1e-12));
        }
    }
}

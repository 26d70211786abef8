//! Exchange rates and equivalent task samples.
//!
//! A brain-regularised risk `r` is worth `v_T` extra task samples when the
//! task-only law reaches `r` at `n_T + v_T`. Inverting
//! `sigma_test^2 + sigma_y^2 Tr(Sigma_test) / (n - d_x - 1)` gives `v_T` in
//! closed form.

use std::fmt;
use std::io;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linmodel::TestSpec;
use crate::theory::{asymptotic_value, befs_finite_risk, optimal_lambda, robustness_value, TheoryQuantities};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValueSource {
    Asymptotic,
    FiniteTheory,
    Empirical,
}

impl fmt::Display for ValueSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ValueSource::Asymptotic => "asymptotic",
            ValueSource::FiniteTheory => "finite-theory",
            ValueSource::Empirical => "empirical",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueReport {
    pub n_b: f64,
    pub n_t: f64,
    /// Equivalent extra task samples; `f64::INFINITY` when unbounded.
    pub v_t: f64,
    pub rho: f64,
    pub percent_saved: f64,
    /// Set when `v_t` is infinite and `percent_saved` is pinned at 100.
    pub infinite: bool,
    pub source: ValueSource,
}

impl ValueReport {
    pub fn new(n_b: f64, n_t: f64, v_t: f64, source: ValueSource) -> Self {
        let infinite = v_t == f64::INFINITY;
        Self {
            n_b,
            n_t,
            v_t,
            rho: if n_b > 0.0 { v_t / n_b } else { f64::NAN },
            percent_saved: percent_saved(n_t, v_t),
            infinite,
            source,
        }
    }
}

/// `100 (1 - n_T / (n_T + v_T))`, or 100 for unbounded `v_T`.
pub fn percent_saved(n_t: f64, v_t: f64) -> f64 {
    if v_t == f64::INFINITY {
        100.0
    } else {
        100.0 * (1.0 - n_t / (n_t + v_t))
    }
}

/// Task-only sample size at which the task-only law equals `risk`.
pub fn equivalent_task_samples(q: &TheoryQuantities, test: &TestSpec, risk: f64) -> Result<f64> {
    let floor = test.sigma_test2;
    if !(risk > floor) {
        return Err(Error::Inversion { risk, floor });
    }
    Ok(q.sigma_y2 * test.trace(q.d_x, q.d_l) / (risk - floor) + (q.d_x + 1) as f64)
}

/// `v_T` such that `tos_risk(n_T + v_T) = risk_befs`; negative when brain
/// data hurts.
pub fn value_from_risks(
    q: &TheoryQuantities,
    test: &TestSpec,
    n_b: f64,
    n_t: f64,
    risk_befs: f64,
    source: ValueSource,
) -> Result<ValueReport> {
    if !(n_t > (q.d_x + 1) as f64) {
        return Err(Error::OutOfRegime(format!(
            "n_T = {n_t} must exceed d_x + 1 = {}",
            q.d_x + 1
        )));
    }
    let v_t = equivalent_task_samples(q, test, risk_befs)? - n_t;
    Ok(ValueReport::new(n_b, n_t, v_t, source))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SavingsMode {
    FiniteTheory,
    Asymptotic,
}

/// One report per `n_T`; out-of-regime points are returned as errors in
/// place.
pub fn savings_curve(
    q: &TheoryQuantities,
    test: &TestSpec,
    n_b: f64,
    n_t_grid: &[f64],
    mode: SavingsMode,
) -> Vec<Result<ValueReport>> {
    match mode {
        SavingsMode::FiniteTheory => n_t_grid
            .iter()
            .map(|&n_t| {
                let lambda = optimal_lambda(q, n_b, n_t)?;
                let risk = befs_finite_risk(q, test, n_b, n_t, lambda)?;
                value_from_risks(q, test, n_b, n_t, risk, ValueSource::FiniteTheory)
            })
            .collect(),
        SavingsMode::Asymptotic => {
            let v_t = if test.is_isotropic_shape() {
                asymptotic_value(q, n_b).map(|v| v.v_t)
            } else {
                robustness_value(q, test, n_b)
            };
            n_t_grid
                .iter()
                .map(|&n_t| {
                    v_t.clone()
                        .map(|v| ValueReport::new(n_b, n_t, v, ValueSource::Asymptotic))
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ValueRow {
    #[serde(rename = "n_B")]
    pub n_b: f64,
    #[serde(rename = "n_T")]
    pub n_t: f64,
    pub tau_or_test_id: String,
    #[serde(rename = "v_T")]
    pub v_t: f64,
    pub rho: f64,
    pub percent_saved: f64,
    pub source: ValueSource,
}

impl ValueRow {
    pub fn new(report: &ValueReport, test_id: impl Into<String>) -> Self {
        Self {
            n_b: report.n_b,
            n_t: report.n_t,
            tau_or_test_id: test_id.into(),
            v_t: report.v_t,
            rho: report.rho,
            percent_saved: report.percent_saved,
            source: report.source,
        }
    }
}

pub fn write_value_csv<W: io::Write>(rows: &[ValueRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(["n_B", "n_T", "tau_or_test_id", "v_T", "rho", "percent_saved", "source"])?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

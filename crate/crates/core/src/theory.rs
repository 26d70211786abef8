//! Closed-form risk laws, the optimal ridge schedule and the value of brain
//! data, all to leading order with remainder terms dropped.
//!
//! The estimation-noise covariance `Sigma_est = A* M A*^T` with
//! `M = sigma_r^2 (H* H*^T)^{-1} + Sigma_l` lives inside `col(A*)`, so
//! [`TheoryQuantities`] keeps only the `d_l x d_l` core `M`. For a block test
//! covariance `c_on P_{A*} + c_off P_{A*perp}` every trace the laws need
//! reduces to `Tr M`, `d_l` and `d_x - d_l`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::estimators::EncodingModel;
use crate::linalg;
use crate::linmodel::{ModelParams, TestSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct TheoryQuantities {
    pub d_x: usize,
    pub d_l: usize,
    pub sigma_y2: f64,
    /// `M = sigma_r^2 (H* H*^T)^{-1} + Sigma_l`; `Sigma_est = A* M A*^T`.
    pub latent_est_cov: DMatrix<f64>,
    pub delta: f64,
    /// `|(I - P_{A*}) beta*|^2`.
    pub m2: f64,
    /// `beta*^T Sigma_est beta*`.
    pub beta_sigma_beta: f64,
    pub tr_sigma_est: f64,
}

impl TheoryQuantities {
    fn null_dim(&self) -> f64 {
        (self.d_x - self.d_l) as f64
    }

    /// `gamma_I(n_B) = m^2 + (d_x - d_l) delta / n_B`.
    pub fn gamma_i(&self, n_b: f64) -> f64 {
        self.m2 + (self.beta_sigma_beta * self.null_dim() - self.m2 * self.tr_sigma_est) / n_b
    }

    /// Expected `beta_{A_hat perp}^T Sigma_test beta_{A_hat perp}` after `n_B`
    /// brain samples.
    pub fn gamma_test(&self, n_b: f64, test: &TestSpec) -> f64 {
        let tr_off = test.trace_off(self.d_x, self.d_l);
        let off_bias = test.c_off * self.m2;
        off_bias
            + (self.m2 * test.c_on * self.tr_sigma_est - 2.0 * off_bias * self.tr_sigma_est
                + self.beta_sigma_beta * tr_off)
                / n_b
    }

    /// `Tr(Sigma_perp) Tr(Sigma_est) - Tr(Sigma_A Sigma_est)(d_x - d_l)`.
    fn cross_trace(&self, test: &TestSpec) -> f64 {
        test.trace_off(self.d_x, self.d_l) * self.tr_sigma_est
            - test.c_on * self.tr_sigma_est * self.null_dim()
    }

    /// Dense `d_x x d_x` estimation-noise covariance.
    pub fn sigma_est(&self, params: &ModelParams) -> DMatrix<f64> {
        &params.a_star * &self.latent_est_cov * params.a_star.transpose()
    }
}

pub fn derive_quantities(params: &ModelParams) -> Result<TheoryQuantities> {
    let gram = &params.h_star * params.h_star.transpose();
    let gram_inv = linalg::spd_inverse(&gram, "H* H*^T").map_err(|e| match e {
        Error::SingularDesign(msg) => Error::Rank(msg),
        other => other,
    })?;
    let latent_est_cov = gram_inv * params.sigma_r2 + &params.sigma_l;
    let coords = params.latent_task_coords();
    let beta_sigma_beta = (latent_est_cov.transpose() * &coords).dot(&coords);
    let tr_sigma_est = latent_est_cov.trace();
    let m2 = params.misaligned_component().norm_squared();
    let null_dim = (params.d_x - params.d_l) as f64;
    let delta = if null_dim > 0.0 {
        beta_sigma_beta - m2 * tr_sigma_est / null_dim
    } else {
        beta_sigma_beta
    };
    Ok(TheoryQuantities {
        d_x: params.d_x,
        d_l: params.d_l,
        sigma_y2: params.sigma_y2,
        latent_est_cov,
        delta,
        m2,
        beta_sigma_beta,
        tr_sigma_est,
    })
}

fn task_denominator(d_x: usize, n_t: f64) -> Result<f64> {
    let denom = n_t - d_x as f64 - 1.0;
    if !(denom > 0.0) {
        return Err(Error::OutOfRegime(format!(
            "n_T = {n_t} must exceed d_x + 1 = {}",
            d_x + 1
        )));
    }
    Ok(denom)
}

/// `sigma_test^2 + sigma_y^2 Tr(Sigma_test) / (n_T - d_x - 1)`.
///
/// `n_T` is real-valued so the law can be inverted for fractional sample
/// counts.
pub fn tos_risk(q: &TheoryQuantities, test: &TestSpec, n_t: f64) -> Result<f64> {
    let denom = task_denominator(q.d_x, n_t)?;
    Ok(test.sigma_test2 + q.sigma_y2 / denom * test.trace(q.d_x, q.d_l))
}

/// Expected risk of the soft-constrained student with ridge strength
/// `lambda`, averaged over both the brain and the task draws.
pub fn befs_finite_risk(q: &TheoryQuantities, test: &TestSpec, n_b: f64, n_t: f64, lambda: f64) -> Result<f64> {
    let denom = task_denominator(q.d_x, n_t)?;
    if !(n_b >= 1.0) {
        return Err(Error::InvalidArgument(format!("n_B = {n_b} must be at least 1")));
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda = {lambda} must be >= 0")));
    }
    let alpha = 1.0 / (1.0 + lambda);
    let shrink = 1.0 - alpha;
    let (d_l, null_dim) = (q.d_l as f64, q.null_dim());
    let tr_on = test.trace_on(q.d_l);
    let tr_off = test.trace_off(q.d_x, q.d_l);
    let cross = q.cross_trace(test);
    let kept = tr_on + alpha * alpha * tr_off;

    let bias = shrink * shrink
        * q.gamma_test(n_b, test)
        * (1.0 + (2.0 * alpha * (d_l + alpha * null_dim) + 3.0 * alpha * alpha) / n_t);
    let variance = q.sigma_y2 / denom * (kept + (1.0 - alpha * alpha) / n_b * cross);
    let bias_spread = shrink * shrink * q.gamma_i(n_b) / n_t * kept;
    let mixed = (1.0 - alpha * alpha) * shrink * shrink * q.m2 / (n_b * n_t) * cross;
    Ok(test.sigma_test2 + bias + variance + bias_spread + mixed)
}

/// `lambda_opt = sigma_y^2 (d_x - d_l) / (n_T gamma_I(n_B))`.
pub fn optimal_lambda(q: &TheoryQuantities, n_b: f64, n_t: f64) -> Result<f64> {
    let gamma_i = q.gamma_i(n_b);
    if !(gamma_i > 0.0) {
        return Err(Error::DegenerateSchedule { gamma_i });
    }
    if !(n_t > 0.0) {
        return Err(Error::InvalidArgument(format!("n_T = {n_t} must be positive")));
    }
    Ok(q.sigma_y2 * q.null_dim() / (n_t * gamma_i))
}

/// Risk of the hard-constrained student given a fixed encoder, averaged over
/// the task draw only.
pub fn befs_hard_risk(params: &ModelParams, test: &TestSpec, enc: &EncodingModel, n_t: f64) -> Result<f64> {
    let k = enc.rank();
    let denom = n_t - k as f64 - 1.0;
    if !(denom > 0.0) {
        return Err(Error::OutOfRegime(format!("n_T = {n_t} must exceed rank + 1 = {}", k + 1)));
    }
    let resid = enc.residual(&params.beta_star);
    let overlap = (params.a_star.transpose() * &enc.a_hat).norm_squared();
    let tr_proj = test.c_off * k as f64 + (test.c_on - test.c_off) * overlap;
    Ok(test.sigma_test2
        + test.quad_form(params, &resid)
        + (params.sigma_y2 + resid.norm_squared()) / denom * tr_proj)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsymptoticValue {
    /// Exchange rate `v_T / n_B`.
    pub rho: f64,
    pub v_t: f64,
    /// `n_B -> infinity` limit; `f64::INFINITY` for a perfectly aligned task.
    pub v_t_inf: f64,
}

/// Task samples a large-`n_T` student gains from `n_B` brain samples.
pub fn asymptotic_value(q: &TheoryQuantities, n_b: f64) -> Result<AsymptoticValue> {
    let gamma_i = q.gamma_i(n_b);
    if !(gamma_i > 0.0) {
        return Err(Error::DegenerateSchedule { gamma_i });
    }
    let scale = q.sigma_y2 * q.null_dim() * q.null_dim() / q.d_x as f64;
    let v_t = scale / gamma_i;
    let v_t_inf = if q.m2 > 0.0 { scale / q.m2 } else { f64::INFINITY };
    Ok(AsymptoticValue {
        rho: v_t / n_b,
        v_t,
        v_t_inf,
    })
}

/// Value of brain data measured under a shifted test covariance. Negative
/// when the shift loads the directions the encoder estimates worst.
pub fn robustness_value(q: &TheoryQuantities, test: &TestSpec, n_b: f64) -> Result<f64> {
    let tr = test.trace(q.d_x, q.d_l);
    if !(tr > 0.0) {
        return Err(Error::DivideByZero("test covariance has zero trace".into()));
    }
    let null_dim = q.null_dim();
    if null_dim == 0.0 {
        return Err(Error::DivideByZero("latent space fills the input space".into()));
    }
    let v_i = asymptotic_value(q, n_b)?.v_t;
    let tr_off = test.trace_off(q.d_x, q.d_l);
    let nullspace = 2.0 * (tr_off - q.cross_trace(test) / n_b) / null_dim;
    Ok(q.d_x as f64 / tr * v_i * (nullspace - q.gamma_test(n_b, test) / q.gamma_i(n_b)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linmodel::{build_random_model, pooling_matrix, LatentNoise, ModelSpec};
    use nalgebra::DVector;
    use proptest::prelude::*;

    fn spec(m: f64) -> ModelSpec {
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

    fn block_instance(beta_on: &[f64], beta_off: &[f64]) -> ModelParams {
        // d_x = 6, d_l = 2, two stacked identity blocks scaled by 1.5
        let mut a_star = DMatrix::zeros(6, 2);
        a_star[(0, 0)] = 1.0;
        a_star[(1, 1)] = 1.0;
        let h_star = pooling_matrix(2, 4, 1, 1.5);
        let mut beta = DVector::zeros(6);
        beta.rows_mut(0, 2).copy_from_slice(beta_on);
        beta.rows_mut(2, 4).copy_from_slice(beta_off);
        ModelParams::new(a_star, h_star, beta, DMatrix::identity(2, 2) * 0.3, 0.2, 1.0).unwrap()
    }

    #[test]
    fn delta_matches_block_formula() {
        let p = block_instance(&[0.9, -0.4], &[0.1, 0.2, -0.05, 0.3]);
        let q = derive_quantities(&p).unwrap();
        let (d_x, d_l, k, omega, s_l, s_r) = (6.0, 2.0, 2.0, 1.5_f64, 0.3, 0.2);
        let on = 0.9_f64.powi(2) + 0.4_f64.powi(2);
        let off = 0.01 + 0.04 + 0.0025 + 0.09;
        let oracle = d_l * (s_r / (k * omega * omega) + s_l) * (on / d_l - off / (d_x - d_l));
        assert!((q.delta - oracle).abs() < 1e-10, "{} vs {oracle}", q.delta);
    }

    #[test]
    fn delta_vanishes_on_balanced_task() {
        // |beta_on|^2 / 2 = |beta_off|^2 / 4
        let p = block_instance(&[0.5, 0.5], &[0.5, 0.5, 0.5, 0.5]);
        assert!(derive_quantities(&p).unwrap().delta.abs() < 1e-12);
    }

    #[test]
    fn sigma_est_is_low_rank_psd() {
        let p = build_random_model(&spec(0.1), 4).unwrap();
        let q = derive_quantities(&p).unwrap();
        let s = q.sigma_est(&p);
        assert!((&s - s.transpose()).amax() < 1e-12);
        assert!(s.clone().symmetric_eigenvalues().min() > -1e-12);
        assert!(linalg::numerical_rank(&s, 1e-10) <= 5);
        assert!((s.trace() - q.tr_sigma_est).abs() < 1e-10);
        let direct = (&s * &p.beta_star).dot(&p.beta_star);
        assert!((direct - q.beta_sigma_beta).abs() < 1e-12);
    }

    #[test]
    fn rank_deficient_readout_is_rejected() {
        let mut p = build_random_model(&spec(0.1), 4).unwrap();
        p.h_star.row_mut(1).fill(0.0);
        assert!(matches!(derive_quantities(&p), Err(Error::Rank(_))));
    }

    #[test]
    fn gamma_identity_over_random_models() {
        for seed in 0..50 {
            let p = build_random_model(&spec(0.02 + 0.01 * seed as f64), seed).unwrap();
            let q = derive_quantities(&p).unwrap();
            for n_b in [10.0, 1e3, 1e6] {
                let lhs = q.gamma_i(n_b) - q.m2;
                let rhs = (q.d_x - q.d_l) as f64 * q.delta / n_b;
                assert!((lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1e-300), "seed {seed}");
                let iso = q.gamma_test(n_b, &TestSpec::isotropic(0.0));
                assert!((iso - q.gamma_i(n_b)).abs() <= 1e-12 * q.gamma_i(n_b).abs());
            }
        }
    }

    #[test]
    fn gamma_test_matches_dense_trace_form() {
        let p = build_random_model(&spec(0.2), 9).unwrap();
        let q = derive_quantities(&p).unwrap();
        let test = TestSpec::shift(0.7, 0.0);
        let cov = test.covariance(&p);
        let eye = DMatrix::identity(8, 8);
        let pa = p.latent_projector();
        let (s_a, s_perp) = (&pa * &cov * &pa, (&eye - &pa) * &cov * (&eye - &pa));
        let b_perp = p.misaligned_component();
        let est = q.sigma_est(&p);
        let n_b = 300.0;
        let oracle = (&s_perp * &b_perp).dot(&b_perp)
            + (b_perp.norm_squared() * (&s_a * &est).trace()
                - 2.0 * (&s_perp * &b_perp).dot(&b_perp) * est.trace()
                + q.beta_sigma_beta * s_perp.trace())
                / n_b;
        assert!((q.gamma_test(n_b, &test) - oracle).abs() < 1e-12);
    }

    #[test]
    fn tos_risk_examples() {
        let mut p = build_random_model(&spec(0.1), 1).unwrap();
        p.sigma_y2 = 1.0;
        let q = derive_quantities(&p).unwrap();
        let iso = TestSpec::isotropic(1.0);
        assert!((tos_risk(&q, &iso, 100.0).unwrap() - (1.0 + 8.0 / 91.0)).abs() < 1e-15);
        assert!((tos_risk(&q, &iso, 1e15).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(tos_risk(&q, &iso, 9.0), Err(Error::OutOfRegime(_))));
        assert!(matches!(befs_finite_risk(&q, &iso, 100.0, 9.0, 1.0), Err(Error::OutOfRegime(_))));
    }

    #[test]
    fn optimal_lambda_substitution() {
        let mut p = build_random_model(&spec(0.1), 1).unwrap();
        p.sigma_y2 = 1.0;
        let mut q = derive_quantities(&p).unwrap();
        // force gamma_I = 0.01 at every n_B
        q.m2 = 0.01;
        q.beta_sigma_beta = q.m2 * q.tr_sigma_est / 3.0;
        assert!((optimal_lambda(&q, 1e4, 300.0).unwrap() - 1.0).abs() < 1e-12);
        let a = optimal_lambda(&q, 1e4, 100.0).unwrap() * 100.0;
        let b = optimal_lambda(&q, 1e4, 1000.0).unwrap() * 1000.0;
        assert!((a - b).abs() < 1e-12);
        q.m2 = 0.0;
        q.beta_sigma_beta = 0.0;
        assert!(matches!(optimal_lambda(&q, 1e4, 300.0), Err(Error::DegenerateSchedule { .. })));
    }

    #[test]
    fn optimal_lambda_matches_grid_argmin() {
        let p = build_random_model(&spec(0.05), 2).unwrap();
        let q = derive_quantities(&p).unwrap();
        let test = TestSpec::isotropic(0.0);
        let (n_b, n_t) = (1e4, 400.0);
        let lam = optimal_lambda(&q, n_b, n_t).unwrap();
        let ratio = 1.25_f64;
        let grid: Vec<f64> = (0..64).map(|i| lam / ratio.powi(32) * ratio.powi(i)).collect();
        let best = grid
            .iter()
            .copied()
            .min_by(|a, b| {
                let ra = befs_finite_risk(&q, &test, n_b, n_t, *a).unwrap();
                let rb = befs_finite_risk(&q, &test, n_b, n_t, *b).unwrap();
                ra.total_cmp(&rb)
            })
            .unwrap();
        let steps = (best / lam).ln().abs() / ratio.ln();
        assert!(steps <= 1.0 + 1e-9, "argmin {best} vs {lam}");
    }

    #[test]
    fn optimal_gap_matches_leading_order() {
        let p = build_random_model(&spec(0.1), 3).unwrap();
        let q = derive_quantities(&p).unwrap();
        let test = TestSpec::isotropic(0.0);
        let n_b = 1e4;
        let null = (q.d_x - q.d_l) as f64;
        for n_t in [1e5, 1e6] {
            let lam = optimal_lambda(&q, n_b, n_t).unwrap();
            let gap = tos_risk(&q, &test, n_t).unwrap() - befs_finite_risk(&q, &test, n_b, n_t, lam).unwrap();
            let lead = q.sigma_y2.powi(2) * null * null / (q.gamma_i(n_b) * n_t * n_t);
            assert!(gap >= 0.0);
            assert!((gap / lead - 1.0).abs() < 0.05, "n_T {n_t}: {gap} vs {lead}");
        }
    }

    #[test]
    fn hard_risk_bias_floor_and_aligned_case() {
        let p = build_random_model(&spec(0.3), 5).unwrap();
        let enc = EncodingModel::from_basis(&p.a_star, p.h_star.clone());
        let iso = TestSpec::isotropic(0.5);
        let far = befs_hard_risk(&p, &iso, &enc, 1e12).unwrap();
        assert!((far - 0.5 - 0.09).abs() < 1e-9);
        let aligned = build_random_model(&spec(0.0), 5).unwrap();
        let enc = EncodingModel::from_basis(&aligned.a_star, aligned.h_star.clone());
        let test = TestSpec::shift(0.4, 0.1);
        let r = befs_hard_risk(&aligned, &test, &enc, 20.0).unwrap();
        let oracle = 0.1 + aligned.sigma_y2 * (0.6 * 5.0) / 14.0;
        assert!((r - oracle).abs() < 1e-10);
        assert!(matches!(befs_hard_risk(&aligned, &test, &enc, 6.0), Err(Error::OutOfRegime(_))));
    }

    #[test]
    fn asymptotic_value_substitution_and_limits() {
        let mut q = derive_quantities(&build_random_model(&spec(0.1), 1).unwrap()).unwrap();
        q.d_x = 10;
        q.d_l = 2;
        q.sigma_y2 = 1.0;
        q.m2 = 0.01;
        let v = asymptotic_value(&q, 1e4).unwrap();
        assert!((v.v_t_inf - 640.0).abs() < 1e-9);
        let far = asymptotic_value(&q, 1e14).unwrap();
        assert!((far.v_t / far.v_t_inf - 1.0).abs() < 1e-6 && far.rho < 1e-10);
        q.m2 = 0.0;
        q.beta_sigma_beta = 1.0;
        assert_eq!(asymptotic_value(&q, 1e4).unwrap().v_t_inf, f64::INFINITY);
    }

    #[test]
    fn robustness_limits_and_decomposition() {
        let p = build_random_model(&spec(0.1), 6).unwrap();
        let q = derive_quantities(&p).unwrap();
        let far = 1e12;
        let inf = asymptotic_value(&q, far).unwrap().v_t_inf;
        let on = robustness_value(&q, &TestSpec::on_subspace(0.0), far).unwrap();
        let off = robustness_value(&q, &TestSpec::off_subspace(0.0), far).unwrap();
        assert!(on.abs() < 1e-6 * inf);
        assert!((off / (inf * 8.0 / 3.0) - 1.0).abs() < 1e-6);
        let n_b = 1e4;
        let v_i = robustness_value(&q, &TestSpec::isotropic(0.0), n_b).unwrap();
        assert!((v_i / asymptotic_value(&q, n_b).unwrap().v_t - 1.0).abs() < 1e-12);
        let on = robustness_value(&q, &TestSpec::on_subspace(0.0), n_b).unwrap();
        let off = robustness_value(&q, &TestSpec::off_subspace(0.0), n_b).unwrap();
        assert!((v_i - (5.0 / 8.0 * on + 3.0 / 8.0 * off)).abs() <= 1e-8 * v_i.abs());
    }

    #[test]
    fn adversarial_shift_makes_value_negative() {
        let p = build_random_model(&spec(0.3), 7).unwrap();
        let q = derive_quantities(&p).unwrap();
        // mass on the misaligned direction raises gamma_test / gamma_I above
        // the nullspace share
        let test = TestSpec {
            c_on: 0.0,
            c_off: 1.0,
            sigma_test2: 0.0,
        };
        let n_b = 50.0;
        let tr_off = test.trace_off(8, 5);
        let ratio = q.gamma_test(n_b, &test) / q.gamma_i(n_b);
        let share = 2.0 * (tr_off - q.cross_trace(&test) / n_b) / 3.0;
        let v = robustness_value(&q, &test, n_b).unwrap();
        assert_eq!(v < 0.0, ratio > share);
    }

    proptest! {
        #[test]
        fn zero_lambda_collapses_to_tos(
            seed in 0u64..1000,
            m in 0.0f64..0.9,
            tau in 0.0f64..1.0,
            s2 in 0.0f64..2.0,
            n_b in 1.0f64..1e6,
            n_t in 10.0f64..1e6,
        ) {
            let q = derive_quantities(&build_random_model(&spec(m), seed).unwrap()).unwrap();
            let test = TestSpec::shift(tau, s2);
            prop_assert_eq!(
                befs_finite_risk(&q, &test, n_b, n_t, 0.0).unwrap(),
                tos_risk(&q, &test, n_t).unwrap()
            );
        }

        #[test]
        fn optimal_risk_nonincreasing_in_brain_samples(seed in 0u64..200, m in 0.05f64..0.5) {
            let q = derive_quantities(&build_random_model(&spec(m), seed).unwrap()).unwrap();
            prop_assume!(q.delta > 0.0);
            let test = TestSpec::isotropic(0.0);
            let n_t = 200.0;
            let mut prev = f64::NEG_INFINITY;
            for n_b in [1e2, 1e3, 1e4, 1e5, 1e6] {
                let lam = optimal_lambda(&q, n_b, n_t).unwrap();
                let gap = tos_risk(&q, &test, n_t).unwrap() - befs_finite_risk(&q, &test, n_b, n_t, lam).unwrap();
                prop_assert!(gap >= 0.0);
                prop_assert!(gap >= prev * (1.0 - 1e-12));
                prev = gap;
            }
        }
    }
}

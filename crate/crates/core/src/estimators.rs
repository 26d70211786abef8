//! Task-only and brain-regularised students.
//!
//! The encoding stage is an exact reduced-rank regression of recordings on
//! inputs. The task stage is ordinary least squares, a generalized ridge that
//! penalises `|(I - P_A_hat) beta|^2`, or least squares restricted to
//! `col(A_hat)`.
//!
//! Every fitter reads only the cross-product moments of its dataset, so the
//! `*_moments` entry points accept moments drawn directly from their sampling
//! law (see [`crate::linmodel::MomentSampler`]).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, spd_factor, sym_sqrt_pair, truncated_svd};
use crate::linmodel::{BrainDataset, BrainMoments, ModelParams, TaskDataset, TaskMoments, TestSpec};
use crate::textfmt::TextDoc;

#[derive(Debug, Clone, PartialEq)]
pub struct EncodingModel {
    /// `d_x x k`, orthonormal columns.
    pub a_hat: DMatrix<f64>,
    /// `k x d_r`.
    pub h_hat: DMatrix<f64>,
    /// `P_A_hat = A_hat A_hat^T`.
    pub projector: DMatrix<f64>,
}

impl EncodingModel {
    /// Encoder with a known latent basis (orthonormalised first).
    pub fn from_basis(basis: &DMatrix<f64>, h_hat: DMatrix<f64>) -> Self {
        let a_hat = linalg::orthonormal_basis(basis);
        let projector = linalg::projector(&a_hat);
        Self {
            a_hat,
            h_hat,
            projector,
        }
    }

    pub fn rank(&self) -> usize {
        self.a_hat.ncols()
    }

    /// `(I - P_A_hat) v`.
    pub fn residual(&self, v: &DVector<f64>) -> DVector<f64> {
        v - &self.a_hat * self.a_hat.tr_mul(v)
    }

    pub fn to_text(&self, comments: &[String]) -> String {
        let mut doc = TextDoc::new();
        doc.comments.push("brainvalue encoding model".into());
        doc.comments.extend(comments.iter().cloned());
        doc.push_matrix("a_hat", self.a_hat.clone());
        doc.push_matrix("h_hat", self.h_hat.clone());
        doc.render()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let doc = TextDoc::parse(text)?;
        let a_hat = doc.matrix("a_hat")?.clone();
        let h_hat = doc.matrix("h_hat")?.clone();
        if h_hat.nrows() != a_hat.ncols() {
            return Err(Error::Dimension("a_hat and h_hat ranks disagree".into()));
        }
        let projector = linalg::projector(&a_hat);
        Ok(Self {
            a_hat,
            h_hat,
            projector,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Penalty {
    /// Plain least squares.
    Ols,
    /// Generalized ridge with strength `lambda >= 0`.
    Soft(f64),
    /// Constrained to `col(A_hat)`.
    Hard,
}

impl Penalty {
    /// `alpha = 1 / (1 + lambda)`: 1 for OLS, 0 for the hard constraint.
    pub fn alpha(&self) -> f64 {
        match self {
            Penalty::Ols => 1.0,
            Penalty::Soft(l) => 1.0 / (1.0 + l),
            Penalty::Hard => 0.0,
        }
    }

    fn label(&self) -> String {
        match self {
            Penalty::Ols => "ols".into(),
            Penalty::Soft(l) => format!("soft {l:?}"),
            Penalty::Hard => "hard".into(),
        }
    }

    fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Parse {
            line: 0,
            message: format!("unknown penalty `{s}`"),
        };
        match s.split_whitespace().collect::<Vec<_>>().as_slice() {
            ["ols"] => Ok(Penalty::Ols),
            ["hard"] => Ok(Penalty::Hard),
            ["soft", l] => l.parse().map(Penalty::Soft).map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Provenance {
    pub config_hash: String,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskPredictor {
    pub beta_hat: DVector<f64>,
    pub penalty: Penalty,
    pub provenance: Option<Provenance>,
}

impl TaskPredictor {
    fn new(beta_hat: DVector<f64>, penalty: Penalty) -> Result<Self> {
        if beta_hat.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularDesign("fit produced non-finite coefficients".into()));
        }
        Ok(Self {
            beta_hat,
            penalty,
            provenance: None,
        })
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = Some(provenance);
        self
    }

    pub fn to_text(&self) -> String {
        let mut doc = TextDoc::new();
        doc.comments.push("brainvalue task predictor".into());
        if let Some(p) = &self.provenance {
            doc.comments.push(format!("config_hash {}", p.config_hash));
            let seeds: Vec<String> = p.seeds.iter().map(u64::to_string).collect();
            doc.comments.push(format!("seeds {}", seeds.join(" ")));
        }
        doc.push_label("penalty", &self.penalty.label());
        doc.push_vector("beta_hat", &self.beta_hat);
        doc.render()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let doc = TextDoc::parse(text)?;
        let mut provenance = None::<Provenance>;
        for c in &doc.comments {
            if let Some(h) = c.strip_prefix("config_hash ") {
                provenance.get_or_insert_with(Default::default).config_hash = h.trim().into();
            } else if let Some(s) = c.strip_prefix("seeds") {
                let seeds = s
                    .split_whitespace()
                    .map(str::parse)
                    .collect::<std::result::Result<Vec<u64>, _>>()
                    .map_err(|e| Error::Parse {
                        line: 0,
                        message: format!("seeds: {e}"),
                    })?;
                provenance.get_or_insert_with(Default::default).seeds = seeds;
            }
        }
        Ok(Self {
            beta_hat: doc.vector("beta_hat")?,
            penalty: Penalty::parse(doc.label("penalty")?)?,
            provenance,
        })
    }
}

fn check_design(n: usize, d: usize, what: &str) -> Result<()> {
    if n <= d {
        return Err(Error::SingularDesign(format!(
            "{what} needs more than {d} samples, got {n}"
        )));
    }
    Ok(())
}

/// Ordinary least squares on the task data.
pub fn fit_tos(data: &TaskDataset) -> Result<TaskPredictor> {
    fit_tos_moments(&data.moments())
}

pub fn fit_tos_moments(m: &TaskMoments) -> Result<TaskPredictor> {
    check_design(m.n, m.xtx.nrows(), "task-only least squares")?;
    let beta = linalg::spd_solve_vec(&m.xtx, &m.xty, "task design X^T X")?;
    TaskPredictor::new(beta, Penalty::Ols)
}

/// Rank-`k` minimiser of `(1/n_B) |R - X A H|_F^2`.
///
/// With `S = X^T X / n_B`, the minimiser is `S^{-1/2} trunc_k(S^{1/2} Q_ols)`
/// where `Q_ols = (X^T X)^{-1} X^T R`. The latent map `S^{-1/2} U_k` is
/// re-orthonormalised and the readout adjusted so that `A_hat H_hat` is
/// unchanged.
pub fn fit_encoding(data: &BrainDataset, k: usize) -> Result<EncodingModel> {
    fit_encoding_moments(&data.moments(), k)
}

pub fn fit_encoding_moments(m: &BrainMoments, k: usize) -> Result<EncodingModel> {
    let (d_x, d_r) = (m.xtx.nrows(), m.xtr.ncols());
    if k == 0 || k > d_x.min(d_r) {
        return Err(Error::Rank(format!(
            "latent rank {k} must lie in 1..={}",
            d_x.min(d_r)
        )));
    }
    check_design(m.n, d_x, "encoding fit")?;
    let q_ols = spd_factor(&m.xtx, "brain design X^T X")?.solve(&m.xtr);
    let cov = &m.xtx / m.n as f64;
    let (root, inv_root) = sym_sqrt_pair(&cov)?;
    let svd = truncated_svd(&(&root * &q_ols), k)?;
    let a_raw = inv_root * &svd.u;
    let h_raw = DMatrix::from_diagonal(&svd.singular_values) * &svd.v_t;
    let qr = a_raw.qr();
    let a_hat = qr.q();
    let h_hat = qr.r() * h_raw;
    let projector = linalg::projector(&a_hat);
    Ok(EncodingModel {
        a_hat,
        h_hat,
        projector,
    })
}

/// `(1/n_B) |R - X A H|_F^2`.
pub fn encoding_objective(data: &BrainDataset, a: &DMatrix<f64>, h: &DMatrix<f64>) -> f64 {
    let resid = &data.r - &data.x * (a * h);
    resid.norm_squared() / data.n_b() as f64
}

/// Minimiser of `(1/n_T)|y - X beta|^2 + lambda |(I - P_A_hat) beta|^2`.
pub fn fit_befs_soft(data: &TaskDataset, enc: &EncodingModel, lambda: f64) -> Result<TaskPredictor> {
    fit_befs_soft_moments(&data.moments(), enc, lambda)
}

pub fn fit_befs_soft_moments(m: &TaskMoments, enc: &EncodingModel, lambda: f64) -> Result<TaskPredictor> {
    let beta = SoftSolver::new(m, enc).solve(lambda)?;
    TaskPredictor::new(beta, Penalty::Soft(lambda))
}

/// Reuses the scaled moments across a sweep of ridge strengths.
pub struct SoftSolver<'a> {
    enc: &'a EncodingModel,
    gram: DMatrix<f64>,
    rhs: DVector<f64>,
    n: usize,
}

impl<'a> SoftSolver<'a> {
    pub fn new(m: &TaskMoments, enc: &'a EncodingModel) -> Self {
        let n = m.n as f64;
        Self {
            enc,
            gram: &m.xtx / n,
            rhs: &m.xty / n,
            n: m.n,
        }
    }

    pub fn solve(&self, lambda: f64) -> Result<DVector<f64>> {
        if !(lambda >= 0.0) || lambda.is_infinite() {
            return Err(Error::InvalidArgument(format!("lambda = {lambda} must be finite and >= 0")));
        }
        if lambda == 0.0 {
            check_design(self.n, self.gram.nrows(), "unpenalised ridge")?;
        }
        let d = self.gram.nrows();
        let mut system = self.gram.clone();
        if lambda > 0.0 {
            system += (DMatrix::identity(d, d) - &self.enc.projector) * lambda;
        }
        linalg::spd_solve_vec(&system, &self.rhs, "generalized ridge system")
    }
}

/// Least squares over `beta = A_hat w`.
pub fn fit_befs_hard(data: &TaskDataset, enc: &EncodingModel) -> Result<TaskPredictor> {
    fit_befs_hard_moments(&data.moments(), enc)
}

pub fn fit_befs_hard_moments(m: &TaskMoments, enc: &EncodingModel) -> Result<TaskPredictor> {
    check_design(m.n, enc.rank(), "constrained least squares")?;
    let a = &enc.a_hat;
    let ztz = a.transpose() * &m.xtx * a;
    let zty = a.tr_mul(&m.xty);
    let w = linalg::spd_solve_vec(&ztz, &zty, "projected design Z^T Z")?;
    TaskPredictor::new(a * w, Penalty::Hard)
}

/// `(beta_hat - beta*)^T Sigma_test (beta_hat - beta*) + sigma_test^2`.
pub fn exact_risk(pred: &TaskPredictor, params: &ModelParams, test: &TestSpec) -> f64 {
    risk_of(&pred.beta_hat, params, test)
}

pub fn risk_of(beta_hat: &DVector<f64>, params: &ModelParams, test: &TestSpec) -> f64 {
    let err = beta_hat - &params.beta_star;
    test.quad_form(params, &err) + test.sigma_test2
}

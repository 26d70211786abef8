//! Dense linear-algebra helpers shared by the model builders, fitters and
//! closed forms. Everything here works on `nalgebra` dynamic matrices.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Relative condition number above which a symmetric system counts as singular.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Cholesky factor of a symmetric positive-definite matrix, rejected when the
/// condition estimate `(max L_ii / min L_ii)^2` exceeds [`CONDITION_LIMIT`].
pub fn spd_factor(a: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if a.nrows() != a.ncols() {
        return Err(Error::Dimension(format!(
            "{what}: expected a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::SingularDesign(format!("{what} is not positive definite")))?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(lo, hi), &d| (lo.min(d), hi.max(d)));
    if !(lo > 0.0) || (hi / lo).powi(2) > CONDITION_LIMIT {
        return Err(Error::SingularDesign(format!(
            "{what} has condition estimate {:.3e} (limit {CONDITION_LIMIT:.0e})",
            (hi / lo).powi(2)
        )));
    }
    Ok(chol)
}

pub fn spd_solve_vec(a: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    Ok(spd_factor(a, what)?.solve(b))
}

pub fn spd_inverse(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Ok(spd_factor(a, what)?.inverse())
}

/// Orthonormal basis of the column space of a full-column-rank matrix.
pub fn orthonormal_basis(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().qr().q()
}

/// `Q Q^T` for a matrix with orthonormal columns.
pub fn projector(basis: &DMatrix<f64>) -> DMatrix<f64> {
    basis * basis.transpose()
}

/// Square root and inverse square root of a symmetric positive-definite matrix.
pub fn sym_sqrt_pair(s: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let eig = SymmetricEigen::new(s.clone());
    let hi = eig.eigenvalues.max();
    let lo = eig.eigenvalues.min();
    if !(lo > 0.0) || hi / lo > CONDITION_LIMIT {
        return Err(Error::SingularDesign(format!(
            "covariance eigenvalues span [{lo:.3e}, {hi:.3e}]"
        )));
    }
    let v = &eig.eigenvectors;
    let root = DVector::from_iterator(s.nrows(), eig.eigenvalues.iter().map(|l| l.sqrt()));
    let inv_root = root.map(|r| 1.0 / r);
    let sqrt = v * DMatrix::from_diagonal(&root) * v.transpose();
    let inv_sqrt = v * DMatrix::from_diagonal(&inv_root) * v.transpose();
    Ok((sqrt, inv_sqrt))
}

/// A factor `F` with `F F^T = psd`. Negative rounding noise in the spectrum is
/// clipped to zero, so singular covariances are accepted.
pub fn psd_factor(psd: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(chol) = psd.clone().cholesky() {
        return chol.unpack();
    }
    let eig = SymmetricEigen::new(psd.clone());
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots)
}

/// Truncated SVD keeping the `k` largest singular triplets.
///
/// Ties at the cut keep the triplet with the smaller decomposition index.
pub struct TruncatedSvd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v_t: DMatrix<f64>,
}

pub fn truncated_svd(m: &DMatrix<f64>, k: usize) -> Result<TruncatedSvd> {
    let rank_cap = m.nrows().min(m.ncols());
    if k == 0 || k > rank_cap {
        return Err(Error::Rank(format!(
            "cannot keep {k} singular triplets of a {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let s = svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    // stable sort keeps index order among equal singular values
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let keep = &order[..k];
    Ok(TruncatedSvd {
        u: DMatrix::from_fn(u.nrows(), k, |r, c| u[(r, keep[c])]),
        singular_values: DVector::from_fn(k, |i, _| s[keep[i]]),
        v_t: DMatrix::from_fn(k, v_t.ncols(), |r, c| v_t[(keep[r], c)]),
    })
}

/// Largest singular value.
pub fn op_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().singular_values().max()
}

/// Numerical rank relative to the largest singular value.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    let s = m.clone().singular_values();
    let top = s.max();
    s.iter().filter(|&&v| v > rel_tol * top).count()
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    // filled column-major so the draw order is part of the determinism contract
    let mut out = DMatrix::zeros(rows, cols);
    for v in out.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    out
}

pub fn gaussian_vector<R: Rng + ?Sized>(rng: &mut R, len: usize) -> DVector<f64> {
    DVector::from_iterator(len, (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Haar-distributed `n x k` matrix with orthonormal columns.
pub fn haar_frame<R: Rng + ?Sized>(rng: &mut R, n: usize, k: usize) -> DMatrix<f64> {
    let g = gaussian_matrix(rng, n, k);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..k {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn haar_frame_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = haar_frame(&mut rng, 9, 4);
        let gram = q.transpose() * &q;
        assert!((gram - DMatrix::identity(4, 4)).amax() < 1e-12);
    }

    #[test]
    fn spd_factor_rejects_ill_conditioned() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-14]));
        assert!(matches!(spd_factor(&a, "a"), Err(Error::SingularDesign(_))));
        let b = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-6]));
        assert!(spd_factor(&b, "b").is_ok());
    }

    #[test]
    fn truncated_svd_orders_and_ties() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0, 3.0, 2.0]));
        let t = truncated_svd(&m, 2).unwrap();
        assert_eq!(t.singular_values.as_slice(), &[3.0, 3.0]);
        let approx = &t.u * DMatrix::from_diagonal(&t.singular_values) * &t.v_t;
        assert!((approx[(1, 1)] - 3.0).abs() < 1e-12 && (approx[(2, 2)] - 3.0).abs() < 1e-12);
        assert!(truncated_svd(&m, 5).is_err());
    }

    #[test]
    fn sqrt_pair_inverts() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let (r, ir) = sym_sqrt_pair(&s).unwrap();
        assert!((&r * &r - &s).amax() < 1e-12);
        assert!((&r * &ir - DMatrix::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn psd_factor_handles_singular() {
        let v = DVector::from_vec(vec![1.0, 2.0, 0.0]);
        let p = &v * v.transpose();
        let f = psd_factor(&p);
        assert!((&f * f.transpose() - p).amax() < 1e-12);
    }
}

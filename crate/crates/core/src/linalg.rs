//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Symmetric eigendecomposition with eigenvalues sorted non-increasing.
///
/// The input is symmetrized as `(m + mᵀ)/2` first.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps the solver's order on exact ties
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        vectors.set_column(k, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

/// Column means of an `n × p` matrix.
pub fn column_means(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows() as f64;
    DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n))
}

/// Subtracts column means.
pub fn center_columns(x: &DMatrix<f64>) -> DMatrix<f64> {
    let means = column_means(x);
    let mut out = x.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(-means[j]);
    }
    out
}

/// Covariance of the rows of `x` with denominator `n`.
pub fn covariance(x: &DMatrix<f64>) -> DMatrix<f64> {
    let c = center_columns(x);
    let n = x.nrows() as f64;
    (c.transpose() * &c) / n
}

/// Solves the symmetric positive semi-definite system `m b = r` with the
/// Moore–Penrose pseudo-inverse, dropping eigenvalues below `rel_tol · λ_max`.
pub fn solve_psd_pinv(m: &DMatrix<f64>, r: &DVector<f64>, rel_tol: f64) -> DVector<f64> {
    let (values, vectors) = sym_eigen_desc(m);
    let top = values.iter().cloned().fold(0.0_f64, f64::max);
    let mut out = DVector::zeros(r.len());
    if top <= 0.0 {
        return out;
    }
    for k in 0..values.len() {
        if values[k] > rel_tol * top {
            let v = vectors.column(k);
            out += v * (v.dot(r) / values[k]);
        }
    }
    out
}

/// Ordinary least squares of each row of `y` (length `T`) on the columns of
/// `design` (`T × k`). Returns the `n × k` coefficient matrix.
pub fn ols_rows(design: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = design.ncols();
    let rank = numerical_rank(design);
    if rank < k {
        return Err(Error::CollinearBasis { rank, expected: k });
    }
    let gram = design.transpose() * design;
    let chol = Cholesky::new(gram).ok_or(Error::CollinearBasis { rank, expected: k })?;
    // coef' = (DᵀD)⁻¹ Dᵀ yᵢ for every row i
    let rhs = design.transpose() * y.transpose();
    Ok(chol.solve(&rhs).transpose())
}

/// Rank from singular values relative to the largest, with tolerance `1e-10`.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().singular_values();
    let top = sv.iter().cloned().fold(0.0_f64, f64::max);
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > 1e-10 * top).count()
}

/// Cholesky factorization; on failure retries once with `jitter · mean(diag)`
/// added to the diagonal.
pub fn cholesky_with_jitter(m: &DMatrix<f64>, jitter: f64) -> Option<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Some(c);
    }
    let n = m.nrows();
    let scale = (m.trace() / n.max(1) as f64).abs().max(f64::MIN_POSITIVE);
    let mut jittered = m.clone();
    for i in 0..n {
        jittered[(i, i)] += jitter * scale;
    }
    Cholesky::new(jittered)
}

/// Flips `v` so that its largest-magnitude entry is positive (first index wins ties).
pub fn fix_sign(v: &mut DVector<f64>) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if !v.is_empty() && v[best] < 0.0 {
        v.neg_mut();
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Largest principal angle (radians) between the column spans of `a` and `b`.
pub fn max_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let qa = a.clone().qr().q();
    let qb = b.clone().qr().q();
    let sv = (qa.transpose() * qb).singular_values();
    let smallest = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    smallest.clamp(-1.0, 1.0).acos()
}

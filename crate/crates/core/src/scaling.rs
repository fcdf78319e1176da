//! Per-location scaling of the fitted coefficient functions and their
//! nearest-neighbour transfer to new locations.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::numerical_rank;

/// Scaled coefficients `f̃_j(s_i) = b_j(s_i)·g_j(s_i)` at the learning locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledCoefficients {
    /// `n × κ` scale factors.
    #[serde(with = "crate::serde_matrix")]
    pub b: DMatrix<f64>,
    /// `n × κ` scaled coefficients.
    #[serde(with = "crate::serde_matrix")]
    pub f_tilde: DMatrix<f64>,
    /// `n × κ` index values `θ_jᵀ x(s_i)` used for neighbour search.
    #[serde(with = "crate::serde_matrix")]
    pub index_values: DMatrix<f64>,
    /// Per-location intercepts (zero unless the fit used one).
    #[serde(with = "crate::serde_matrix::vector")]
    pub intercepts: DVector<f64>,
}

impl ScaledCoefficients {
    pub fn n(&self) -> usize {
        self.f_tilde.nrows()
    }

    pub fn kappa(&self) -> usize {
        self.f_tilde.ncols()
    }

    /// `Σ_j ŵ_j(t) f̃_j(s_i)` plus intercepts, `n × T`.
    pub fn reconstruct(&self, w_hats: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = &self.f_tilde * w_hats.transpose();
        for (i, mut row) in out.row_iter_mut().enumerate() {
            row.add_scalar_mut(self.intercepts[i]);
        }
        out
    }
}

/// For every location, least squares of `y(s_i, ·)` on the columns
/// `g_j(s_i)·ŵ_j(·)`. A column that vanishes because `g_j(s_i) = 0` gets
/// scale 0.
pub fn scale_fit(
    y: &DMatrix<f64>,
    w_hats: &DMatrix<f64>,
    g_hats: &DMatrix<f64>,
    index_values: DMatrix<f64>,
    intercept: bool,
) -> Result<ScaledCoefficients> {
    let (n, t_len) = y.shape();
    let kappa = w_hats.ncols();
    if w_hats.nrows() != t_len || g_hats.shape() != (n, kappa) || index_values.shape() != (n, kappa) {
        return Err(Error::invalid(format!(
            "scaling inputs disagree: y {n}×{t_len}, ŵ {:?}, g {:?}, index {:?}",
            w_hats.shape(),
            g_hats.shape(),
            index_values.shape()
        )));
    }
    let mut b = DMatrix::zeros(n, kappa);
    let mut intercepts = DVector::zeros(n);
    for i in 0..n {
        let g_scale = g_hats.row(i).amax().max(f64::MIN_POSITIVE);
        let active: Vec<usize> = (0..kappa).filter(|&j| g_hats[(i, j)].abs() > 1e-12 * g_scale).collect();
        if active.len() < kappa {
            log::warn!("location {i}: {} coefficient(s) are zero, scale set to 0", kappa - active.len());
        }
        let offset = usize::from(intercept);
        let width = active.len() + offset;
        if width == 0 {
            continue;
        }
        let mut design = DMatrix::from_element(t_len, width, 1.0);
        for (c, &j) in active.iter().enumerate() {
            design.set_column(c + offset, &(w_hats.column(j) * g_hats[(i, j)]));
        }
        let rank = numerical_rank(&design);
        if rank < width {
            return Err(Error::CollinearBasis { rank, expected: width });
        }
        let target = y.row(i).transpose();
        let coef = design
            .clone()
            .svd(true, true)
            .solve(&target, 1e-14)
            .map_err(|e| Error::invalid(e.to_string()))?;
        if intercept {
            intercepts[i] = coef[0];
        }
        for (c, &j) in active.iter().enumerate() {
            b[(i, j)] = coef[c + offset];
        }
    }
    let f_tilde = b.component_mul(g_hats);
    Ok(ScaledCoefficients {
        b,
        f_tilde,
        index_values,
        intercepts,
    })
}

/// `θ_jᵀ x0` for every direction.
pub fn index_of(thetas: &DMatrix<f64>, x0: &DVector<f64>) -> Result<DVector<f64>> {
    if x0.len() != thetas.nrows() {
        return Err(Error::invalid(format!(
            "query has {} covariates, directions have {}",
            x0.len(),
            thetas.nrows()
        )));
    }
    Ok(thetas.tr_mul(x0))
}

/// Rows of the `k` learning locations closest to `target` in one column of
/// index values; ties go to the lower location index.
fn nearest(values: impl Iterator<Item = f64>, target: f64, k: usize) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = values.enumerate().map(|(i, v)| ((v - target).abs(), i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.into_iter().take(k).map(|(_, i)| i).collect()
}

fn check_k(scaled: &ScaledCoefficients, k: usize) -> Result<()> {
    if k == 0 || k > scaled.n() {
        return Err(Error::invalid(format!("k must lie in 1..={}, got {k}", scaled.n())));
    }
    Ok(())
}

/// Mean of `f̃_j` over the `k` learning locations whose index `θ_jᵀx`
/// is closest to `θ_jᵀx0`, separately for each `j`.
pub fn knn_transfer(scaled: &ScaledCoefficients, thetas: &DMatrix<f64>, x0: &DVector<f64>, k: usize) -> Result<DVector<f64>> {
    check_k(scaled, k)?;
    if thetas.ncols() != scaled.kappa() {
        return Err(Error::invalid("direction count does not match the scaled coefficients"));
    }
    let index = index_of(thetas, x0)?;
    Ok(DVector::from_fn(scaled.kappa(), |j, _| {
        let rows = nearest(scaled.index_values.column(j).iter().copied(), index[j], k);
        rows.iter().map(|&i| scaled.f_tilde[(i, j)]).sum::<f64>() / k as f64
    }))
}

/// Intercept at a new location: mean over the `k` learning locations
/// nearest in the joint index space.
pub fn knn_intercept(scaled: &ScaledCoefficients, thetas: &DMatrix<f64>, x0: &DVector<f64>, k: usize) -> Result<f64> {
    check_k(scaled, k)?;
    let index = index_of(thetas, x0)?;
    let dist = scaled
        .index_values
        .row_iter()
        .map(|row| row.iter().zip(index.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>());
    let rows = nearest(dist, 0.0, k);
    Ok(rows.iter().map(|&i| scaled.intercepts[i]).sum::<f64>() / k as f64)
}

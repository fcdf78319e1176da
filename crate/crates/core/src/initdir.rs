//! Initial direction estimates from multivariate-response sliced inverse
//! regression (mrSIR) and positive-eigenvalue principal Hessian directions
//! (pe-mrPHD), both posed as generalized symmetric-definite eigenproblems
//! against the covariate covariance `Σ_x`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::STDataset;
use crate::error::{Error, Result};
use crate::linalg::{column_means, covariance, fix_sign, sym_eigen_desc};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMethod {
    #[serde(rename = "mrSIR")]
    MrSir,
    #[serde(rename = "pe-mrPHD")]
    PeMrPhd,
    Both,
}

/// Candidate directions (columns, unit norm) and their generalized eigenvalues.
#[derive(Debug, Clone, PartialEq)]
pub struct InitResult {
    pub directions: DMatrix<f64>,
    pub eigenvalues: DVector<f64>,
    pub method: InitMethod,
}

/// How the mrSIR per-time weight counts "nonzero" eigenvalues.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SirWeighting {
    /// Eigenvalues above `relative · leading` count as nonzero.
    pub relative: f64,
    /// ... and above this absolute floor.
    pub absolute: f64,
}

impl Default for SirWeighting {
    fn default() -> Self {
        Self {
            relative: 1e-8,
            absolute: 1e-12,
        }
    }
}

/// Solves `A v = ρ B v` for symmetric `A` and symmetric positive-definite `B`.
///
/// Eigenvalues are returned non-increasing; eigenvectors (columns) are
/// `B`-orthonormal. The problem is reduced through the symmetric inverse
/// square root `B^{-1/2}` obtained from the eigendecomposition of `B`.
pub fn generalized_eigen(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let p = a.nrows();
    if a.ncols() != p || b.shape() != (p, p) || p == 0 {
        return Err(Error::invalid("generalized_eigen needs square matrices of equal size"));
    }
    let scale_a = a.amax().max(f64::MIN_POSITIVE);
    if (a - a.transpose()).amax() > 1e-10 * scale_a {
        return Err(Error::invalid("A is not symmetric"));
    }
    let scale_b = b.amax().max(f64::MIN_POSITIVE);
    if (b - b.transpose()).amax() > 1e-10 * scale_b {
        return Err(Error::SingularMetric("B is not symmetric".into()));
    }
    let (b_vals, b_vecs) = sym_eigen_desc(b);
    let largest = b_vals[0];
    let smallest = b_vals[p - 1];
    if !(largest > 0.0) || smallest <= 1e-12 * largest {
        return Err(Error::SingularMetric(format!(
            "eigenvalues of B range over [{smallest:.3e}, {largest:.3e}]"
        )));
    }
    let inv_sqrt = DVector::from_iterator(p, b_vals.iter().map(|v| 1.0 / v.sqrt()));
    let b_inv_half = &b_vecs * DMatrix::from_diagonal(&inv_sqrt) * b_vecs.transpose();
    let c = &b_inv_half * a * &b_inv_half;
    let (rho, u) = sym_eigen_desc(&c);
    let v = &b_inv_half * u;
    Ok((rho, v))
}

fn unit_directions(v: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = v.clone();
    for mut col in out.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        }
        let mut owned = col.clone_owned();
        fix_sign(&mut owned);
        col.copy_from(&owned);
    }
    out
}

fn covariate_metric(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sigma = covariance(x);
    // fail early with the metric error rather than a generic one
    let (vals, _) = sym_eigen_desc(&sigma);
    if !(vals[0] > 0.0) || vals[vals.len() - 1] <= 1e-12 * vals[0] {
        return Err(Error::SingularMetric(
            "covariate covariance Σ_x is singular".into(),
        ));
    }
    Ok(sigma)
}

/// Location indices sorted by `values`, ties broken by index.
fn rank_order(values: impl Iterator<Item = f64>) -> Vec<usize> {
    let vals: Vec<f64> = values.collect();
    let mut idx: Vec<usize> = (0..vals.len()).collect();
    idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]).then(a.cmp(&b)));
    idx
}

/// Between-slice covariance `var{E(x | y)}` of `x` sliced by `response`.
///
/// Slices have `⌊n/H⌋` members each; the last absorbs the remainder.
pub fn slice_mean_covariance(
    x: &DMatrix<f64>,
    response: impl Iterator<Item = f64>,
    n_slices: usize,
) -> DMatrix<f64> {
    let (n, p) = x.shape();
    let order = rank_order(response);
    let mean = column_means(x);
    let base = n / n_slices;
    let mut psi = DMatrix::zeros(p, p);
    for h in 0..n_slices {
        let start = h * base;
        let end = if h + 1 == n_slices { n } else { start + base };
        let members = &order[start..end];
        let mut slice_mean = DVector::zeros(p);
        for &i in members {
            slice_mean += x.row(i).transpose();
        }
        slice_mean /= members.len() as f64;
        let dev = slice_mean - &mean;
        psi += (&dev * dev.transpose()) * (members.len() as f64 / n as f64);
    }
    psi
}

/// mrSIR: time-weighted average of slice-mean covariances, eigendecomposed
/// against `Σ_x`.
pub fn mrsir_init(
    data: &STDataset,
    n_slices: usize,
    weighting: SirWeighting,
) -> Result<InitResult> {
    let n = data.n();
    if n_slices < 2 {
        return Err(Error::invalid("mrSIR needs at least 2 slices"));
    }
    if n < n_slices {
        return Err(Error::invalid(format!(
            "{n} locations cannot fill {n_slices} slices"
        )));
    }
    let x = data.x();
    let p = x.ncols();
    let sigma = covariate_metric(x)?;
    let mut psi_bar = DMatrix::zeros(p, p);
    let mut gamma_total = 0.0;
    for t in 0..data.t_len() {
        let psi_t = slice_mean_covariance(x, data.y().column(t).iter().copied(), n_slices);
        let (rho, _) = generalized_eigen(&psi_t, &sigma)?;
        let threshold = (weighting.relative * rho[0]).max(weighting.absolute);
        let gamma = rho.iter().filter(|&&r| r > threshold).count() as f64 / p as f64;
        psi_bar += psi_t * gamma;
        gamma_total += gamma;
    }
    if gamma_total > 0.0 {
        psi_bar /= gamma_total;
    }
    let (rho, v) = generalized_eigen(&psi_bar, &sigma)?;
    Ok(InitResult {
        directions: unit_directions(&v),
        eigenvalues: rho,
        method: InitMethod::MrSir,
    })
}

/// Principal-component scores of the rows of `y` (`n × T`) and their variances
/// (denominator `n`), in non-increasing order.
pub fn principal_components(y: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let centered = crate::linalg::center_columns(y);
    let cov = (centered.transpose() * &centered) / y.nrows() as f64;
    let (vals, vecs) = sym_eigen_desc(&cov);
    let scores = centered * vecs;
    (scores, vals.map(|v| v.max(0.0)))
}

/// Response-weighted second moment `(1/n) Σ_i (r_i − r̄)(x_i − x̄)(x_i − x̄)ᵀ`.
pub fn phd_matrix(x: &DMatrix<f64>, response: &[f64]) -> DMatrix<f64> {
    let (n, p) = x.shape();
    let mean_x = column_means(x);
    let mean_r = response.iter().sum::<f64>() / n as f64;
    let mut m = DMatrix::zeros(p, p);
    for i in 0..n {
        let dev = x.row(i).transpose() - &mean_x;
        m += (&dev * dev.transpose()) * (response[i] - mean_r);
    }
    m / n as f64
}

/// pe-mrPHD: PHD matrices of each principal component of `Y` with their
/// eigenvalues replaced by absolute values, averaged with PC-variance weights.
pub fn pe_mrphd_init(data: &STDataset) -> Result<InitResult> {
    let x = data.x();
    let (n, p) = x.shape();
    if n <= p {
        return Err(Error::invalid(format!(
            "pe-mrPHD needs more locations ({n}) than covariates ({p})"
        )));
    }
    let sigma = covariate_metric(x)?;
    let h_bar = phd_average(data);
    let (rho, v) = generalized_eigen(&h_bar, &sigma)?;
    Ok(InitResult {
        directions: unit_directions(&v),
        eigenvalues: rho,
        method: InitMethod::PeMrPhd,
    })
}

/// Number of components from the largest ratio gap of the eigenvalue profile.
///
/// An override is clamped to `[1, p]`. Without one, the ratio
/// `e[j-1]/e[j]` is maximized over the leading eigenvalues above `1e-8`
/// (later `j` wins ties); a flat profile yields 2.
pub fn choose_kappa(eigenvalues: &[f64], kappa_override: Option<usize>) -> Result<usize> {
    let p = eigenvalues.len();
    if p == 0 {
        return Err(Error::invalid("empty eigenvalue profile"));
    }
    if let Some(k) = kappa_override {
        return Ok(k.clamp(1, p));
    }
    if p == 1 {
        return Ok(1);
    }
    let significant = eigenvalues.iter().take_while(|&&e| e > 1e-8).count();
    if significant == 0 {
        return Ok(2.min(p));
    }
    let mut best = (0.0_f64, 0usize);
    for j in 1..=significant.min(p - 1) {
        let next = eigenvalues[j];
        let ratio = if next > 1e-8 {
            eigenvalues[j - 1] / next
        } else {
            f64::INFINITY
        };
        if ratio >= best.0 {
            best = (ratio, j);
        }
    }
    if best.0 <= 1.0 + 1e-12 {
        return Ok(2.min(p));
    }
    Ok(best.1)
}

/// Merges mrSIR and pe-mrPHD candidates.
///
/// Candidates are taken in the order (leading mrSIR, pe-mrPHD by rank,
/// remaining mrSIR by rank), orthogonalized in the `Σ_x` inner product, and
/// the `kappa` survivors with the largest pe-mrPHD Rayleigh quotient
/// `vᵀ H̄ v / vᵀ Σ_x v` are kept, ordered by that quotient.
pub fn merge_initializations(
    data: &STDataset,
    sir: &InitResult,
    phd: &InitResult,
    kappa: usize,
) -> Result<InitResult> {
    let x = data.x();
    let sigma = covariate_metric(x)?;
    let p = x.ncols();
    let h_bar = phd_average(data);
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for mut v in candidate_pool(sir, phd, p)? {
        for b in &basis {
            let proj = (v.transpose() * &sigma * b)[0];
            v -= b * proj;
        }
        let norm_sq = (v.transpose() * &sigma * &v)[0];
        if norm_sq > 1e-10 {
            basis.push(v / norm_sq.sqrt());
        }
        if basis.len() == p {
            break;
        }
    }
    let mut scored: Vec<(f64, DVector<f64>)> = basis
        .into_iter()
        .map(|v| ((v.transpose() * &h_bar * &v)[0], v))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let keep = kappa.clamp(1, scored.len());
    let mut directions = DMatrix::zeros(p, keep);
    let mut eigenvalues = DVector::zeros(keep);
    for (j, (q, v)) in scored.into_iter().take(keep).enumerate() {
        directions.set_column(j, &v);
        eigenvalues[j] = q;
    }
    Ok(InitResult {
        directions: unit_directions(&directions),
        eigenvalues,
        method: InitMethod::Both,
    })
}

/// Leading mrSIR, pe-mrPHD by rank, remaining mrSIR by rank.
fn candidate_pool(sir: &InitResult, phd: &InitResult, p: usize) -> Result<Vec<DVector<f64>>> {
    if sir.directions.nrows() != p || phd.directions.nrows() != p {
        return Err(Error::invalid("candidate directions do not match the covariates"));
    }
    let mut pool: Vec<DVector<f64>> = Vec::new();
    pool.extend(sir.directions.column_iter().take(1).map(|c| c.into_owned()));
    pool.extend(phd.directions.column_iter().map(|c| c.into_owned()));
    pool.extend(sir.directions.column_iter().skip(1).map(|c| c.into_owned()));
    if pool.is_empty() {
        return Err(Error::invalid("no candidate directions to merge"));
    }
    Ok(pool)
}

/// Largest number of candidate subsets scored exhaustively by the selection.
const SELECTION_SUBSET_LIMIT: usize = 500;

/// Selects `kappa` directions from the mrSIR and pe-mrPHD candidates by
/// how well they explain `Y` nonparametrically.
///
/// Each `kappa`-subset of the pool is
/// scored by the leave-one-out Nadaraya–Watson error of `Y` regressed on
/// its indices, with a Gaussian kernel of width `bandwidth` per index, and
/// the best subset wins (earlier subsets on ties). Pools with too many
/// subsets are searched greedily one direction at a time instead.
///
/// The chosen directions are ordered by their single-index fit, and the
/// reported eigenvalues are the cumulative shares of the total sum of
/// squares explained by the leading 1, 2, … of them.
pub fn select_by_kernel_fit(
    data: &STDataset,
    sir: &InitResult,
    phd: &InitResult,
    kappa: usize,
    bandwidth: f64,
) -> Result<InitResult> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::invalid(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let x = data.x();
    let pool = candidate_pool(sir, phd, x.ncols())?;
    let y = data.y();
    let tss = crate::linalg::center_columns(y).norm_squared();
    let indices: Vec<DVector<f64>> = pool.iter().map(|v| x * v).collect();
    let rss_of = |set: &[usize]| {
        let cols: Vec<&DVector<f64>> = set.iter().map(|&k| &indices[k]).collect();
        loo_kernel_rss(y, &cols, bandwidth)
    };
    let keep = kappa.clamp(1, pool.len());
    let chosen = if binomial(pool.len(), keep) <= SELECTION_SUBSET_LIMIT {
        let mut best: Option<(Vec<usize>, f64)> = None;
        for set in subsets(pool.len(), keep) {
            let rss = rss_of(&set);
            if best.as_ref().is_none_or(|(_, b)| rss < *b) {
                best = Some((set, rss));
            }
        }
        best.expect("at least one subset").0
    } else {
        let mut chosen: Vec<usize> = Vec::new();
        while chosen.len() < keep {
            let mut best: Option<(usize, f64)> = None;
            for c in (0..pool.len()).filter(|c| !chosen.contains(c)) {
                let mut set = chosen.clone();
                set.push(c);
                let rss = rss_of(&set);
                if best.is_none_or(|(_, b)| rss < b) {
                    best = Some((c, rss));
                }
            }
            chosen.push(best.expect("pool larger than selection").0);
        }
        chosen
    };
    let mut ordered: Vec<(f64, usize)> = chosen.iter().map(|&c| (rss_of(&[c]), c)).collect();
    ordered.sort_by(|a, b| a.0.total_cmp(&b.0));
    let order: Vec<usize> = ordered.into_iter().map(|(_, c)| c).collect();
    let shares: Vec<f64> = (1..=order.len())
        .map(|k| if tss > 0.0 { 1.0 - rss_of(&order[..k]) / tss } else { 0.0 })
        .collect();
    let directions = DMatrix::from_columns(&order.iter().map(|&c| pool[c].clone()).collect::<Vec<_>>());
    Ok(InitResult {
        directions: unit_directions(&directions),
        eigenvalues: DVector::from_vec(shares),
        method: InitMethod::Both,
    })
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1usize, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

/// All `k`-subsets of `0..n` in lexicographic order.
fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current: Vec<usize> = (0..k).collect();
    if k > n {
        return out;
    }
    loop {
        out.push(current.clone());
        let Some(i) = (0..k).rev().find(|&i| current[i] < n - k + i) else {
            return out;
        };
        current[i] += 1;
        for j in i + 1..k {
            current[j] = current[j - 1] + 1;
        }
    }
}

/// Leave-one-out residual sum of squares of the Nadaraya–Watson regression
/// of every column of `y` on the given indices.
fn loo_kernel_rss(y: &DMatrix<f64>, indices: &[&DVector<f64>], bandwidth: f64) -> f64 {
    let n = y.nrows();
    let mut rss = 0.0;
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut total = 0.0;
        for (k, w) in weights.iter_mut().enumerate() {
            *w = if k == i {
                0.0
            } else {
                let d2: f64 = indices.iter().map(|z| ((z[i] - z[k]) / bandwidth).powi(2)).sum();
                (-0.5 * d2).exp()
            };
            total += *w;
        }
        if total < 1e-300 {
            // no neighbours within reach: predict with the other rows' mean
            weights.iter_mut().enumerate().for_each(|(k, w)| *w = if k == i { 0.0 } else { 1.0 });
            total = (n - 1) as f64;
        }
        for t in 0..y.ncols() {
            let fit: f64 = (0..n).map(|k| weights[k] * y[(k, t)]).sum::<f64>() / total;
            rss += (y[(i, t)] - fit).powi(2);
        }
    }
    rss
}

/// `H̄ = Σ_t (λ_t/λ.) H_t` with `H_t` the absolute-eigenvalue PHD matrix of
/// the t-th principal component.
fn phd_average(data: &STDataset) -> DMatrix<f64> {
    let x = data.x();
    let p = x.ncols();
    let (scores, variances) = principal_components(data.y());
    let total: f64 = variances.sum();
    // absolute values are taken in standardized coordinates, where an affine
    // change of x acts by an orthogonal rotation
    let (sig_vals, sig_vecs) = sym_eigen_desc(&covariance(x));
    let floor = sig_vals[0].max(f64::MIN_POSITIVE) * 1e-300;
    let root = |power: f64| {
        &sig_vecs
            * DMatrix::from_diagonal(&sig_vals.map(|v| v.max(floor).powf(power)))
            * sig_vecs.transpose()
    };
    let (half, inv_half) = (root(0.5), root(-0.5));
    let mut h_bar = DMatrix::zeros(p, p);
    if total > 0.0 {
        for (k, &lambda) in variances.iter().enumerate() {
            if lambda > 0.0 {
                let score: Vec<f64> = scores.column(k).iter().copied().collect();
                let white = &inv_half * phd_matrix(x, &score) * &inv_half;
                let (vals, vecs) = sym_eigen_desc(&white);
                let abs = &vecs * DMatrix::from_diagonal(&vals.map(f64::abs)) * vecs.transpose();
                h_bar += (&half * abs * &half) * (lambda / total);
            }
        }
    }
    h_bar
}

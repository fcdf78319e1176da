//! Pairwise directions estimation: alternates per-location linear fits on the
//! temporal basis with single-index MAVE updates of each basis function, then
//! recovers the spatial directions `θ_j` and coefficient functions `g_j`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::STDataset;
use crate::error::{Error, Result, StageExt};
use crate::initdir::{
    choose_kappa, merge_initializations, mrsir_init, pe_mrphd_init, select_by_kernel_fit, InitMethod,
    InitResult, SirWeighting,
};
use crate::linalg::{covariance, ols_rows};
use crate::mave::{mave_solve, MaveOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdeConfig {
    pub kappa_override: Option<usize>,
    /// Bandwidth on the response index `φᵀ y(s, ·)`.
    pub h_y: f64,
    /// Bandwidth on the covariate index `θᵀ x(s)`.
    pub h_x: f64,
    /// Convergence tolerance on successive basis functions.
    pub delta: f64,
    pub max_iter: usize,
    pub n_slices: usize,
    pub init_method: InitMethod,
    #[serde(default)]
    pub sir_weighting: SirWeighting,
    #[serde(default = "default_mave_tol")]
    pub mave_tol: f64,
    #[serde(default = "default_mave_max_iter")]
    pub mave_max_iter: usize,
    /// Adds a per-location intercept to the linear fits on the basis.
    #[serde(default)]
    pub intercept: bool,
}

fn default_mave_tol() -> f64 {
    1e-6
}

fn default_mave_max_iter() -> usize {
    50
}

impl PdeConfig {
    pub fn new(h_y: f64, h_x: f64) -> Self {
        Self {
            kappa_override: None,
            h_y,
            h_x,
            delta: 1e-3,
            max_iter: 100,
            n_slices: 10,
            init_method: InitMethod::Both,
            sir_weighting: SirWeighting::default(),
            mave_tol: default_mave_tol(),
            mave_max_iter: default_mave_max_iter(),
            intercept: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("h_y", self.h_y), ("h_x", self.h_x), ("delta", self.delta)] {
            if !(v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be at least 1"));
        }
        if self.n_slices < 2 {
            return Err(Error::invalid("n_slices must be at least 2"));
        }
        if self.kappa_override == Some(0) {
            return Err(Error::invalid("kappa must be at least 1"));
        }
        Ok(())
    }

    fn mave(&self, bandwidth: f64) -> MaveOptions {
        MaveOptions {
            bandwidth,
            tol: self.mave_tol,
            max_iter: self.mave_max_iter,
        }
    }
}

/// Fitted inner-product mean `Σ_j w_j(t) g_j(θ_jᵀ x(s))`.
#[derive(Debug, Clone, PartialEq)]
pub struct PdeFit {
    pub kappa: usize,
    /// `p × κ`, unit columns.
    pub thetas: DMatrix<f64>,
    /// `T × κ`, unit columns (the estimated basis functions).
    pub w_hats: DMatrix<f64>,
    /// `n × κ` local-linear fitted coefficient functions at each location.
    pub g_hats: DMatrix<f64>,
    /// `n × κ` least-squares coefficients of each location's series on the
    /// basis at convergence.
    pub coefficients: DMatrix<f64>,
    /// Per-location intercepts of the linear fit (zero unless enabled).
    pub intercepts: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `y − Σ_j ŵ_j ĝ_j`, `n × T`.
    pub residuals: DMatrix<f64>,
    /// Residual sum of squares of the linear fit, one entry per iteration.
    pub rss_trace: Vec<f64>,
    /// Initial directions the fit started from.
    pub init: InitResult,
    /// Eigenvalue profiles of the initializers that were run.
    pub init_profiles: Vec<(InitMethod, DVector<f64>)>,
}

impl PdeFit {
    /// In-sample mean from the linear-fit coefficients, `n × T`.
    pub fn fitted_mean(&self) -> DMatrix<f64> {
        let mut mean = &self.coefficients * self.w_hats.transpose();
        for (i, mut row) in mean.row_iter_mut().enumerate() {
            row.add_scalar_mut(self.intercepts[i]);
        }
        mean
    }
}

/// Initial directions together with every direction the initializers
/// produced, used as alternative starts when refining the spatial directions.
#[derive(Debug, Clone, PartialEq)]
pub struct InitBundle {
    pub init: InitResult,
    /// Further starting directions for steps 1–5; the fit with the smallest
    /// residual sum of squares is kept.
    pub alternatives: Vec<InitResult>,
    pub kappa: usize,
    /// `p × c` candidate starts, the chosen directions first.
    pub candidates: DMatrix<f64>,
    pub profiles: Vec<(InitMethod, DVector<f64>)>,
}

/// Initial directions per `config.init_method`, with κ chosen from the
/// pe-mrPHD profile when that method runs (mrSIR otherwise).
pub fn initial_directions(data: &STDataset, config: &PdeConfig) -> Result<InitBundle> {
    let mut alternatives = Vec::new();
    let (init, kappa, others) = match config.init_method {
        InitMethod::MrSir => {
            let sir = mrsir_init(data, config.n_slices, config.sir_weighting)?;
            let kappa = choose_kappa(sir.eigenvalues.as_slice(), config.kappa_override)?;
            (sir, kappa, Vec::new())
        }
        InitMethod::PeMrPhd => {
            let phd = pe_mrphd_init(data)?;
            let kappa = choose_kappa(phd.eigenvalues.as_slice(), config.kappa_override)?;
            (phd, kappa, Vec::new())
        }
        InitMethod::Both => {
            let sir = mrsir_init(data, config.n_slices, config.sir_weighting)?;
            let phd = pe_mrphd_init(data)?;
            let kappa = choose_kappa(phd.eigenvalues.as_slice(), config.kappa_override)?;
            let merged = merge_initializations(data, &sir, &phd, kappa)?;
            alternatives.push(select_by_kernel_fit(data, &sir, &phd, kappa, config.h_x)?);
            (merged, kappa, vec![sir, phd])
        }
    };
    let mut columns: Vec<DVector<f64>> = Vec::new();
    for source in std::iter::once(&init).chain(&alternatives).chain(&others) {
        for col in source.directions.column_iter() {
            columns.push(col.into_owned());
        }
    }
    let profiles = if others.is_empty() {
        vec![(init.method, init.eigenvalues.clone())]
    } else {
        others.iter().map(|r| (r.method, r.eigenvalues.clone())).collect()
    };
    Ok(InitBundle {
        candidates: DMatrix::from_columns(&columns),
        init,
        alternatives,
        kappa,
        profiles,
    })
}

fn unit(v: DVector<f64>) -> DVector<f64> {
    let n = v.norm();
    if n > 0.0 {
        v / n
    } else {
        v
    }
}

/// Basis functions from the MAVE response directions `Φ̃` (`T × κ`): the
/// loadings of `y` regressed on the index scores `Φ̃ᵀy`,
/// `Σ_Y Φ̃ (Φ̃ᵀ Σ_Y Φ̃)⁻¹`, with unit columns.
///
/// For a single component this is `Σ_Y φ̃` normalized. With several
/// components the joint regression removes the mixing that correlated
/// components would otherwise introduce into each `Σ_Y φ̃_j`.
pub fn basis_from_directions(sigma_y: &DMatrix<f64>, raw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let loadings = sigma_y * raw;
    let gram = raw.transpose() * &loadings;
    let kappa = raw.ncols();
    let chol = crate::linalg::cholesky_with_jitter(&gram, 0.0)
        .filter(|_| crate::linalg::numerical_rank(&gram) == kappa)
        .ok_or(Error::CollinearBasis {
            rank: crate::linalg::numerical_rank(&gram),
            expected: kappa,
        })?;
    let basis = chol.solve(&loadings.transpose()).transpose();
    Ok(DMatrix::from_columns(
        &basis.column_iter().map(|c| unit(c.into_owned())).collect::<Vec<_>>(),
    ))
}

/// Right singular vectors of the column-centered response (`T × r`).
fn response_directions(y: &DMatrix<f64>) -> DMatrix<f64> {
    let centered = crate::linalg::center_columns(y);
    let svd = centered.svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    // singular values come unordered from nalgebra's SVD
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut out = DMatrix::zeros(y.ncols(), order.len());
    for (k, &i) in order.iter().enumerate() {
        out.set_column(k, &v_t.row(i).transpose());
    }
    out
}

/// Step 1: basis functions from the initial directions.
///
/// Returns `(φ̂, φ̃)`: the normalized basis (`T × κ`) and the raw MAVE
/// directions used as warm starts by later iterations.
pub fn pde_step1(
    data: &STDataset,
    init: &InitResult,
    kappa: usize,
    config: &PdeConfig,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if kappa == 0 || kappa > init.directions.ncols() {
        return Err(Error::invalid(format!(
            "kappa {kappa} outside 1..={}",
            init.directions.ncols()
        )));
    }
    let y = data.y();
    let t_len = y.ncols();
    let sigma_y = covariance(y);
    let starts = response_directions(y);
    let mut raw = DMatrix::zeros(t_len, kappa);
    for j in 0..kappa {
        let target = data.x() * init.directions.column(j);
        let start = if j < starts.ncols() {
            starts.column(j).clone_owned()
        } else {
            DVector::from_element(t_len, 1.0)
        };
        let sol = mave_solve(&target, y, &start, config.mave(config.h_y))?;
        raw.set_column(j, &sol.beta);
    }
    Ok((basis_from_directions(&sigma_y, &raw)?, raw))
}

/// Step 2: per-location least squares on the basis columns.
///
/// Returns `(coefficients n × κ, intercepts n, residuals n × T)`.
pub fn pde_step2_linear_fit(
    data: &STDataset,
    phi: &DMatrix<f64>,
    intercept: bool,
) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    linear_fit(data.y(), phi, intercept)
}

pub(crate) fn linear_fit(
    y: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    intercept: bool,
) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    let (n, t_len) = y.shape();
    if phi.nrows() != t_len {
        return Err(Error::invalid(format!(
            "basis has {} rows for {t_len} time points",
            phi.nrows()
        )));
    }
    let kappa = phi.ncols();
    let (coef, icpt) = if intercept {
        let mut design = DMatrix::from_element(t_len, kappa + 1, 1.0);
        design.columns_mut(1, kappa).copy_from(phi);
        let full = ols_rows(&design, y)?;
        (full.columns(1, kappa).into_owned(), full.column(0).into_owned())
    } else {
        (ols_rows(phi, y)?, DVector::zeros(n))
    };
    let mut residuals = y - &coef * phi.transpose();
    for (i, mut row) in residuals.row_iter_mut().enumerate() {
        row.add_scalar_mut(-icpt[i]);
    }
    Ok((coef, icpt, residuals))
}

pub struct IterateOutcome {
    pub phi: DMatrix<f64>,
    pub coefficients: DMatrix<f64>,
    pub intercepts: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub rss_trace: Vec<f64>,
    pub change_trace: Vec<f64>,
}

/// Steps 2–4: alternate linear fits and MAVE basis updates until every basis
/// function moves by less than `delta`.
pub fn pde_iterate(
    data: &STDataset,
    phi0: &DMatrix<f64>,
    raw0: &DMatrix<f64>,
    config: &PdeConfig,
) -> Result<IterateOutcome> {
    let y = data.y();
    let sigma_y = covariance(y);
    let kappa = phi0.ncols();
    let mut phi = phi0.clone();
    let mut raw = raw0.clone();
    let mut rss_trace = Vec::new();
    let mut change_trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iter {
        iterations += 1;
        let (coef, _, residuals) = linear_fit(y, &phi, config.intercept)?;
        rss_trace.push(residuals.norm_squared());
        for j in 0..kappa {
            let target = coef.column(j).clone_owned();
            let sol = mave_solve(&target, y, &raw.column(j).clone_owned(), config.mave(config.h_y))?;
            raw.set_column(j, &sol.beta);
        }
        let mut next = basis_from_directions(&sigma_y, &raw)?;
        let mut change: f64 = 0.0;
        for (j, mut col) in next.column_iter_mut().enumerate() {
            if col.dot(&phi.column(j)) < 0.0 {
                col.neg_mut();
            }
            change = change.max((&col - phi.column(j)).norm());
        }
        phi = next;
        change_trace.push(change);
        if change < config.delta {
            converged = true;
            break;
        }
    }
    let (coefficients, intercepts, _) = linear_fit(y, &phi, config.intercept)?;
    Ok(IterateOutcome {
        phi,
        coefficients,
        intercepts,
        iterations,
        converged,
        rss_trace,
        change_trace,
    })
}

/// Step 5: spatial directions and coefficient functions from the converged
/// basis.
///
/// Component `j` regresses its linear-fit coefficients on `x` through a
/// single index. MAVE starts from candidate `j` and from every other
/// candidate; the solution with the lowest objective wins, the earliest
/// start on ties.
pub fn pde_step5_finalize(
    data: &STDataset,
    coefficients: &DMatrix<f64>,
    candidates: &DMatrix<f64>,
    config: &PdeConfig,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let kappa = coefficients.ncols();
    let p = data.p();
    if candidates.nrows() != p || candidates.ncols() == 0 {
        return Err(Error::invalid("candidate directions do not match the covariates"));
    }
    let mut thetas = DMatrix::zeros(p, kappa);
    let mut g_hats = DMatrix::zeros(data.n(), kappa);
    for j in 0..kappa {
        let target = coefficients.column(j).into_owned();
        let first = j.min(candidates.ncols() - 1);
        let order = std::iter::once(first).chain((0..candidates.ncols()).filter(|&c| c != first));
        let mut best: Option<crate::mave::MaveSolution> = None;
        for c in order {
            let sol = mave_solve(&target, data.x(), &candidates.column(c).into_owned(), config.mave(config.h_x))?;
            let better = best
                .as_ref()
                .is_none_or(|b| sol.final_objective() < b.final_objective());
            if better {
                best = Some(sol);
            }
        }
        let best = best.expect("at least one candidate");
        thetas.set_column(j, &best.beta);
        g_hats.set_column(j, &best.intercepts);
    }
    Ok((thetas, g_hats))
}

/// Full PDE fit: initialization, steps 1–5.
///
/// With several starting direction sets, steps 1–5 run from each and the fit
/// with the smallest residual sum of squares wins (the first on ties).
pub fn pde_fit(data: &STDataset, config: &PdeConfig) -> Result<PdeFit> {
    config.validate()?;
    let bundle = initial_directions(data, config).stage("initial directions")?;
    let mut best: Option<PdeFit> = None;
    let mut first_error = None;
    for init in std::iter::once(&bundle.init).chain(&bundle.alternatives) {
        match fit_from(data, &bundle, init, config) {
            Ok(fit) => {
                let rss = fit.residuals.norm_squared();
                log::debug!("PDE start {:?}: residual sum of squares {rss:.6e}", init.method);
                if best.as_ref().is_none_or(|b| rss < b.residuals.norm_squared()) {
                    best = Some(fit);
                }
            }
            Err(e) => {
                log::debug!("PDE start failed: {e}");
                first_error.get_or_insert(e);
            }
        }
    }
    match (best, first_error) {
        (Some(fit), _) => Ok(fit),
        (None, Some(e)) => Err(e),
        (None, None) => unreachable!("at least one start is tried"),
    }
}

fn fit_from(data: &STDataset, bundle: &InitBundle, init: &InitResult, config: &PdeConfig) -> Result<PdeFit> {
    let kappa = bundle.kappa;
    let (phi0, raw0) = pde_step1(data, init, kappa, config).stage("basis initialization")?;
    let outcome = pde_iterate(data, &phi0, &raw0, config).stage("basis iteration")?;
    let mut columns: Vec<DVector<f64>> = init.directions.column_iter().map(|c| c.into_owned()).collect();
    columns.extend(bundle.candidates.column_iter().map(|c| c.into_owned()));
    let candidates = DMatrix::from_columns(&columns);
    let (thetas, g_hats) = pde_step5_finalize(data, &outcome.coefficients, &candidates, config)
        .stage("direction refinement")?;
    let mut residuals = data.y() - &g_hats * outcome.phi.transpose();
    for (i, mut row) in residuals.row_iter_mut().enumerate() {
        row.add_scalar_mut(-outcome.intercepts[i]);
    }
    Ok(PdeFit {
        kappa,
        thetas,
        w_hats: outcome.phi,
        g_hats,
        coefficients: outcome.coefficients,
        intercepts: outcome.intercepts,
        iterations: outcome.iterations,
        converged: outcome.converged,
        residuals,
        rss_trace: outcome.rss_trace,
        init: init.clone(),
        init_profiles: bundle.profiles.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn locations(seed: u64, n: usize) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn exact_regression_coefficients() {
        let phi = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.5, 1.0, 0.2, -1.0]);
        let y = DMatrix::from_row_slice(1, 3, (phi.column(0) * 3.0).as_slice());
        let (coef, _, res) = linear_fit(&y, &phi, false).unwrap();
        assert!((coef[(0, 0)] - 3.0).abs() < 1e-12 && coef[(0, 1)].abs() < 1e-12);
        assert!(res.amax() < 1e-12);
    }

    #[test]
    fn orthonormal_basis_gives_projections() {
        let q = DMatrix::from_fn(5, 2, |i, j| ((i + 1) as f64 * (j + 2) as f64).sin()).qr().q();
        let y = DMatrix::from_fn(4, 5, |i, t| (i as f64 - t as f64).cos());
        let (coef, _, _) = linear_fit(&y, &q, false).unwrap();
        assert!((coef - &y * &q).amax() < 1e-12);
    }

    #[test]
    fn saturated_fit_has_zero_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let phi = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
        let y = DMatrix::from_fn(6, 4, |_, _| rng.random_range(-1.0..1.0));
        let (_, _, res) = linear_fit(&y, &phi, false).unwrap();
        assert!(res.amax() < 1e-10);
    }

    #[test]
    fn collinear_basis_rejected() {
        let phi = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let y = DMatrix::from_element(2, 3, 1.0);
        assert!(matches!(linear_fit(&y, &phi, false), Err(Error::CollinearBasis { .. })));
    }

    fn rank_one_data(seed: u64) -> (STDataset, DVector<f64>) {
        let s = locations(seed, 60);
        let w = DVector::from_fn(12, |t, _| ((t + 1) as f64 * 0.4).sin() + 0.3);
        let y = DMatrix::from_fn(60, 12, |i, t| {
            let f = (s[(i, 0)] + s[(i, 1)]).powi(2) + s[(i, 0)];
            2.5 * w[t] * f
        });
        (STDataset::from_locations(s, y).unwrap(), w)
    }

    #[test]
    fn step1_rank_one_recovers_basis() {
        let (data, w) = rank_one_data(4);
        let mut config = PdeConfig::new(1.0, 0.5);
        config.kappa_override = Some(1);
        let init = pe_mrphd_init(&data).unwrap();
        let (phi, _) = pde_step1(&data, &init, 1, &config).unwrap();
        let cos = phi.column(0).dot(&w).abs() / w.norm();
        assert!(cos >= 0.999, "cos = {cos}");
    }

    #[test]
    fn step1_two_time_points_unit_vector() {
        let s = locations(9, 30);
        let y = DMatrix::from_fn(30, 2, |i, t| s[(i, 0)] * (t as f64 + 1.0) + s[(i, 1)].powi(2));
        let data = STDataset::from_locations(s, y).unwrap();
        let init = pe_mrphd_init(&data).unwrap();
        let (phi, _) = pde_step1(&data, &init, 1, &PdeConfig::new(0.5, 0.5)).unwrap();
        assert_eq!(phi.shape(), (2, 1));
        assert!((phi.column(0).norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn infinite_tolerance_stops_after_one_iteration() {
        let (data, _) = rank_one_data(5);
        let mut config = PdeConfig::new(1.0, 0.5);
        config.delta = f64::INFINITY;
        config.kappa_override = Some(1);
        let fit = pde_fit(&data, &config).unwrap();
        assert_eq!(fit.iterations, 1);
        assert!(fit.converged);
    }

    #[test]
    fn step5_recovers_linear_link() {
        let s = locations(13, 80);
        let x = crate::data::build_covariates(&s).unwrap();
        let theta = DVector::from_vec(vec![0.5, -0.5, 0.5, 0.5]);
        let g = &x * &theta;
        let y = DMatrix::from_fn(80, 6, |i, t| g[i] * (t + 1) as f64);
        let data = STDataset::from_locations(s, y).unwrap();
        let starts = DMatrix::from_column_slice(4, 1, &[0.6, -0.3, 0.5, 0.55]);
        let coef = DMatrix::from_column_slice(80, 1, g.as_slice());
        let (thetas, g_hats) = pde_step5_finalize(&data, &coef, &starts, &PdeConfig::new(1.0, 0.5)).unwrap();
        assert!(thetas.column(0).dot(&theta).abs() >= 0.9999);
        assert!((g_hats.column(0) - &g).amax() < 1e-6);
    }

    #[test]
    fn noiseless_rank_two_reconstruction() {
        let s = locations(21, 80);
        let w1 = DVector::from_fn(20, |t, _| (0.5 * (t + 1) as f64 - 5.0).powi(2));
        let w2 = DVector::from_fn(20, |t, _| 5.0 * (0.1 * std::f64::consts::PI * (t + 1) as f64).sin());
        let y = DMatrix::from_fn(80, 20, |i, t| {
            let (a, b) = (s[(i, 0)], s[(i, 1)]);
            let f1 = (0.5 * std::f64::consts::PI * ((a + 0.5).powi(2) + (b + 0.5).powi(2))).cos();
            let f2 = (0.5 * std::f64::consts::PI * ((a - 0.5).powi(2) + (b - 0.5).powi(2))).sin();
            w1[t] * f1 + w2[t] * f2
        });
        let data = STDataset::from_locations(s, y.clone()).unwrap();
        let mut config = PdeConfig::new(3.0, 0.5);
        config.kappa_override = Some(2);
        let fit = pde_fit(&data, &config).unwrap();
        assert!(fit.converged && fit.iterations <= 3, "{} iterations", fit.iterations);
        let err = (fit.fitted_mean() - &y).norm() / y.norm();
        assert!(err < 1e-3, "relative error {err}");
        let truth = DMatrix::from_columns(&[w1, w2]);
        assert!(crate::linalg::max_principal_angle(&truth, &fit.w_hats) < 0.01);
        for col in fit.w_hats.column_iter() {
            assert!((col.norm() - 1.0).abs() < 1e-12);
        }
    }
}

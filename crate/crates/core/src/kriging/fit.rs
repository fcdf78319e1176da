use argmin::core::{CostFunction, Executor};
use argmin::solver::neldermead::NelderMead;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::covariance::ProductSumCovariance;
use super::variogram::{EmpiricalVariogram, VariogramCell};
use crate::error::{Error, Result};

/// Per-cell weights in the least-squares objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariogramWeighting {
    /// Number of point pairs in the cell.
    #[default]
    Counts,
    /// Every populated cell counts once.
    Unweighted,
}

/// Multi-start settings for the range search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariogramFitConfig {
    /// Spatial range starts as multiples of the largest binned distance.
    pub spatial_starts: Vec<f64>,
    /// Temporal range starts as multiples of the unit time lag.
    pub temporal_starts: Vec<f64>,
    pub max_iter: u64,
    /// Lower bound on the nugget as a fraction of the largest empirical
    /// semivariance; keeps the kriging system well conditioned when the fit
    /// puts the nugget at 0.
    #[serde(default = "default_nugget_floor")]
    pub nugget_floor: f64,
    /// Upper bound on each range as a multiple of the largest binned
    /// distance or time lag.
    #[serde(default = "default_max_range_multiple")]
    pub max_range_multiple: f64,
    #[serde(default)]
    pub weighting: VariogramWeighting,
}

fn default_max_range_multiple() -> f64 {
    10.0
}

fn default_nugget_floor() -> f64 {
    1e-6
}

impl Default for VariogramFitConfig {
    fn default() -> Self {
        Self {
            spatial_starts: vec![0.1, 0.3, 1.0],
            temporal_starts: vec![0.5, 1.5, 4.0],
            max_iter: 400,
            nugget_floor: default_nugget_floor(),
            max_range_multiple: default_max_range_multiple(),
            weighting: VariogramWeighting::default(),
        }
    }
}

/// Fitted parameters together with the weighted residual sum of squares.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariogramFit {
    pub covariance: ProductSumCovariance,
    pub weighted_sse: f64,
}

const LOG_BOUND: f64 = 12.0;

/// Weighted least-squares fit of the product-sum semivariance.
///
/// For fixed ranges the semivariance is linear in `(k1, k2, k3, nugget)`,
/// so those are solved exactly by non-negative least squares and only the
/// two log-ranges are searched by Nelder–Mead.
pub fn fit_product_sum(emp: &EmpiricalVariogram, config: &VariogramFitConfig) -> Result<VariogramFit> {
    let cells: Vec<VariogramCell> = emp.cells().into_iter().filter(|c| c.h_s > 0.0 || c.h_t > 0.0).collect();
    if cells.len() < 6 {
        return Err(Error::UnderdeterminedVariogram(format!(
            "{} populated cells, need at least 6",
            cells.len()
        )));
    }
    let lags = distinct(cells.iter().map(|c| c.h_t));
    let dists = distinct(cells.iter().map(|c| c.h_s));
    if lags < 2 || dists < 2 {
        return Err(Error::UnderdeterminedVariogram(format!(
            "populated cells span {lags} time lags and {dists} spatial distances, need 2 of each"
        )));
    }
    if config.spatial_starts.is_empty() || config.temporal_starts.is_empty() {
        return Err(Error::invalid("variogram fit needs at least one start"));
    }
    if !(config.nugget_floor >= 0.0 && config.nugget_floor.is_finite()) {
        return Err(Error::invalid(format!("nugget floor must be non-negative, got {}", config.nugget_floor)));
    }
    if !(config.max_range_multiple >= 1.0 && config.max_range_multiple.is_finite()) {
        return Err(Error::invalid(format!(
            "range multiple must be at least 1, got {}",
            config.max_range_multiple
        )));
    }
    let gamma_scale = cells.iter().map(|c| c.gamma).fold(0.0, f64::max);
    let space_scale = cells.iter().map(|c| c.h_s).fold(0.0, f64::max);
    let time_scale = cells.iter().map(|c| c.h_t).filter(|h| *h > 0.0).fold(f64::INFINITY, f64::min);
    let max_lag = cells.iter().map(|c| c.h_t).fold(0.0, f64::max);
    let upper = [
        config.max_range_multiple.ln(),
        (config.max_range_multiple * max_lag / time_scale).ln(),
    ];
    let problem = RangeProblem {
        cells,
        space_scale,
        time_scale,
        upper,
        weighting: config.weighting,
    };

    let mut best: Option<(Vec<f64>, f64)> = None;
    for &rs in &config.spatial_starts {
        for &rt in &config.temporal_starts {
            let start = vec![rs.ln(), rt.ln()];
            let simplex = vec![start.clone(), vec![start[0] + 0.7, start[1]], vec![start[0], start[1] + 0.7]];
            let solver = NelderMead::new(simplex)
                .with_sd_tolerance(1e-12)
                .map_err(|e| Error::invalid(e.to_string()))?;
            let res = Executor::new(problem.clone(), solver)
                .configure(|st| st.max_iters(config.max_iter))
                .run()
                .map_err(|e| Error::UnderdeterminedVariogram(e.to_string()))?;
            let (Some(param), cost) = (res.state.best_param, res.state.best_cost) else {
                continue;
            };
            if best.as_ref().is_none_or(|(_, c)| cost < *c) {
                best = Some((param, cost));
            }
        }
    }
    let (param, _) = best.ok_or_else(|| Error::UnderdeterminedVariogram("no start converged".into()))?;
    let (rs, rt) = problem.ranges(&param);
    let (weights, sse) = problem.linear_part(rs, rt);
    let nugget = weights[3].max(config.nugget_floor * gamma_scale);
    let covariance = ProductSumCovariance::new(weights[0], weights[1], weights[2], rs, rt, nugget)?;
    Ok(VariogramFit {
        covariance,
        weighted_sse: sse,
    })
}

fn distinct(values: impl Iterator<Item = f64>) -> usize {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.len()
}

#[derive(Clone)]
struct RangeProblem {
    cells: Vec<VariogramCell>,
    space_scale: f64,
    time_scale: f64,
    /// Upper clamps of the two log-ranges.
    upper: [f64; 2],
    weighting: VariogramWeighting,
}

impl RangeProblem {
    fn ranges(&self, log_rel: &[f64]) -> (f64, f64) {
        let clamp = |v: f64, hi: f64| v.clamp(-LOG_BOUND, hi).exp();
        (
            self.space_scale * clamp(log_rel[0], self.upper[0]),
            self.time_scale * clamp(log_rel[1], self.upper[1]),
        )
    }

    fn linear_part(&self, rs: f64, rt: f64) -> ([f64; 4], f64) {
        let m = self.cells.len();
        let mut design = DMatrix::zeros(m, 4);
        let mut target = DVector::zeros(m);
        let mut weights = DVector::zeros(m);
        for (i, c) in self.cells.iter().enumerate() {
            let cs = (-c.h_s / rs).exp();
            let ct = (-c.h_t / rt).exp();
            design[(i, 0)] = 1.0 - cs;
            design[(i, 1)] = 1.0 - ct;
            design[(i, 2)] = 1.0 - cs * ct;
            design[(i, 3)] = 1.0;
            target[i] = c.gamma;
            weights[i] = match self.weighting {
                VariogramWeighting::Counts => c.count,
                VariogramWeighting::Unweighted => 1.0,
            };
        }
        nnls_small(&design, &target, &weights)
    }
}

impl CostFunction for RangeProblem {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, param: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        let (rs, rt) = self.ranges(param);
        Ok(self.linear_part(rs, rt).1)
    }
}

/// Weighted non-negative least squares for at most four columns by
/// enumerating active sets. Among (near-)equal fits the one with fewer
/// nonzero coefficients wins.
fn nnls_small(design: &DMatrix<f64>, target: &DVector<f64>, weights: &DVector<f64>) -> ([f64; 4], f64) {
    let k = design.ncols();
    let total: f64 = target.iter().zip(weights.iter()).map(|(y, w)| w * y * y).sum();
    let tie = 1e-12 * total.max(f64::MIN_POSITIVE);
    let mut best = ([0.0; 4], total, 0usize);
    for mask in 1u32..(1 << k) {
        let cols: Vec<usize> = (0..k).filter(|j| mask & (1 << j) != 0).collect();
        let sub = DMatrix::from_fn(design.nrows(), cols.len(), |i, j| design[(i, cols[j])] * weights[i].sqrt());
        let rhs = target.component_mul(&weights.map(f64::sqrt));
        let gram = sub.transpose() * &sub;
        let Some(chol) = gram.clone().cholesky() else {
            continue;
        };
        let coef = chol.solve(&(sub.transpose() * &rhs));
        if coef.iter().any(|c| *c < 0.0 || !c.is_finite()) {
            continue;
        }
        let sse = (rhs - &sub * &coef).norm_squared();
        let better = sse < best.1 - tie || (sse <= best.1 + tie && cols.len() < best.2);
        if better {
            let mut full = [0.0; 4];
            for (j, c) in cols.iter().zip(coef.iter()) {
                full[*j] = *c;
            }
            best = (full, sse, cols.len());
        }
    }
    (best.0, best.1)
}

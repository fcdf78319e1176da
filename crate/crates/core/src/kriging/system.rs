use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use super::covariance::ProductSumCovariance;
use crate::error::{Error, Result};
use crate::linalg::{euclidean, sym_eigen_desc};

/// Largest `n·T` accepted by the dense solver.
pub const DENSE_LIMIT: usize = 20_000;

/// Relative nugget below which the grid solver is not used.
const GRID_NUGGET_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolverKind {
    /// Cholesky of the full `(n·T) × (n·T)` covariance.
    Dense,
    /// Eigen-decompositions of the spatial and temporal factors plus a
    /// rank-`(n + T)` Woodbury correction; needs a positive nugget.
    Grid,
}

#[derive(Debug, Clone)]
enum Solver {
    Dense(Cholesky<f64, Dyn>),
    Grid(GridSolver),
}

/// Simple kriging of a zero-mean field observed at every location and time.
///
/// The joint covariance is `k1·Cs⊗J + k2·J⊗Ct + k3·Cs⊗Ct + nugget·I` with
/// `J` the all-ones matrix. Solutions `Σ⁻¹R` are kept as `n × T` matrices.
#[derive(Debug, Clone)]
pub struct KrigingSystem {
    covariance: ProductSumCovariance,
    coords: Vec<Vec<f64>>,
    times: DVector<f64>,
    solver: Solver,
    weights: Contracted,
}

/// `Σ⁻¹r` with its row and column sums, enough to evaluate `c0ᵀΣ⁻¹r`
/// for any query in `O(n + T)`.
#[derive(Debug, Clone)]
struct Contracted {
    field: DMatrix<f64>,
    row_sums: DVector<f64>,
    col_sums: DVector<f64>,
}

impl Contracted {
    fn new(field: DMatrix<f64>) -> Self {
        let row_sums = DVector::from_iterator(field.nrows(), field.row_iter().map(|r| r.sum()));
        let col_sums = DVector::from_iterator(field.ncols(), field.column_iter().map(|c| c.sum()));
        Self {
            field,
            row_sums,
            col_sums,
        }
    }
}

impl KrigingSystem {
    /// Factorizes the covariance and solves for the residuals. The grid
    /// solver is used when the nugget is positive, the dense one otherwise.
    pub fn new(
        covariance: ProductSumCovariance,
        locations: &DMatrix<f64>,
        times: &DVector<f64>,
        residuals: &DMatrix<f64>,
    ) -> Result<Self> {
        let total = covariance.sill() + covariance.nugget;
        let kind = if covariance.nugget > GRID_NUGGET_FLOOR * total {
            SolverKind::Grid
        } else {
            SolverKind::Dense
        };
        Self::with_solver(covariance, locations, times, residuals, kind)
    }

    pub fn with_solver(
        covariance: ProductSumCovariance,
        locations: &DMatrix<f64>,
        times: &DVector<f64>,
        residuals: &DMatrix<f64>,
        kind: SolverKind,
    ) -> Result<Self> {
        covariance.validate()?;
        let (n, t_len) = residuals.shape();
        if locations.nrows() != n || times.len() != t_len || n == 0 || t_len == 0 {
            return Err(Error::invalid(format!(
                "residuals are {n}×{t_len} but there are {} locations and {} times",
                locations.nrows(),
                times.len()
            )));
        }
        if residuals.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("residuals contain non-finite values"));
        }
        let coords: Vec<Vec<f64>> = locations.row_iter().map(|r| r.iter().copied().collect()).collect();
        let cs = spatial_corr_matrix(&covariance, &coords);
        let ct = temporal_corr_matrix(&covariance, times);
        let solver = match kind {
            SolverKind::Dense => {
                if n * t_len > DENSE_LIMIT {
                    return Err(Error::Conditioning(format!(
                        "n·T = {} exceeds the dense limit {DENSE_LIMIT}",
                        n * t_len
                    )));
                }
                let full = assemble(&covariance, &cs, &ct);
                let chol = full
                    .cholesky()
                    .ok_or_else(|| Error::Conditioning("joint covariance is not positive definite".into()))?;
                Solver::Dense(chol)
            }
            SolverKind::Grid => Solver::Grid(GridSolver::new(&covariance, &cs, &ct)?),
        };
        let mut system = Self {
            covariance,
            coords,
            times: times.clone(),
            solver,
            weights: Contracted::new(DMatrix::zeros(0, 0)),
        };
        system.weights = Contracted::new(system.solve(residuals));
        Ok(system)
    }

    pub fn covariance(&self) -> &ProductSumCovariance {
        &self.covariance
    }

    pub fn solver_kind(&self) -> SolverKind {
        match self.solver {
            Solver::Dense(_) => SolverKind::Dense,
            Solver::Grid(_) => SolverKind::Grid,
        }
    }

    pub fn n(&self) -> usize {
        self.coords.len()
    }

    pub fn t_len(&self) -> usize {
        self.times.len()
    }

    /// `Σ⁻¹ vec(rhs)` reshaped to `n × T`.
    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.solver {
            Solver::Dense(chol) => {
                let (n, t_len) = rhs.shape();
                let v = DVector::from_fn(n * t_len, |k, _| rhs[(k / t_len, k % t_len)]);
                let x = chol.solve(&v);
                DMatrix::from_fn(n, t_len, |i, t| x[i * t_len + t])
            }
            Solver::Grid(g) => g.solve(rhs),
        }
    }

    /// `Σ⁻¹r` for the residuals the system was built with.
    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights.field
    }

    /// Correlations of a query location with every data location, and of a
    /// query time with every data time.
    fn query_corr(&self, s0: &[f64], t0: f64) -> (DVector<f64>, DVector<f64>) {
        let cs = DVector::from_iterator(
            self.n(),
            self.coords.iter().map(|c| self.covariance.spatial_corr(euclidean(c, s0))),
        );
        let ct = self.times.map(|t| self.covariance.temporal_corr((t - t0).abs()));
        (cs, ct)
    }

    /// Cross-covariance between one query point and every data point, without nugget.
    pub fn cross_covariance(&self, s0: &[f64], t0: f64) -> Result<DMatrix<f64>> {
        self.check_query(s0, t0)?;
        let (cs, ct) = self.query_corr(s0, t0);
        let p = &self.covariance;
        Ok(DMatrix::from_fn(self.n(), self.t_len(), |i, t| {
            p.k1 * cs[i] + p.k2 * ct[t] + p.k3 * cs[i] * ct[t]
        }))
    }

    fn check_query(&self, s0: &[f64], t0: f64) -> Result<()> {
        if s0.len() != self.coords[0].len() {
            return Err(Error::invalid(format!(
                "query has {} coordinates, data has {}",
                s0.len(),
                self.coords[0].len()
            )));
        }
        if !t0.is_finite() || s0.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("query contains non-finite values"));
        }
        Ok(())
    }

    /// `c0ᵀ Σ⁻¹ r` at one point.
    pub fn predict_point(&self, s0: &[f64], t0: f64) -> Result<f64> {
        self.check_query(s0, t0)?;
        Ok(self.contract_point(&self.weights, s0, t0))
    }

    fn contract_point(&self, w: &Contracted, s0: &[f64], t0: f64) -> f64 {
        let (cs, ct) = self.query_corr(s0, t0);
        let p = &self.covariance;
        let joint = cs.dot(&(&w.field * &ct));
        p.k3 * joint + p.k1 * cs.dot(&w.row_sums) + p.k2 * w.col_sums.dot(&ct)
    }

    /// Predictions at every pair of query location (rows of `locations`)
    /// and query time, as an `m × T0` matrix.
    pub fn predict_grid(&self, locations: &DMatrix<f64>, times: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.contract_grid(&self.weights, locations, times)
    }

    fn contract_grid(&self, w: &Contracted, locations: &DMatrix<f64>, times: &DVector<f64>) -> Result<DMatrix<f64>> {
        if locations.ncols() != self.coords[0].len() {
            return Err(Error::invalid(format!(
                "query locations have {} coordinates, data has {}",
                locations.ncols(),
                self.coords[0].len()
            )));
        }
        if locations.iter().chain(times.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("query contains non-finite values"));
        }
        let p = &self.covariance;
        let cs0 = DMatrix::from_fn(locations.nrows(), self.n(), |a, i| {
            let s0: Vec<f64> = locations.row(a).iter().copied().collect();
            p.spatial_corr(euclidean(&self.coords[i], &s0))
        });
        let ct0 = DMatrix::from_fn(self.t_len(), times.len(), |t, b| p.temporal_corr((self.times[t] - times[b]).abs()));
        let mut out = (&cs0 * &w.field * &ct0) * p.k3;
        let spatial = &cs0 * &w.row_sums * p.k1;
        let temporal = ct0.tr_mul(&w.col_sums) * p.k2;
        for a in 0..out.nrows() {
            for b in 0..out.ncols() {
                out[(a, b)] += spatial[a] + temporal[b];
            }
        }
        Ok(out)
    }

    /// Simple-kriging variance `C(0,0) − c0ᵀΣ⁻¹c0` of the noiseless field.
    pub fn variance(&self, s0: &[f64], t0: f64) -> Result<f64> {
        let c0 = self.cross_covariance(s0, t0)?;
        let x = self.solve(&c0);
        Ok((self.covariance.sill() - c0.dot(&x)).max(0.0))
    }

    /// Ordinary kriging under an unknown constant mean: weights `λ` with
    /// `Σλ = 1`, evaluated on a query grid.
    pub fn ordinary_grid(&self, locations: &DMatrix<f64>, times: &DVector<f64>) -> Result<DMatrix<f64>> {
        let ones = DMatrix::from_element(self.n(), self.t_len(), 1.0);
        let beta = Contracted::new(self.solve(&ones));
        let total = beta.field.sum();
        if !(total > 0.0) {
            return Err(Error::Conditioning("1ᵀΣ⁻¹1 is not positive".into()));
        }
        let alpha_total = self.weights.field.sum();
        let mut out = self.contract_grid(&self.weights, locations, times)?;
        let mass = self.contract_grid(&beta, locations, times)?;
        for k in 0..out.len() {
            out[k] += (1.0 - mass[k]) / total * alpha_total;
        }
        Ok(out)
    }

    /// Explicit ordinary-kriging weights for one query, `n × T`.
    pub fn ordinary_weights(&self, s0: &[f64], t0: f64) -> Result<DMatrix<f64>> {
        let c0 = self.cross_covariance(s0, t0)?;
        let ones = DMatrix::from_element(self.n(), self.t_len(), 1.0);
        let beta = self.solve(&ones);
        let lambda = self.solve(&c0);
        let shift = (1.0 - lambda.sum()) / beta.sum();
        Ok(lambda + beta * shift)
    }
}

fn spatial_corr_matrix(cov: &ProductSumCovariance, coords: &[Vec<f64>]) -> DMatrix<f64> {
    let n = coords.len();
    DMatrix::from_fn(n, n, |i, j| cov.spatial_corr(euclidean(&coords[i], &coords[j])))
}

fn temporal_corr_matrix(cov: &ProductSumCovariance, times: &DVector<f64>) -> DMatrix<f64> {
    let t_len = times.len();
    DMatrix::from_fn(t_len, t_len, |a, b| cov.temporal_corr((times[a] - times[b]).abs()))
}

fn assemble(cov: &ProductSumCovariance, cs: &DMatrix<f64>, ct: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, t_len) = (cs.nrows(), ct.nrows());
    DMatrix::from_fn(n * t_len, n * t_len, |r, c| {
        let (i, a) = (r / t_len, r % t_len);
        let (j, b) = (c / t_len, c % t_len);
        let v = cov.k1 * cs[(i, j)] + cov.k2 * ct[(a, b)] + cov.k3 * cs[(i, j)] * ct[(a, b)];
        if r == c { v + cov.nugget } else { v }
    })
}

/// Dense joint covariance over all (location, time) pairs, index `i·T + t`.
pub fn joint_covariance(cov: &ProductSumCovariance, locations: &DMatrix<f64>, times: &DVector<f64>) -> DMatrix<f64> {
    let coords: Vec<Vec<f64>> = locations.row_iter().map(|r| r.iter().copied().collect()).collect();
    assemble(cov, &spatial_corr_matrix(cov, &coords), &temporal_corr_matrix(cov, times))
}

#[derive(Debug, Clone)]
struct GridSolver {
    us: DMatrix<f64>,
    ut: DMatrix<f64>,
    /// `k3·λs_a·λt_b + nugget`.
    diag: DMatrix<f64>,
    p: DVector<f64>,
    q: DVector<f64>,
    /// `√(k1·λs_a)` and `√(k2·λt_b)`.
    space_scale: DVector<f64>,
    time_scale: DVector<f64>,
    capacitance: Cholesky<f64, Dyn>,
}

impl GridSolver {
    fn new(cov: &ProductSumCovariance, cs: &DMatrix<f64>, ct: &DMatrix<f64>) -> Result<Self> {
        if !(cov.nugget > 0.0) {
            return Err(Error::Conditioning("grid solver needs a positive nugget".into()));
        }
        let (lam_s, us) = sym_eigen_desc(cs);
        let (lam_t, ut) = sym_eigen_desc(ct);
        let lam_s = lam_s.map(|v| v.max(0.0));
        let lam_t = lam_t.map(|v| v.max(0.0));
        let (n, t_len) = (lam_s.len(), lam_t.len());
        let diag = DMatrix::from_fn(n, t_len, |a, b| cov.k3 * lam_s[a] * lam_t[b] + cov.nugget);
        let p = us.tr_mul(&DVector::from_element(n, 1.0));
        let q = ut.tr_mul(&DVector::from_element(t_len, 1.0));
        let space_scale = lam_s.map(|l| (cov.k1 * l).sqrt());
        let time_scale = lam_t.map(|l| (cov.k2 * l).sqrt());

        let mut m = DMatrix::identity(n + t_len, n + t_len);
        for a in 0..n {
            let mut acc = 0.0;
            for b in 0..t_len {
                acc += q[b] * q[b] / diag[(a, b)];
                let cross = space_scale[a] * time_scale[b] * p[a] * q[b] / diag[(a, b)];
                m[(a, n + b)] = cross;
                m[(n + b, a)] = cross;
            }
            m[(a, a)] += space_scale[a] * space_scale[a] * acc;
        }
        for b in 0..t_len {
            let acc: f64 = (0..n).map(|a| p[a] * p[a] / diag[(a, b)]).sum();
            m[(n + b, n + b)] += time_scale[b] * time_scale[b] * acc;
        }
        let capacitance = m
            .cholesky()
            .ok_or_else(|| Error::Conditioning("low-rank correction is not positive definite".into()))?;
        Ok(Self {
            us,
            ut,
            diag,
            p,
            q,
            space_scale,
            time_scale,
            capacitance,
        })
    }

    fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.p.len();
        let t_len = self.q.len();
        let z = (self.us.tr_mul(rhs) * &self.ut).component_div(&self.diag);
        let mut uv = DVector::zeros(n + t_len);
        let zq = &z * &self.q;
        let zp = z.tr_mul(&self.p);
        for a in 0..n {
            uv[a] = self.space_scale[a] * zq[a];
        }
        for b in 0..t_len {
            uv[n + b] = self.time_scale[b] * zp[b];
        }
        let cd = self.capacitance.solve(&uv);
        let rotated = DMatrix::from_fn(n, t_len, |a, b| {
            let corr = self.space_scale[a] * self.q[b] * cd[a] + self.time_scale[b] * self.p[a] * cd[n + b];
            z[(a, b)] - corr / self.diag[(a, b)]
        });
        &self.us * rotated * self.ut.transpose()
    }
}

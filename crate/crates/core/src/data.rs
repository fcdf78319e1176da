//! Space-time dataset container, covariate construction and learn/test splits.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Observations `y(s_i, t)` at `n` locations over a common time grid, with
/// spatial-only covariates `x(s_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct STDataset {
    ids: Vec<String>,
    locations: DMatrix<f64>,
    times: DVector<f64>,
    y: DMatrix<f64>,
    x: DMatrix<f64>,
    standardization: Option<Standardization>,
}

impl STDataset {
    /// Builds a dataset whose covariates are derived from the coordinates
    /// with [`build_covariates`]. Times default to `1..=T`.
    pub fn from_locations(locations: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        let x = build_covariates(&locations)?;
        let times = DVector::from_iterator(y.ncols(), (1..=y.ncols()).map(|t| t as f64));
        Self::new(None, locations, times, y, x)
    }

    pub fn new(
        ids: Option<Vec<String>>,
        locations: DMatrix<f64>,
        times: DVector<f64>,
        y: DMatrix<f64>,
        x: DMatrix<f64>,
    ) -> Result<Self> {
        let n = locations.nrows();
        if n < 2 {
            return Err(Error::invalid(format!("need at least 2 locations, got {n}")));
        }
        if times.is_empty() {
            return Err(Error::invalid("empty time grid"));
        }
        if x.ncols() == 0 || locations.ncols() == 0 {
            return Err(Error::invalid("no covariate or coordinate columns"));
        }
        if y.nrows() != n || x.nrows() != n {
            return Err(Error::invalid(format!(
                "row counts differ: locations {n}, Y {}, X {}",
                y.nrows(),
                x.nrows()
            )));
        }
        if y.ncols() != times.len() {
            return Err(Error::invalid(format!(
                "Y has {} columns but the time grid has {} points",
                y.ncols(),
                times.len()
            )));
        }
        if times.as_slice().windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("time grid must be strictly increasing"));
        }
        for (name, m) in [("locations", &locations), ("Y", &y), ("X", &x)] {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("non-finite entry in {name}")));
            }
        }
        if times.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite time value"));
        }
        let ids = match ids {
            Some(ids) if ids.len() != n => {
                return Err(Error::invalid(format!("{} ids for {n} locations", ids.len())))
            }
            Some(ids) => ids,
            None => (0..n).map(|i| i.to_string()).collect(),
        };
        Ok(Self {
            ids,
            locations,
            times,
            y,
            x,
            standardization: None,
        })
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn t_len(&self) -> usize {
        self.y.ncols()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn locations(&self) -> &DMatrix<f64> {
        &self.locations
    }

    pub fn times(&self) -> &DVector<f64> {
        &self.times
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn standardization(&self) -> Option<&Standardization> {
        self.standardization.as_ref()
    }

    /// Same locations and covariates with a different response matrix.
    pub fn with_response(&self, y: DMatrix<f64>) -> Result<Self> {
        if y.shape() != self.y.shape() {
            return Err(Error::invalid(format!(
                "response shape {:?} does not match {:?}",
                y.shape(),
                self.y.shape()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite entry in Y"));
        }
        Ok(Self { y, ..self.clone() })
    }

    /// Same data with the covariate matrix replaced (e.g. after standardization).
    pub fn with_covariates(&self, x: DMatrix<f64>) -> Result<Self> {
        if x.nrows() != self.n() || x.ncols() == 0 {
            return Err(Error::invalid("covariate matrix has the wrong number of rows"));
        }
        Ok(Self {
            x,
            standardization: None,
            ..self.clone()
        })
    }

    /// Standardizes `X` with its own column statistics and records them.
    pub fn standardized(&self) -> Result<Self> {
        let (x, record) = standardize_covariates(&self.x)?;
        Ok(Self {
            x,
            standardization: Some(record),
            ..self.clone()
        })
    }

    /// Restriction to the given location indices, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        if let Some(&bad) = rows.iter().find(|&&i| i >= self.n()) {
            return Err(Error::invalid(format!("location index {bad} out of range")));
        }
        let pick = |m: &DMatrix<f64>| m.select_rows(rows.iter());
        let mut out = Self::new(
            Some(rows.iter().map(|&i| self.ids[i].clone()).collect()),
            pick(&self.locations),
            self.times.clone(),
            pick(&self.y),
            pick(&self.x),
        )?;
        out.standardization = None;
        Ok(out)
    }

    /// Index of `t` in the time grid (absolute tolerance `1e-9`).
    pub fn time_index(&self, t: f64) -> Option<usize> {
        self.times.iter().position(|&v| (v - t).abs() <= 1e-9)
    }
}

/// `x(s) = (s_1, …, s_d, s_1², …, s_d²)` for every row of `locations`.
pub fn build_covariates(locations: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if locations.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite coordinate"));
    }
    let (n, d) = locations.shape();
    Ok(DMatrix::from_fn(n, 2 * d, |i, j| {
        if j < d {
            locations[(i, j)]
        } else {
            locations[(i, j - d)].powi(2)
        }
    }))
}

/// Per-column `(mean, scale)` used to standardize covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Standardization {
    /// `(x - mean) / scale` applied to each row.
    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.means.len() {
            return Err(Error::invalid(format!(
                "expected {} covariate columns, got {}",
                self.means.len(),
                x.ncols()
            )));
        }
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            (x[(i, j)] - self.means[j]) / self.scales[j]
        }))
    }

    /// Maps standardized values back: `scale · z + mean`.
    pub fn invert(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| {
            self.scales[j] * z[(i, j)] + self.means[j]
        })
    }
}

/// Centers each column and scales it to unit sample standard deviation
/// (denominator `n − 1`).
pub fn standardize_covariates(x: &DMatrix<f64>) -> Result<(DMatrix<f64>, Standardization)> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::invalid("need at least two rows to standardize"));
    }
    let mut means = Vec::with_capacity(x.ncols());
    let mut scales = Vec::with_capacity(x.ncols());
    for (j, col) in x.column_iter().enumerate() {
        let mean = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sd = var.sqrt();
        if !(sd > 1e-12 * mean.abs().max(1.0)) {
            return Err(Error::DegenerateColumn { column: j });
        }
        means.push(mean);
        scales.push(sd);
    }
    let record = Standardization { means, scales };
    let z = record.apply(x)?;
    Ok((z, record))
}

/// Disjoint learning and testing location indices (each sorted ascending).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub learn: Vec<usize>,
    pub test: Vec<usize>,
}

/// Simple random sample of `round(test_fraction · n)` test locations.
pub fn split_learn_test(n: usize, test_fraction: f64, seed: u64) -> Result<SplitIndices> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n_test = (test_fraction * n as f64).round() as usize;
    if n_test < 1 || n < n_test + 2 {
        return Err(Error::invalid(format!(
            "split of {n} locations at fraction {test_fraction} leaves {n_test} test and {} learning locations",
            n.saturating_sub(n_test)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test = rand::seq::index::sample(&mut rng, n, n_test).into_vec();
    test.sort_unstable();
    let mut is_test = vec![false; n];
    for &i in &test {
        is_test[i] = true;
    }
    let learn = (0..n).filter(|&i| !is_test[i]).collect();
    Ok(SplitIndices { learn, test })
}

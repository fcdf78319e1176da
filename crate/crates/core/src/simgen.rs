//! Synthetic space-time fields with a known inner-product mean, and the
//! prediction and direction-recovery metrics used to score fits on them.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::STDataset;
use crate::error::{Error, Result};
use crate::linalg::{cholesky_with_jitter, euclidean};

/// Number of time points in both simulated examples.
pub const SIM_T: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Example {
    Trigonometric = 1,
    ProductSum = 2,
}

impl Example {
    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(Self::Trigonometric),
            2 => Ok(Self::ProductSum),
            _ => Err(Error::invalid(format!("unknown example {tag}; expected 1 or 2"))),
        }
    }

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn generate(self, n: usize, seed: u64) -> Result<(STDataset, SimTruth)> {
        match self {
            Self::Trigonometric => gen_example1(n, seed),
            Self::ProductSum => gen_example2(n, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub example: Example,
    /// `p × 2`, columns `θ1 = (.5,.5,.5,.5)`, `θ2 = (−.5,−.5,.5,.5)`.
    #[serde(with = "crate::serde_matrix")]
    pub thetas: DMatrix<f64>,
    #[serde(with = "crate::serde_matrix")]
    pub mean: DMatrix<f64>,
    #[serde(with = "crate::serde_matrix")]
    pub u: DMatrix<f64>,
    #[serde(with = "crate::serde_matrix")]
    pub noise: DMatrix<f64>,
}

pub fn true_thetas() -> DMatrix<f64> {
    DMatrix::from_column_slice(4, 2, &[0.5, 0.5, 0.5, 0.5, -0.5, -0.5, 0.5, 0.5])
}

fn sq_dist(s: (f64, f64), c: f64) -> f64 {
    (s.0 - c).powi(2) + (s.1 - c).powi(2)
}

pub fn ex1_f1(s: (f64, f64)) -> f64 {
    (0.5 * PI * sq_dist(s, -0.5)).cos()
}

pub fn ex1_f2(s: (f64, f64)) -> f64 {
    (0.5 * PI * sq_dist(s, 0.5)).sin()
}

pub fn ex1_w1(t: f64) -> f64 {
    (0.5 * t - 5.0).powi(2)
}

pub fn ex1_w2(t: f64) -> f64 {
    5.0 * (0.1 * PI * t).sin()
}

pub fn ex2_f1(s: (f64, f64)) -> f64 {
    15.0 / (-0.75 + sq_dist(s, -0.5).exp())
}

pub fn ex2_f2(s: (f64, f64)) -> f64 {
    1.5 * (-2.0 + sq_dist(s, 0.5)).powi(2)
}

pub fn ex2_w1(t: f64) -> f64 {
    (0.1 * PI * t).atan()
}

pub fn ex2_w2(t: f64) -> f64 {
    2.0 * (0.75 + (0.1 * t - 1.0).powi(2)).ln()
}

/// Parameters of the example-2 random effect:
/// `k1·e^{−h_s/2} + k2·e^{−0.8 h_t} + k3·e^{−h_s/2}e^{−0.8 h_t}`.
pub const EX2_SILLS: [f64; 3] = [1.0, 0.5, 0.25];
pub const EX2_SPATIAL_RANGE: f64 = 2.0;
pub const EX2_TEMPORAL_RANGE: f64 = 1.25;

fn uniform_locations(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..=1.0))
}

fn normals(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn exp_spatial_factor(s: &DMatrix<f64>, range: f64) -> Result<DMatrix<f64>> {
    let n = s.nrows();
    let cov = DMatrix::from_fn(n, n, |i, j| {
        let d = euclidean(&[s[(i, 0)], s[(i, 1)]], &[s[(j, 0)], s[(j, 1)]]);
        (-d / range).exp()
    });
    lower_factor(&cov)
}

fn exp_temporal_factor(t_len: usize, range: f64) -> Result<DMatrix<f64>> {
    let cov = DMatrix::from_fn(t_len, t_len, |a, b| (-(a.abs_diff(b) as f64) / range).exp());
    lower_factor(&cov)
}

fn lower_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    cholesky_with_jitter(cov, 1e-10)
        .map(|c| c.l())
        .ok_or_else(|| Error::Conditioning("random-effect covariance is not positive definite".into()))
}

fn mean_surface(
    s: &DMatrix<f64>,
    f: [fn((f64, f64)) -> f64; 2],
    w: [fn(f64) -> f64; 2],
) -> DMatrix<f64> {
    DMatrix::from_fn(s.nrows(), SIM_T, |i, t| {
        let loc = (s[(i, 0)], s[(i, 1)]);
        let time = (t + 1) as f64;
        w[0](time) * f[0](loc) + w[1](time) * f[1](loc)
    })
}

fn assemble(
    example: Example,
    s: DMatrix<f64>,
    mean: DMatrix<f64>,
    u: DMatrix<f64>,
    noise: DMatrix<f64>,
) -> Result<(STDataset, SimTruth)> {
    let y = &mean + &u + &noise;
    let data = STDataset::from_locations(s, y)?;
    let truth = SimTruth {
        example,
        thetas: true_thetas(),
        mean,
        u,
        noise,
    };
    Ok((data, truth))
}

/// Example 1: trigonometric/quadratic mean, random effect independent over
/// time with spatial covariance `e^{−‖s−s*‖/2}`, noise variance 0.25.
pub fn gen_example1(n: usize, seed: u64) -> Result<(STDataset, SimTruth)> {
    if n < 10 {
        return Err(Error::invalid(format!("need at least 10 locations, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = uniform_locations(&mut rng, n);
    let mean = mean_surface(&s, [ex1_f1, ex1_f2], [ex1_w1, ex1_w2]);
    let l_s = exp_spatial_factor(&s, 2.0)?;
    let u = &l_s * normals(&mut rng, n, SIM_T);
    let noise = normals(&mut rng, n, SIM_T) * 0.5;
    assemble(Example::Trigonometric, s, mean, u, noise)
}

/// Example 2: rational/quartic mean, product-sum random effect, noise
/// variance 0.5.
///
/// The random effect is drawn as the sum of its three independent
/// components, which has exactly the product-sum law.
pub fn gen_example2(n: usize, seed: u64) -> Result<(STDataset, SimTruth)> {
    if n < 10 {
        return Err(Error::invalid(format!("need at least 10 locations, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = uniform_locations(&mut rng, n);
    let mean = mean_surface(&s, [ex2_f1, ex2_f2], [ex2_w1, ex2_w2]);
    let u = product_sum_field(&mut rng, &s, SIM_T, EX2_SILLS, EX2_SPATIAL_RANGE, EX2_TEMPORAL_RANGE)?;
    let noise = normals(&mut rng, n, SIM_T) * 0.5f64.sqrt();
    assemble(Example::ProductSum, s, mean, u, noise)
}

/// Zero-mean Gaussian field on `locations × {1..t_len}` with product-sum
/// covariance built from exponential spatial and temporal correlations.
pub fn product_sum_field(
    rng: &mut ChaCha8Rng,
    locations: &DMatrix<f64>,
    t_len: usize,
    sills: [f64; 3],
    spatial_range: f64,
    temporal_range: f64,
) -> Result<DMatrix<f64>> {
    let n = locations.nrows();
    let l_s = exp_spatial_factor(locations, spatial_range)?;
    let l_t = exp_temporal_factor(t_len, temporal_range)?;
    let spatial = &l_s * normals(rng, n, 1) * sills[0].sqrt();
    let temporal = &l_t * normals(rng, t_len, 1) * sills[1].sqrt();
    let joint = &l_s * normals(rng, n, t_len) * l_t.transpose() * sills[2].sqrt();
    Ok(DMatrix::from_fn(n, t_len, |i, t| spatial[i] + temporal[t] + joint[(i, t)]))
}

/// `(RIMSE, RPMSE)`: the mean over locations of the Euclidean norm of the
/// error series, and the root mean squared error over all entries.
pub fn rimse_rpmse(y_test: &DMatrix<f64>, z_hat: &DMatrix<f64>) -> Result<(f64, f64)> {
    if y_test.shape() != z_hat.shape() {
        return Err(Error::invalid(format!(
            "shape mismatch {:?} vs {:?}",
            y_test.shape(),
            z_hat.shape()
        )));
    }
    let (n, t_len) = y_test.shape();
    if n == 0 || t_len == 0 {
        return Err(Error::invalid("empty prediction matrix"));
    }
    let err = y_test - z_hat;
    let rimse = err.row_iter().map(|r| r.norm()).sum::<f64>() / n as f64;
    let rpmse = (err.norm_squared() / (n * t_len) as f64).sqrt();
    Ok((rimse, rpmse))
}

/// `|θ̂ᵀθ| / (‖θ̂‖‖θ‖)`.
pub fn cos_accuracy(theta_hat: &DVector<f64>, theta_true: &DVector<f64>) -> Result<f64> {
    if theta_hat.len() != theta_true.len() {
        return Err(Error::invalid("direction lengths differ"));
    }
    let denom = theta_hat.norm() * theta_true.norm();
    if !(denom > 0.0) {
        return Err(Error::invalid("zero direction"));
    }
    Ok((theta_hat.dot(theta_true).abs() / denom).min(1.0))
}

/// Per-true-direction `|cos|` under the assignment of estimated to true
/// directions that maximizes the total. Missing estimates score 0.
pub fn matched_cos(theta_hat: &DMatrix<f64>, theta_true: &DMatrix<f64>) -> Result<Vec<f64>> {
    let k_true = theta_true.ncols();
    let k_hat = theta_hat.ncols();
    let mut table = vec![vec![0.0; k_hat]; k_true];
    for (a, row) in table.iter_mut().enumerate() {
        for (b, cell) in row.iter_mut().enumerate() {
            *cell = cos_accuracy(&theta_hat.column(b).into_owned(), &theta_true.column(a).into_owned())?;
        }
    }
    let mut best = (f64::NEG_INFINITY, vec![0.0; k_true]);
    let mut used = vec![false; k_hat];
    let mut current = vec![0.0; k_true];
    assign(&table, 0, &mut used, &mut current, &mut best);
    Ok(best.1)
}

fn assign(
    table: &[Vec<f64>],
    row: usize,
    used: &mut [bool],
    current: &mut Vec<f64>,
    best: &mut (f64, Vec<f64>),
) {
    if row == table.len() {
        let total: f64 = current.iter().sum();
        if total > best.0 {
            *best = (total, current.clone());
        }
        return;
    }
    for b in 0..used.len() {
        if !used[b] {
            used[b] = true;
            current[row] = table[row][b];
            assign(table, row + 1, used, current, best);
            used[b] = false;
        }
    }
    // leaving this direction unmatched frees a column for a later one
    current[row] = 0.0;
    assign(table, row + 1, used, current, best);
}

/// Mean and sample standard deviation; the deviation is absent for fewer
/// than two values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: Option<f64>,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.len() > 1)
            .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Some(Self {
            mean,
            sd,
            count: values.len(),
        })
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rimse: f64,
    pub rpmse: f64,
    pub cos_abs: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_function_values() {
        assert!((ex1_f1((-0.5, -0.5)) - 1.0).abs() < 1e-15);
        assert_eq!(ex1_w1(10.0), 0.0);
        assert!((ex1_w2(5.0) - 5.0).abs() < 1e-12);
        assert!((ex2_f1((-0.5, -0.5)) - 60.0).abs() < 1e-12);
        assert!((ex2_w2(10.0) - 2.0 * 0.75f64.ln()).abs() < 1e-15);
        assert!((ex2_w2(10.0) + 0.5754).abs() < 1e-4);
    }

    #[test]
    fn response_decomposes_exactly() {
        for ex in [Example::Trigonometric, Example::ProductSum] {
            let (data, truth) = ex.generate(30, 3).unwrap();
            assert_eq!(data.y(), &(&truth.mean + &truth.u + &truth.noise));
            assert_eq!(data.t_len(), SIM_T);
            assert_eq!(data.p(), 4);
        }
    }

    #[test]
    fn generators_are_reproducible() {
        assert_eq!(gen_example1(20, 5).unwrap(), gen_example1(20, 5).unwrap());
        assert_eq!(gen_example2(20, 5).unwrap(), gen_example2(20, 5).unwrap());
        assert_ne!(gen_example1(20, 5).unwrap().0, gen_example1(20, 6).unwrap().0);
    }

    #[test]
    fn too_few_locations_rejected() {
        assert!(gen_example1(9, 0).is_err());
        assert!(gen_example2(5, 0).is_err());
    }

    #[test]
    fn locations_in_unit_square() {
        let (data, _) = gen_example1(200, 1).unwrap();
        assert!(data.locations().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    /// Monte-Carlo covariance of the example-2 random effect at a fixed pair
    /// against the closed form.
    #[test]
    fn product_sum_field_covariance() {
        let s = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.6, -0.2]);
        let h = (0.6f64.powi(2) + 0.2f64.powi(2)).sqrt();
        let (a, b) = ((0usize, 2usize), (1usize, 3usize));
        let expected = {
            let cs = (-h / EX2_SPATIAL_RANGE).exp();
            let ct = (-1.0 / EX2_TEMPORAL_RANGE).exp();
            EX2_SILLS[0] * cs + EX2_SILLS[1] * ct + EX2_SILLS[2] * cs * ct
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let reps = 4000;
        let mut acc = 0.0;
        let mut var = 0.0;
        for _ in 0..reps {
            let u = product_sum_field(&mut rng, &s, 5, EX2_SILLS, EX2_SPATIAL_RANGE, EX2_TEMPORAL_RANGE).unwrap();
            acc += u[a] * u[b];
            var += u[a] * u[a];
        }
        let cov = acc / reps as f64;
        assert!((cov - expected).abs() / expected < 0.1, "{cov} vs {expected}");
        assert!((var / reps as f64 - 1.75).abs() / 1.75 < 0.1);
    }

    #[test]
    fn metric_examples() {
        let y = DMatrix::from_row_slice(2, 1, &[3.0, 4.0]);
        let z = DMatrix::zeros(2, 1);
        let (rimse, rpmse) = rimse_rpmse(&y, &z).unwrap();
        assert!((rimse - 3.5).abs() < 1e-12);
        assert!((rpmse - 12.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(rimse_rpmse(&y, &y).unwrap(), (0.0, 0.0));
        assert!(rimse_rpmse(&y, &DMatrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn cos_examples() {
        let a = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        assert!((cos_accuracy(&a, &(-&a)).unwrap() - 1.0).abs() < 1e-15);
        let b = DVector::from_vec(vec![2.0, -1.0, 0.0]);
        assert!(cos_accuracy(&a, &b).unwrap().abs() < 1e-15);
        assert!(cos_accuracy(&a, &DVector::zeros(3)).is_err());
    }

    #[test]
    fn matching_picks_best_permutation() {
        let truth = true_thetas();
        let swapped = DMatrix::from_columns(&[truth.column(1), truth.column(0)]);
        let c = matched_cos(&swapped, &truth).unwrap();
        assert!(c.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let single = matched_cos(&truth.columns(1, 1).into_owned(), &truth).unwrap();
        assert_eq!(single[0], 0.0);
        assert!((single[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn summary_statistics() {
        let s = Summary::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert!((s.sd.unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(Summary::of(&[4.0]).unwrap().sd, None);
        assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]), Some(2.5));
    }
}

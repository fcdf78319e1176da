//! Comparison predictors: the cross-sectional mean and ordinary space-time
//! kriging under a constant mean.

use nalgebra::{DMatrix, DVector};

use crate::data::STDataset;
use crate::error::{Error, Result};
use crate::kriging::{
    empirical_variogram, fit_product_sum, KrigingSystem, ProductSumCovariance, VariogramConfig, VariogramFitConfig,
};

/// Mean over learning locations of `y(·, t)` for time column `t`.
pub fn naive_predict(learn: &STDataset, t: usize) -> Result<f64> {
    if t >= learn.t_len() {
        return Err(Error::invalid(format!("time column {t} out of range")));
    }
    Ok(learn.y().column(t).mean())
}

/// The naive prediction repeated for `m` query locations, `m × T`.
pub fn naive_grid(learn: &STDataset, m: usize) -> DMatrix<f64> {
    let means = learn.y().row_mean();
    DMatrix::from_fn(m, learn.t_len(), |_, t| means[t])
}

/// Ordinary kriging of `y` with a product-sum covariance fitted to its
/// empirical variogram.
#[derive(Debug, Clone)]
pub struct OrdinaryKrigingModel {
    pub covariance: ProductSumCovariance,
    system: KrigingSystem,
}

impl OrdinaryKrigingModel {
    pub fn fit(learn: &STDataset, variogram: VariogramConfig, fit: &VariogramFitConfig) -> Result<Self> {
        let emp = empirical_variogram(learn.locations(), learn.times(), learn.y(), variogram)?;
        let covariance = fit_product_sum(&emp, fit)?.covariance;
        Self::with_covariance(learn, covariance)
    }

    pub fn with_covariance(learn: &STDataset, covariance: ProductSumCovariance) -> Result<Self> {
        let system = KrigingSystem::new(covariance, learn.locations(), learn.times(), learn.y())?;
        Ok(Self { covariance, system })
    }

    /// Predictions on query locations × times, `m × T0`.
    pub fn predict_grid(&self, locations: &DMatrix<f64>, times: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.system.ordinary_grid(locations, times)
    }

    /// Kriging weights of one query over the learning points, summing to one.
    pub fn weights(&self, s0: &[f64], t0: f64) -> Result<DMatrix<f64>> {
        self.system.ordinary_weights(s0, t0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dataset(y: DMatrix<f64>, seed: u64) -> STDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = DMatrix::from_fn(y.nrows(), 2, |_, _| rng.random_range(-1.0..1.0));
        STDataset::from_locations(s, y).unwrap()
    }

    #[test]
    fn naive_is_column_mean() {
        let d = dataset(DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]), 1);
        assert_eq!(naive_predict(&d, 0).unwrap(), 2.0);
        assert!(naive_predict(&d, 1).is_err());
        let c = dataset(DMatrix::from_element(4, 5, 1.5), 2);
        assert!(naive_grid(&c, 3).iter().all(|v| *v == 1.5));
    }

    #[test]
    fn naive_permutation_invariant() {
        let y = DMatrix::from_fn(5, 3, |i, t| (i * 3 + t) as f64 * 0.7);
        let d = dataset(y, 3);
        let p = d.subset(&[4, 2, 0, 3, 1]).unwrap();
        assert!((naive_grid(&d, 1) - naive_grid(&p, 1)).amax() < 1e-12);
    }

    #[test]
    fn ordinary_kriging_reproduces_constants() {
        let d = dataset(DMatrix::from_element(6, 4, -2.5), 4);
        for cov in [
            ProductSumCovariance::new(1.0, 0.5, 0.25, 0.7, 1.5, 0.1).unwrap(),
            ProductSumCovariance::new(0.2, 0.0, 1.0, 0.3, 3.0, 0.0).unwrap(),
        ] {
            let model = OrdinaryKrigingModel::with_covariance(&d, cov).unwrap();
            let q = DMatrix::from_row_slice(2, 2, &[0.1, 0.9, -0.4, 0.0]);
            let pred = model.predict_grid(&q, &DVector::from_vec(vec![1.0, 2.5, 7.0])).unwrap();
            assert!(pred.iter().all(|v| (v + 2.5).abs() < 1e-8));
            assert!((model.weights(&[0.3, 0.3], 2.0).unwrap().sum() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn single_observation_gets_full_weight() {
        let s = DMatrix::from_row_slice(1, 2, &[0.2, 0.3]);
        let y = DMatrix::from_element(1, 1, 4.0);
        let cov = ProductSumCovariance::new(1.0, 0.0, 0.0, 1.0, 1.0, 0.0).unwrap();
        let system = KrigingSystem::new(cov, &s, &DVector::from_element(1, 1.0), &y).unwrap();
        let w = system.ordinary_weights(&[0.9, -0.5], 1.0).unwrap();
        assert!((w[(0, 0)] - 1.0).abs() < 1e-12);
        let pred = system.ordinary_grid(&DMatrix::from_row_slice(1, 2, &[0.9, -0.5]), &DVector::from_element(1, 1.0)).unwrap();
        assert!((pred[(0, 0)] - 4.0).abs() < 1e-12);
    }
}

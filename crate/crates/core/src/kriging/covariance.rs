use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Isotropic product-sum covariance
/// `C(h_s, h_t) = k1·C_s + k2·C_t + k3·C_s·C_t` with unit-sill exponential
/// families `C_s = e^{−h_s/r_s}`, `C_t = e^{−h_t/r_t}`, plus a nugget at the
/// origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProductSumCovariance {
    /// Weight of the purely spatial term.
    pub k1: f64,
    /// Weight of the purely temporal term.
    pub k2: f64,
    /// Weight of the joint space-time term.
    pub k3: f64,
    pub spatial_range: f64,
    pub temporal_range: f64,
    pub nugget: f64,
}

impl ProductSumCovariance {
    pub fn new(k1: f64, k2: f64, k3: f64, spatial_range: f64, temporal_range: f64, nugget: f64) -> Result<Self> {
        let params = Self {
            k1,
            k2,
            k3,
            spatial_range,
            temporal_range,
            nugget,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [self.k1, self.k2, self.k3, self.nugget];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid(format!("weights and nugget must be non-negative: {self:?}")));
        }
        if !(self.spatial_range > 0.0 && self.temporal_range > 0.0)
            || !self.spatial_range.is_finite()
            || !self.temporal_range.is_finite()
        {
            return Err(Error::invalid(format!("ranges must be positive: {self:?}")));
        }
        Ok(())
    }

    /// `k1 + k2 + k3`, the covariance at the origin without nugget.
    pub fn sill(&self) -> f64 {
        self.k1 + self.k2 + self.k3
    }

    pub fn spatial_corr(&self, h_s: f64) -> f64 {
        (-h_s / self.spatial_range).exp()
    }

    pub fn temporal_corr(&self, h_t: f64) -> f64 {
        (-h_t / self.temporal_range).exp()
    }

    /// Covariance without the nugget: the cross-covariance used for
    /// prediction at a point distinct from the data.
    pub fn structured(&self, h_s: f64, h_t: f64) -> f64 {
        let cs = self.spatial_corr(h_s);
        let ct = self.temporal_corr(h_t);
        self.k1 * cs + self.k2 * ct + self.k3 * cs * ct
    }

    /// Covariance with the nugget added at the origin.
    pub fn eval(&self, h_s: f64, h_t: f64) -> Result<f64> {
        if h_s < 0.0 || h_t < 0.0 || h_s.is_nan() || h_t.is_nan() {
            return Err(Error::invalid(format!("lags must be non-negative, got ({h_s}, {h_t})")));
        }
        let nugget = if h_s == 0.0 && h_t == 0.0 { self.nugget } else { 0.0 };
        Ok(self.structured(h_s, h_t) + nugget)
    }

    /// Semivariance away from the origin, `sill + nugget − C(h_s, h_t)`.
    pub fn semivariance(&self, h_s: f64, h_t: f64) -> f64 {
        self.sill() + self.nugget - self.structured(h_s, h_t)
    }
}

/// `C(h_s, h_t)` for the given parameters; see [`ProductSumCovariance::eval`].
pub fn covariance_eval(params: &ProductSumCovariance, h_s: f64, h_t: f64) -> Result<f64> {
    params.eval(h_s, h_t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn example() -> ProductSumCovariance {
        ProductSumCovariance::new(1.0, 0.5, 0.25, 2.0, 1.25, 0.0).unwrap()
    }

    #[test]
    fn origin_value() {
        let mut p = example();
        assert!((p.eval(0.0, 0.0).unwrap() - 1.75).abs() < 1e-15);
        p.nugget = 0.3;
        assert!((p.eval(0.0, 0.0).unwrap() - 2.05).abs() < 1e-15);
        assert!((p.eval(0.0, 1.0).unwrap() - p.structured(0.0, 1.0)).abs() < 1e-15);
    }

    #[test]
    fn separable_reduction() {
        let p = ProductSumCovariance::new(0.0, 0.0, 1.0, 0.7, 3.0, 0.0).unwrap();
        let expected = (-0.4f64 / 0.7).exp() * (-2.0f64 / 3.0).exp();
        assert!((p.eval(0.4, 2.0).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn matches_example_display() {
        let p = example();
        let (h, t) = (0.8f64, 3.0f64);
        let display = 0.25 * (-0.5 * h).exp() * (-0.8 * t).exp() + (-0.5 * h).exp() + 0.5 * (-0.8 * t).exp();
        assert!((p.eval(h, t).unwrap() - display).abs() < 1e-14);
    }

    #[test]
    fn rejects_invalid() {
        assert!(example().eval(-1.0, 0.0).is_err());
        assert!(ProductSumCovariance::new(-0.1, 0.0, 0.0, 1.0, 1.0, 0.0).is_err());
        assert!(ProductSumCovariance::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn non_increasing_in_each_lag(h in 0.0..5.0f64, t in 0.0..5.0f64, dh in 0.0..2.0f64, dt in 0.0..2.0f64) {
            let p = example();
            let base = p.structured(h, t);
            prop_assert!(p.structured(h + dh, t) <= base + 1e-15);
            prop_assert!(p.structured(h, t + dt) <= base + 1e-15);
        }
    }
}

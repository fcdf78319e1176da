//! Two-pass pipeline: PDE mean, kriging of its residual random effect, and
//! a second PDE fit on the data with the kriged effect removed.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{build_covariates, STDataset, Standardization};
use crate::error::{Error, Result, StageExt};
use crate::initdir::InitMethod;
use crate::kriging::{
    empirical_variogram, fit_product_sum, EmpiricalVariogram, KrigingSystem, ProductSumCovariance,
    VariogramConfig, VariogramFitConfig,
};
use crate::pde::{linear_fit, pde_fit, PdeConfig, PdeFit};
use crate::scaling::{knn_intercept, knn_transfer, scale_fit, ScaledCoefficients};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdePlusConfig {
    pub pde: PdeConfig,
    #[serde(default)]
    pub variogram: VariogramConfig,
    #[serde(default)]
    pub variogram_fit: VariogramFitConfig,
    /// Neighbours averaged when transferring coefficients to new locations.
    #[serde(default = "default_knn")]
    pub knn: usize,
    /// Run the second PDE fit on `y − û`.
    #[serde(default = "default_true")]
    pub second_pass: bool,
    /// Skip the mean entirely and krige `y` (ablation).
    #[serde(default)]
    pub suppress_mean: bool,
    /// Standardize covariates with learning-set statistics.
    #[serde(default = "default_true")]
    pub standardize: bool,
}

fn default_knn() -> usize {
    3
}

fn default_true() -> bool {
    true
}

impl PdePlusConfig {
    pub fn new(pde: PdeConfig) -> Self {
        Self {
            pde,
            variogram: VariogramConfig::default(),
            variogram_fit: VariogramFitConfig::default(),
            knn: default_knn(),
            second_pass: true,
            suppress_mean: false,
            standardize: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pde.validate()?;
        if self.knn == 0 {
            return Err(Error::invalid("knn must be at least 1"));
        }
        if self.variogram.space_bins == 0 {
            return Err(Error::invalid("variogram needs at least one spatial bin"));
        }
        Ok(())
    }
}

/// Per-pass record of the PDE fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassSummary {
    pub kappa: usize,
    pub iterations: usize,
    pub converged: bool,
    pub rss_trace: Vec<f64>,
    pub init_method: InitMethod,
    pub init_eigenvalues: Vec<f64>,
    pub init_profiles: Vec<(InitMethod, Vec<f64>)>,
    #[serde(with = "crate::serde_matrix")]
    pub thetas: DMatrix<f64>,
    #[serde(with = "crate::serde_matrix")]
    pub w_hats: DMatrix<f64>,
    #[serde(with = "crate::serde_matrix")]
    pub g_hats: DMatrix<f64>,
}

impl PassSummary {
    fn of(fit: &PdeFit) -> Self {
        Self {
            kappa: fit.kappa,
            iterations: fit.iterations,
            converged: fit.converged,
            rss_trace: fit.rss_trace.clone(),
            init_method: fit.init.method,
            init_eigenvalues: fit.init.eigenvalues.iter().copied().collect(),
            init_profiles: fit
                .init_profiles
                .iter()
                .map(|(m, v)| (*m, v.iter().copied().collect()))
                .collect(),
            thetas: fit.thetas.clone(),
            w_hats: fit.w_hats.clone(),
            g_hats: fit.g_hats.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub passes: Vec<PassSummary>,
    /// Covariance fitted to the first-pass residuals (absent without a mean
    /// or without a second pass).
    pub first_pass_covariance: Option<ProductSumCovariance>,
    /// Empirical variogram of the residuals the final system krige.
    pub variogram: EmpiricalVariogram,
}

/// Mean component `Σ_j ŵ_j(t) f̃_j(s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanComponent {
    /// `p × κ`, acting on standardized covariates when a standardization is stored.
    #[serde(with = "crate::serde_matrix")]
    pub thetas: DMatrix<f64>,
    /// `T × κ`.
    #[serde(with = "crate::serde_matrix")]
    pub w_hats: DMatrix<f64>,
    pub scaled: ScaledCoefficients,
    pub intercept: bool,
}

/// Serialized form of a fitted model; the kriging system is rebuilt on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelDocument {
    config: PdePlusConfig,
    learn_ids: Vec<String>,
    #[serde(with = "crate::serde_matrix")]
    learn_locations: DMatrix<f64>,
    #[serde(with = "crate::serde_matrix::vector")]
    times: DVector<f64>,
    standardization: Option<Standardization>,
    mean: Option<MeanComponent>,
    covariance: ProductSumCovariance,
    #[serde(with = "crate::serde_matrix")]
    kriging_residuals: DMatrix<f64>,
    diagnostics: FitDiagnostics,
}

/// Fitted predictor `ẑ(s, t) = Σ_j ŵ_j(t) f̃_j(s) + û(s, t)`.
#[derive(Debug, Clone)]
pub struct PdePlusModel {
    doc: ModelDocument,
    system: KrigingSystem,
}

impl Serialize for PdePlusModel {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        self.doc.serialize(ser)
    }
}

impl<'de> Deserialize<'de> for PdePlusModel {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let doc = ModelDocument::deserialize(de)?;
        Self::from_document(doc).map_err(serde::de::Error::custom)
    }
}

/// Residual field of `y` after removing the mean, kriged with a covariance
/// fitted to its own empirical variogram.
fn krige_residuals(
    data: &STDataset,
    residuals: &DMatrix<f64>,
    config: &PdePlusConfig,
) -> Result<(ProductSumCovariance, EmpiricalVariogram, KrigingSystem)> {
    let emp = empirical_variogram(data.locations(), data.times(), residuals, config.variogram)?;
    let cov = fit_product_sum(&emp, &config.variogram_fit)?.covariance;
    let system = KrigingSystem::new(cov, data.locations(), data.times(), residuals)?;
    Ok((cov, emp, system))
}

fn mean_component(fit: &PdeFit, response: &DMatrix<f64>, x: &DMatrix<f64>, intercept: bool) -> Result<MeanComponent> {
    let index = x * &fit.thetas;
    let scaled = scale_fit(response, &fit.w_hats, &fit.g_hats, index, intercept)?;
    Ok(MeanComponent {
        thetas: fit.thetas.clone(),
        w_hats: fit.w_hats.clone(),
        scaled,
        intercept,
    })
}

/// Fits the two-pass predictor on a learning dataset.
pub fn pdeplus_fit(learn: &STDataset, config: &PdePlusConfig) -> Result<PdePlusModel> {
    config.validate()?;
    let data = if config.standardize { learn.standardized()? } else { learn.clone() };
    let y = data.y();

    let mut passes = Vec::new();
    let mut first_pass_covariance = None;
    let (mean, residuals) = if config.suppress_mean {
        (None, y.clone())
    } else {
        let first = pde_fit(&data, &config.pde).stage("first pass")?;
        passes.push(PassSummary::of(&first));
        let (fit, response) = if config.second_pass {
            let (_, _, eps) = linear_fit(y, &first.w_hats, config.pde.intercept).stage("first-pass residuals")?;
            let (cov, _, system) = krige_residuals(&data, &eps, config).stage("first-pass kriging")?;
            first_pass_covariance = Some(cov);
            let u_hat = system.predict_grid(data.locations(), data.times()).stage("first-pass kriging")?;
            let adjusted = y - u_hat;
            let second = pde_fit(&data.with_response(adjusted.clone())?, &config.pde).stage("second pass")?;
            passes.push(PassSummary::of(&second));
            (second, adjusted)
        } else {
            (first, y.clone())
        };
        let mean = mean_component(&fit, &response, data.x(), config.pde.intercept).stage("scaling")?;
        let residuals = y - mean.scaled.reconstruct(&mean.w_hats);
        (Some(mean), residuals)
    };
    let (covariance, variogram, system) = krige_residuals(&data, &residuals, config).stage("kriging")?;
    let doc = ModelDocument {
        config: config.clone(),
        learn_ids: data.ids().to_vec(),
        learn_locations: data.locations().clone(),
        times: data.times().clone(),
        standardization: data.standardization().cloned(),
        mean,
        covariance,
        kriging_residuals: residuals,
        diagnostics: FitDiagnostics {
            passes,
            first_pass_covariance,
            variogram,
        },
    };
    Ok(PdePlusModel { doc, system })
}

impl PdePlusModel {
    fn from_document(doc: ModelDocument) -> Result<Self> {
        doc.config.validate()?;
        let system = KrigingSystem::new(doc.covariance, &doc.learn_locations, &doc.times, &doc.kriging_residuals)?;
        Ok(Self { doc, system })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn config(&self) -> &PdePlusConfig {
        &self.doc.config
    }

    pub fn mean(&self) -> Option<&MeanComponent> {
        self.doc.mean.as_ref()
    }

    pub fn covariance(&self) -> &ProductSumCovariance {
        &self.doc.covariance
    }

    pub fn diagnostics(&self) -> &FitDiagnostics {
        &self.doc.diagnostics
    }

    pub fn times(&self) -> &DVector<f64> {
        &self.doc.times
    }

    pub fn learn_locations(&self) -> &DMatrix<f64> {
        &self.doc.learn_locations
    }

    pub fn learn_ids(&self) -> &[String] {
        &self.doc.learn_ids
    }

    pub fn kappa(&self) -> usize {
        self.doc.mean.as_ref().map_or(0, |m| m.w_hats.ncols())
    }

    /// Directions expressed on the raw covariate scale, unit columns.
    pub fn raw_thetas(&self) -> Option<DMatrix<f64>> {
        let mean = self.doc.mean.as_ref()?;
        let mut thetas = mean.thetas.clone();
        if let Some(st) = &self.doc.standardization {
            for mut col in thetas.column_iter_mut() {
                for (v, s) in col.iter_mut().zip(&st.scales) {
                    *v /= s;
                }
                col.normalize_mut();
            }
        }
        Some(thetas)
    }

    /// Residuals the final kriging system was built on, `n × T`.
    pub fn kriging_residuals(&self) -> &DMatrix<f64> {
        &self.doc.kriging_residuals
    }

    pub fn kriging_system(&self) -> &KrigingSystem {
        &self.system
    }

    /// Covariates of query locations on the model's (standardized) scale.
    pub fn query_covariates(&self, locations: &DMatrix<f64>, covariates: Option<&DMatrix<f64>>) -> Result<DMatrix<f64>> {
        let raw = match covariates {
            Some(x) if x.nrows() != locations.nrows() => {
                return Err(Error::invalid("covariate rows do not match query locations"))
            }
            Some(x) => x.clone(),
            None => build_covariates(locations)?,
        };
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite query covariate"));
        }
        match &self.doc.standardization {
            Some(st) => st.apply(&raw),
            None => Ok(raw),
        }
    }

    fn time_columns(&self, times: &DVector<f64>) -> Result<Vec<usize>> {
        times
            .iter()
            .map(|&t| {
                self.doc
                    .times
                    .iter()
                    .position(|&v| (v - t).abs() <= 1e-9)
                    .ok_or_else(|| Error::invalid(format!("time {t} is not on the learning time grid")))
            })
            .collect()
    }

    /// Mean part at query locations and times, `m × T0`.
    pub fn predict_mean(
        &self,
        locations: &DMatrix<f64>,
        covariates: Option<&DMatrix<f64>>,
        times: &DVector<f64>,
    ) -> Result<DMatrix<f64>> {
        let cols = self.time_columns(times)?;
        let mut out = DMatrix::zeros(locations.nrows(), times.len());
        let Some(mean) = &self.doc.mean else {
            return Ok(out);
        };
        let x = self.query_covariates(locations, covariates)?;
        let k = self.doc.config.knn.min(mean.scaled.n());
        for a in 0..x.nrows() {
            let x0 = x.row(a).transpose();
            let coef = knn_transfer(&mean.scaled, &mean.thetas, &x0, k)?;
            let icpt = if mean.intercept { knn_intercept(&mean.scaled, &mean.thetas, &x0, k)? } else { 0.0 };
            for (b, &c) in cols.iter().enumerate() {
                out[(a, b)] = mean.w_hats.row(c).transpose().dot(&coef) + icpt;
            }
        }
        Ok(out)
    }

    /// Kriged random effect at query locations and times, `m × T0`.
    pub fn predict_random_effect(&self, locations: &DMatrix<f64>, times: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.system.predict_grid(locations, times)
    }

    /// `ẑ` on the grid of query locations × times, `m × T0`.
    pub fn predict_grid(
        &self,
        locations: &DMatrix<f64>,
        covariates: Option<&DMatrix<f64>>,
        times: &DVector<f64>,
    ) -> Result<DMatrix<f64>> {
        let mean = self.predict_mean(locations, covariates, times)?;
        Ok(mean + self.predict_random_effect(locations, times)?)
    }

    /// `ẑ` at individual `(location, time)` pairs.
    pub fn predict_points(&self, locations: &DMatrix<f64>, times: &[f64]) -> Result<Vec<f64>> {
        if locations.nrows() != times.len() {
            return Err(Error::invalid("one time per query location is required"));
        }
        (0..times.len())
            .map(|q| {
                let loc = locations.rows(q, 1).into_owned();
                let t = DVector::from_element(1, times[q]);
                Ok(self.predict_grid(&loc, None, &t)?[(0, 0)])
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_validation() {
        let c = PdePlusConfig::new(PdeConfig::new(3.0, 0.5));
        assert_eq!(c.knn, 3);
        assert!(c.second_pass && c.standardize && !c.suppress_mean);
        c.validate().unwrap();
        let bad = PdePlusConfig { knn: 0, ..c.clone() };
        assert!(bad.validate().is_err());
        let json = serde_json::to_string(&c).unwrap();
        let back: PdePlusConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
    }
}

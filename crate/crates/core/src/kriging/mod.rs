//! Residual space-time kriging with a product-sum covariance.

mod covariance;
mod fit;
mod system;
mod variogram;

pub use covariance::{covariance_eval, ProductSumCovariance};
pub use fit::{fit_product_sum, VariogramFit, VariogramFitConfig, VariogramWeighting};
pub use system::{joint_covariance, KrigingSystem, SolverKind, DENSE_LIMIT};
pub use variogram::{empirical_variogram, EmpiricalVariogram, VariogramCell, VariogramConfig};

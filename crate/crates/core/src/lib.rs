//! Spatio-temporal prediction with an inner-product mean `Σ_j w_j(t) f_j(θ_jᵀ x(s))`
//! estimated by pairwise directions estimation, plus kriging of the residual
//! random effect.

pub mod baselines;
pub mod benchmark;
pub mod data;
pub mod error;
pub mod initdir;
pub mod io;
pub mod kriging;
pub mod linalg;
pub mod mave;
pub mod pde;
pub mod pdeplus;
pub mod scaling;
pub mod serde_matrix;
pub mod simgen;

pub use data::{STDataset, SplitIndices, Standardization};
pub use error::{Error, Result};
pub use initdir::{InitMethod, InitResult};
pub use pde::{PdeConfig, PdeFit};

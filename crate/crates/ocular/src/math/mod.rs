//! Numeric foundations: deterministic RNG streams, gamma-family special
//! functions, small fixed-size linear algebra, and 4-D Gaussian machinery.

pub mod gaussian;
pub mod mat;
pub mod rng;
pub mod special;
pub mod state;

pub use gaussian::{
    ellipse_position_projection, mahalanobis_sq, region_of, sample_gaussian, Gaussian4,
    PositionShadow, PredictionRegion,
};
pub use mat::{Chol4, Mat2, Mat4, Mat42};
pub use rng::RngStream;
pub use special::{chi2_cdf, chi2_quantile, gamma_p};
pub use state::{ActionVec, StateVec};

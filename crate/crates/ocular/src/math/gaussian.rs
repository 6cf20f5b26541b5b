//! Four-dimensional Gaussians, elliptical prediction regions, and the exact
//! projection of a region onto the position plane.
//!
//! A prediction region is stored as a *center* Gaussian plus a threshold on
//! the squared Mahalanobis distance. Scaling a covariance by xi and testing
//! against the chi-squared quantile is algebraically identical to keeping the
//! covariance and testing against xi times the quantile; regions built from
//! calibrated predictions use the latter form so the identity holds exactly,
//! bit for bit, and an infinite xi degenerates to an explicit unbounded
//! threshold instead of an unusable covariance.

use crate::error::{Error, Result};
use crate::math::mat::{
    mat2_inverse, mat2_quadform, mat4_is_symmetric, mat4_scale, Chol4, Mat2, Mat4,
};
use crate::math::rng::RngStream;
use crate::math::special::chi2_quantile;
use crate::math::state::StateVec;

#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian4 {
    pub mean: StateVec,
    pub cov: Mat4,
}

impl Gaussian4 {
    pub fn new(mean: StateVec, cov: Mat4) -> Self {
        Gaussian4 { mean, cov }
    }

    /// Point mass: zero covariance. Valid as an input to the linear dynamics
    /// propagation; operations that factorize the covariance will reject it.
    pub fn point(mean: StateVec) -> Self {
        Gaussian4 {
            mean,
            cov: [[0.0; 4]; 4],
        }
    }

    /// Covariance scaled by a positive factor, mean unchanged.
    pub fn scale_cov(&self, xi: f64) -> Self {
        Gaussian4 {
            mean: self.mean,
            cov: mat4_scale(&self.cov, xi),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for row in &self.cov {
            for v in row {
                if !v.is_finite() {
                    return Err(Error::Numeric("covariance has non-finite entries".into()));
                }
            }
        }
        if !mat4_is_symmetric(&self.cov, 1e-9) {
            return Err(Error::Numeric("covariance is not symmetric".into()));
        }
        Chol4::new(&self.cov).map(|_| ())
    }
}

/// Squared Mahalanobis distance of `y` from the Gaussian `g`.
pub fn mahalanobis_sq(g: &Gaussian4, y: &StateVec) -> Result<f64> {
    let chol = Chol4::new(&g.cov)?;
    let gm = g.mean.to_array();
    let ya = y.to_array();
    let d = [ya[0] - gm[0], ya[1] - gm[1], ya[2] - gm[2], ya[3] - gm[3]];
    Ok(chol.mahalanobis_sq(&d))
}

/// Draw one sample from `g` (mean + L z with Sigma = L L').
pub fn sample_gaussian(g: &Gaussian4, rng: &mut RngStream) -> Result<StateVec> {
    let chol = Chol4::new(&g.cov)?;
    let z = rng.normals4();
    Ok(StateVec::from_array(chol.affine(&g.mean.to_array(), &z)))
}

/// Elliptical region {y : (y - mean)' cov^-1 (y - mean) <= threshold}.
/// `threshold` may be +inf, which denotes the whole space.
#[derive(Debug, Clone)]
pub struct PredictionRegion {
    pub center: Gaussian4,
    pub threshold: f64,
}

impl PredictionRegion {
    pub fn is_unbounded(&self) -> bool {
        self.threshold.is_infinite()
    }

    /// Membership test. For an unbounded region every point qualifies.
    pub fn contains(&self, y: &StateVec) -> Result<bool> {
        if self.is_unbounded() {
            return Ok(true);
        }
        Ok(mahalanobis_sq(&self.center, y)? <= self.threshold)
    }
}

/// The (1 - alpha) prediction region of `g`: threshold is the chi-squared
/// quantile with 4 degrees of freedom.
pub fn region_of(g: &Gaussian4, alpha: f64) -> Result<PredictionRegion> {
    let threshold = chi2_quantile(4, alpha)?;
    Ok(PredictionRegion {
        center: g.clone(),
        threshold,
    })
}

/// Shadow of a prediction region on the position plane.
#[derive(Debug, Clone)]
pub enum PositionShadow {
    /// {q : (q - center)' shape^-1 (q - center) <= 1}
    Bounded { center: [f64; 2], shape: Mat2 },
    /// Unbounded region: intersects everything.
    Unbounded,
}

impl PositionShadow {
    /// Membership of a planar point; errors on a degenerate shape.
    pub fn contains(&self, q: &[f64; 2]) -> Result<bool> {
        match self {
            PositionShadow::Unbounded => Ok(true),
            PositionShadow::Bounded { center, shape } => {
                let inv = mat2_inverse(shape)?;
                Ok(mat2_quadform(&inv, center, q) <= 1.0)
            }
        }
    }
}

/// Exact orthogonal projection of the region onto the position plane.
///
/// For {y : (y - mu)' Sigma^-1 (y - mu) <= T} the shadow is the ellipse
/// {q : (q - mu_p)' (T * Sigma_pp)^-1 (q - mu_p) <= 1} where Sigma_pp is the
/// position block of Sigma -- the marginal block, not its Schur complement,
/// because a shadow is wider than a slice.
pub fn ellipse_position_projection(region: &PredictionRegion) -> PositionShadow {
    if region.is_unbounded() {
        return PositionShadow::Unbounded;
    }
    let t = region.threshold;
    let cov = &region.center.cov;
    PositionShadow::Bounded {
        center: region.center.mean.position(),
        shape: [
            [t * cov[0][0], t * cov[0][1]],
            [t * cov[1][0], t * cov[1][1]],
        ],
    }
}

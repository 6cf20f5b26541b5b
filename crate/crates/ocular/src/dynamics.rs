//! Stochastic planar double integrator with a hidden terrain-dependent mode.
//!
//! The true system is hybrid: on slippery terrain the velocity carries 1.3x
//! farther into position and commanded acceleration bites 1.3x harder. The
//! model used for prediction is always the nominal linear system -- that gap
//! is exactly what the conformal layer upstream has to absorb. Which mode
//! applies is decided by the terrain under the *pre-step* position, and
//! actions are clamped at this boundary before integration, in both the true
//! step and the model step.

use crate::math::mat::{
    mat4_add, mat4_identity, mat4_mul, mat4_mul_vec, mat4_scale, mat4_transpose, mat42_mul_vec,
    Mat4, Mat42,
};
use crate::math::rng::RngStream;
use crate::math::state::{ActionVec, StateVec};
use crate::math::Gaussian4;

/// Terrain mode of the true dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionType {
    Nominal,
    Slippery,
}

impl RegionType {
    pub fn as_u8(self) -> u8 {
        match self {
            RegionType::Nominal => 0,
            RegionType::Slippery => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(RegionType::Nominal),
            1 => Some(RegionType::Slippery),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicsParams {
    /// Integration step, seconds.
    pub dt: f64,
    /// Isotropic process-noise variance added to every state component.
    pub q_scale: f64,
    /// Multiplier the slippery mode applies to the velocity-to-position
    /// coupling and to the input matrix.
    pub shift_factor: f64,
    /// Componentwise action bound.
    pub a_max: f64,
}

impl Default for DynamicsParams {
    fn default() -> Self {
        DynamicsParams {
            dt: 0.05,
            q_scale: 2e-5,
            shift_factor: 1.3,
            a_max: 0.9,
        }
    }
}

impl DynamicsParams {
    /// Nominal transition matrix: positions integrate velocity over dt.
    pub fn a_nominal(&self) -> Mat4 {
        let mut a = mat4_identity();
        a[0][2] = self.dt;
        a[1][3] = self.dt;
        a
    }

    /// Nominal input matrix of the double integrator.
    pub fn b_nominal(&self) -> Mat42 {
        let h = 0.5 * self.dt * self.dt;
        [[h, 0.0], [0.0, h], [self.dt, 0.0], [0.0, self.dt]]
    }

    /// Transition matrix for a terrain mode. Slippery scales only the
    /// velocity-to-position block.
    pub fn a_for(&self, region: RegionType) -> Mat4 {
        let mut a = self.a_nominal();
        if region == RegionType::Slippery {
            a[0][2] *= self.shift_factor;
            a[1][3] *= self.shift_factor;
        }
        a
    }

    /// Input matrix for a terrain mode. Slippery scales the whole matrix.
    pub fn b_for(&self, region: RegionType) -> Mat42 {
        let mut b = self.b_nominal();
        if region == RegionType::Slippery {
            for row in &mut b {
                row[0] *= self.shift_factor;
                row[1] *= self.shift_factor;
            }
        }
        b
    }

    /// Process noise covariance Q = q_scale * I.
    pub fn q(&self) -> Mat4 {
        mat4_scale(&mat4_identity(), self.q_scale)
    }
}

fn linear_step(a: &Mat4, b: &Mat42, s: &StateVec, u: &ActionVec) -> [f64; 4] {
    let asv = mat4_mul_vec(a, &s.to_array());
    let bu = mat42_mul_vec(b, &u.to_array());
    [asv[0] + bu[0], asv[1] + bu[1], asv[2] + bu[2], asv[3] + bu[3]]
}

/// One draw of the true hybrid dynamics in the given terrain mode.
pub fn step_true(
    s: &StateVec,
    action: &ActionVec,
    region: RegionType,
    params: &DynamicsParams,
    rng: &mut RngStream,
) -> StateVec {
    let u = action.clamp(params.a_max);
    let mean = linear_step(&params.a_for(region), &params.b_for(region), s, &u);
    let w = rng.normals4();
    let sd = params.q_scale.sqrt();
    StateVec::from_array([
        mean[0] + sd * w[0],
        mean[1] + sd * w[1],
        mean[2] + sd * w[2],
        mean[3] + sd * w[3],
    ])
}

/// Exact next-state distribution of the true dynamics (for oracles and
/// Monte-Carlo checks): N(A_r s + B_r u, Q).
pub fn exact_onestep_distribution(
    s: &StateVec,
    action: &ActionVec,
    region: RegionType,
    params: &DynamicsParams,
) -> Gaussian4 {
    let u = action.clamp(params.a_max);
    let mean = linear_step(&params.a_for(region), &params.b_for(region), s, &u);
    Gaussian4::new(StateVec::from_array(mean), params.q())
}

/// Model prediction: the *nominal* linear system pushed through a Gaussian
/// belief. cov' = A cov A' + Q. The model never sees the terrain mode.
pub fn step_model(g: &Gaussian4, action: &ActionVec, params: &DynamicsParams) -> Gaussian4 {
    let u = action.clamp(params.a_max);
    let a = params.a_nominal();
    let mean = linear_step(&a, &params.b_nominal(), &g.mean, &u);
    let cov = mat4_add(&mat4_mul(&mat4_mul(&a, &g.cov), &mat4_transpose(&a)), &params.q());
    Gaussian4::new(StateVec::from_array(mean), cov)
}

/// Model prediction from a known point state: N(A s + B u, Q).
pub fn predict_point(s: &StateVec, action: &ActionVec, params: &DynamicsParams) -> Gaussian4 {
    step_model(&Gaussian4::point(*s), action, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> DynamicsParams {
        DynamicsParams::default()
    }

    #[test]
    fn nominal_coasting_moves_dt_times_velocity() {
        let g = exact_onestep_distribution(
            &StateVec::new(0.0, 0.0, 1.0, 0.0),
            &ActionVec::zero(),
            RegionType::Nominal,
            &p(),
        );
        assert!((g.mean.px - 0.05).abs() < 1e-15);
        assert_eq!(g.mean.py, 0.0);
        assert_eq!(g.mean.vx, 1.0);
        assert_eq!(g.mean.vy, 0.0);
    }

    #[test]
    fn slippery_coasting_overshoots_by_the_shift_factor() {
        let g = exact_onestep_distribution(
            &StateVec::new(0.0, 0.0, 1.0, 0.0),
            &ActionVec::zero(),
            RegionType::Slippery,
            &p(),
        );
        assert!((g.mean.px - 0.065).abs() < 1e-15);
        assert_eq!(g.mean.vx, 1.0);
    }

    #[test]
    fn nominal_acceleration_from_rest() {
        let g = exact_onestep_distribution(
            &StateVec::new(0.0, 0.0, 0.0, 0.0),
            &ActionVec::new(0.9, 0.0),
            RegionType::Nominal,
            &p(),
        );
        // dt^2/2 * a and dt * a.
        assert!((g.mean.px - 0.001125).abs() < 1e-15);
        assert!((g.mean.vx - 0.045).abs() < 1e-15);
        assert_eq!(g.mean.py, 0.0);
        assert_eq!(g.mean.vy, 0.0);
    }

    #[test]
    fn slippery_scales_the_input_matrix_too() {
        let g = exact_onestep_distribution(
            &StateVec::new(0.0, 0.0, 0.0, 0.0),
            &ActionVec::new(0.9, 0.0),
            RegionType::Slippery,
            &p(),
        );
        assert!((g.mean.px - 1.3 * 0.001125).abs() < 1e-15);
        assert!((g.mean.vx - 1.3 * 0.045).abs() < 1e-15);
    }

    #[test]
    fn actions_clamp_before_integration() {
        let wild = exact_onestep_distribution(
            &StateVec::new(0.0, 0.0, 0.0, 0.0),
            &ActionVec::new(5.0, -3.0),
            RegionType::Nominal,
            &p(),
        );
        let clamped = exact_onestep_distribution(
            &StateVec::new(0.0, 0.0, 0.0, 0.0),
            &ActionVec::new(0.9, -0.9),
            RegionType::Nominal,
            &p(),
        );
        assert_eq!(wild.mean, clamped.mean);
    }

    #[test]
    fn model_covariance_propagation_identity_input() {
        // With cov = I: cov' = A A' + Q, whose position diagonal is
        // 1 + dt^2 + q and position-velocity coupling is dt.
        let g0 = Gaussian4::new(
            StateVec::new(0.0, 0.0, 0.0, 0.0),
            crate::math::mat::mat4_identity(),
        );
        let g = step_model(&g0, &ActionVec::zero(), &p());
        let dt = 0.05;
        let q = 2e-5;
        assert!((g.cov[0][0] - (1.0 + dt * dt + q)).abs() < 1e-15);
        assert!((g.cov[0][2] - dt).abs() < 1e-15);
        assert!((g.cov[2][2] - (1.0 + q)).abs() < 1e-15);
        assert_eq!(g.cov[0][1], 0.0);
    }

    #[test]
    fn point_prediction_covariance_is_exactly_q() {
        let g = predict_point(
            &StateVec::new(0.3, -0.2, 0.5, 0.1),
            &ActionVec::new(0.1, 0.2),
            &p(),
        );
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 2e-5 } else { 0.0 };
                assert_eq!(g.cov[i][j], want);
            }
        }
    }

    #[test]
    fn model_ignores_terrain_by_construction() {
        // The model prediction from a slippery start state must equal the
        // nominal exact distribution, not the slippery one.
        let s = StateVec::new(0.0, 0.0, 1.2, -0.7);
        let a = ActionVec::new(0.4, 0.4);
        let model = predict_point(&s, &a, &p());
        let nominal = exact_onestep_distribution(&s, &a, RegionType::Nominal, &p());
        let slippery = exact_onestep_distribution(&s, &a, RegionType::Slippery, &p());
        assert_eq!(model.mean, nominal.mean);
        assert_ne!(model.mean, slippery.mean);
    }

    #[test]
    fn true_step_moments_match_exact_distribution() {
        let s = StateVec::new(0.1, 0.2, 0.8, -0.5);
        let a = ActionVec::new(0.3, -0.6);
        let exact = exact_onestep_distribution(&s, &a, RegionType::Slippery, &p());
        let mut rng = RngStream::new(2024);
        let n = 100_000;
        let mut mean = [0.0f64; 4];
        let mut var = [0.0f64; 4];
        let draws: Vec<[f64; 4]> = (0..n)
            .map(|_| step_true(&s, &a, RegionType::Slippery, &p(), &mut rng).to_array())
            .collect();
        for d in &draws {
            for i in 0..4 {
                mean[i] += d[i];
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        for d in &draws {
            for i in 0..4 {
                var[i] += (d[i] - mean[i]) * (d[i] - mean[i]);
            }
        }
        let em = exact.mean.to_array();
        let sd = (2e-5f64).sqrt(); // ~4.5e-3
        let mean_tol = 5.0 * sd / (n as f64).sqrt();
        for i in 0..4 {
            assert!((mean[i] - em[i]).abs() < mean_tol, "mean[{i}]");
            let v = var[i] / n as f64;
            assert!((v - 2e-5).abs() < 2e-5 * 0.05, "var[{i}] = {v}");
        }
    }

    #[test]
    fn true_step_is_deterministic_given_the_stream() {
        let s = StateVec::new(0.0, 0.0, 1.0, 1.0);
        let a = ActionVec::new(0.2, 0.1);
        let mut r1 = RngStream::new(5);
        let mut r2 = RngStream::new(5);
        let x = step_true(&s, &a, RegionType::Nominal, &p(), &mut r1);
        let y = step_true(&s, &a, RegionType::Nominal, &p(), &mut r2);
        assert_eq!(x, y);
    }
}

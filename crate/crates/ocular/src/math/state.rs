//! Planar second-order state and action vectors.

/// State of the planar double integrator: position and velocity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateVec {
    pub px: f64,
    pub py: f64,
    pub vx: f64,
    pub vy: f64,
}

impl StateVec {
    pub fn new(px: f64, py: f64, vx: f64, vy: f64) -> Self {
        StateVec { px, py, vx, vy }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        StateVec::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.px, self.py, self.vx, self.vy]
    }

    pub fn position(self) -> [f64; 2] {
        [self.px, self.py]
    }

    pub fn velocity(self) -> [f64; 2] {
        [self.vx, self.vy]
    }
}

/// Planar acceleration command.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionVec {
    pub ax: f64,
    pub ay: f64,
}

impl ActionVec {
    pub fn new(ax: f64, ay: f64) -> Self {
        ActionVec { ax, ay }
    }

    pub fn zero() -> Self {
        ActionVec { ax: 0.0, ay: 0.0 }
    }

    /// Componentwise clamp to [-bound, bound].
    pub fn clamp(self, bound: f64) -> Self {
        ActionVec {
            ax: self.ax.clamp(-bound, bound),
            ay: self.ay.clamp(-bound, bound),
        }
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.ax, self.ay]
    }
}

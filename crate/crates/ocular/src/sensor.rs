//! Planar polar semantic sensing.
//!
//! The sensor sweeps a cone of half-angle fov/2 around the heading and
//! samples the map at polar bin centers: angle bin j is centered at
//! heading − fov/2 + (j+0.5)·fov/n_angles, depth bin i at range
//! (i+0.5)·max_range/n_depths. Each angle column is marched near to far; the
//! first Occupied sample is kept (obstacles appear only by their visible
//! boundary) and everything farther in that column becomes Unknown. Unknown
//! samples — including points outside the map — never occlude.
//!
//! The same ray-march serves two purposes: sensing the ground-truth map
//! during execution, and re-rendering a hypothetical footprint from the
//! partially built map at a predicted future pose during planning.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::world::{GridMap, SemanticClass, N_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorParams {
    /// Field of view in radians.
    pub fov: f64,
    /// Maximum sensed range in meters.
    pub max_range: f64,
    pub n_angles: usize,
    pub n_depths: usize,
}

impl Default for SensorParams {
    fn default() -> Self {
        SensorParams {
            fov: 2.0 * std::f64::consts::PI / 3.0,
            max_range: 0.65,
            n_angles: 240,
            n_depths: 80,
        }
    }
}

impl SensorParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.fov > 0.0 && self.fov < 2.0 * std::f64::consts::PI) {
            return Err(Error::Config(format!(
                "sensor fov must lie in (0, 2*pi), got {}",
                self.fov
            )));
        }
        if !(self.max_range > 0.0) || !self.max_range.is_finite() {
            return Err(Error::Config(format!(
                "sensor max range must be positive, got {}",
                self.max_range
            )));
        }
        if self.n_angles == 0 || self.n_depths == 0 {
            return Err(Error::Config("sensor resolution must be at least 1x1".into()));
        }
        Ok(())
    }

    /// Center angle of column j relative to the world frame.
    pub fn angle_of(&self, heading: f64, j: usize) -> f64 {
        heading - 0.5 * self.fov + (j as f64 + 0.5) * self.fov / self.n_angles as f64
    }

    /// Center range of depth bin i.
    pub fn depth_of(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.max_range / self.n_depths as f64
    }
}

/// One sensed frame: `n_angles` × `n_depths` semantic classes, stored
/// angle-major (`classes[j * n_depths + i]`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticFootprint {
    pub n_angles: usize,
    pub n_depths: usize,
    pub classes: Vec<SemanticClass>,
}

const FOOTPRINT_MAGIC: &[u8; 4] = b"OFPT";

impl SemanticFootprint {
    pub fn get(&self, j: usize, i: usize) -> SemanticClass {
        self.classes[j * self.n_depths + i]
    }

    /// One-hot encoding with exactly one 1 per pixel, flattened as
    /// [class][angle][depth].
    pub fn one_hot(&self) -> Vec<f64> {
        let hw = self.n_angles * self.n_depths;
        let mut out = vec![0.0; N_CLASSES * hw];
        for (px, &c) in self.classes.iter().enumerate() {
            out[(c as usize) * hw + px] = 1.0;
        }
        out
    }

    /// World-frame sample point and class of every pixel, for map building.
    pub fn world_pixels<'a>(
        &'a self,
        pose: &[f64; 2],
        heading: f64,
        params: &SensorParams,
    ) -> impl Iterator<Item = ([f64; 2], SemanticClass)> + 'a {
        debug_assert_eq!(self.n_angles, params.n_angles);
        debug_assert_eq!(self.n_depths, params.n_depths);
        let params = *params;
        let pose = *pose;
        (0..self.n_angles).flat_map(move |j| {
            let (sin_t, cos_t) = params.angle_of(heading, j).sin_cos();
            (0..self.n_depths).map(move |i| {
                let r = params.depth_of(i);
                let p = [pose[0] + r * cos_t, pose[1] + r * sin_t];
                (p, self.get(j, i))
            })
        })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        if self.n_angles > u16::MAX as usize || self.n_depths > u16::MAX as usize {
            return Err(Error::Format(format!(
                "footprint dims {}x{} exceed the u16 file format",
                self.n_angles, self.n_depths
            )));
        }
        w.write_all(FOOTPRINT_MAGIC)?;
        w.write_all(&(self.n_angles as u16).to_le_bytes())?;
        w.write_all(&(self.n_depths as u16).to_le_bytes())?;
        let bytes: Vec<u8> = self.classes.iter().map(|&c| c as u8).collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != FOOTPRINT_MAGIC {
            return Err(Error::Format(format!(
                "bad footprint magic {magic:?}, expected {FOOTPRINT_MAGIC:?}"
            )));
        }
        let mut buf2 = [0u8; 2];
        r.read_exact(&mut buf2)?;
        let n_angles = u16::from_le_bytes(buf2) as usize;
        r.read_exact(&mut buf2)?;
        let n_depths = u16::from_le_bytes(buf2) as usize;
        if n_angles == 0 || n_depths == 0 {
            return Err(Error::Format("footprint dims must be positive".into()));
        }
        let mut bytes = vec![0u8; n_angles * n_depths];
        r.read_exact(&mut bytes)?;
        let classes = bytes
            .iter()
            .map(|&b| {
                SemanticClass::from_u8(b)
                    .ok_or_else(|| Error::Format(format!("bad class byte {b} in footprint")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SemanticFootprint {
            n_angles,
            n_depths,
            classes,
        })
    }
}

/// Direction of motion: atan2 of the velocity, or the previous heading when
/// the robot is essentially at rest.
pub fn heading_from_velocity(v: &[f64; 2], fallback: f64) -> f64 {
    if (v[0] * v[0] + v[1] * v[1]).sqrt() >= 1e-6 {
        v[1].atan2(v[0])
    } else {
        fallback
    }
}

fn raymarch(map: &GridMap, pose: &[f64; 2], heading: f64, params: &SensorParams) -> SemanticFootprint {
    let mut classes = vec![SemanticClass::Unknown; params.n_angles * params.n_depths];
    for j in 0..params.n_angles {
        let (sin_t, cos_t) = params.angle_of(heading, j).sin_cos();
        for i in 0..params.n_depths {
            let r = params.depth_of(i);
            let p = [pose[0] + r * cos_t, pose[1] + r * sin_t];
            let cls = map.class_at(&p);
            classes[j * params.n_depths + i] = cls;
            if cls == SemanticClass::Occupied {
                // Everything behind the visible boundary stays Unknown.
                break;
            }
        }
    }
    SemanticFootprint {
        n_angles: params.n_angles,
        n_depths: params.n_depths,
        classes,
    }
}

/// Sense the ground-truth map from a pose and heading.
pub fn sense(map: &GridMap, pose: &[f64; 2], heading: f64, params: &SensorParams) -> SemanticFootprint {
    raymarch(map, pose, heading, params)
}

/// Render the footprint a sensor *would* see at a predicted pose, reading the
/// partially built map instead of the ground truth. Virgin (Unknown) cells
/// show up as Unknown pixels and do not occlude.
pub fn synthetic_footprint(
    built: &GridMap,
    pose: &[f64; 2],
    heading: f64,
    params: &SensorParams,
) -> SemanticFootprint {
    raymarch(built, pose, heading, params)
}

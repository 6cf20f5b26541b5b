//! Calibration-set and test-case generation.
//!
//! Records are produced by enumerating a state-action lattice over the map's
//! free bounding box: positions `lin(min, max, n)` per axis, velocities over
//! [-1.8, 1.8], accelerations over [-0.9, 0.9]. Each lattice point whose start
//! cell is not Occupied is sensed, stepped once under the true dynamics, and
//! kept only if the landing position is also collision-free.
//!
//! Lattice coordinates and simulated next states are rounded to f32 at
//! generation time so that an in-memory dataset and its serialized form are
//! the same values bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::dynamics::{step_true, DynamicsParams, RegionType};
use crate::error::{Error, Result};
use crate::math::{ActionVec, RngStream, StateVec};
use crate::sensor::{heading_from_velocity, sense, SemanticFootprint, SensorParams};
use crate::world::{GridMap, SemanticClass, N_CLASSES};

/// Velocity lattice range per axis, m/s.
pub const VEL_RANGE: [f64; 2] = [-1.8, 1.8];
/// Acceleration lattice range per axis, m/s^2.
pub const ACC_RANGE: [f64; 2] = [-0.9, 0.9];

pub const OCAL_MAGIC: &[u8; 4] = b"OCAL";
pub const OCAL_VERSION: u32 = 1;
pub const OPRT_MAGIC: &[u8; 4] = b"OPRT";
pub const OPRT_VERSION: u32 = 1;

/// Lattice resolution: `n_px * n_py` positions, `n_v^2` velocities,
/// `n_a^2` accelerations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    pub n_px: usize,
    pub n_py: usize,
    pub n_v: usize,
    pub n_a: usize,
}

impl GridSpec {
    /// Dense grid used to build calibration sets.
    pub fn calibration() -> Self {
        GridSpec {
            n_px: 16,
            n_py: 16,
            n_v: 8,
            n_a: 4,
        }
    }

    /// Coarser grid used for held-out test cases.
    pub fn test() -> Self {
        GridSpec {
            n_px: 8,
            n_py: 8,
            n_v: 4,
            n_a: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_px < 1 || self.n_py < 1 || self.n_v < 1 || self.n_a < 1 {
            return Err(Error::Config(format!(
                "grid axes must all be >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Total lattice size before any collision filtering.
    pub fn n_lattice(&self) -> usize {
        self.n_px * self.n_py * self.n_v * self.n_v * self.n_a * self.n_a
    }
}

/// One calibration transition: start state, action, the observation taken at
/// the start pose, the simulated next state, and the terrain mode the start
/// cell actually has (used for labeling, never by the model).
#[derive(Debug, Clone)]
pub struct CalRecord {
    pub p: [f64; 2],
    pub v: [f64; 2],
    pub a: [f64; 2],
    pub s_next: StateVec,
    pub region: RegionType,
    pub footprint: SemanticFootprint,
}

impl CalRecord {
    pub fn state(&self) -> StateVec {
        StateVec::new(self.p[0], self.p[1], self.v[0], self.v[1])
    }

    pub fn action(&self) -> ActionVec {
        ActionVec::new(self.a[0], self.a[1])
    }
}

/// A test case: the transition record plus Monte-Carlo draws of the true
/// next state from the same start.
#[derive(Debug, Clone)]
pub struct TestCase {
    pub record: CalRecord,
    pub particles: Vec<StateVec>,
}

/// `n` evenly spaced points on [lo, hi] inclusive; a single point sits at the
/// interval midpoint.
pub fn lin(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

fn snap(x: f64) -> f64 {
    x as f32 as f64
}

struct Lattice {
    xs: Vec<f64>,
    ys: Vec<f64>,
    vs: Vec<f64>,
    accs: Vec<f64>,
    grid: GridSpec,
}

impl Lattice {
    fn new(map: &GridMap, grid: GridSpec) -> Option<Self> {
        let (lo, hi) = map.free_center_bounds()?;
        Some(Lattice {
            xs: lin(lo[0], hi[0], grid.n_px),
            ys: lin(lo[1], hi[1], grid.n_py),
            vs: lin(VEL_RANGE[0], VEL_RANGE[1], grid.n_v),
            accs: lin(ACC_RANGE[0], ACC_RANGE[1], grid.n_a),
            grid,
        })
    }

    /// Decompose a flat index in position-major, then velocity, then
    /// acceleration order.
    fn point(&self, idx: usize) -> ([f64; 2], [f64; 2], [f64; 2]) {
        let g = &self.grid;
        let mut rest = idx;
        let iay = rest % g.n_a;
        rest /= g.n_a;
        let iax = rest % g.n_a;
        rest /= g.n_a;
        let ivy = rest % g.n_v;
        rest /= g.n_v;
        let ivx = rest % g.n_v;
        rest /= g.n_v;
        let ipy = rest % g.n_py;
        rest /= g.n_py;
        let ipx = rest;
        (
            [self.xs[ipx], self.ys[ipy]],
            [self.vs[ivx], self.vs[ivy]],
            [self.accs[iax], self.accs[iay]],
        )
    }
}

fn make_record(
    map: &GridMap,
    lattice: &Lattice,
    idx: usize,
    dyn_params: &DynamicsParams,
    sensor_params: &SensorParams,
    seed: u64,
    n_particles: usize,
) -> Option<TestCase> {
    let (p_raw, v_raw, a_raw) = lattice.point(idx);
    let p = [snap(p_raw[0]), snap(p_raw[1])];
    let v = [snap(v_raw[0]), snap(v_raw[1])];
    let a = [snap(a_raw[0]), snap(a_raw[1])];
    if map.class_at(&p) == SemanticClass::Occupied {
        return None;
    }
    let heading = heading_from_velocity(&v, 0.0);
    let footprint = sense(map, &p, heading, sensor_params);
    let region = map.region_type_at(&p);
    let state = StateVec::new(p[0], p[1], v[0], v[1]);
    let action = ActionVec::new(a[0], a[1]);
    let mut rng = RngStream::substream(seed, idx as u64);
    let raw_next = step_true(&state, &action, region, dyn_params, &mut rng);
    let n = raw_next.to_array();
    let s_next = StateVec::from_array([snap(n[0]), snap(n[1]), snap(n[2]), snap(n[3])]);
    if map.class_at(&s_next.position()) == SemanticClass::Occupied {
        return None;
    }
    let particles = (0..n_particles)
        .map(|_| {
            let d = step_true(&state, &action, region, dyn_params, &mut rng).to_array();
            StateVec::from_array([snap(d[0]), snap(d[1]), snap(d[2]), snap(d[3])])
        })
        .collect();
    Some(TestCase {
        record: CalRecord {
            p,
            v,
            a,
            s_next,
            region,
            footprint,
        },
        particles,
    })
}

fn generate(
    map: &GridMap,
    grid: GridSpec,
    dyn_params: &DynamicsParams,
    sensor_params: &SensorParams,
    seed: u64,
    n_particles: usize,
) -> Result<Vec<TestCase>> {
    grid.validate()?;
    sensor_params.validate()?;
    let lattice = match Lattice::new(map, grid) {
        Some(l) => l,
        None => return Ok(Vec::new()),
    };
    // One RNG substream per lattice index: records are independent of both
    // scheduling and of which other lattice points got filtered out.
    let cases: Vec<Option<TestCase>> = (0..grid.n_lattice())
        .into_par_iter()
        .map(|idx| make_record(map, &lattice, idx, dyn_params, sensor_params, seed, n_particles))
        .collect();
    Ok(cases.into_iter().flatten().collect())
}

/// Enumerate the lattice, discard collisions, and return surviving
/// transitions in lattice order.
pub fn generate_calibration(
    map: &GridMap,
    grid: GridSpec,
    dyn_params: &DynamicsParams,
    sensor_params: &SensorParams,
    seed: u64,
) -> Result<Vec<CalRecord>> {
    Ok(generate(map, grid, dyn_params, sensor_params, seed, 0)?
        .into_iter()
        .map(|c| c.record)
        .collect())
}

/// As [`generate_calibration`], plus `n_particles` extra true-dynamics draws
/// per surviving case for Monte-Carlo coverage estimation.
pub fn generate_testcases(
    map: &GridMap,
    grid: GridSpec,
    dyn_params: &DynamicsParams,
    sensor_params: &SensorParams,
    seed: u64,
    n_particles: usize,
) -> Result<Vec<TestCase>> {
    generate(map, grid, dyn_params, sensor_params, seed, n_particles)
}

/// Concatenate datasets in argument order. All lists must share footprint
/// dimensions.
pub fn merge_datasets(lists: &[Vec<CalRecord>]) -> Result<Vec<CalRecord>> {
    let mut dims: Option<(usize, usize)> = None;
    for list in lists {
        if let Some(rec) = list.first() {
            let d = (rec.footprint.n_angles, rec.footprint.n_depths);
            match dims {
                None => dims = Some(d),
                Some(prev) if prev != d => {
                    return Err(Error::Config(format!(
                        "cannot merge datasets with footprint dims {}x{} and {}x{}",
                        prev.0, prev.1, d.0, d.1
                    )));
                }
                Some(_) => {}
            }
        }
    }
    Ok(lists.iter().flat_map(|l| l.iter().cloned()).collect())
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_u16(w: &mut impl Write, v: u16) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f32(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&(v as f32).to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn get_f32(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b) as f64)
}

/// Serialize records: header (magic, version, count, class count, footprint
/// dims), then per record p, v, a, s_next as f32, a region byte, and the raw
/// footprint class bytes. Everything little-endian.
pub fn write_dataset(w: &mut impl Write, records: &[CalRecord]) -> Result<()> {
    let (n_angles, n_depths) = records
        .first()
        .map(|r| (r.footprint.n_angles, r.footprint.n_depths))
        .unwrap_or((0, 0));
    w.write_all(OCAL_MAGIC)?;
    put_u32(w, OCAL_VERSION)?;
    put_u32(w, records.len() as u32)?;
    put_u32(w, N_CLASSES as u32)?;
    put_u16(w, n_angles as u16)?;
    put_u16(w, n_depths as u16)?;
    for rec in records {
        if (rec.footprint.n_angles, rec.footprint.n_depths) != (n_angles, n_depths) {
            return Err(Error::Config(
                "dataset mixes footprint dimensions".to_string(),
            ));
        }
        for x in [rec.p[0], rec.p[1], rec.v[0], rec.v[1], rec.a[0], rec.a[1]] {
            put_f32(w, x)?;
        }
        for x in rec.s_next.to_array() {
            put_f32(w, x)?;
        }
        w.write_all(&[rec.region.as_u8()])?;
        for &c in &rec.footprint.classes {
            w.write_all(&[c as u8])?;
        }
    }
    Ok(())
}

pub fn read_dataset(r: &mut impl Read) -> Result<Vec<CalRecord>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != OCAL_MAGIC {
        return Err(Error::Format("not a calibration dataset file".to_string()));
    }
    let version = get_u32(r)?;
    if version != OCAL_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {version}"
        )));
    }
    let count = get_u32(r)? as usize;
    let m = get_u32(r)? as usize;
    if count > 0 && m != N_CLASSES {
        return Err(Error::Format(format!(
            "dataset declares {m} semantic classes, expected {N_CLASSES}"
        )));
    }
    let n_angles = get_u16(r)? as usize;
    let n_depths = get_u16(r)? as usize;
    if count > 0 && (n_angles == 0 || n_depths == 0) {
        return Err(Error::Format("dataset footprint dims are zero".to_string()));
    }
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let p = [get_f32(r)?, get_f32(r)?];
        let v = [get_f32(r)?, get_f32(r)?];
        let a = [get_f32(r)?, get_f32(r)?];
        let s_next = StateVec::from_array([get_f32(r)?, get_f32(r)?, get_f32(r)?, get_f32(r)?]);
        let mut region_byte = [0u8; 1];
        r.read_exact(&mut region_byte)?;
        let region = RegionType::from_u8(region_byte[0]).ok_or_else(|| {
            Error::Format(format!("bad region byte {}", region_byte[0]))
        })?;
        let mut class_bytes = vec![0u8; n_angles * n_depths];
        r.read_exact(&mut class_bytes)?;
        let mut classes = Vec::with_capacity(class_bytes.len());
        for b in class_bytes {
            classes.push(
                SemanticClass::from_u8(b)
                    .ok_or_else(|| Error::Format(format!("bad class byte {b}")))?,
            );
        }
        records.push(CalRecord {
            p,
            v,
            a,
            s_next,
            region,
            footprint: SemanticFootprint {
                n_angles,
                n_depths,
                classes,
            },
        });
    }
    let mut tail = [0u8; 1];
    if r.read(&mut tail)? != 0 {
        return Err(Error::Format(
            "trailing bytes after last dataset record".to_string(),
        ));
    }
    Ok(records)
}

pub fn save_dataset(path: &Path, records: &[CalRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(&mut w, records)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<CalRecord>> {
    read_dataset(&mut BufReader::new(File::open(path)?))
}

/// Serialize the Monte-Carlo particle sets of a test-case list (one block of
/// f32 state vectors per case, uniform particle count).
pub fn write_particles(w: &mut impl Write, cases: &[TestCase]) -> Result<()> {
    let n_particles = cases.first().map(|c| c.particles.len()).unwrap_or(0);
    w.write_all(OPRT_MAGIC)?;
    put_u32(w, OPRT_VERSION)?;
    put_u32(w, cases.len() as u32)?;
    put_u32(w, n_particles as u32)?;
    for case in cases {
        if case.particles.len() != n_particles {
            return Err(Error::Config(
                "test cases have unequal particle counts".to_string(),
            ));
        }
        for s in &case.particles {
            for x in s.to_array() {
                put_f32(w, x)?;
            }
        }
    }
    Ok(())
}

pub fn read_particles(r: &mut impl Read) -> Result<Vec<Vec<StateVec>>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != OPRT_MAGIC {
        return Err(Error::Format("not a particle file".to_string()));
    }
    let version = get_u32(r)?;
    if version != OPRT_VERSION {
        return Err(Error::Format(format!(
            "unsupported particle file version {version}"
        )));
    }
    let n_cases = get_u32(r)? as usize;
    let n_particles = get_u32(r)? as usize;
    let mut out = Vec::with_capacity(n_cases);
    for _ in 0..n_cases {
        let mut ps = Vec::with_capacity(n_particles);
        for _ in 0..n_particles {
            ps.push(StateVec::from_array([
                get_f32(r)?,
                get_f32(r)?,
                get_f32(r)?,
                get_f32(r)?,
            ]));
        }
        out.push(ps);
    }
    let mut tail = [0u8; 1];
    if r.read(&mut tail)? != 0 {
        return Err(Error::Format(
            "trailing bytes after last particle block".to_string(),
        ));
    }
    Ok(out)
}

pub fn save_particles(path: &Path, cases: &[TestCase]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_particles(&mut w, cases)?;
    w.flush()?;
    Ok(())
}

pub fn load_particles(path: &Path) -> Result<Vec<Vec<StateVec>>> {
    read_particles(&mut BufReader::new(File::open(path)?))
}

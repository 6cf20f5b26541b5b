//! Semantic grid worlds: ground-truth maps, vote-based map building, and
//! geometric queries against cell classes.
//!
//! A map is a row-major grid of four-way semantic classes. Internally row
//! index `iy` grows toward +y; the text format lists rows top-down, so the
//! first text row is the row with the largest y. Cells are half-open squares:
//! a world point belongs to the cell found by flooring its offset from the
//! map origin, and anything outside the grid reads as Unknown.
//!
//! The built map is reconstructed online by majority vote over observed
//! footprint pixels. Unknown pixels never vote, ties resolve to the lowest
//! class index, and the per-cell counters make the result independent of the
//! order in which observations arrive.

use std::path::Path;

use crate::dynamics::RegionType;
use crate::error::{Error, Result};
use crate::math::gaussian::PositionShadow;
use crate::math::mat::mat2_inverse;
use crate::sensor::{SemanticFootprint, SensorParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum SemanticClass {
    Occupied = 0,
    Unknown = 1,
    FreeNominal = 2,
    FreeSlippery = 3,
}

impl SemanticClass {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(SemanticClass::Occupied),
            1 => Some(SemanticClass::Unknown),
            2 => Some(SemanticClass::FreeNominal),
            3 => Some(SemanticClass::FreeSlippery),
            _ => None,
        }
    }

    pub fn to_char(self) -> char {
        match self {
            SemanticClass::Occupied => '#',
            SemanticClass::Unknown => '?',
            SemanticClass::FreeNominal => '.',
            SemanticClass::FreeSlippery => '~',
        }
    }

    pub fn from_char(c: char) -> Option<Self> {
        match c {
            '#' => Some(SemanticClass::Occupied),
            '?' => Some(SemanticClass::Unknown),
            '.' => Some(SemanticClass::FreeNominal),
            '~' => Some(SemanticClass::FreeSlippery),
            _ => None,
        }
    }

    pub fn is_free(self) -> bool {
        matches!(self, SemanticClass::FreeNominal | SemanticClass::FreeSlippery)
    }
}

pub const N_CLASSES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct GridMap {
    pub width: usize,
    pub height: usize,
    /// Cell edge length in meters.
    pub cell_size: f64,
    /// World coordinates of the minimum corner of cell (0, 0).
    pub origin: [f64; 2],
    cells: Vec<SemanticClass>,
}

impl GridMap {
    pub fn filled(
        width: usize,
        height: usize,
        cell_size: f64,
        origin: [f64; 2],
        class: SemanticClass,
    ) -> Self {
        GridMap {
            width,
            height,
            cell_size,
            origin,
            cells: vec![class; width * height],
        }
    }

    /// All-Unknown map covering the same world rectangle as `other`, at the
    /// given (usually finer) resolution.
    pub fn unknown_covering(other: &GridMap, cell_size: f64) -> Self {
        let w = ((other.width as f64 * other.cell_size) / cell_size - 0.5).ceil() as usize;
        let h = ((other.height as f64 * other.cell_size) / cell_size - 0.5).ceil() as usize;
        GridMap::filled(w.max(1), h.max(1), cell_size, other.origin, SemanticClass::Unknown)
    }

    pub fn get(&self, ix: usize, iy: usize) -> SemanticClass {
        self.cells[iy * self.width + ix]
    }

    pub fn set(&mut self, ix: usize, iy: usize, class: SemanticClass) {
        self.cells[iy * self.width + ix] = class;
    }

    /// Cell containing a world point, if inside the grid. Cells are half-open
    /// on their upper edges.
    pub fn cell_index(&self, p: &[f64; 2]) -> Option<(usize, usize)> {
        let fx = (p[0] - self.origin[0]) / self.cell_size;
        let fy = (p[1] - self.origin[1]) / self.cell_size;
        let ix = fx.floor();
        let iy = fy.floor();
        if ix < 0.0 || iy < 0.0 || ix >= self.width as f64 || iy >= self.height as f64 {
            None
        } else {
            Some((ix as usize, iy as usize))
        }
    }

    /// Class at a world point; Unknown outside the grid.
    pub fn class_at(&self, p: &[f64; 2]) -> SemanticClass {
        match self.cell_index(p) {
            Some((ix, iy)) => self.get(ix, iy),
            None => SemanticClass::Unknown,
        }
    }

    /// Terrain mode of the true dynamics at a world point: slippery cells are
    /// the shifted mode, everything else is nominal.
    pub fn region_type_at(&self, p: &[f64; 2]) -> RegionType {
        if self.class_at(p) == SemanticClass::FreeSlippery {
            RegionType::Slippery
        } else {
            RegionType::Nominal
        }
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> [f64; 2] {
        [
            self.origin[0] + (ix as f64 + 0.5) * self.cell_size,
            self.origin[1] + (iy as f64 + 0.5) * self.cell_size,
        ]
    }

    pub fn cells(&self) -> &[SemanticClass] {
        &self.cells
    }

    /// Bounding box over the centers of free (nominal or slippery) cells:
    /// (min corner, max corner). None if the map has no free cells.
    pub fn free_center_bounds(&self) -> Option<([f64; 2], [f64; 2])> {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        let mut any = false;
        for iy in 0..self.height {
            for ix in 0..self.width {
                if self.get(ix, iy).is_free() {
                    let c = self.cell_center(ix, iy);
                    lo[0] = lo[0].min(c[0]);
                    lo[1] = lo[1].min(c[1]);
                    hi[0] = hi[0].max(c[0]);
                    hi[1] = hi[1].max(c[1]);
                    any = true;
                }
            }
        }
        if any {
            Some((lo, hi))
        } else {
            None
        }
    }

    /// Parse the text format: a header line `width height cell_size origin_x
    /// origin_y`, then `height` rows of class characters, top row first.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("map file is empty".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::Format(format!(
                "map header needs 5 fields (width height cell_size origin_x origin_y), got {}",
                fields.len()
            )));
        }
        let width: usize = fields[0]
            .parse()
            .map_err(|_| Error::Format(format!("bad map width {:?}", fields[0])))?;
        let height: usize = fields[1]
            .parse()
            .map_err(|_| Error::Format(format!("bad map height {:?}", fields[1])))?;
        let cell_size: f64 = fields[2]
            .parse()
            .map_err(|_| Error::Format(format!("bad cell size {:?}", fields[2])))?;
        let ox: f64 = fields[3]
            .parse()
            .map_err(|_| Error::Format(format!("bad origin x {:?}", fields[3])))?;
        let oy: f64 = fields[4]
            .parse()
            .map_err(|_| Error::Format(format!("bad origin y {:?}", fields[4])))?;
        if width == 0 || height == 0 {
            return Err(Error::Format("map dimensions must be positive".into()));
        }
        if !(cell_size > 0.0) || !cell_size.is_finite() {
            return Err(Error::Format(format!("cell size must be positive, got {cell_size}")));
        }
        let mut cells = vec![SemanticClass::Unknown; width * height];
        let mut rows = 0usize;
        for (r, line) in lines.enumerate() {
            if r >= height {
                if line.trim().is_empty() {
                    continue;
                }
                return Err(Error::Format(format!("map has more than {height} grid rows")));
            }
            if line.chars().count() != width {
                return Err(Error::Format(format!(
                    "map row {} has {} cells, expected {width}",
                    r,
                    line.chars().count()
                )));
            }
            // Text row 0 is the top of the map: the row with maximum y.
            let iy = height - 1 - r;
            for (ix, ch) in line.chars().enumerate() {
                cells[iy * width + ix] = SemanticClass::from_char(ch).ok_or_else(|| {
                    Error::Format(format!("unknown map character {ch:?} at row {r}, col {ix}"))
                })?;
            }
            rows += 1;
        }
        if rows != height {
            return Err(Error::Format(format!(
                "map has {rows} grid rows, expected {height}"
            )));
        }
        Ok(GridMap {
            width,
            height,
            cell_size,
            origin: [ox, oy],
            cells,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{} {} {} {} {}\n",
            self.width, self.height, self.cell_size, self.origin[0], self.origin[1]
        );
        for r in 0..self.height {
            let iy = self.height - 1 - r;
            for ix in 0..self.width {
                out.push(self.get(ix, iy).to_char());
            }
            out.push('\n');
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        GridMap::from_text(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Per-cell observation counters for the three votable classes, in class-index
/// order: Occupied, FreeNominal, FreeSlippery.
#[derive(Debug, Clone)]
pub struct VoteMap {
    pub width: usize,
    pub height: usize,
    counts: Vec<[u32; 3]>,
}

/// Position of a votable class in the counter array.
fn vote_slot(class: SemanticClass) -> Option<usize> {
    match class {
        SemanticClass::Occupied => Some(0),
        SemanticClass::FreeNominal => Some(1),
        SemanticClass::FreeSlippery => Some(2),
        SemanticClass::Unknown => None,
    }
}

/// Class a vote slot stands for.
const SLOT_CLASS: [SemanticClass; 3] = [
    SemanticClass::Occupied,
    SemanticClass::FreeNominal,
    SemanticClass::FreeSlippery,
];

impl VoteMap {
    pub fn new(width: usize, height: usize) -> Self {
        VoteMap {
            width,
            height,
            counts: vec![[0; 3]; width * height],
        }
    }

    pub fn counts_at(&self, ix: usize, iy: usize) -> [u32; 3] {
        self.counts[iy * self.width + ix]
    }

    fn add(&mut self, ix: usize, iy: usize, slot: usize) {
        self.counts[iy * self.width + ix][slot] += 1;
    }

    /// Majority class of a cell, ties to the lowest class index; None when the
    /// cell has never been observed.
    pub fn majority(&self, ix: usize, iy: usize) -> Option<SemanticClass> {
        let c = self.counts[iy * self.width + ix];
        if c == [0, 0, 0] {
            return None;
        }
        let mut best = 0usize;
        for slot in 1..3 {
            if c[slot] > c[best] {
                best = slot;
            }
        }
        Some(SLOT_CLASS[best])
    }
}

/// Fold one observed footprint into the vote counters and refresh the built
/// map for every touched cell. Unknown pixels contribute nothing; pixels whose
/// center falls outside the built map are dropped. The built class of a cell
/// is always the majority over *all* votes received so far, so the result does
/// not depend on the order observations are applied.
pub fn update_map(
    built: &mut GridMap,
    votes: &mut VoteMap,
    footprint: &SemanticFootprint,
    pose: &[f64; 2],
    heading: f64,
    params: &SensorParams,
) {
    debug_assert_eq!(built.width, votes.width);
    debug_assert_eq!(built.height, votes.height);
    for (point, class) in footprint.world_pixels(pose, heading, params) {
        let Some(slot) = vote_slot(class) else { continue };
        let Some((ix, iy)) = built.cell_index(&point) else { continue };
        votes.add(ix, iy, slot);
        if let Some(major) = votes.majority(ix, iy) {
            built.set(ix, iy, major);
        }
    }
}

/// Does the position-plane shadow of a prediction region touch any cell of one
/// of the target classes? True when a target-class cell center lies inside
/// the ellipse, or when the ellipse center itself lies inside a target-class
/// cell. An unbounded shadow intersects everything.
pub fn ellipse_intersects_class(
    map: &GridMap,
    shadow: &PositionShadow,
    targets: &[SemanticClass],
) -> Result<bool> {
    let (center, shape) = match shadow {
        PositionShadow::Unbounded => return Ok(true),
        PositionShadow::Bounded { center, shape } => (center, shape),
    };
    if let Some((ix, iy)) = map.cell_index(center) {
        if targets.contains(&map.get(ix, iy)) {
            return Ok(true);
        }
    }
    let inv = mat2_inverse(shape)?;
    // Exact axis-aligned bounding box of the ellipse: semi-extent along axis i
    // is sqrt(shape[i][i]).
    let rx = shape[0][0].max(0.0).sqrt();
    let ry = shape[1][1].max(0.0).sqrt();
    let lo_x = ((center[0] - rx - map.origin[0]) / map.cell_size).floor();
    let hi_x = ((center[0] + rx - map.origin[0]) / map.cell_size).floor();
    let lo_y = ((center[1] - ry - map.origin[1]) / map.cell_size).floor();
    let hi_y = ((center[1] + ry - map.origin[1]) / map.cell_size).floor();
    let lo_ix = lo_x.max(0.0) as usize;
    let hi_ix = (hi_x.min(map.width as f64 - 1.0)).max(0.0) as usize;
    let lo_iy = lo_y.max(0.0) as usize;
    let hi_iy = (hi_y.min(map.height as f64 - 1.0)).max(0.0) as usize;
    if lo_x > map.width as f64 - 1.0 || hi_x < 0.0 || lo_y > map.height as f64 - 1.0 || hi_y < 0.0 {
        return Ok(false);
    }
    for iy in lo_iy..=hi_iy {
        for ix in lo_ix..=hi_ix {
            if !targets.contains(&map.get(ix, iy)) {
                continue;
            }
            let c = map.cell_center(ix, iy);
            let dx = c[0] - center[0];
            let dy = c[1] - center[1];
            let q = inv[0][0] * dx * dx + (inv[0][1] + inv[1][0]) * dx * dy + inv[1][1] * dy * dy;
            if q <= 1.0 {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

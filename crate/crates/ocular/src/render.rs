//! Figure output: binary PPM (P6) images of a map with an executed
//! trajectory and the subgoal discs drawn over it. PPM needs no
//! dependencies and every image viewer opens it; anything fancier belongs in
//! an external plotting step fed by the CSVs.

use std::path::Path;

use crate::error::Result;
use crate::planner::Subgoal;
use crate::world::{GridMap, SemanticClass};

pub type Rgb = [u8; 3];

pub const COLOR_OCCUPIED: Rgb = [40, 40, 40];
pub const COLOR_UNKNOWN: Rgb = [170, 170, 170];
pub const COLOR_NOMINAL: Rgb = [255, 255, 255];
pub const COLOR_SLIPPERY: Rgb = [150, 200, 255];
pub const COLOR_TRAJECTORY: Rgb = [220, 30, 30];
pub const COLOR_SUBGOAL: Rgb = [30, 160, 60];

fn class_color(c: SemanticClass) -> Rgb {
    match c {
        SemanticClass::Occupied => COLOR_OCCUPIED,
        SemanticClass::Unknown => COLOR_UNKNOWN,
        SemanticClass::FreeNominal => COLOR_NOMINAL,
        SemanticClass::FreeSlippery => COLOR_SLIPPERY,
    }
}

/// Raster image with the map's orientation: row 0 is the TOP of the picture,
/// i.e. the highest world y.
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    origin: [f64; 2],
    metres_per_pixel: f64,
}

impl Raster {
    fn put(&mut self, px: usize, py: usize, color: Rgb) {
        let at = 3 * (py * self.width + px);
        self.pixels[at..at + 3].copy_from_slice(&color);
    }

    /// Pixel coordinates of a world point; None when off the image.
    fn pixel_of(&self, p: &[f64; 2]) -> Option<(usize, usize)> {
        let fx = (p[0] - self.origin[0]) / self.metres_per_pixel;
        let fy = (p[1] - self.origin[1]) / self.metres_per_pixel;
        if fx < 0.0 || fy < 0.0 {
            return None;
        }
        let (px, py) = (fx as usize, fy as usize);
        if px >= self.width || py >= self.height {
            return None;
        }
        // Flip: world y grows up, image rows grow down.
        Some((px, self.height - 1 - py))
    }

    fn mark(&mut self, p: &[f64; 2], color: Rgb) {
        if let Some((px, py)) = self.pixel_of(p) {
            self.put(px, py, color);
        }
    }

    /// Serialize as binary PPM.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm())?;
        Ok(())
    }
}

/// Render the map alone, `scale` pixels per cell.
pub fn render_map(map: &GridMap, scale: usize) -> Raster {
    let scale = scale.max(1);
    let (w, h) = (map.width * scale, map.height * scale);
    let mut img = Raster {
        width: w,
        height: h,
        pixels: vec![0; 3 * w * h],
        origin: map.origin,
        metres_per_pixel: map.cell_size / scale as f64,
    };
    for iy in 0..map.height {
        for ix in 0..map.width {
            let color = class_color(map.get(ix, iy));
            for sy in 0..scale {
                let py = h - 1 - (iy * scale + sy);
                for sx in 0..scale {
                    img.put(ix * scale + sx, py, color);
                }
            }
        }
    }
    img
}

fn draw_segment(img: &mut Raster, a: &[f64; 2], b: &[f64; 2], color: Rgb) {
    let len = (b[0] - a[0]).hypot(b[1] - a[1]);
    // Quarter-pixel steps close every gap a rasterized diagonal could open.
    let n = ((len / (0.25 * img.metres_per_pixel)).ceil() as usize).max(1);
    for k in 0..=n {
        let t = k as f64 / n as f64;
        let p = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
        img.mark(&p, color);
    }
}

fn draw_circle(img: &mut Raster, center: &[f64; 2], radius: f64, color: Rgb) {
    let circumference = std::f64::consts::TAU * radius;
    let n = ((circumference / (0.25 * img.metres_per_pixel)).ceil() as usize).max(8);
    for k in 0..n {
        let t = k as f64 / n as f64 * std::f64::consts::TAU;
        let p = [center[0] + radius * t.cos(), center[1] + radius * t.sin()];
        img.mark(&p, color);
    }
}

/// Map, subgoal outlines, and the executed path as one image.
pub fn render_episode(
    map: &GridMap,
    trajectory: &[[f64; 2]],
    subgoals: &[Subgoal],
    scale: usize,
) -> Raster {
    let mut img = render_map(map, scale);
    for goal in subgoals {
        draw_circle(&mut img, &goal.center, goal.radius, COLOR_SUBGOAL);
    }
    for pair in trajectory.windows(2) {
        draw_segment(&mut img, &pair[0], &pair[1], COLOR_TRAJECTORY);
    }
    if let Some(last) = trajectory.last() {
        img.mark(last, COLOR_TRAJECTORY);
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker_map() -> GridMap {
        let mut m = GridMap::filled(4, 3, 0.1, [0.0, 0.0], SemanticClass::FreeNominal);
        m.set(0, 0, SemanticClass::Occupied);
        m.set(3, 2, SemanticClass::FreeSlippery);
        m.set(1, 2, SemanticClass::Unknown);
        m
    }

    fn pixel(img: &Raster, px: usize, py: usize) -> Rgb {
        let at = 3 * (py * img.width + px);
        [img.pixels[at], img.pixels[at + 1], img.pixels[at + 2]]
    }

    #[test]
    fn ppm_header_and_size_are_exact() {
        let img = render_map(&checker_map(), 2);
        let bytes = img.to_ppm();
        assert!(bytes.starts_with(b"P6\n8 6\n255\n"));
        assert_eq!(bytes.len(), b"P6\n8 6\n255\n".len() + 3 * 8 * 6);
    }

    #[test]
    fn classes_render_their_colors_with_y_flipped() {
        let img = render_map(&checker_map(), 2);
        // Cell (0,0) is the world's bottom-left: image bottom-left block.
        assert_eq!(pixel(&img, 0, 5), COLOR_OCCUPIED);
        assert_eq!(pixel(&img, 1, 4), COLOR_OCCUPIED);
        // Cell (3,2) is the world's top-right block.
        assert_eq!(pixel(&img, 7, 0), COLOR_SLIPPERY);
        assert_eq!(pixel(&img, 2, 1), COLOR_UNKNOWN);
        assert_eq!(pixel(&img, 4, 3), COLOR_NOMINAL);
    }

    #[test]
    fn trajectory_and_goals_paint_over_the_map() {
        let map = checker_map();
        let traj = [[0.05, 0.05], [0.35, 0.25]];
        let goals = [Subgoal {
            center: [0.35, 0.25],
            radius: 0.04,
        }];
        let img = render_episode(&map, &traj, &goals, 4);
        // Both endpoints are painted; the start sits in the occupied block.
        let (sx, sy) = img.pixel_of(&[0.05, 0.05]).unwrap();
        assert_eq!(pixel(&img, sx, sy), COLOR_TRAJECTORY);
        let (ex, ey) = img.pixel_of(&[0.35, 0.25]).unwrap();
        assert_eq!(pixel(&img, ex, ey), COLOR_TRAJECTORY);
        // A point on the circle outline is green.
        let (cx, cy) = img.pixel_of(&[0.35 + 0.04, 0.25]).unwrap();
        assert_eq!(pixel(&img, cx, cy), COLOR_SUBGOAL);
        // Rendering is pure: same inputs, same bytes.
        let again = render_episode(&map, &traj, &goals, 4);
        assert_eq!(img.to_ppm(), again.to_ppm());
    }

    #[test]
    fn off_map_points_are_clipped_not_panicked() {
        let map = checker_map();
        let traj = [[-1.0, -1.0], [5.0, 5.0]];
        let img = render_episode(&map, &traj, &[], 1);
        assert_eq!(img.width, 4);
        assert_eq!(img.height, 3);
    }
}

//! Synthetic ground truth: binary worlds, a lidar simulator and loop trajectories.

use std::f64::consts::{FRAC_PI_2, PI};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geom::{trace_ray, wrap_angle, GridSpec, Pose2D};
use crate::raster;
use crate::rbpf::{sample_motion, OdometryModelParams, OdometryReading};
use crate::sensor::{Scan, ScanGeometry};

#[derive(Debug, Clone, PartialEq)]
pub struct WorldParams {
    pub width: f64,
    pub height: f64,
    pub resolution: f64,
    /// Interior wall segments, each with one doorway.
    pub walls: usize,
    pub clutter: usize,
    /// Largest clutter extent (m).
    pub clutter_size: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthWorld {
    pub grid: GridSpec,
    pub occupied: Vec<bool>,
    pub seed: u64,
}

const DOORWAY: f64 = 1.6;

impl GroundTruthWorld {
    /// Closed empty world: only the border ring is occupied.
    pub fn empty(grid: GridSpec) -> Self {
        let mut w = Self {
            occupied: vec![false; grid.cell_count()],
            grid,
            seed: 0,
        };
        w.close_border();
        w
    }

    pub fn generate<R: Rng + ?Sized>(params: &WorldParams, seed: u64, rng: &mut R) -> Result<Self> {
        let grid = GridSpec::with_extent(params.width, params.height, params.resolution)?;
        let mut world = Self::empty(grid);
        world.seed = seed;
        let (w, h) = (params.width, params.height);
        for _ in 0..params.walls {
            let vertical = rng.random::<bool>();
            let (along, across) = if vertical { (h, w) } else { (w, h) };
            let at = rng.random_range(0.2 * across..0.8 * across);
            let len = rng.random_range(0.4 * along..0.8 * along);
            let start = if rng.random::<bool>() { 0.0 } else { along - len };
            let door = rng.random_range(start..(start + len - DOORWAY).max(start + 1e-9));
            let mut s = start;
            while s <= start + len {
                if !(s >= door && s <= door + DOORWAY) {
                    let (x, y) = if vertical { (at, s) } else { (s, at) };
                    world.set_at(x, y, true);
                }
                s += 0.5 * params.resolution;
            }
        }
        for k in 0..params.clutter {
            let cx = rng.random_range(0.0..w);
            let cy = rng.random_range(0.0..h);
            let size = rng.random_range(0.3..params.clutter_size.max(0.31));
            if k % 2 == 0 {
                world.fill(|x, y| (x - cx).hypot(y - cy) <= 0.5 * size);
            } else {
                let a = rng.random_range(0.0..PI);
                let (s, c) = a.sin_cos();
                let aspect = rng.random_range(0.4..1.0);
                world.fill(|x, y| {
                    let (dx, dy) = (x - cx, y - cy);
                    (c * dx + s * dy).abs() <= 0.5 * size && (-s * dx + c * dy).abs() <= 0.5 * size * aspect
                });
            }
        }
        Ok(world)
    }

    fn close_border(&mut self) {
        let (w, h) = (self.grid.width, self.grid.height);
        for cx in 0..w {
            for cy in [0, h - 1] {
                let i = self.grid.index(cx, cy);
                self.occupied[i] = true;
            }
        }
        for cy in 0..h {
            for cx in [0, w - 1] {
                let i = self.grid.index(cx, cy);
                self.occupied[i] = true;
            }
        }
    }

    fn set_at(&mut self, x: f64, y: f64, value: bool) {
        if let Some(i) = self.grid.index_of(x, y) {
            self.occupied[i] = value;
        }
    }

    fn fill(&mut self, inside: impl Fn(f64, f64) -> bool) {
        for i in 0..self.grid.cell_count() {
            let (x, y) = self.grid.cell_center(i);
            if inside(x, y) {
                self.occupied[i] = true;
            }
        }
    }

    /// Frees every cell whose center lies within `radius` of the polyline; the
    /// border stays closed.
    pub fn clear_along(&mut self, path: &[Pose2D], radius: f64) {
        for i in 0..self.grid.cell_count() {
            let (x, y) = self.grid.cell_center(i);
            let near = match path {
                [] => false,
                [p] => (x - p.x).hypot(y - p.y) <= radius,
                _ => path.windows(2).any(|s| segment_distance(x, y, &s[0], &s[1]) <= radius),
            };
            if near {
                self.occupied[i] = false;
            }
        }
        self.close_border();
    }

    pub fn is_occupied(&self, x: f64, y: f64) -> bool {
        self.grid.index_of(x, y).map(|i| self.occupied[i]).unwrap_or(true)
    }

    pub fn occupancy_raster(&self) -> Vec<f64> {
        self.occupied.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect()
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        raster::write_pgm(path, &self.grid, &self.occupancy_raster())
    }

    /// Reads a world saved by [`write_pgm`](Self::write_pgm); the origin is `(0, 0)`.
    pub fn read_pgm(path: &Path, resolution: f64) -> Result<Self> {
        let (w, h, values) = raster::read_pgm(path)?;
        let grid = GridSpec::new(w, h, resolution, Pose2D::identity())?;
        Ok(Self {
            grid,
            occupied: values.iter().map(|&v| v > 0.5).collect(),
            seed: 0,
        })
    }
}

fn segment_distance(x: f64, y: f64, a: &Pose2D, b: &Pose2D) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((x - a.x) * dx + (y - a.y) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (x - a.x - t * dx).hypot(y - a.y - t * dy)
}

/// Noise applied by [`simulate_scan`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanNoise {
    /// Range standard deviation (m).
    pub range: f64,
    /// Cast-direction standard deviation (rad).
    pub bearing: f64,
}

impl ScanNoise {
    pub const NONE: ScanNoise = ScanNoise { range: 0.0, bearing: 0.0 };
}

/// Casts every beam to the first occupied cell. The true range is that cell's
/// entry distance plus half a cell; Gaussian noise is added and the result clamped
/// to `[0, z_max]`. Beams that hit nothing return `z_max` exactly. Bearing jitter
/// perturbs the cast direction only; the recorded bearing is nominal.
pub fn simulate_scan<R: Rng + ?Sized>(
    world: &GroundTruthWorld,
    pose: &Pose2D,
    geometry: &ScanGeometry,
    noise: ScanNoise,
    timestamp: f64,
    rng: &mut R,
) -> Result<Scan> {
    if world.is_occupied(pose.x, pose.y) {
        return Err(Error::domain(format!("pose ({:.3}, {:.3}) is inside an obstacle", pose.x, pose.y)));
    }
    let sensor = pose.compose(&geometry.offset);
    let range_noise = Normal::new(0.0, noise.range).map_err(|e| Error::domain(e.to_string()))?;
    let bearing_noise = Normal::new(0.0, noise.bearing).map_err(|e| Error::domain(e.to_string()))?;
    let z_max = geometry.max_range;
    let mut ranges = Vec::with_capacity(geometry.n_beams);
    for b in geometry.bearings() {
        let cast = b + bearing_noise.sample(rng);
        let trace = trace_ray(&world.grid, &sensor, cast, z_max)?;
        let hit = trace.cells.iter().position(|c| world.occupied[c.index]);
        let r = match hit {
            Some(k) => (trace.cell_range(k) + range_noise.sample(rng)).clamp(0.0, z_max),
            None => z_max,
        };
        ranges.push(r);
    }
    Scan::from_ranges(timestamp, geometry, &ranges)
}

/// `steps + 1` poses equally spaced along a counter-clockwise rounded rectangle
/// inset by `margin`; the last pose coincides with the first.
pub fn loop_trajectory(width: f64, height: f64, margin: f64, corner_radius: f64, steps: usize) -> Result<Vec<Pose2D>> {
    let (x0, y0, x1, y1) = (margin, margin, width - margin, height - margin);
    let r = corner_radius;
    let sx = x1 - x0 - 2.0 * r;
    let sy = y1 - y0 - 2.0 * r;
    if !(sx >= 0.0 && sy >= 0.0 && r >= 0.0) || steps == 0 {
        return Err(Error::domain("loop does not fit inside the world"));
    }
    let arc = FRAC_PI_2 * r;
    // Straight edges and quarter arcs, counter-clockwise from the bottom-left corner.
    let pieces = [sx, arc, sy, arc, sx, arc, sy, arc];
    let total: f64 = pieces.iter().sum();
    let corners = [(x1 - r, y0 + r), (x1 - r, y1 - r), (x0 + r, y1 - r), (x0 + r, y0 + r)];
    let at = |mut s: f64| -> Pose2D {
        s = s.rem_euclid(total);
        for (k, &len) in pieces.iter().enumerate() {
            if s <= len || k == pieces.len() - 1 {
                let side = k / 2;
                let heading = side as f64 * FRAC_PI_2;
                if k % 2 == 0 {
                    let start = match side {
                        0 => (x0 + r, y0),
                        1 => (x1, y0 + r),
                        2 => (x1 - r, y1),
                        _ => (x0, y1 - r),
                    };
                    let (sn, cs) = heading.sin_cos();
                    return Pose2D::new(start.0 + s * cs, start.1 + s * sn, wrap_angle(heading));
                }
                let (cx, cy) = corners[side];
                let phi = heading - FRAC_PI_2 + if r > 0.0 { s / r } else { 0.0 };
                return Pose2D::new(cx + r * phi.cos(), cy + r * phi.sin(), wrap_angle(phi + FRAC_PI_2));
            }
            s -= len;
        }
        unreachable!()
    };
    Ok((0..=steps).map(|k| at(total * k as f64 / steps as f64)).collect())
}

/// Odometry poses obtained by chaining noisy samples of the true increments.
pub fn noisy_odometry<R: Rng + ?Sized>(truth: &[Pose2D], params: &OdometryModelParams, rng: &mut R) -> Vec<Pose2D> {
    let mut out: Vec<Pose2D> = Vec::with_capacity(truth.len());
    for (k, p) in truth.iter().enumerate() {
        let next = match out.last() {
            None => *p,
            Some(prev) => sample_motion(prev, &OdometryReading::from_poses(&truth[k - 1], p), params, rng),
        };
        out.push(next);
    }
    out
}

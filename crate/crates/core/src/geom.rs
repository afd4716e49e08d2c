//! Planar poses, grid geometry and supercover ray traversal.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    /// SE(2) composition `self ⊕ delta`, with `delta` expressed in the frame of `self`.
    pub fn compose(&self, delta: &Pose2D) -> Pose2D {
        let (s, c) = self.theta.sin_cos();
        Pose2D::new(
            self.x + delta.x * c - delta.y * s,
            self.y + delta.x * s + delta.y * c,
            self.theta + delta.theta,
        )
    }

    pub fn inverse(&self) -> Pose2D {
        let (s, c) = self.theta.sin_cos();
        Pose2D::new(
            -self.x * c - self.y * s,
            self.x * s - self.y * c,
            -self.theta,
        )
    }

    /// Relative motion taking `self` to `other`, i.e. `self⁻¹ ⊕ other`.
    pub fn between(&self, other: &Pose2D) -> Pose2D {
        self.inverse().compose(other)
    }

    pub fn distance(&self, other: &Pose2D) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Free-function form of [`Pose2D::compose`].
pub fn compose(a: &Pose2D, delta: &Pose2D) -> Pose2D {
    a.compose(delta)
}

/// A uniform 2D grid. Cell `(0, 0)` has its lower-left corner at `origin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub resolution: f64,
    pub origin: Pose2D,
}

impl GridSpec {
    pub fn new(width: usize, height: usize, resolution: f64, origin: Pose2D) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::domain("grid dimensions must be positive"));
        }
        if !(resolution > 0.0) || !resolution.is_finite() {
            return Err(Error::domain(format!("resolution must be positive, got {resolution}")));
        }
        Ok(Self {
            width,
            height,
            resolution,
            origin,
        })
    }

    /// Grid covering `width_m × height_m` meters with its corner at the world origin.
    pub fn with_extent(width_m: f64, height_m: f64, resolution: f64) -> Result<Self> {
        if !(resolution > 0.0) {
            return Err(Error::domain(format!("resolution must be positive, got {resolution}")));
        }
        let w = (width_m / resolution).round() as usize;
        let h = (height_m / resolution).round() as usize;
        Self::new(w, h, resolution, Pose2D::identity())
    }

    pub fn cell_count(&self) -> usize {
        self.width * self.height
    }

    pub fn width_m(&self) -> f64 {
        self.width as f64 * self.resolution
    }

    pub fn height_m(&self) -> f64 {
        self.height as f64 * self.resolution
    }

    /// World point to metric coordinates in the grid frame.
    pub fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let p = self.origin.between(&Pose2D { x, y, theta: 0.0 });
        (p.x, p.y)
    }

    pub fn to_world(&self, lx: f64, ly: f64) -> (f64, f64) {
        let p = self.origin.compose(&Pose2D { x: lx, y: ly, theta: 0.0 });
        (p.x, p.y)
    }

    /// Integer cell coordinates of a world point, or `None` outside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let (lx, ly) = self.to_local(x, y);
        let cx = (lx / self.resolution).floor();
        let cy = (ly / self.resolution).floor();
        if cx < 0.0 || cy < 0.0 || cx >= self.width as f64 || cy >= self.height as f64 {
            return None;
        }
        Some((cx as usize, cy as usize))
    }

    pub fn index_of(&self, x: f64, y: f64) -> Option<usize> {
        self.cell_of(x, y).map(|(cx, cy)| self.index(cx, cy))
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.cell_of(x, y).is_some()
    }

    #[inline]
    pub fn index(&self, cx: usize, cy: usize) -> usize {
        cy * self.width + cx
    }

    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index % self.width, index / self.width)
    }

    /// World coordinates of a cell center.
    pub fn cell_center(&self, index: usize) -> (f64, f64) {
        let (cx, cy) = self.coords(index);
        self.to_world(
            (cx as f64 + 0.5) * self.resolution,
            (cy as f64 + 0.5) * self.resolution,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceCell {
    pub index: usize,
    /// Distance from the ray origin at which the ray enters the cell.
    pub entry: f64,
}

/// Cells crossed by a ray, ordered outward from (and excluding) the origin cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RayTrace {
    pub cells: Vec<TraceCell>,
    /// Range at which the trace stops: `max_range` or the grid boundary.
    pub terminal: f64,
    pub resolution: f64,
}

impl RayTrace {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Nominal range of the k-th traversed cell: entry range plus half a cell.
    #[inline]
    pub fn cell_range(&self, k: usize) -> f64 {
        self.cells[k].entry + 0.5 * self.resolution
    }

    pub fn position_of(&self, index: usize) -> Option<usize> {
        self.cells.iter().position(|c| c.index == index)
    }
}

const CORNER_EPS: f64 = 1e-9;

/// Supercover DDA traversal from `origin` along `origin.theta + bearing`.
///
/// When the ray passes exactly through a cell corner, both edge-adjacent cells are
/// emitted (x-neighbor first) before the diagonal cell, all with the same entry range.
pub fn trace_ray(grid: &GridSpec, origin: &Pose2D, bearing: f64, max_range: f64) -> Result<RayTrace> {
    let (lx, ly) = grid.to_local(origin.x, origin.y);
    let res = grid.resolution;
    let gx = lx / res;
    let gy = ly / res;
    let (w, h) = (grid.width as i64, grid.height as i64);
    let mut cx = gx.floor() as i64;
    let mut cy = gy.floor() as i64;
    if !(gx.is_finite() && gy.is_finite()) || cx < 0 || cy < 0 || cx >= w || cy >= h {
        return Err(Error::domain(format!(
            "ray origin ({:.3}, {:.3}) outside grid",
            origin.x, origin.y
        )));
    }
    let mut trace = RayTrace {
        cells: Vec::new(),
        terminal: 0.0,
        resolution: res,
    };
    if !(max_range > 0.0) {
        return Ok(trace);
    }

    let phi = origin.theta + bearing - grid.origin.theta;
    let (dy, dx) = phi.sin_cos();
    let max_t = max_range / res;
    let step_x: i64 = if dx > 0.0 { 1 } else { -1 };
    let step_y: i64 = if dy > 0.0 { 1 } else { -1 };
    let mut t_max_x = if dx > 0.0 {
        (cx as f64 + 1.0 - gx) / dx
    } else if dx < 0.0 {
        (gx - cx as f64) / -dx
    } else {
        f64::INFINITY
    };
    let mut t_max_y = if dy > 0.0 {
        (cy as f64 + 1.0 - gy) / dy
    } else if dy < 0.0 {
        (gy - cy as f64) / -dy
    } else {
        f64::INFINITY
    };
    let t_delta_x = if dx != 0.0 { 1.0 / dx.abs() } else { f64::INFINITY };
    let t_delta_y = if dy != 0.0 { 1.0 / dy.abs() } else { f64::INFINITY };

    let inside = |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h;
    let idx = |x: i64, y: i64| grid.index(x as usize, y as usize);

    loop {
        let t_next = t_max_x.min(t_max_y);
        if t_next >= max_t {
            trace.terminal = max_range;
            break;
        }
        let entry = t_next * res;
        if (t_max_x - t_max_y).abs() <= CORNER_EPS * t_next.max(1.0) {
            let (nx, ny) = (cx + step_x, cy + step_y);
            if inside(nx, cy) {
                trace.cells.push(TraceCell { index: idx(nx, cy), entry });
            }
            if inside(cx, ny) {
                trace.cells.push(TraceCell { index: idx(cx, ny), entry });
            }
            if !inside(nx, ny) {
                trace.terminal = entry;
                break;
            }
            cx = nx;
            cy = ny;
            trace.cells.push(TraceCell { index: idx(cx, cy), entry });
            t_max_x += t_delta_x;
            t_max_y += t_delta_y;
        } else if t_max_x < t_max_y {
            cx += step_x;
            if !inside(cx, cy) {
                trace.terminal = entry;
                break;
            }
            trace.cells.push(TraceCell { index: idx(cx, cy), entry });
            t_max_x += t_delta_x;
        } else {
            cy += step_y;
            if !inside(cx, cy) {
                trace.terminal = entry;
                break;
            }
            trace.cells.push(TraceCell { index: idx(cx, cy), entry });
            t_max_y += t_delta_y;
        }
    }
    Ok(trace)
}

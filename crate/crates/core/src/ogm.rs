//! Log-odds occupancy grid used by the baseline filter and OGMI.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{trace_ray, GridSpec, Pose2D};
use crate::raster;
use crate::sensor::{density_unchecked, BeamModelParams, Scan};

#[derive(Debug, Clone, PartialEq)]
pub struct OgmParams {
    pub hit: f64,
    pub miss: f64,
    pub clamp: f64,
    /// Cells above this occupancy stop a predicted beam.
    pub threshold: f64,
}

impl Default for OgmParams {
    fn default() -> Self {
        Self {
            hit: 0.85,
            miss: -0.4,
            clamp: 10.0,
            threshold: 0.5,
        }
    }
}

#[inline]
pub fn logistic(l: f64) -> f64 {
    1.0 / (1.0 + (-l).exp())
}

/// Read access to a Bernoulli occupancy belief over a grid.
pub trait OccupancyBelief {
    fn grid(&self) -> &GridSpec;
    fn occupancy(&self, cell: usize) -> f64;
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogOddsMap {
    grid: GridSpec,
    logodds: Vec<f64>,
    params: OgmParams,
}

/// Inverse-sensor increments of one beam: `emit(cell, increment)` for every cell.
pub(crate) fn beam_increments(
    grid: &GridSpec,
    sensor: &Pose2D,
    bearing: f64,
    range: f64,
    beam: &BeamModelParams,
    params: &OgmParams,
    mut emit: impl FnMut(usize, f64),
) -> Result<()> {
    let max_reading = beam.is_max_reading(range);
    let reach = if max_reading { beam.max_range } else { range };
    let trace = trace_ray(grid, sensor, bearing, reach)?;
    let reached = !max_reading && trace.terminal >= range - 1e-12;
    let n = trace.len();
    for (k, c) in trace.cells.iter().enumerate() {
        let inc = if reached && k + 1 == n { params.hit } else { params.miss };
        emit(c.index, inc);
    }
    Ok(())
}

impl LogOddsMap {
    pub fn new(grid: GridSpec, params: OgmParams) -> Self {
        let n = grid.cell_count();
        Self {
            grid,
            logodds: vec![0.0; n],
            params,
        }
    }

    pub fn params(&self) -> &OgmParams {
        &self.params
    }

    pub fn logodds(&self, cell: usize) -> f64 {
        self.logodds[cell]
    }

    pub fn set_logodds(&mut self, cell: usize, value: f64) {
        self.logodds[cell] = value.clamp(-self.params.clamp, self.params.clamp);
    }

    pub fn occupancy_raster(&self) -> Vec<f64> {
        self.logodds.iter().map(|&l| logistic(l)).collect()
    }

    /// Standard inverse sensor model: misses up to the return, a hit in the return
    /// cell, misses only for max-range readings.
    pub fn integrate_scan_og(&mut self, pose: &Pose2D, scan: &Scan, beam: &BeamModelParams) -> Result<()> {
        if !self.grid.contains(pose.x, pose.y) {
            return Err(Error::domain(format!("pose ({:.3}, {:.3}) outside map", pose.x, pose.y)));
        }
        let sensor = scan.sensor_pose(pose);
        let clamp = self.params.clamp;
        for b in &scan.beams {
            let logodds = &mut self.logodds;
            beam_increments(&self.grid, &sensor, b.bearing, b.range, beam, &self.params, |i, inc| {
                logodds[i] = (logodds[i] + inc).clamp(-clamp, clamp);
            })?;
        }
        Ok(())
    }

    /// Predicted range along a beam: the first cell above the occupancy threshold,
    /// or the maximum range.
    pub fn predicted_range(&self, sensor: &Pose2D, bearing: f64, beam: &BeamModelParams) -> Result<f64> {
        let trace = trace_ray(&self.grid, sensor, bearing, beam.max_range)?;
        let threshold = self.params.threshold;
        for (k, c) in trace.cells.iter().enumerate() {
            if logistic(self.logodds[c.index]) > threshold {
                return Ok(trace.cell_range(k).min(beam.max_range));
            }
        }
        Ok(beam.max_range)
    }

    /// Log-likelihood of a scan against this map held fixed.
    pub fn fixed_map_log_likelihood(&self, pose: &Pose2D, scan: &Scan, beam: &BeamModelParams) -> Result<f64> {
        if !self.grid.contains(pose.x, pose.y) {
            return Err(Error::domain(format!("pose ({:.3}, {:.3}) outside map", pose.x, pose.y)));
        }
        let sensor = scan.sensor_pose(pose);
        let mut ll = 0.0;
        for b in &scan.beams {
            let z_star = self.predicted_range(&sensor, b.bearing, beam)?;
            ll += density_unchecked(b.range, z_star, beam).mass(beam.outcome_bin).ln();
        }
        Ok(ll)
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        raster::write_pgm(path, &self.grid, &self.occupancy_raster())
    }
}

/// `p(z | x, m̂)` for a fixed log-odds map.
pub fn fixed_map_likelihood(map: &LogOddsMap, pose: &Pose2D, scan: &Scan, beam: &BeamModelParams) -> Result<f64> {
    Ok(map.fixed_map_log_likelihood(pose, scan, beam)?.exp())
}

impl OccupancyBelief for LogOddsMap {
    fn grid(&self) -> &GridSpec {
        &self.grid
    }

    #[inline]
    fn occupancy(&self, cell: usize) -> f64 {
        logistic(self.logodds[cell])
    }
}

//! Beam-based range sensor models.
//!
//! The measurement density is the usual four-part mixture (hit, short, max, rand).
//! The max component is a discrete atom at exactly `max_range`; all other parts are
//! densities in 1/m. Likelihoods of observed readings are turned into probabilities
//! by integrating the density over one outcome bin of width `outcome_bin`.
//!
//! A beam's return is explained by a sensor-cause profile: the probability that the
//! k-th traversed cell is the first to reflect, given per-cell expected occupancy.

use std::f64::consts::{PI, SQRT_2};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Pose2D, RayTrace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamModelParams {
    pub z_hit: f64,
    pub z_short: f64,
    pub z_max: f64,
    pub z_rand: f64,
    /// Standard deviation of the hit component (m).
    pub sigma_hit: f64,
    /// Decay rate of the short-return component (1/m).
    pub lambda_short: f64,
    /// Maximum sensing range (m).
    pub max_range: f64,
    /// Width of the outcome bin used to turn densities into probabilities (m).
    pub outcome_bin: f64,
}

impl Default for BeamModelParams {
    fn default() -> Self {
        Self {
            z_hit: 0.7,
            z_short: 0.1,
            z_max: 0.1,
            z_rand: 0.1,
            sigma_hit: 0.05,
            lambda_short: 0.2,
            max_range: 5.0,
            outcome_bin: 0.1,
        }
    }
}

impl BeamModelParams {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.z_hit, self.z_short, self.z_max, self.z_rand];
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Validation("mixture weights must be nonnegative".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!("mixture weights sum to {sum}, expected 1")));
        }
        if !(self.sigma_hit > 0.0) || !(self.max_range > 0.0) || !(self.outcome_bin > 0.0) {
            return Err(Error::Validation(
                "sigma_hit, max_range and outcome_bin must be positive".into(),
            ));
        }
        if !(self.lambda_short > 0.0) {
            return Err(Error::Validation("lambda_short must be positive".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn is_max_reading(&self, z: f64) -> bool {
        z >= self.max_range - 1e-12
    }
}

/// Continuous density plus the probability mass of the discrete max-range atom.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BeamDensity {
    pub continuous: f64,
    pub atom: f64,
}

impl BeamDensity {
    /// Probability of the outcome bin of width `bin` containing the reading.
    #[inline]
    pub fn mass(&self, bin: f64) -> f64 {
        self.continuous * bin + self.atom
    }
}

#[inline]
fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2))
}

const GAUSS_CUTOFF: f64 = 40.0;

/// Continuous part of the mixture, without domain checks.
#[inline]
pub(crate) fn continuous_density(z: f64, z_star: f64, p: &BeamModelParams) -> f64 {
    let mut d = p.z_rand / p.max_range;
    if p.z_hit > 0.0 {
        let s = p.sigma_hit;
        let u = (z - z_star) / s;
        // exp(-u²/2) underflows to exactly zero beyond this
        if u.abs() < GAUSS_CUTOFF {
            let norm = std_normal_cdf((p.max_range - z_star) / s) - std_normal_cdf(-z_star / s);
            let g = (-0.5 * u * u).exp() / (s * (2.0 * PI).sqrt());
            if norm > 0.0 {
                d += p.z_hit * g / norm;
            }
        }
    }
    if p.z_short > 0.0 && z <= z_star {
        let l = p.lambda_short;
        d += p.z_short * l * (-l * z).exp() / (1.0 - (-l * z_star).exp());
    }
    d
}

#[inline]
pub(crate) fn density_unchecked(z: f64, z_star: f64, p: &BeamModelParams) -> BeamDensity {
    BeamDensity {
        continuous: continuous_density(z, z_star, p),
        atom: if p.is_max_reading(z) { p.z_max } else { 0.0 },
    }
}

/// Mixture density of reading `z` given expected range `z_star`.
pub fn beam_density(z: f64, z_star: f64, params: &BeamModelParams) -> Result<BeamDensity> {
    let zm = params.max_range;
    if !(z >= 0.0 && z <= zm + 1e-12) {
        return Err(Error::domain(format!("reading {z} outside [0, {zm}]")));
    }
    if !(z_star > 0.0 && z_star <= zm + 1e-12) {
        return Err(Error::domain(format!("expected range {z_star} outside (0, {zm}]")));
    }
    Ok(density_unchecked(z.min(zm), z_star.min(zm), params))
}

/// Fixed field of view scanner layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanGeometry {
    /// Field of view (rad).
    pub fov: f64,
    pub n_beams: usize,
    pub max_range: f64,
    pub offset: Pose2D,
}

impl ScanGeometry {
    pub fn new(fov: f64, n_beams: usize, max_range: f64) -> Self {
        Self {
            fov,
            n_beams,
            max_range,
            offset: Pose2D::identity(),
        }
    }

    /// Uniform bearings. A full circle gets `n` distinct bearings starting at `-pi`;
    /// a partial field of view includes both edges.
    pub fn bearings(&self) -> Vec<f64> {
        let n = self.n_beams;
        if n == 0 {
            return Vec::new();
        }
        if n == 1 {
            return vec![0.0];
        }
        let full = self.fov >= 2.0 * PI - 1e-9;
        let step = if full {
            self.fov / n as f64
        } else {
            self.fov / (n - 1) as f64
        };
        (0..n).map(|l| -0.5 * self.fov + l as f64 * step).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Beam {
    /// Bearing in the sensor frame (rad).
    pub bearing: f64,
    pub range: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scan {
    pub timestamp: f64,
    pub beams: Vec<Beam>,
    /// Sensor pose in the robot frame.
    pub offset: Pose2D,
}

impl Scan {
    pub fn new(timestamp: f64, beams: Vec<Beam>, offset: Pose2D, max_range: f64) -> Result<Self> {
        let scan = Self {
            timestamp,
            beams,
            offset,
        };
        scan.validate(max_range)?;
        Ok(scan)
    }

    pub fn empty(timestamp: f64) -> Self {
        Self {
            timestamp,
            beams: Vec::new(),
            offset: Pose2D::identity(),
        }
    }

    pub fn from_ranges(timestamp: f64, geometry: &ScanGeometry, ranges: &[f64]) -> Result<Self> {
        if ranges.len() != geometry.n_beams {
            return Err(Error::Validation(format!(
                "expected {} ranges, got {}",
                geometry.n_beams,
                ranges.len()
            )));
        }
        let beams = geometry
            .bearings()
            .into_iter()
            .zip(ranges)
            .map(|(bearing, &range)| Beam { bearing, range })
            .collect();
        Self::new(timestamp, beams, geometry.offset, geometry.max_range)
    }

    pub fn validate(&self, max_range: f64) -> Result<()> {
        for w in self.beams.windows(2) {
            if !(w[1].bearing > w[0].bearing) {
                return Err(Error::Validation("beam bearings must be strictly increasing".into()));
            }
        }
        for b in &self.beams {
            if !(b.range >= 0.0 && b.range <= max_range) {
                return Err(Error::Validation(format!(
                    "range {} outside [0, {max_range}]",
                    b.range
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.beams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beams.is_empty()
    }

    pub fn sensor_pose(&self, robot: &Pose2D) -> Pose2D {
        robot.compose(&self.offset)
    }
}

/// Which traversed cell (if any) caused a beam's return.
#[derive(Debug, Clone, PartialEq)]
pub struct CauseProfile {
    /// `causes[k]`: probability that the k-th traversed cell is the first reflector.
    pub causes: Vec<f64>,
    /// Probability that no traversed cell reflects (max-range return).
    pub no_hit: f64,
    /// Nominal range of each traversed cell, clamped to the sensing range.
    pub ranges: Vec<f64>,
}

impl CauseProfile {
    /// Builds the profile from per-traversed-cell occupancies.
    pub fn from_occupancies(ranges: Vec<f64>, occupancies: &[f64]) -> Self {
        debug_assert_eq!(ranges.len(), occupancies.len());
        let mut pass = 1.0;
        let causes = occupancies
            .iter()
            .map(|&e| {
                let c = e * pass;
                pass *= 1.0 - e;
                c
            })
            .collect();
        Self {
            causes,
            no_hit: pass,
            ranges,
        }
    }

    pub fn total(&self) -> f64 {
        self.causes.iter().sum::<f64>() + self.no_hit
    }
}

/// Nominal ranges of all cells on a trace, clamped to `max_range`.
pub fn trace_ranges(trace: &RayTrace, max_range: f64) -> Vec<f64> {
    (0..trace.len()).map(|k| trace.cell_range(k).min(max_range)).collect()
}

/// Cause profile of a trace given a raster of expected occupancies indexed by cell.
pub fn cause_profile(trace: &RayTrace, expected_occ: &[f64], max_range: f64) -> Result<CauseProfile> {
    let occ: Vec<f64> = trace.cells.iter().map(|c| expected_occ[c.index]).collect();
    if occ.iter().any(|e| !(0.0..=1.0).contains(e)) {
        return Err(Error::domain("expected occupancy outside [0, 1]"));
    }
    Ok(CauseProfile::from_occupancies(trace_ranges(trace, max_range), &occ))
}

/// Mixture of beam densities weighted by the cause profile.
pub fn beam_likelihood(z: f64, profile: &CauseProfile, params: &BeamModelParams) -> Result<BeamDensity> {
    // validates z once
    let mut out = beam_density(z, params.max_range, params)?;
    out.continuous *= profile.no_hit;
    out.atom *= profile.no_hit;
    for (&c, &r) in profile.causes.iter().zip(&profile.ranges) {
        if c > 0.0 {
            let d = density_unchecked(z, r, params);
            out.continuous += c * d.continuous;
            out.atom += c * d.atom;
        }
    }
    Ok(out)
}

/// Beam likelihood with the occupancy of `cell_index` replaced by `value`.
pub fn beam_likelihood_given_cell(
    z: f64,
    trace: &RayTrace,
    expected_occ: &[f64],
    cell_index: usize,
    value: f64,
    params: &BeamModelParams,
) -> Result<BeamDensity> {
    let k = trace
        .position_of(cell_index)
        .ok_or_else(|| Error::domain(format!("cell {cell_index} is not on the trace")))?;
    if !(0.0..=1.0).contains(&value) {
        return Err(Error::domain("hypothesized occupancy outside [0, 1]"));
    }
    let mut occ: Vec<f64> = trace.cells.iter().map(|c| expected_occ[c.index]).collect();
    occ[k] = value;
    let profile = CauseProfile::from_occupancies(trace_ranges(trace, params.max_range), &occ);
    beam_likelihood(z, &profile, params)
}

/// Per-cell likelihoods of one beam in linear form.
///
/// Holding every other cell at its expected occupancy, the likelihood of the beam
/// as a function of cell k's occupancy `v` is `offset[k] + v * slope[k]`.
/// Computed for all cells in one forward and one backward pass.
#[derive(Debug, Clone, Default)]
pub struct LinearBeam {
    pub offset: Vec<f64>,
    pub slope: Vec<f64>,
    /// Likelihood with every cell at its expected occupancy.
    pub marginal: f64,
}

impl LinearBeam {
    /// `occ[k]` expected occupancy, `cause[k]` outcome probability if cell k reflects,
    /// `no_hit` outcome probability if nothing reflects.
    pub fn compute(&mut self, occ: &[f64], cause: &[f64], no_hit: f64) {
        let n = occ.len();
        self.offset.clear();
        self.slope.clear();
        self.offset.resize(n, 0.0);
        self.slope.resize(n, 0.0);
        // backward pass: expected outcome probability given the ray passes cell k
        let mut beyond = no_hit;
        for k in (0..n).rev() {
            self.slope[k] = beyond;
            beyond = occ[k] * cause[k] + (1.0 - occ[k]) * beyond;
        }
        let mut pass = 1.0;
        let mut before = 0.0;
        for k in 0..n {
            let behind = self.slope[k];
            self.offset[k] = before + pass * behind;
            self.slope[k] = pass * (cause[k] - behind);
            before += occ[k] * pass * cause[k];
            pass *= 1.0 - occ[k];
        }
        self.marginal = before + pass * no_hit;
    }

    #[inline]
    pub fn at(&self, k: usize, v: f64) -> f64 {
        self.offset[k] + v * self.slope[k]
    }
}

/// Outcome probabilities of an observed reading for every cause on a trace.
pub(crate) fn cause_masses(
    z: f64,
    ranges: &[f64],
    params: &BeamModelParams,
    out: &mut Vec<f64>,
) -> f64 {
    let bin = params.outcome_bin;
    out.clear();
    out.extend(ranges.iter().map(|&r| density_unchecked(z, r, params).mass(bin)));
    density_unchecked(z, params.max_range, params).mass(bin)
}

/// Maximum-likelihood outcome on a `lambda_z` grid (the last outcome is the max-range atom).
pub fn ml_outcome(profile: &CauseProfile, params: &BeamModelParams, lambda_z: f64) -> f64 {
    let outcomes = outcome_grid(params.max_range, lambda_z);
    let mut best = (f64::NEG_INFINITY, params.max_range);
    for &z in &outcomes {
        let mut d = density_unchecked(z, params.max_range, params).mass(lambda_z) * profile.no_hit;
        for (&c, &r) in profile.causes.iter().zip(&profile.ranges) {
            if c > 0.0 {
                d += c * density_unchecked(z, r, params).mass(lambda_z);
            }
        }
        if d > best.0 {
            best = (d, z);
        }
    }
    best.1
}

/// Bin-center outcomes `λ/2, 3λ/2, …` below `max_range`, followed by `max_range` itself.
pub fn outcome_grid(max_range: f64, lambda_z: f64) -> Vec<f64> {
    let n = ((max_range / lambda_z) + 1e-9).floor() as usize;
    let mut v: Vec<f64> = (0..n)
        .map(|k| (k as f64 + 0.5) * lambda_z)
        .filter(|&z| z < max_range)
        .collect();
    v.push(max_range);
    v
}

//! Information measures: map mutual information on confidence-rich and log-odds
//! maps, particle-based pose entropy, and the combined score.
//!
//! Map MI enumerates discretized measurement outcomes per beam. Outcomes are the
//! `λ_z` bin centers below `z_MAX` plus a single max-range atom. For each possible
//! reflecting cell (and for "no reflector") the beam density is turned into a pmf
//! over those outcomes and renormalized, so every cell's outcome model is a proper
//! discrete channel and the per-cell information is a true mutual information.

use crate::crm::{bin_center, entropy_bits, CrmBelief};
use crate::error::{Error, Result};
use crate::geom::{trace_ray, GridSpec, Pose2D};
use crate::ogm::OccupancyBelief;
use crate::rbpf::{motion_log_density, OdometryModelParams, OdometryReading, StepReport};
use crate::sensor::{density_unchecked, outcome_grid, trace_ranges, BeamModelParams, LinearBeam, ScanGeometry};

#[derive(Debug, Clone, PartialEq)]
pub struct InfoConfig {
    /// Outcome discretization in meters.
    pub lambda_z: f64,
    /// Weight of map information in the combined score.
    pub alpha: f64,
    /// Divide map information by `log2(λ_m)`.
    pub normalize_entropy: bool,
}

impl Default for InfoConfig {
    fn default() -> Self {
        Self {
            lambda_z: 0.1,
            alpha: 0.5,
            normalize_entropy: false,
        }
    }
}

impl InfoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_z > 0.0) {
            return Err(Error::domain("lambda_z must be positive"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::domain("alpha must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfoScore {
    pub i_m: f64,
    pub i_p: f64,
    pub i_c: f64,
}

impl InfoScore {
    pub fn new(i_m: f64, i_p: f64, alpha: f64) -> Result<Self> {
        Ok(Self {
            i_m,
            i_p,
            i_c: ucrmi(i_m, i_p, alpha)?,
        })
    }
}

/// `α·I_m + (1−α)·I_p`.
pub fn ucrmi(i_m: f64, i_p: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::domain(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(alpha * i_m + (1.0 - alpha) * i_p)
}

/// Trajectory information gain between consecutive pose entropies.
pub fn pose_info_gain(h_prev: f64, h_curr: f64) -> f64 {
    h_prev - h_curr
}

/// Outcome pmf of a beam whose first reflector sits at `z_star`.
fn outcome_pmf(z_star: f64, outcomes: &[f64], params: &BeamModelParams, lambda_z: f64, out: &mut Vec<f64>) {
    out.clear();
    let last = outcomes.len() - 1;
    for (i, &z) in outcomes.iter().enumerate() {
        let d = density_unchecked(z, z_star, params);
        out.push(if i == last { d.atom } else { d.continuous * lambda_z });
    }
    let s: f64 = out.iter().sum();
    if s > 0.0 {
        out.iter_mut().for_each(|p| *p /= s);
    }
}

/// Outcome pmfs for every cause on a trace; row `k` is cell `k`, the last row is no-hit.
struct OutcomeTable {
    outcomes: usize,
    rows: Vec<f64>,
}

impl OutcomeTable {
    fn build(ranges: &[f64], params: &BeamModelParams, lambda_z: f64) -> Self {
        let grid = outcome_grid(params.max_range, lambda_z);
        let mut rows = Vec::with_capacity((ranges.len() + 1) * grid.len());
        let mut buf = Vec::new();
        for &r in ranges.iter().chain(std::iter::once(&params.max_range)) {
            outcome_pmf(r, &grid, params, lambda_z, &mut buf);
            rows.extend_from_slice(&buf);
        }
        Self {
            outcomes: grid.len(),
            rows,
        }
    }

    fn column(&self, z: usize, cells: usize, cause: &mut Vec<f64>) -> f64 {
        cause.clear();
        cause.extend((0..cells).map(|k| self.rows[k * self.outcomes + z]));
        self.rows[cells * self.outcomes + z]
    }
}

fn sensor_pose(pose: &Pose2D, geometry: &ScanGeometry) -> Pose2D {
    pose.compose(&geometry.offset)
}

fn check_pose(grid: &GridSpec, pose: &Pose2D) -> Result<()> {
    if grid.contains(pose.x, pose.y) {
        Ok(())
    } else {
        Err(Error::domain(format!("candidate pose ({:.3}, {:.3}) outside map", pose.x, pose.y)))
    }
}

const MIN_OUTCOME_MASS: f64 = 1e-300;

/// Map mutual information (bits) of a virtual scan taken at `pose`.
pub fn crmi<B: CrmBelief + ?Sized>(
    belief: &B,
    pose: &Pose2D,
    geometry: &ScanGeometry,
    params: &BeamModelParams,
    config: &InfoConfig,
) -> Result<f64> {
    config.validate()?;
    let grid = belief.grid();
    check_pose(grid, pose)?;
    let sensor = sensor_pose(pose, geometry);
    let bins = belief.bins();
    let centers: Vec<f64> = (0..bins).map(|b| bin_center(b, bins)).collect();
    let mut occ = Vec::new();
    let mut prior_h = Vec::new();
    let mut cause = Vec::new();
    let mut lin = LinearBeam::default();
    let mut post = vec![0.0; bins];
    let mut total = 0.0;
    for bearing in geometry.bearings() {
        let trace = trace_ray(grid, &sensor, bearing, params.max_range)?;
        if trace.is_empty() {
            continue;
        }
        let ranges = trace_ranges(&trace, params.max_range);
        let table = OutcomeTable::build(&ranges, params, config.lambda_z);
        occ.clear();
        prior_h.clear();
        for c in &trace.cells {
            occ.push(belief.expected(c.index));
            prior_h.push(entropy_bits(belief.masses(c.index)));
        }
        for z in 0..table.outcomes {
            let no_hit = table.column(z, trace.len(), &mut cause);
            lin.compute(&occ, &cause, no_hit);
            let pz = lin.marginal;
            if pz < MIN_OUTCOME_MASS {
                continue;
            }
            let mut gain = 0.0;
            for (k, c) in trace.cells.iter().enumerate() {
                if prior_h[k] == 0.0 {
                    continue;
                }
                let prior = belief.masses(c.index);
                let mut s = 0.0;
                for b in 0..bins {
                    post[b] = prior[b] * lin.at(k, centers[b]).max(0.0);
                    s += post[b];
                }
                if s <= 0.0 {
                    continue;
                }
                post.iter_mut().for_each(|p| *p /= s);
                gain += prior_h[k] - entropy_bits(&post);
            }
            total += pz * gain;
        }
    }
    if config.normalize_entropy && bins > 1 {
        total /= (bins as f64).log2();
    }
    Ok(total)
}

#[inline]
fn bernoulli_entropy(p: f64) -> f64 {
    let mut h = 0.0;
    if p > 0.0 {
        h -= p * p.log2();
    }
    if p < 1.0 {
        h -= (1.0 - p) * (1.0 - p).log2();
    }
    h
}

/// Map mutual information (bits) on a Bernoulli occupancy map. Each cell is binary;
/// posteriors follow from the same outcome model as [`crmi`].
pub fn ogmi<B: OccupancyBelief + ?Sized>(
    map: &B,
    pose: &Pose2D,
    geometry: &ScanGeometry,
    params: &BeamModelParams,
    config: &InfoConfig,
) -> Result<f64> {
    config.validate()?;
    let grid = map.grid();
    check_pose(grid, pose)?;
    let sensor = sensor_pose(pose, geometry);
    let mut occ = Vec::new();
    let mut prior_h = Vec::new();
    let mut cause = Vec::new();
    let mut lin = LinearBeam::default();
    let mut total = 0.0;
    for bearing in geometry.bearings() {
        let trace = trace_ray(grid, &sensor, bearing, params.max_range)?;
        if trace.is_empty() {
            continue;
        }
        let ranges = trace_ranges(&trace, params.max_range);
        let table = OutcomeTable::build(&ranges, params, config.lambda_z);
        occ.clear();
        prior_h.clear();
        for c in &trace.cells {
            let p = map.occupancy(c.index);
            occ.push(p);
            prior_h.push(bernoulli_entropy(p));
        }
        for z in 0..table.outcomes {
            let no_hit = table.column(z, trace.len(), &mut cause);
            lin.compute(&occ, &cause, no_hit);
            let pz = lin.marginal;
            if pz < MIN_OUTCOME_MASS {
                continue;
            }
            let mut gain = 0.0;
            for k in 0..trace.len() {
                if prior_h[k] == 0.0 {
                    continue;
                }
                let p = occ[k];
                let occupied = p * lin.at(k, 1.0).max(0.0);
                let free = (1.0 - p) * lin.at(k, 0.0).max(0.0);
                let s = occupied + free;
                if s <= 0.0 {
                    continue;
                }
                gain += prior_h[k] - bernoulli_entropy(occupied / s);
            }
            total += pz * gain;
        }
    }
    Ok(total)
}

/// Entropy (bits) of the normalized particle weights.
pub fn pose_entropy_naive(weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().sum();
    -weights
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| (w / s) * (w / s).log2())
        .sum::<f64>()
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn entropy_with_prior_term(weights: &[f64], log_likelihoods: &[f64], log_prior: f64) -> Result<f64> {
    if weights.len() != log_likelihoods.len() {
        return Err(Error::domain("weight and likelihood counts differ"));
    }
    let evidence = log_sum_exp(
        weights
            .iter()
            .zip(log_likelihoods)
            .filter(|(w, _)| **w > 0.0)
            .map(|(w, l)| l + w.ln()),
    );
    if !evidence.is_finite() {
        return Err(Error::Divergence("zero measurement likelihood for every particle".into()));
    }
    let mut expected = 0.0;
    for (&w, &l) in weights.iter().zip(log_likelihoods) {
        if w > 0.0 {
            expected += w * (l + log_prior);
        }
    }
    Ok((evidence - expected) / std::f64::consts::LN_2)
}

/// Particle approximation of the conditional pose entropy (bits) after one filter step.
///
/// `prev_*` describe the set before propagation; `poses`, `weights` and
/// `log_likelihoods` the propagated and reweighted set (weights normalized).
#[allow(clippy::too_many_arguments)]
pub fn pose_entropy_bayes(
    prev_poses: &[Pose2D],
    prev_weights: &[f64],
    poses: &[Pose2D],
    weights: &[f64],
    log_likelihoods: &[f64],
    u: &OdometryReading,
    odometry: &OdometryModelParams,
) -> Result<f64> {
    if prev_poses.len() != poses.len() || prev_weights.len() != poses.len() {
        return Err(Error::domain("particle counts differ between steps"));
    }
    let mut terms = Vec::with_capacity(poses.len());
    for ((next, prev), &w) in poses.iter().zip(prev_poses).zip(prev_weights) {
        if w > 0.0 {
            terms.push(motion_log_density(next, prev, u, odometry)? + w.ln());
        }
    }
    let log_prior = log_sum_exp(terms.iter().copied());
    if !log_prior.is_finite() {
        return Err(Error::Divergence("zero motion density for every particle".into()));
    }
    entropy_with_prior_term(weights, log_likelihoods, log_prior)
}

/// [`pose_entropy_bayes`] applied to a filter step report.
pub fn pose_entropy_of_step(report: &StepReport, odometry: &OdometryModelParams) -> Result<f64> {
    pose_entropy_bayes(
        &report.prev_poses,
        &report.prev_weights,
        &report.poses,
        &report.weights,
        &report.log_likelihoods,
        &report.odometry,
        odometry,
    )
}

/// Measurement-only part of [`pose_entropy_bayes`] (motion term set to one). Used where
/// no propagation step precedes the weights.
pub fn pose_entropy_measurement(weights: &[f64], log_likelihoods: &[f64]) -> Result<f64> {
    entropy_with_prior_term(weights, log_likelihoods, 0.0)
}

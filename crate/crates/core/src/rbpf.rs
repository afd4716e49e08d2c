//! Rao-Blackwellized particle filter: each particle carries a pose hypothesis,
//! a log-weight and its own map. One [`ParticleSet::step`] propagates through the
//! odometry model, weights against the pre-update map, integrates the scan, and
//! resamples when the effective particle count drops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::crm::{CrmBelief, ConfidenceRichMap, ScanScratch};
use crate::error::{Error, Result};
use crate::geom::{trace_ray, wrap_angle, GridSpec, Pose2D};
use crate::ogm::LogOddsMap;
use crate::sensor::{cause_masses, trace_ranges, BeamModelParams, Scan};

/// Noise coefficients of the rot1-trans-rot2 odometry model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdometryModelParams {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub alpha4: f64,
}

impl Default for OdometryModelParams {
    fn default() -> Self {
        Self {
            alpha1: 0.05,
            alpha2: 0.01,
            alpha3: 0.05,
            alpha4: 0.01,
        }
    }
}

impl OdometryModelParams {
    pub fn noiseless() -> Self {
        Self {
            alpha1: 0.0,
            alpha2: 0.0,
            alpha3: 0.0,
            alpha4: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a = [self.alpha1, self.alpha2, self.alpha3, self.alpha4];
        if a.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::domain("odometry noise coefficients must be finite and >= 0"))
        }
    }

    fn variances(&self, m: &MotionComponents) -> [f64; 3] {
        let (r1, t, r2) = (m.rot1 * m.rot1, m.trans * m.trans, m.rot2 * m.rot2);
        [
            self.alpha1 * r1 + self.alpha2 * t,
            self.alpha3 * t + self.alpha4 * (r1 + r2),
            self.alpha1 * r2 + self.alpha2 * t,
        ]
    }
}

/// Relative motion reported by odometry, expressed in the frame of the previous pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdometryReading {
    pub delta: Pose2D,
}

/// rot1-trans-rot2 decomposition of a relative motion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionComponents {
    pub rot1: f64,
    pub trans: f64,
    pub rot2: f64,
}

const MIN_TRANS: f64 = 1e-9;

impl MotionComponents {
    pub fn of(delta: &Pose2D) -> Self {
        let trans = delta.x.hypot(delta.y);
        let rot1 = if trans < MIN_TRANS {
            0.0
        } else {
            delta.y.atan2(delta.x)
        };
        Self {
            rot1,
            trans,
            rot2: wrap_angle(delta.theta - rot1),
        }
    }

    pub fn between(from: &Pose2D, to: &Pose2D) -> Self {
        Self::of(&from.between(to))
    }

    /// Applies the motion to `from`.
    pub fn apply(&self, from: &Pose2D) -> Pose2D {
        let heading = from.theta + self.rot1;
        Pose2D::new(
            from.x + self.trans * heading.cos(),
            from.y + self.trans * heading.sin(),
            heading + self.rot2,
        )
    }
}

impl OdometryReading {
    pub fn new(delta: Pose2D) -> Self {
        Self { delta }
    }

    pub fn identity() -> Self {
        Self::new(Pose2D::identity())
    }

    /// Reading between two consecutive raw odometry poses.
    pub fn from_poses(prev: &Pose2D, curr: &Pose2D) -> Self {
        Self::new(prev.between(curr))
    }

    pub fn components(&self) -> MotionComponents {
        MotionComponents::of(&self.delta)
    }
}

/// Draws a successor pose from the odometry model.
pub fn sample_motion<R: Rng + ?Sized>(
    prev: &Pose2D,
    u: &OdometryReading,
    params: &OdometryModelParams,
    rng: &mut R,
) -> Pose2D {
    let m = u.components();
    let [v1, vt, v2] = params.variances(&m);
    if v1 == 0.0 && vt == 0.0 && v2 == 0.0 {
        return prev.compose(&u.delta);
    }
    let mut draw = |var: f64| -> f64 {
        if var > 0.0 {
            var.sqrt() * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        }
    };
    let noisy = MotionComponents {
        rot1: m.rot1 + draw(v1),
        trans: m.trans + draw(vt),
        rot2: m.rot2 + draw(v2),
    };
    noisy.apply(prev)
}

fn log_gaussian(residual: f64, var: f64) -> f64 {
    -0.5 * residual * residual / var - 0.5 * (2.0 * std::f64::consts::PI * var).ln()
}

/// `ln p(x_next | x_prev, u)`: Gaussians over the rot1-trans-rot2 residuals.
pub fn motion_log_density(
    next: &Pose2D,
    prev: &Pose2D,
    u: &OdometryReading,
    params: &OdometryModelParams,
) -> Result<f64> {
    let m = u.components();
    let vars = params.variances(&m);
    if vars.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::domain("motion density undefined for zero noise variance"));
    }
    let h = MotionComponents::between(prev, next);
    Ok(log_gaussian(wrap_angle(h.rot1 - m.rot1), vars[0])
        + log_gaussian(h.trans - m.trans, vars[1])
        + log_gaussian(wrap_angle(h.rot2 - m.rot2), vars[2]))
}

/// `p(x_next | x_prev, u)`.
pub fn motion_density(
    next: &Pose2D,
    prev: &Pose2D,
    u: &OdometryReading,
    params: &OdometryModelParams,
) -> Result<f64> {
    motion_log_density(next, prev, u, params).map(f64::exp)
}

/// Log-likelihood of a scan under the sensor-cause model, with cause profiles from
/// the belief's expected occupancy.
pub fn clam_log_likelihood<B: CrmBelief + ?Sized>(
    belief: &B,
    pose: &Pose2D,
    scan: &Scan,
    params: &BeamModelParams,
) -> Result<f64> {
    clam_log_likelihood_with(belief.grid(), |i| belief.expected(i), pose, scan, params)
}

pub(crate) fn clam_log_likelihood_with(
    grid: &GridSpec,
    expected: impl Fn(usize) -> f64,
    pose: &Pose2D,
    scan: &Scan,
    params: &BeamModelParams,
) -> Result<f64> {
    if !grid.contains(pose.x, pose.y) {
        return Err(Error::domain(format!("pose ({:.3}, {:.3}) outside map", pose.x, pose.y)));
    }
    let sensor = scan.sensor_pose(pose);
    let mut cause = Vec::new();
    let mut ll = 0.0;
    for beam in &scan.beams {
        let trace = trace_ray(grid, &sensor, beam.bearing, params.max_range)?;
        let ranges = trace_ranges(&trace, params.max_range);
        let no_hit = cause_masses(beam.range, &ranges, params, &mut cause);
        let mut pass = 1.0;
        let mut mass = 0.0;
        for (c, &p) in trace.cells.iter().zip(&cause) {
            let e = expected(c.index);
            mass += e * pass * p;
            pass *= 1.0 - e;
        }
        mass += pass * no_hit;
        ll += mass.ln();
    }
    Ok(ll)
}

/// Per-particle map maintained by the filter.
pub trait ParticleMap: Clone {
    /// `ln p(z | x, map)` against the map as it stands (before this scan's update).
    fn log_likelihood(&self, pose: &Pose2D, scan: &Scan, params: &BeamModelParams) -> Result<f64>;
    fn integrate(&mut self, pose: &Pose2D, scan: &Scan, params: &BeamModelParams) -> Result<()>;
    fn contains(&self, pose: &Pose2D) -> bool;

    /// Log-likelihood against the pre-update map, then the map update. The update
    /// is skipped when the likelihood is not finite.
    fn weigh_and_integrate(&mut self, pose: &Pose2D, scan: &Scan, params: &BeamModelParams) -> Result<f64> {
        let ll = self.log_likelihood(pose, scan, params)?;
        if ll.is_finite() {
            self.integrate(pose, scan, params)?;
        }
        Ok(ll)
    }
}

impl ParticleMap for ConfidenceRichMap {
    fn log_likelihood(&self, pose: &Pose2D, scan: &Scan, params: &BeamModelParams) -> Result<f64> {
        clam_log_likelihood(self, pose, scan, params)
    }

    fn integrate(&mut self, pose: &Pose2D, scan: &Scan, params: &BeamModelParams) -> Result<()> {
        let mut scratch = ScanScratch::default();
        self.integrate_scan_with(pose, scan, params, &mut scratch).map(|_| ())
    }

    fn contains(&self, pose: &Pose2D) -> bool {
        self.grid().contains(pose.x, pose.y)
    }

    /// Single pass: the beam likelihoods fall out of the update's cause profiles.
    /// Unlike the default, the map is updated even if a beam has zero likelihood.
    fn weigh_and_integrate(&mut self, pose: &Pose2D, scan: &Scan, params: &BeamModelParams) -> Result<f64> {
        let mut scratch = ScanScratch::default();
        Ok(self.integrate_scan_with(pose, scan, params, &mut scratch)?.log_likelihood)
    }
}

impl ParticleMap for LogOddsMap {
    fn log_likelihood(&self, pose: &Pose2D, scan: &Scan, params: &BeamModelParams) -> Result<f64> {
        self.fixed_map_log_likelihood(pose, scan, params)
    }

    fn integrate(&mut self, pose: &Pose2D, scan: &Scan, params: &BeamModelParams) -> Result<()> {
        self.integrate_scan_og(pose, scan, params)
    }

    fn contains(&self, pose: &Pose2D) -> bool {
        crate::ogm::OccupancyBelief::grid(self).contains(pose.x, pose.y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Particle<M> {
    pub pose: Pose2D,
    /// Poses after each step (only the latest one when trajectories are thinned).
    pub trajectory: Vec<Pose2D>,
    /// Unnormalized log-weight.
    pub log_weight: f64,
    /// `ln p(z_k | x_k, m_{k-1})` from the latest step.
    pub last_log_likelihood: f64,
    pub map: M,
}

impl<M: ParticleMap> Particle<M> {
    fn reweight(&mut self, scan: &Scan, params: &BeamModelParams) -> Result<f64> {
        let ll = if self.map.contains(&self.pose) {
            self.map.log_likelihood(&self.pose, scan, params)?
        } else {
            f64::NEG_INFINITY
        };
        self.last_log_likelihood = ll;
        self.log_weight += ll;
        Ok(self.log_weight)
    }
}

/// Multiplies the particle's weight by the sensor-cause likelihood of `scan`
/// against its pre-update map. Returns the new log-weight.
pub fn weight_clam(particle: &mut Particle<ConfidenceRichMap>, scan: &Scan, params: &BeamModelParams) -> Result<f64> {
    particle.reweight(scan, params)
}

/// Multiplies the particle's weight by the fixed-map likelihood of `scan`.
pub fn weight_ogm(particle: &mut Particle<LogOddsMap>, scan: &Scan, params: &BeamModelParams) -> Result<f64> {
    particle.reweight(scan, params)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryMode {
    Full,
    CurrentOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub odometry: OdometryModelParams,
    pub beam: BeamModelParams,
    /// Resample when `N_eff < resample_ratio * n_p`.
    pub resample_ratio: f64,
    pub trajectory: TrajectoryMode,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            odometry: OdometryModelParams::default(),
            beam: BeamModelParams::default(),
            resample_ratio: 0.5,
            trajectory: TrajectoryMode::Full,
        }
    }
}

/// Everything one step produced, in particle-slot order before resampling.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub odometry: OdometryReading,
    pub prev_poses: Vec<Pose2D>,
    pub prev_weights: Vec<f64>,
    pub poses: Vec<Pose2D>,
    pub weights: Vec<f64>,
    pub log_likelihoods: Vec<f64>,
    pub n_eff: f64,
    pub resampled: bool,
}

const TAG_MOTION: u64 = 1;
const TAG_RESAMPLE: u64 = 2;

/// Independent stream for `(seed, stream, step, tag)`.
pub fn stream_rng(seed: u64, stream: u64, step: u64, tag: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream.to_le_bytes());
    key[16..24].copy_from_slice(&step.to_le_bytes());
    key[24..].copy_from_slice(&tag.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Normalizes log-weights. Errors when every weight is zero.
pub fn normalize_log_weights(log_weights: &[f64]) -> Result<Vec<f64>> {
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Divergence("all particle weights are zero".into()));
    }
    let w: Vec<f64> = log_weights.iter().map(|&l| (l - max).exp()).collect();
    let s: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / s).collect())
}

/// `1 / Σ w̄²` over normalized weights.
pub fn effective_particles(weights: &[f64]) -> Result<f64> {
    let s: f64 = weights.iter().sum();
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Divergence("all particle weights are zero".into()));
    }
    let sq: f64 = weights.iter().map(|w| (w / s) * (w / s)).sum();
    Ok(1.0 / sq)
}

/// Source index of each of `draws` output slots under systematic resampling with
/// the given offset in `[0, 1/draws)`. Output indices are nondecreasing.
pub fn systematic_indices(weights: &[f64], draws: usize, offset: f64) -> Vec<usize> {
    let n = weights.len();
    let total: f64 = weights.iter().sum();
    let step = 1.0 / draws as f64;
    let mut out = Vec::with_capacity(draws);
    let mut cumulative = weights[0] / total;
    let mut i = 0;
    for k in 0..draws {
        let u = offset + k as f64 * step;
        while u >= cumulative && i + 1 < n {
            i += 1;
            cumulative += weights[i] / total;
        }
        out.push(i);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet<M> {
    particles: Vec<Particle<M>>,
    weights: Vec<f64>,
    step: u64,
    seed: u64,
}

impl<M: ParticleMap> ParticleSet<M> {
    /// `n` particles at `pose`, each with its own copy of `map`.
    pub fn new(n: usize, pose: Pose2D, map: M, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::domain("particle count must be positive"));
        }
        let particles = (0..n)
            .map(|_| Particle {
                pose,
                trajectory: Vec::new(),
                log_weight: 0.0,
                last_log_likelihood: 0.0,
                map: map.clone(),
            })
            .collect();
        Ok(Self {
            particles,
            weights: vec![1.0 / n as f64; n],
            step: 0,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn particles(&self) -> &[Particle<M>] {
        &self.particles
    }

    pub fn particles_mut(&mut self) -> &mut [Particle<M>] {
        &mut self.particles
    }

    /// Normalized weights.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Recomputes the normalized-weight cache from the particles' log-weights.
    pub fn refresh_weights(&mut self) -> Result<()> {
        let lw: Vec<f64> = self.particles.iter().map(|p| p.log_weight).collect();
        self.weights = normalize_log_weights(&lw)?;
        Ok(())
    }

    pub fn effective_particles(&self) -> Result<f64> {
        effective_particles(&self.weights)
    }

    /// Systematic resampling. Duplicates deep-copy their maps; weights reset to equal.
    pub fn resample<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let n = self.particles.len();
        let offset = rng.random::<f64>() / n as f64;
        let indices = systematic_indices(&self.weights, n, offset);
        let mut counts = vec![0usize; n];
        for &i in &indices {
            counts[i] += 1;
        }
        let old = std::mem::take(&mut self.particles);
        let mut next = Vec::with_capacity(n);
        for (p, &c) in old.into_iter().zip(&counts) {
            if c == 0 {
                continue;
            }
            for _ in 1..c {
                next.push(p.clone());
            }
            next.push(p);
        }
        for p in &mut next {
            p.log_weight = 0.0;
        }
        self.particles = next;
        self.weights = vec![1.0 / n as f64; n];
    }

    /// One filter cycle: propagate, weight against the pre-update map, integrate the
    /// scan at the propagated pose, then resample if `N_eff` is low.
    pub fn step(&mut self, u: &OdometryReading, scan: &Scan, config: &FilterConfig) -> Result<StepReport> {
        let prev_poses: Vec<Pose2D> = self.particles.iter().map(|p| p.pose).collect();
        let prev_weights = self.weights.clone();
        let mut log_likelihoods = Vec::with_capacity(self.len());
        for (j, p) in self.particles.iter_mut().enumerate() {
            let mut rng = stream_rng(self.seed, j as u64, self.step, TAG_MOTION);
            p.pose = sample_motion(&p.pose, u, &config.odometry, &mut rng);
            let ll = if p.map.contains(&p.pose) {
                p.map.weigh_and_integrate(&p.pose, scan, &config.beam)?
            } else {
                f64::NEG_INFINITY
            };
            p.last_log_likelihood = ll;
            p.log_weight += ll;
            log_likelihoods.push(ll);
            match config.trajectory {
                TrajectoryMode::Full => p.trajectory.push(p.pose),
                TrajectoryMode::CurrentOnly => {
                    p.trajectory.clear();
                    p.trajectory.push(p.pose);
                }
            }
        }
        self.refresh_weights()?;
        let n_eff = self.effective_particles()?;
        let poses = self.particles.iter().map(|p| p.pose).collect();
        let weights = self.weights.clone();
        let resampled = n_eff < config.resample_ratio * self.len() as f64;
        if resampled {
            let mut rng = stream_rng(self.seed, u64::MAX, self.step, TAG_RESAMPLE);
            self.resample(&mut rng);
        }
        self.step += 1;
        Ok(StepReport {
            odometry: *u,
            prev_poses,
            prev_weights,
            poses,
            weights,
            log_likelihoods,
            n_eff,
            resampled,
        })
    }

    /// Weighted mean position with a circular mean heading.
    pub fn estimate(&self) -> Pose2D {
        estimate(self.particles.iter().map(|p| p.pose), &self.weights)
    }
}

/// Weighted mean of `poses`; the heading uses the circular mean.
pub fn estimate(poses: impl IntoIterator<Item = Pose2D>, weights: &[f64]) -> Pose2D {
    let (mut x, mut y, mut s, mut c, mut total) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (p, &w) in poses.into_iter().zip(weights) {
        x += w * p.x;
        y += w * p.y;
        s += w * p.theta.sin();
        c += w * p.theta.cos();
        total += w;
    }
    Pose2D::new(x / total, y / total, s.atan2(c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensor::{Beam, ScanGeometry};
    use proptest::prelude::*;
    use std::cell::RefCell;
    use std::f64::consts::PI;
    use std::rc::Rc;

    fn close(a: &Pose2D, b: &Pose2D, tol: f64) -> bool {
        (a.x - b.x).abs() < tol && (a.y - b.y).abs() < tol && wrap_angle(a.theta - b.theta).abs() < tol
    }

    #[test]
    fn noiseless_motion_composes() {
        let mut rng = stream_rng(1, 0, 0, 0);
        let prev = Pose2D::new(1.0, 2.0, 0.3);
        let u = OdometryReading::new(Pose2D::new(0.5, -0.2, 0.4));
        let next = sample_motion(&prev, &u, &OdometryModelParams::noiseless(), &mut rng);
        assert_eq!(next, prev.compose(&u.delta));
        let same = sample_motion(&prev, &OdometryReading::identity(), &OdometryModelParams::noiseless(), &mut rng);
        assert_eq!(same, prev);
    }

    #[test]
    fn components_apply_matches_compose() {
        let prev = Pose2D::new(-1.0, 0.5, 2.9);
        let d = Pose2D::new(0.3, 0.7, -1.2);
        let m = MotionComponents::of(&d);
        assert!(close(&m.apply(&prev), &prev.compose(&d), 1e-12));
    }

    #[test]
    fn translation_sample_mean() {
        let params = OdometryModelParams {
            alpha1: 0.0,
            alpha2: 0.0,
            alpha3: 0.04,
            alpha4: 0.0,
        };
        let u = OdometryReading::new(Pose2D::new(1.0, 0.0, 0.0));
        let prev = Pose2D::identity();
        let mut rng = stream_rng(7, 0, 0, 0);
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| {
                let p = sample_motion(&prev, &u, &params, &mut rng);
                p.x.signum() * p.x.hypot(p.y)
            })
            .sum::<f64>()
            / n as f64;
        let sigma = 0.2;
        assert!((mean - 1.0).abs() < 3.0 * sigma / (n as f64).sqrt(), "mean {mean}");
    }

    fn noisy() -> OdometryModelParams {
        OdometryModelParams {
            alpha1: 0.1,
            alpha2: 0.05,
            alpha3: 0.1,
            alpha4: 0.05,
        }
    }

    #[test]
    fn density_peak_and_symmetry() {
        let p = noisy();
        let prev = Pose2D::new(0.2, 0.1, 0.5);
        let u = OdometryReading::new(Pose2D::new(1.0, 0.2, 0.3));
        let m = u.components();
        let v = p.variances(&m);
        let peak = motion_density(&prev.compose(&u.delta), &prev, &u, &p).unwrap();
        let expected: f64 = v.iter().map(|&var| 1.0 / (2.0 * PI * var).sqrt()).product();
        assert!((peak - expected).abs() < 1e-9 * expected);
        let shifted = |dt: f64| {
            let mc = MotionComponents { trans: m.trans + dt, ..m };
            motion_density(&mc.apply(&prev), &prev, &u, &p).unwrap()
        };
        assert!((shifted(0.05) - shifted(-0.05)).abs() < 1e-9 * peak);
    }

    #[test]
    fn density_zero_variance_is_domain_error() {
        let prev = Pose2D::identity();
        let u = OdometryReading::new(Pose2D::new(1.0, 0.0, 0.0));
        assert!(matches!(
            motion_density(&prev, &prev, &u, &OdometryModelParams::noiseless()),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn density_integrates_to_one() {
        // small enough that the grid stays at positive translation
        let p = OdometryModelParams {
            alpha1: 0.1,
            alpha2: 0.05,
            alpha3: 0.02,
            alpha4: 0.01,
        };
        let prev = Pose2D::new(0.0, 0.0, 0.0);
        let u = OdometryReading::new(Pose2D::new(1.0, 0.3, 0.4));
        let m = u.components();
        let sd: Vec<f64> = p.variances(&m).iter().map(|v| v.sqrt()).collect();
        let n = 40;
        let half = 5.0;
        let mut sum = 0.0;
        let step: Vec<f64> = sd.iter().map(|s| 2.0 * half * s / n as f64).collect();
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    let mc = MotionComponents {
                        rot1: m.rot1 - half * sd[0] + (a as f64 + 0.5) * step[0],
                        trans: m.trans - half * sd[1] + (b as f64 + 0.5) * step[1],
                        rot2: m.rot2 - half * sd[2] + (c as f64 + 0.5) * step[2],
                    };
                    sum += motion_density(&mc.apply(&prev), &prev, &u, &p).unwrap();
                }
            }
        }
        let total = sum * step[0] * step[1] * step[2];
        assert!((total - 1.0).abs() < 1e-3, "integral {total}");
    }

    #[test]
    fn n_eff_identities() {
        assert!((effective_particles(&[0.25; 4]).unwrap() - 4.0).abs() < 1e-12);
        assert!((effective_particles(&[1.0, 0.0, 0.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((effective_particles(&[0.5, 0.25, 0.25]).unwrap() - 1.0 / 0.375).abs() < 1e-12);
        assert!(matches!(effective_particles(&[0.0, 0.0]), Err(Error::Divergence(_))));
    }

    #[test]
    fn systematic_enumeration() {
        for k in 0..250 {
            let offset = k as f64 * 0.001;
            let idx = systematic_indices(&[0.75, 0.25], 4, offset);
            let ones = idx.iter().filter(|&&i| i == 0).count();
            assert_eq!(ones, 3, "offset {offset}");
            assert_eq!(idx.len(), 4);
        }
    }

    #[test]
    fn systematic_equal_and_delta() {
        for k in 0..10 {
            let off = k as f64 * 0.0199;
            assert_eq!(systematic_indices(&[0.2; 5], 5, off), vec![0, 1, 2, 3, 4]);
            assert_eq!(systematic_indices(&[1.0, 0.0, 0.0, 0.0, 0.0], 5, off), vec![0; 5]);
        }
    }

    #[test]
    fn estimate_cases() {
        let p = Pose2D::new(1.0, -2.0, 0.5);
        assert_eq!(estimate([p], &[1.0]), p);
        let e = estimate([p, p, p], &[1.0 / 3.0; 3]);
        assert!(close(&e, &p, 1e-12));
        let e = estimate([Pose2D::new(0.0, 0.0, 3.0), Pose2D::new(0.0, 0.0, -3.0)], &[0.5, 0.5]);
        assert!((e.theta.abs() - PI).abs() < 1e-9, "{}", e.theta);
    }

    /// Records the order of map queries and updates.
    #[derive(Clone)]
    struct MockMap {
        log: Rc<RefCell<Vec<(&'static str, usize, Pose2D)>>>,
        updates: usize,
        ll: f64,
    }

    impl ParticleMap for MockMap {
        fn log_likelihood(&self, pose: &Pose2D, _: &Scan, _: &BeamModelParams) -> Result<f64> {
            self.log.borrow_mut().push(("weight", self.updates, *pose));
            Ok(self.ll)
        }
        fn integrate(&mut self, pose: &Pose2D, _: &Scan, _: &BeamModelParams) -> Result<()> {
            self.log.borrow_mut().push(("update", self.updates, *pose));
            self.updates += 1;
            Ok(())
        }
        fn contains(&self, _: &Pose2D) -> bool {
            true
        }
    }

    #[test]
    fn weights_use_pre_update_map_and_propagated_pose() {
        let log = Rc::new(RefCell::new(Vec::new()));
        let map = MockMap { log: log.clone(), updates: 0, ll: -1.0 };
        let mut set = ParticleSet::new(3, Pose2D::identity(), map, 5).unwrap();
        let cfg = FilterConfig {
            odometry: noisy(),
            ..FilterConfig::default()
        };
        let u = OdometryReading::new(Pose2D::new(0.5, 0.0, 0.1));
        for _ in 0..4 {
            log.borrow_mut().clear();
            let report = set.step(&u, &Scan::empty(0.0), &cfg).unwrap();
            let entries = log.borrow();
            assert_eq!(entries.len(), 6);
            for (j, pair) in entries.chunks(2).enumerate() {
                let (w, u) = (&pair[0], &pair[1]);
                assert_eq!((w.0, u.0), ("weight", "update"));
                assert_eq!(w.1, u.1, "weight must see the map before this scan");
                assert_eq!(w.2, report.poses[j]);
                assert_eq!(u.2, report.poses[j]);
                assert_ne!(w.2, report.prev_poses[j]);
            }
        }
        assert!(set.particles().iter().all(|p| p.trajectory.len() == 4));
    }

    #[test]
    fn common_likelihood_leaves_weights_unchanged() {
        let log = Rc::new(RefCell::new(Vec::new()));
        let map = MockMap { log, updates: 0, ll: -3.7 };
        let mut set = ParticleSet::new(4, Pose2D::identity(), map, 1).unwrap();
        let before = set.weights().to_vec();
        let r = set.step(&OdometryReading::identity(), &Scan::empty(0.0), &FilterConfig::default()).unwrap();
        assert!(!r.resampled);
        for (a, b) in before.iter().zip(set.weights()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    fn wall_world() -> (ConfidenceRichMap, LogOddsMap, Scan, Pose2D) {
        let grid = GridSpec::new(40, 20, 0.2, Pose2D::identity()).unwrap();
        let mut crm = ConfidenceRichMap::init_uniform(grid.clone(), 10);
        let mut ogm = LogOddsMap::new(grid.clone(), crate::ogm::OgmParams::default());
        let params = BeamModelParams::default();
        let truth = Pose2D::new(1.1, 2.1, 0.0);
        // wall at x = 3.0 .. 3.2
        let geom = ScanGeometry::new(1.2, 9, params.max_range);
        let ranges: Vec<f64> = geom
            .bearings()
            .iter()
            .map(|b| {
                let t = trace_ray(&grid, &truth, *b, params.max_range).unwrap();
                let k = t.cells.iter().position(|c| grid.coords(c.index).0 == 15).unwrap();
                t.cell_range(k)
            })
            .collect();
        let scan = Scan::from_ranges(0.0, &geom, &ranges).unwrap();
        for _ in 0..5 {
            crm.integrate_scan(&truth, &scan, &params).unwrap();
            ogm.integrate_scan_og(&truth, &scan, &params).unwrap();
        }
        (crm, ogm, scan, truth)
    }

    #[test]
    fn true_pose_outweighs_offset_pose() {
        let (crm, ogm, scan, truth) = wall_world();
        let params = BeamModelParams::default();
        let off = Pose2D::new(truth.x - 1.0, truth.y, truth.theta);
        fn mk<M>(pose: Pose2D, map: M) -> Particle<M> {
            Particle {
                pose,
                trajectory: vec![],
                log_weight: 0.0,
                last_log_likelihood: 0.0,
                map,
            }
        }
        let mut a = mk(truth, crm.clone());
        let mut b = mk(off, crm);
        assert!(weight_clam(&mut a, &scan, &params).unwrap() > weight_clam(&mut b, &scan, &params).unwrap());
        let mut a = mk(truth, ogm.clone());
        let mut b = mk(off, ogm);
        assert!(weight_ogm(&mut a, &scan, &params).unwrap() > weight_ogm(&mut b, &scan, &params).unwrap());
        let before = a.log_weight;
        assert_eq!(weight_ogm(&mut a, &Scan::empty(0.0), &params).unwrap(), before);
    }

    #[test]
    fn clam_likelihood_matches_profile_mixture() {
        let (crm, _, scan, truth) = wall_world();
        let params = BeamModelParams::default();
        let sensor = scan.sensor_pose(&truth);
        let mut direct = 0.0;
        for b in &scan.beams {
            let t = trace_ray(crm.grid(), &sensor, b.bearing, params.max_range).unwrap();
            let profile = crate::sensor::cause_profile(&t, crm.expected_occupancy(), params.max_range).unwrap();
            direct += crate::sensor::beam_likelihood(b.range, &profile, &params)
                .unwrap()
                .mass(params.outcome_bin)
                .ln();
        }
        let ll = clam_log_likelihood(&crm, &truth, &scan, &params).unwrap();
        assert!((ll - direct).abs() < 1e-9);
    }

    #[test]
    fn fused_update_matches_separate_calls() {
        let (crm, _, scan, truth) = wall_world();
        let params = BeamModelParams::default();
        let pose = Pose2D::new(truth.x + 0.13, truth.y - 0.07, 0.05);
        let mut separate = crm.clone();
        let ll = separate.log_likelihood(&pose, &scan, &params).unwrap();
        separate.integrate(&pose, &scan, &params).unwrap();
        let mut fused = crm;
        assert_eq!(fused.weigh_and_integrate(&pose, &scan, &params).unwrap(), ll);
        assert_eq!(fused, separate);
    }

    #[test]
    fn many_beams_do_not_underflow() {
        let grid = GridSpec::new(20, 20, 0.2, Pose2D::identity()).unwrap();
        let crm = ConfidenceRichMap::init_uniform(grid, 10);
        let params = BeamModelParams::default();
        let scan = Scan {
            timestamp: 0.0,
            beams: (0..1100)
                .map(|l| Beam {
                    bearing: -3.0 + 6.0 * l as f64 / 1100.0,
                    range: 0.05,
                })
                .collect(),
            offset: Pose2D::identity(),
        };
        let ll = clam_log_likelihood(&crm, &Pose2D::new(2.0, 2.0, 0.0), &scan, &params).unwrap();
        assert!(ll.is_finite() && ll < -700.0);
        let w = normalize_log_weights(&[ll, ll - 5.0]).unwrap();
        assert!(w.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn single_noiseless_particle_tracks_truth() {
        let (crm, _, scan, truth) = wall_world();
        let mut set = ParticleSet::new(1, truth, crm, 3).unwrap();
        let cfg = FilterConfig {
            odometry: OdometryModelParams::noiseless(),
            ..FilterConfig::default()
        };
        let u = OdometryReading::new(Pose2D::new(0.0, 0.0, 0.0));
        for _ in 0..3 {
            set.step(&u, &scan, &cfg).unwrap();
        }
        assert!(set.particles()[0].trajectory.iter().all(|p| *p == truth));
    }

    #[test]
    fn seeded_runs_are_identical_and_resample_when_degenerate() {
        let (crm, _, scan, truth) = wall_world();
        let cfg = FilterConfig {
            odometry: noisy(),
            ..FilterConfig::default()
        };
        let u = OdometryReading::new(Pose2D::new(0.1, 0.0, 0.0));
        let run = || {
            let mut set = ParticleSet::new(20, truth, crm.clone(), 11).unwrap();
            let mut reports = Vec::new();
            for _ in 0..4 {
                reports.push(set.step(&u, &scan, &cfg).unwrap());
            }
            (set, reports)
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        for r in &ra {
            assert_eq!(r.resampled, r.n_eff < 10.0);
        }
        assert!(ra.iter().any(|r| r.resampled));
    }

    #[test]
    fn resample_resets_weights() {
        let log = Rc::new(RefCell::new(Vec::new()));
        let map = MockMap { log, updates: 0, ll: 0.0 };
        let mut set = ParticleSet::new(5, Pose2D::identity(), map, 1).unwrap();
        for (j, p) in set.particles_mut().iter_mut().enumerate() {
            p.log_weight = -(j as f64) * 2.0;
            p.pose = Pose2D::new(j as f64, 0.0, 0.0);
        }
        set.refresh_weights().unwrap();
        set.resample(&mut stream_rng(0, 0, 0, 0));
        assert_eq!(set.len(), 5);
        assert!((set.effective_particles().unwrap() - 5.0).abs() < 1e-12);
        assert!(set.particles().iter().all(|p| p.log_weight == 0.0));
        assert_eq!(set.particles()[0].pose.x, 0.0);
    }

    proptest! {
        #[test]
        fn systematic_multiplicities_are_floor_or_ceil(
            raw in proptest::collection::vec(0.01f64..1.0, 1..12),
            u in 0.0f64..1.0,
        ) {
            let n = raw.len();
            let idx = systematic_indices(&raw, n, u / n as f64);
            prop_assert_eq!(idx.len(), n);
            let total: f64 = raw.iter().sum();
            for (i, w) in raw.iter().enumerate() {
                let c = idx.iter().filter(|&&k| k == i).count() as f64;
                let expect = n as f64 * w / total;
                prop_assert!(c >= expect.floor() - 1e-9 && c <= expect.ceil() + 1e-9);
            }
        }

        #[test]
        fn normalized_weights_sum_to_one(lw in proptest::collection::vec(-2000.0f64..0.0, 1..50)) {
            let w = normalize_log_weights(&lw).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(w.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }
}

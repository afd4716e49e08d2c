//! Incrementally exploring information-gathering planner.
//!
//! The tree grows by sampling free space, steering from the nearest node and
//! scoring each new node with the selected information function. Every node keeps a
//! sparse overlay of the map cells its virtual scan changed; a node's belief is its
//! chain of ancestor overlays on top of the base map. Virtual scans use the
//! maximum-likelihood range of each beam.

use std::collections::HashMap;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use crate::crm::{apply_scan, expected_of, ConfidenceRichMap, CrmBelief, MassStore, ScanScratch};
use crate::error::{Error, Result};
use crate::geom::{trace_ray, GridSpec, Pose2D};
use crate::info::{crmi, ogmi, pose_entropy_bayes, pose_info_gain, ucrmi, InfoConfig};
use crate::ogm::{beam_increments, logistic, LogOddsMap, OccupancyBelief, OgmParams};
use crate::rbpf::{
    clam_log_likelihood_with, normalize_log_weights, effective_particles, sample_motion, stream_rng,
    systematic_indices, OdometryModelParams, OdometryReading, ParticleMap, ParticleSet,
};
use crate::sensor::{ml_outcome, trace_ranges, Beam, BeamModelParams, CauseProfile, Scan, ScanGeometry};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InfoSelector {
    Ogmi,
    Crmi,
    Ucrmi,
    /// Listed for completeness; not implemented.
    Gpvr,
}

impl InfoSelector {
    pub fn name(&self) -> &'static str {
        match self {
            InfoSelector::Ogmi => "ogmi",
            InfoSelector::Crmi => "crmi",
            InfoSelector::Ucrmi => "ucrmi",
            InfoSelector::Gpvr => "gpvr",
        }
    }
}

impl FromStr for InfoSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ogmi" => Ok(InfoSelector::Ogmi),
            "crmi" => Ok(InfoSelector::Crmi),
            "ucrmi" => Ok(InfoSelector::Ucrmi),
            "gpvr" => Ok(InfoSelector::Gpvr),
            other => Err(Error::Config(format!("unknown information function '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerConfig {
    /// Maximum path cost from the root (m).
    pub budget: f64,
    pub lambda_ric: f64,
    pub steer_step: f64,
    /// Number of accepted nodes averaged by the convergence test.
    pub window: usize,
    pub selector: InfoSelector,
    pub seed: u64,
    /// Cells below this expected occupancy may be sampled.
    pub free_threshold: f64,
    /// Edges may not cross cells above this expected occupancy.
    pub occupied_threshold: f64,
    /// Thinned particle count for pose-information forward simulation.
    pub particles: usize,
    /// Hard cap on samples drawn.
    pub max_samples: usize,
    /// Consecutive rejected samples after which growth stops.
    pub stall_limit: usize,
    /// Multiplies every information value.
    pub info_scale: f64,
    pub info: InfoConfig,
    pub geometry: ScanGeometry,
    pub beam: BeamModelParams,
    pub odometry: OdometryModelParams,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        let beam = BeamModelParams::default();
        Self {
            budget: 1000.0,
            lambda_ric: 0.005,
            steer_step: 1.0,
            window: 30,
            selector: InfoSelector::Crmi,
            seed: 0,
            free_threshold: 0.4,
            occupied_threshold: 0.6,
            particles: 20,
            max_samples: 3000,
            stall_limit: 500,
            info_scale: 1.0,
            info: InfoConfig::default(),
            geometry: ScanGeometry::new(std::f64::consts::TAU, 10, beam.max_range),
            beam,
            odometry: OdometryModelParams::default(),
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.budget >= 0.0) {
            return Err(Error::Config("budget must be nonnegative".into()));
        }
        if !(self.lambda_ric > 0.0) {
            return Err(Error::Config("lambda_ric must be positive".into()));
        }
        if !(self.steer_step > 0.0) {
            return Err(Error::Config("steer step must be positive".into()));
        }
        if self.window == 0 || self.particles == 0 {
            return Err(Error::Config("window and particle count must be positive".into()));
        }
        if !(self.info_scale > 0.0) {
            return Err(Error::Config("info scale must be positive".into()));
        }
        self.info.validate()?;
        self.beam.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub pose: Pose2D,
    pub edge_cost: f64,
    pub cum_cost: f64,
    /// Information gathered at this node (bits).
    pub info: f64,
    /// Information along the path from the root (bits).
    pub cum_info: f64,
    /// Samples drawn to obtain this node, rejected ones included.
    pub n_sample: usize,
    pub ric: f64,
    pub i_ric: f64,
    pub i_m: f64,
    pub i_p: f64,
    /// Trace of the forward-simulated particles' position covariance (m²).
    pub pose_uncertainty: f64,
}

/// Relative information contribution of a node whose path information is `cum_new`
/// over its parent's `cum_near`. Zero when the parent carries no information.
pub fn ric(cum_new: f64, cum_near: f64) -> f64 {
    if cum_near.abs() < 1e-300 {
        return 0.0;
    }
    (cum_new - cum_near) / cum_near.abs()
}

pub fn i_ric(ric: f64, n_sample: usize) -> f64 {
    ric / n_sample.max(1) as f64
}

/// Strict test of the windowed mean of the latest I_RIC values against `λ_RIC`.
pub fn converged(recent: &[f64], config: &PlannerConfig) -> bool {
    let w = config.window;
    if recent.len() < w {
        return false;
    }
    let mean = recent[recent.len() - w..].iter().sum::<f64>() / w as f64;
    mean < config.lambda_ric
}

/// Root-to-leaf path of the leaf with the most path information; ties go to the
/// lower cost, then the lower id.
pub fn best_path(nodes: &[PlannerNode]) -> Vec<usize> {
    if nodes.is_empty() {
        return Vec::new();
    }
    let mut has_child = vec![false; nodes.len()];
    for n in nodes {
        if let Some(p) = n.parent {
            has_child[p] = true;
        }
    }
    let mut best: Option<&PlannerNode> = None;
    for n in nodes.iter().filter(|n| !has_child[n.id]) {
        best = match best {
            None => Some(n),
            Some(b) => {
                let better = n.cum_info > b.cum_info
                    || (n.cum_info == b.cum_info && (n.cum_cost < b.cum_cost || (n.cum_cost == b.cum_cost && n.id < b.id)));
                Some(if better { n } else { b })
            }
        };
    }
    let mut path = Vec::new();
    let mut cur = best.map(|n| n.id);
    while let Some(i) = cur {
        path.push(i);
        cur = nodes[i].parent;
    }
    path.reverse();
    path
}

/// Map the planner reasons over.
#[derive(Debug, Clone, Copy)]
pub enum PlannerMap<'a> {
    Crm(&'a ConfidenceRichMap),
    Ogm(&'a LogOddsMap),
}

impl PlannerMap<'_> {
    fn grid(&self) -> &GridSpec {
        match self {
            PlannerMap::Crm(m) => m.grid(),
            PlannerMap::Ogm(m) => m.grid(),
        }
    }

    fn occupancy(&self, cell: usize) -> f64 {
        match self {
            PlannerMap::Crm(m) => m.expected(cell),
            PlannerMap::Ogm(m) => m.occupancy(cell),
        }
    }
}

/// Weighted particle poses the planner starts from.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSnapshot {
    pub poses: Vec<Pose2D>,
    pub weights: Vec<f64>,
}

impl ParticleSnapshot {
    pub fn single(pose: Pose2D) -> Self {
        Self {
            poses: vec![pose],
            weights: vec![1.0],
        }
    }

    pub fn from_set<M: ParticleMap>(set: &ParticleSet<M>) -> Self {
        Self {
            poses: set.particles().iter().map(|p| p.pose).collect(),
            weights: set.weights().to_vec(),
        }
    }

    pub fn estimate(&self) -> Pose2D {
        crate::rbpf::estimate(self.poses.iter().copied(), &self.weights)
    }
}

type CrmOverlay = HashMap<usize, (f64, Vec<f64>)>;
type OgmOverlay = HashMap<usize, f64>;

#[derive(Debug, Clone, Default)]
struct NodeParticles {
    poses: Vec<Pose2D>,
    weights: Vec<f64>,
    entropy: Option<f64>,
}

struct CrmView<'a> {
    base: &'a ConfidenceRichMap,
    overlays: &'a [CrmOverlay],
    nodes: &'a [PlannerNode],
    node: usize,
}

impl CrmView<'_> {
    fn lookup(&self, cell: usize) -> Option<&(f64, Vec<f64>)> {
        let mut cur = Some(self.node);
        while let Some(i) = cur {
            if let Some(v) = self.overlays[i].get(&cell) {
                return Some(v);
            }
            cur = self.nodes[i].parent;
        }
        None
    }
}

impl CrmBelief for CrmView<'_> {
    fn grid(&self) -> &GridSpec {
        self.base.grid()
    }

    fn bins(&self) -> usize {
        self.base.bins()
    }

    fn masses(&self, cell: usize) -> &[f64] {
        match self.lookup(cell) {
            Some((_, m)) => m,
            None => self.base.masses(cell),
        }
    }

    fn expected(&self, cell: usize) -> f64 {
        match self.lookup(cell) {
            Some((e, _)) => *e,
            None => self.base.expected(cell),
        }
    }
}

struct OverlayStore<'a, 'b> {
    view: &'a CrmView<'b>,
    out: CrmOverlay,
}

impl MassStore for OverlayStore<'_, '_> {
    fn masses_mut(&mut self, cell: usize) -> &mut [f64] {
        let view = self.view;
        &mut self
            .out
            .entry(cell)
            .or_insert_with(|| (0.0, view.masses(cell).to_vec()))
            .1
    }
}

struct OgmView<'a> {
    base: &'a LogOddsMap,
    overlays: &'a [OgmOverlay],
    nodes: &'a [PlannerNode],
    node: usize,
}

impl OgmView<'_> {
    fn logodds(&self, cell: usize) -> f64 {
        let mut cur = Some(self.node);
        while let Some(i) = cur {
            if let Some(v) = self.overlays[i].get(&cell) {
                return *v;
            }
            cur = self.nodes[i].parent;
        }
        self.base.logodds(cell)
    }
}

impl OccupancyBelief for OgmView<'_> {
    fn grid(&self) -> &GridSpec {
        self.base.grid()
    }

    fn occupancy(&self, cell: usize) -> f64 {
        logistic(self.logodds(cell))
    }
}

/// Maximum-likelihood virtual scan at `pose` under the occupancies `occ`.
fn virtual_scan(
    grid: &GridSpec,
    occ: impl Fn(usize) -> f64,
    pose: &Pose2D,
    config: &PlannerConfig,
) -> Result<Scan> {
    let sensor = pose.compose(&config.geometry.offset);
    let mut beams = Vec::with_capacity(config.geometry.n_beams);
    for bearing in config.geometry.bearings() {
        let trace = trace_ray(grid, &sensor, bearing, config.beam.max_range)?;
        let occupancies: Vec<f64> = trace.cells.iter().map(|c| occ(c.index)).collect();
        let profile = CauseProfile::from_occupancies(trace_ranges(&trace, config.beam.max_range), &occupancies);
        beams.push(Beam {
            bearing,
            range: ml_outcome(&profile, &config.beam, config.info.lambda_z),
        });
    }
    Ok(Scan {
        timestamp: 0.0,
        beams,
        offset: config.geometry.offset,
    })
}

/// True when the straight segment stays inside the grid and below the occupied threshold.
pub fn edge_is_free(
    grid: &GridSpec,
    occupancy: impl Fn(usize) -> f64,
    from: &Pose2D,
    to: &Pose2D,
    occupied_threshold: f64,
) -> bool {
    let (dx, dy) = (to.x - from.x, to.y - from.y);
    let len = dx.hypot(dy);
    let Some(start) = grid.index_of(from.x, from.y) else {
        return false;
    };
    if occupancy(start) > occupied_threshold {
        return false;
    }
    if len == 0.0 {
        return true;
    }
    let origin = Pose2D::new(from.x, from.y, 0.0);
    let Ok(trace) = trace_ray(grid, &origin, dy.atan2(dx), len) else {
        return false;
    };
    if trace.terminal < len - 1e-9 {
        return false;
    }
    trace.cells.iter().all(|c| occupancy(c.index) <= occupied_threshold)
}

/// One row of the per-node progress series.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesRow {
    pub node: usize,
    pub samples: usize,
    pub elapsed_s: f64,
    pub tree_cost: f64,
    pub info_sum: f64,
    pub i_ric: f64,
}

#[derive(Debug, Clone)]
pub struct PlanResult {
    pub nodes: Vec<PlannerNode>,
    pub best_path: Vec<usize>,
    pub total_samples: usize,
    pub converged: bool,
    /// Growth stopped after `stall_limit` consecutive rejections.
    pub stalled: bool,
    pub series: Vec<SeriesRow>,
    pub elapsed_s: f64,
}

impl PlanResult {
    /// Mean I_RIC over all accepted (non-root) nodes.
    pub fn mean_i_ric(&self) -> f64 {
        let n = self.nodes.len().saturating_sub(1);
        if n == 0 {
            return 0.0;
        }
        self.nodes[1..].iter().map(|n| n.i_ric).sum::<f64>() / n as f64
    }

    pub fn total_cost(&self) -> f64 {
        self.nodes.iter().map(|n| n.edge_cost).sum()
    }

    pub fn best_path_info(&self) -> f64 {
        self.best_path.last().map(|&i| self.nodes[i].cum_info).unwrap_or(0.0)
    }

    pub fn write_tree_csv<W: Write>(&self, out: W) -> Result<()> {
        write_tree_csv(&self.nodes, out)
    }

    pub fn write_path_csv<W: Write>(&self, out: W) -> Result<()> {
        write_path_csv(&self.nodes, &self.best_path, out)
    }
}

const TREE_HEADER: &str = "id,parent,x,y,theta,edge_cost,cum_cost,I,cum_I,n_sample,I_RIC";

fn node_row(n: &PlannerNode) -> String {
    let parent = n.parent.map(|p| p.to_string()).unwrap_or_else(|| "-1".into());
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        n.id, parent, n.pose.x, n.pose.y, n.pose.theta, n.edge_cost, n.cum_cost, n.info, n.cum_info, n.n_sample, n.i_ric
    )
}

pub fn write_tree_csv<W: Write>(nodes: &[PlannerNode], mut out: W) -> Result<()> {
    writeln!(out, "{TREE_HEADER}")?;
    for n in nodes {
        writeln!(out, "{}", node_row(n))?;
    }
    Ok(())
}

pub fn write_path_csv<W: Write>(nodes: &[PlannerNode], path: &[usize], mut out: W) -> Result<()> {
    writeln!(out, "{TREE_HEADER}")?;
    for &i in path {
        writeln!(out, "{}", node_row(&nodes[i]))?;
    }
    Ok(())
}

const TAG_SAMPLE: u64 = 10;
const TAG_PARTICLE: u64 = 11;
const TAG_THIN: u64 = 12;

struct Tree<'a> {
    map: PlannerMap<'a>,
    config: &'a PlannerConfig,
    nodes: Vec<PlannerNode>,
    crm_overlays: Vec<CrmOverlay>,
    ogm_overlays: Vec<OgmOverlay>,
    particles: Vec<NodeParticles>,
    scratch: ScanScratch,
}

struct Evaluation {
    i_m: f64,
    i_p: f64,
    crm_overlay: CrmOverlay,
    ogm_overlay: OgmOverlay,
    particles: NodeParticles,
}

impl<'a> Tree<'a> {
    /// Information at `pose` seen from `parent`'s belief, and the child's belief.
    fn evaluate(&mut self, parent: usize, id: usize, pose: &Pose2D) -> Result<Evaluation> {
        let cfg = self.config;
        let mut eval = Evaluation {
            i_m: 0.0,
            i_p: 0.0,
            crm_overlay: HashMap::new(),
            ogm_overlay: HashMap::new(),
            particles: NodeParticles::default(),
        };
        match self.map {
            PlannerMap::Crm(base) => {
                let view = CrmView {
                    base,
                    overlays: &self.crm_overlays,
                    nodes: &self.nodes,
                    node: parent,
                };
                eval.i_m = crmi(&view, pose, &cfg.geometry, &cfg.beam, &cfg.info)?;
                let scan = virtual_scan(base.grid(), |i| view.expected(i), pose, cfg)?;
                if cfg.selector == InfoSelector::Ucrmi {
                    let (parts, i_p) =
                        propagate_particles(&self.particles[parent], &self.nodes[parent].pose, pose, &view, &scan, id, cfg)?;
                    eval.particles = parts;
                    eval.i_p = i_p;
                }
                let mut store = OverlayStore {
                    view: &view,
                    out: HashMap::new(),
                };
                apply_scan(base.grid(), |i| view.expected(i), &mut store, pose, &scan, &cfg.beam, &mut self.scratch)?;
                let mut overlay = store.out;
                for (e, m) in overlay.values_mut() {
                    *e = expected_of(m);
                }
                eval.crm_overlay = overlay;
            }
            PlannerMap::Ogm(base) => {
                let view = OgmView {
                    base,
                    overlays: &self.ogm_overlays,
                    nodes: &self.nodes,
                    node: parent,
                };
                eval.i_m = ogmi(&view, pose, &cfg.geometry, &cfg.beam, &cfg.info)?;
                let scan = virtual_scan(base.grid(), |i| view.occupancy(i), pose, cfg)?;
                let sensor = scan.sensor_pose(pose);
                let params: &OgmParams = base.params();
                let mut overlay: OgmOverlay = HashMap::new();
                for b in &scan.beams {
                    beam_increments(base.grid(), &sensor, b.bearing, b.range, &cfg.beam, params, |i, inc| {
                        let cur = *overlay.entry(i).or_insert_with(|| view.logodds(i));
                        overlay.insert(i, (cur + inc).clamp(-params.clamp, params.clamp));
                    })?;
                }
                eval.ogm_overlay = overlay;
            }
        }
        Ok(eval)
    }

    fn push(&mut self, node: PlannerNode, eval: Evaluation) {
        self.nodes.push(node);
        self.crm_overlays.push(eval.crm_overlay);
        self.ogm_overlays.push(eval.ogm_overlay);
        self.particles.push(eval.particles);
    }
}

fn position_covariance_trace(poses: &[Pose2D], weights: &[f64]) -> f64 {
    let (mx, my) = poses
        .iter()
        .zip(weights)
        .fold((0.0, 0.0), |(x, y), (p, w)| (x + w * p.x, y + w * p.y));
    poses
        .iter()
        .zip(weights)
        .map(|(p, w)| w * ((p.x - mx).powi(2) + (p.y - my).powi(2)))
        .sum()
}

/// Moves the parent's particles along the edge, weights them with the virtual scan
/// and returns the child's particles with its pose information gain.
fn propagate_particles(
    parent: &NodeParticles,
    from: &Pose2D,
    to: &Pose2D,
    view: &CrmView<'_>,
    scan: &Scan,
    id: usize,
    cfg: &PlannerConfig,
) -> Result<(NodeParticles, f64)> {
    let u = OdometryReading::from_poses(from, to);
    let grid = view.grid();
    let mut poses = Vec::with_capacity(parent.poses.len());
    let mut lls = Vec::with_capacity(parent.poses.len());
    for (j, p) in parent.poses.iter().enumerate() {
        let mut rng = stream_rng(cfg.seed, id as u64, j as u64, TAG_PARTICLE);
        let q = sample_motion(p, &u, &cfg.odometry, &mut rng);
        let ll = if grid.contains(q.x, q.y) {
            clam_log_likelihood_with(grid, |i| view.expected(i), &q, scan, &cfg.beam)?
        } else {
            f64::NEG_INFINITY
        };
        poses.push(q);
        lls.push(ll);
    }
    if lls.iter().all(|l| *l == f64::NEG_INFINITY) {
        // every hypothesis left the map: no pose information, restart the entropy chain
        let out = NodeParticles {
            poses,
            weights: parent.weights.clone(),
            entropy: None,
        };
        return Ok((out, 0.0));
    }
    let log_w: Vec<f64> = parent.weights.iter().zip(&lls).map(|(w, l)| w.ln() + l).collect();
    let weights = normalize_log_weights(&log_w)?;
    let h = pose_entropy_bayes(&parent.poses, &parent.weights, &poses, &weights, &lls, &u, &cfg.odometry)?;
    let i_p = parent.entropy.map(|hp| pose_info_gain(hp, h)).unwrap_or(0.0);
    let mut out = NodeParticles {
        poses,
        weights,
        entropy: Some(h),
    };
    let n = out.poses.len();
    if effective_particles(&out.weights)? < 0.5 * n as f64 {
        let mut rng = stream_rng(cfg.seed, id as u64, u64::MAX, TAG_THIN);
        let idx = systematic_indices(&out.weights, n, rng.random::<f64>() / n as f64);
        out.poses = idx.iter().map(|&i| out.poses[i]).collect();
        out.weights = vec![1.0 / n as f64; n];
    }
    Ok((out, i_p))
}

fn thin(snapshot: &ParticleSnapshot, n: usize, seed: u64) -> NodeParticles {
    let total: f64 = snapshot.weights.iter().sum();
    if snapshot.poses.len() <= n {
        return NodeParticles {
            poses: snapshot.poses.clone(),
            weights: snapshot.weights.iter().map(|w| w / total).collect(),
            entropy: None,
        };
    }
    let mut rng = stream_rng(seed, 0, 0, TAG_THIN);
    let idx = systematic_indices(&snapshot.weights, n, rng.random::<f64>() / n as f64);
    NodeParticles {
        poses: idx.iter().map(|&i| snapshot.poses[i]).collect(),
        weights: vec![1.0 / n as f64; n],
        entropy: None,
    }
}

/// Cells the sampler may draw from.
pub fn free_cells(map: &PlannerMap<'_>, free_threshold: f64) -> Vec<usize> {
    (0..map.grid().cell_count())
        .filter(|&i| map.occupancy(i) < free_threshold)
        .collect()
}

/// Result of one sampling attempt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Extension {
    Accepted(usize),
    Rejected,
}

/// Draws one sample and tries to extend the tree toward it.
fn sample_and_extend<R: Rng>(
    tree: &mut Tree<'_>,
    free: &[usize],
    n_since: usize,
    rng: &mut R,
) -> Result<Extension> {
    let cfg = tree.config;
    let grid = tree.map.grid().clone();
    let cell = free[rng.random_range(0..free.len())];
    let (cx, cy) = grid.coords(cell);
    let target = grid.to_world(
        (cx as f64 + rng.random::<f64>()) * grid.resolution,
        (cy as f64 + rng.random::<f64>()) * grid.resolution,
    );
    let mut nearest = 0;
    let mut best = f64::INFINITY;
    for n in &tree.nodes {
        let d = (n.pose.x - target.0).hypot(n.pose.y - target.1);
        if d < best {
            best = d;
            nearest = n.id;
        }
    }
    if best < 1e-9 {
        return Ok(Extension::Rejected);
    }
    let from = tree.nodes[nearest].pose;
    let step = best.min(cfg.steer_step);
    let heading = (target.1 - from.y).atan2(target.0 - from.x);
    let pose = Pose2D::new(from.x + step * heading.cos(), from.y + step * heading.sin(), heading);
    let cum_cost = tree.nodes[nearest].cum_cost + step;
    if cum_cost > cfg.budget {
        return Ok(Extension::Rejected);
    }
    let map = tree.map;
    if !edge_is_free(&grid, |i| map.occupancy(i), &from, &pose, cfg.occupied_threshold) {
        return Ok(Extension::Rejected);
    }
    let id = tree.nodes.len();
    let eval = tree.evaluate(nearest, id, &pose)?;
    let raw = match cfg.selector {
        InfoSelector::Ucrmi => ucrmi(eval.i_m, eval.i_p, cfg.info.alpha)?,
        _ => eval.i_m,
    };
    let info = raw * cfg.info_scale;
    let parent = &tree.nodes[nearest];
    let cum_info = parent.cum_info + info;
    let r = ric(cum_info, parent.cum_info);
    let pose_uncertainty = if eval.particles.poses.is_empty() {
        0.0
    } else {
        position_covariance_trace(&eval.particles.poses, &eval.particles.weights)
    };
    let node = PlannerNode {
        id,
        parent: Some(nearest),
        pose,
        edge_cost: step,
        cum_cost,
        info,
        cum_info,
        n_sample: n_since,
        ric: r,
        i_ric: i_ric(r, n_since),
        i_m: eval.i_m,
        i_p: eval.i_p,
        pose_uncertainty,
    };
    tree.push(node, eval);
    Ok(Extension::Accepted(id))
}

/// Grows the information tree from the snapshot's estimated pose until convergence,
/// the sample cap, or a stall.
pub fn plan(start: &ParticleSnapshot, map: PlannerMap<'_>, config: &PlannerConfig) -> Result<PlanResult> {
    config.validate()?;
    match (config.selector, map) {
        (InfoSelector::Gpvr, _) => {
            return Err(Error::Unsupported("GPVR information function is not implemented".into()))
        }
        (InfoSelector::Ogmi, PlannerMap::Crm(_)) | (InfoSelector::Crmi | InfoSelector::Ucrmi, PlannerMap::Ogm(_)) => {
            return Err(Error::Config(format!(
                "information function {} does not match the map type",
                config.selector.name()
            )))
        }
        _ => {}
    }
    let clock = Instant::now();
    let root_pose = start.estimate();
    let grid = map.grid();
    if !grid.contains(root_pose.x, root_pose.y) {
        return Err(Error::domain("start pose outside map"));
    }
    let root_info = match map {
        PlannerMap::Crm(m) => crmi(m, &root_pose, &config.geometry, &config.beam, &config.info)?,
        PlannerMap::Ogm(m) => ogmi(m, &root_pose, &config.geometry, &config.beam, &config.info)?,
    } * config.info_scale;
    let root = PlannerNode {
        id: 0,
        parent: None,
        pose: root_pose,
        edge_cost: 0.0,
        cum_cost: 0.0,
        info: root_info,
        cum_info: root_info,
        n_sample: 0,
        ric: 0.0,
        i_ric: 0.0,
        i_m: root_info,
        i_p: 0.0,
        pose_uncertainty: position_covariance_trace(&start.poses, &start.weights),
    };
    let mut tree = Tree {
        map,
        config,
        nodes: Vec::new(),
        crm_overlays: Vec::new(),
        ogm_overlays: Vec::new(),
        particles: Vec::new(),
        scratch: ScanScratch::default(),
    };
    let root_eval = Evaluation {
        i_m: root_info,
        i_p: 0.0,
        crm_overlay: HashMap::new(),
        ogm_overlay: HashMap::new(),
        particles: thin(start, config.particles, config.seed),
    };
    tree.push(root, root_eval);

    let mut result = PlanResult {
        nodes: Vec::new(),
        best_path: Vec::new(),
        total_samples: 0,
        converged: false,
        stalled: false,
        series: Vec::new(),
        elapsed_s: 0.0,
    };
    if config.budget > 0.0 {
        let free = free_cells(&map, config.free_threshold);
        if free.is_empty() {
            return Err(Error::PlannerStall("no free cells to sample".into()));
        }
        let mut rng = stream_rng(config.seed, 0, 0, TAG_SAMPLE);
        let mut n_since = 0;
        let mut streak = 0;
        let mut history = Vec::new();
        let mut tree_cost = 0.0;
        let mut info_sum = 0.0;
        while result.total_samples < config.max_samples {
            result.total_samples += 1;
            n_since += 1;
            match sample_and_extend(&mut tree, &free, n_since, &mut rng)? {
                Extension::Rejected => {
                    streak += 1;
                    if streak >= config.stall_limit {
                        result.stalled = true;
                        break;
                    }
                }
                Extension::Accepted(id) => {
                    streak = 0;
                    n_since = 0;
                    let node = &tree.nodes[id];
                    history.push(node.i_ric);
                    tree_cost += node.edge_cost;
                    info_sum += node.info;
                    result.series.push(SeriesRow {
                        node: id,
                        samples: result.total_samples,
                        elapsed_s: clock.elapsed().as_secs_f64(),
                        tree_cost,
                        info_sum,
                        i_ric: node.i_ric,
                    });
                    if converged(&history, config) {
                        result.converged = true;
                        break;
                    }
                }
            }
        }
    }
    result.best_path = best_path(&tree.nodes);
    result.nodes = tree.nodes;
    result.elapsed_s = clock.elapsed().as_secs_f64();
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crm::CellBelief;
    use crate::sensor::ScanGeometry;

    fn node(id: usize, parent: Option<usize>, cum_info: f64, cum_cost: f64) -> PlannerNode {
        PlannerNode {
            id,
            parent,
            pose: Pose2D::identity(),
            edge_cost: 0.0,
            cum_cost,
            info: 0.0,
            cum_info,
            n_sample: 1,
            ric: 0.0,
            i_ric: 0.0,
            i_m: 0.0,
            i_p: 0.0,
            pose_uncertainty: 0.0,
        }
    }

    #[test]
    fn ric_definitions() {
        assert_eq!(ric(3.0, 3.0), 0.0);
        let r = ric(4.0, 2.0);
        assert_eq!(r, 1.0);
        assert_eq!(i_ric(r, 4), 0.25);
        assert_eq!(ric(1.0, 0.0), 0.0);
    }

    #[test]
    fn ric_scale_invariance_is_exact_for_binary_scales() {
        for (a, b) in [(1.3, 0.7), (10.25, 3.1), (0.001, 17.0)] {
            for c in [0.25, 2.0, 1024.0] {
                assert_eq!(ric(c * (a + b), c * b), ric(a + b, b));
            }
        }
    }

    #[test]
    fn convergence_is_strict() {
        let cfg = PlannerConfig {
            window: 2,
            ..PlannerConfig::default()
        };
        assert!(converged(&[0.0, 0.0], &cfg));
        assert!(!converged(&[1.0, 1.0], &cfg));
        assert!(!converged(&[0.004, 0.006], &cfg));
        assert!(!converged(&[0.0], &cfg));
    }

    #[test]
    fn best_path_rules() {
        assert_eq!(best_path(&[node(0, None, 0.0, 0.0)]), vec![0]);
        let tree = vec![
            node(0, None, 0.0, 0.0),
            node(1, Some(0), 3.0, 10.0),
            node(2, Some(0), 3.0, 8.0),
        ];
        assert_eq!(best_path(&tree), vec![0, 2]);
        let chain: Vec<_> = (0..5)
            .map(|i| node(i, i.checked_sub(1), i as f64, i as f64))
            .collect();
        assert_eq!(best_path(&chain), vec![0, 1, 2, 3, 4]);
    }

    fn room() -> (ConfidenceRichMap, LogOddsMap) {
        let grid = GridSpec::new(40, 40, 0.2, Pose2D::identity()).unwrap();
        let mut crm = ConfidenceRichMap::init_uniform(grid.clone(), 10);
        let mut ogm = LogOddsMap::new(grid.clone(), OgmParams::default());
        for i in 0..grid.cell_count() {
            let (x, y) = grid.coords(i);
            let border = x == 0 || y == 0 || x == 39 || y == 39;
            let wall = x == 20 && y < 30;
            let known = x < 10 || wall || border;
            if known {
                let bin = if border || wall { 9 } else { 0 };
                crm.set_cell(i, &CellBelief::delta(10, bin)).unwrap();
                ogm.set_logodds(i, if bin == 9 { 10.0 } else { -10.0 });
            }
        }
        (crm, ogm)
    }

    fn small_config(selector: InfoSelector) -> PlannerConfig {
        PlannerConfig {
            selector,
            seed: 4,
            max_samples: 60,
            geometry: ScanGeometry::new(std::f64::consts::TAU, 6, 5.0),
            info: InfoConfig {
                lambda_z: 0.25,
                ..InfoConfig::default()
            },
            particles: 8,
            ..PlannerConfig::default()
        }
    }

    fn check_tree(result: &PlanResult, map: &PlannerMap<'_>, cfg: &PlannerConfig) {
        let nodes = &result.nodes;
        let mut sampled = 0;
        for n in &nodes[1..] {
            let p = &nodes[n.parent.unwrap()];
            assert!((n.cum_cost - (p.cum_cost + n.edge_cost)).abs() < 1e-12);
            assert!(n.cum_cost <= cfg.budget);
            assert!(edge_is_free(map.grid(), |i| map.occupancy(i), &p.pose, &n.pose, cfg.occupied_threshold));
            sampled += n.n_sample;
        }
        assert!(sampled <= result.total_samples);
    }

    #[test]
    fn trees_respect_walls_and_are_deterministic() {
        let (crm, ogm) = room();
        let start = ParticleSnapshot::single(Pose2D::new(1.0, 4.0, 0.0));
        for (sel, map) in [
            (InfoSelector::Crmi, PlannerMap::Crm(&crm)),
            (InfoSelector::Ucrmi, PlannerMap::Crm(&crm)),
            (InfoSelector::Ogmi, PlannerMap::Ogm(&ogm)),
        ] {
            let cfg = small_config(sel);
            let a = plan(&start, map, &cfg).unwrap();
            let b = plan(&start, map, &cfg).unwrap();
            assert_eq!(a.nodes, b.nodes);
            assert!(a.nodes.len() > 5, "{sel:?}: {} nodes", a.nodes.len());
            check_tree(&a, &map, &cfg);
        }
    }

    #[test]
    fn info_decays_where_the_path_already_looked() {
        let (crm, _) = room();
        let start = ParticleSnapshot::single(Pose2D::new(1.0, 4.0, 0.0));
        let cfg = small_config(InfoSelector::Crmi);
        let r = plan(&start, PlannerMap::Crm(&crm), &cfg).unwrap();
        // a child placed at its parent's pose sees the parent's virtual scan
        let map = PlannerMap::Crm(&crm);
        let mut tree = Tree {
            map,
            config: &cfg,
            nodes: r.nodes.clone(),
            crm_overlays: vec![HashMap::new(); r.nodes.len()],
            ogm_overlays: vec![HashMap::new(); r.nodes.len()],
            particles: vec![NodeParticles::default(); r.nodes.len()],
            scratch: ScanScratch::default(),
        };
        let pose = Pose2D::new(3.0, 4.0, 0.0);
        tree.nodes.truncate(1);
        tree.crm_overlays.truncate(1);
        tree.ogm_overlays.truncate(1);
        tree.particles.truncate(1);
        let first = tree.evaluate(0, 1, &pose).unwrap();
        let i_first = first.i_m;
        let mut n = tree.nodes[0].clone();
        n.id = 1;
        n.parent = Some(0);
        n.pose = pose;
        tree.push(n, first);
        let second = tree.evaluate(1, 2, &pose).unwrap();
        assert!(second.i_m < i_first, "{} !< {i_first}", second.i_m);
    }

    #[test]
    fn zero_budget_gives_root_only() {
        let (crm, _) = room();
        let cfg = PlannerConfig {
            budget: 0.0,
            ..small_config(InfoSelector::Crmi)
        };
        let r = plan(&ParticleSnapshot::single(Pose2D::new(1.0, 4.0, 0.0)), PlannerMap::Crm(&crm), &cfg).unwrap();
        assert_eq!(r.nodes.len(), 1);
        assert_eq!(r.best_path, vec![0]);
        assert_eq!(r.total_cost(), 0.0);
    }

    #[test]
    fn scaling_information_leaves_ric_unchanged() {
        let (crm, _) = room();
        let start = ParticleSnapshot::single(Pose2D::new(1.0, 4.0, 0.0));
        let base = small_config(InfoSelector::Ucrmi);
        let a = plan(&start, PlannerMap::Crm(&crm), &base).unwrap();
        let b = plan(&start, PlannerMap::Crm(&crm), &PlannerConfig { info_scale: 4.0, ..base.clone() }).unwrap();
        assert_eq!(a.nodes.len(), b.nodes.len());
        for (x, y) in a.nodes.iter().zip(&b.nodes) {
            assert_eq!(x.ric, y.ric);
            assert_eq!(x.i_ric, y.i_ric);
            assert_eq!(4.0 * x.info, y.info);
        }
    }

    #[test]
    fn occupied_samples_are_rejected() {
        let (crm, _) = room();
        let grid = crm.grid().clone();
        let map = PlannerMap::Crm(&crm);
        let cfg = small_config(InfoSelector::Crmi);
        let mut tree = Tree {
            map,
            config: &cfg,
            nodes: Vec::new(),
            crm_overlays: Vec::new(),
            ogm_overlays: Vec::new(),
            particles: Vec::new(),
            scratch: ScanScratch::default(),
        };
        let root = node(0, None, 1.0, 0.0);
        let mut root = root;
        root.pose = Pose2D::new(3.9, 4.1, 0.0);
        tree.push(
            root,
            Evaluation {
                i_m: 0.0,
                i_p: 0.0,
                crm_overlay: HashMap::new(),
                ogm_overlay: HashMap::new(),
                particles: NodeParticles::default(),
            },
        );
        // the sampler is offered only a wall cell next to the root
        let wall: Vec<usize> = (0..grid.cell_count()).filter(|&i| grid.coords(i) == (20, 20)).collect();
        let mut rng = stream_rng(0, 0, 0, 0);
        let r = sample_and_extend(&mut tree, &wall, 1, &mut rng).unwrap();
        assert_eq!(r, Extension::Rejected);
        assert_eq!(tree.nodes.len(), 1);
        // from farther away the steer step stops short of the wall
        tree.nodes[0].pose = Pose2D::new(2.5, 4.1, 0.0);
        let r = sample_and_extend(&mut tree, &wall, 2, &mut rng).unwrap();
        assert_eq!(r, Extension::Accepted(1));
        assert_eq!(tree.nodes[1].n_sample, 2);
    }

    #[test]
    fn gpvr_is_unsupported() {
        let (crm, _) = room();
        let cfg = small_config(InfoSelector::Gpvr);
        assert!(matches!(
            plan(&ParticleSnapshot::single(Pose2D::new(1.0, 4.0, 0.0)), PlannerMap::Crm(&crm), &cfg),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn tree_csv_parses_back() {
        let (crm, _) = room();
        let cfg = small_config(InfoSelector::Crmi);
        let r = plan(&ParticleSnapshot::single(Pose2D::new(1.0, 4.0, 0.0)), PlannerMap::Crm(&crm), &cfg).unwrap();
        let mut buf = Vec::new();
        r.write_tree_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let rows: Vec<&str> = text.lines().skip(1).collect();
        assert_eq!(rows.len(), r.nodes.len());
        for (row, n) in rows.iter().zip(&r.nodes) {
            let f: Vec<&str> = row.split(',').collect();
            assert_eq!(f.len(), 11);
            assert_eq!(f[2].parse::<f64>().unwrap(), n.pose.x);
            assert_eq!(f[8].parse::<f64>().unwrap(), n.cum_info);
            assert_eq!(f[10].parse::<f64>().unwrap(), n.i_ric);
        }
    }
}

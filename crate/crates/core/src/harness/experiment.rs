//! SLAM and exploration experiments on synthetic worlds, plus run-directory output.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use super::config::Config;
use super::metrics::{compute_metrics, Metrics, Trajectory};
use super::scanlog::{Record, ScanLog};
use super::world::{loop_trajectory, noisy_odometry, simulate_scan, GroundTruthWorld, ScanNoise, WorldParams};
use crate::crm::ConfidenceRichMap;
use crate::error::{Error, Result};
use crate::geom::{GridSpec, Pose2D};
use crate::ogm::{LogOddsMap, OgmParams};
use crate::planner::{plan, InfoSelector, ParticleSnapshot, PlanResult, PlannerMap};
use crate::raster;
use crate::rbpf::{estimate, stream_rng, ParticleMap, ParticleSet};

const TAG_WORLD: u64 = 100;
const TAG_ODOMETRY: u64 = 101;
const TAG_SCANS: u64 = 102;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SlamMode {
    Clam,
    Ogm,
}

impl SlamMode {
    pub fn name(&self) -> &'static str {
        match self {
            SlamMode::Clam => "clam",
            SlamMode::Ogm => "ogm",
        }
    }
}

impl FromStr for SlamMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "clam" => Ok(SlamMode::Clam),
            "ogm" => Ok(SlamMode::Ogm),
            other => Err(Error::Config(format!("unknown slam mode '{other}'"))),
        }
    }
}

impl Config {
    pub fn world_params(&self) -> WorldParams {
        WorldParams {
            width: self.world_width,
            height: self.world_height,
            resolution: self.resolution,
            walls: self.rooms,
            clutter: self.clutter,
            clutter_size: self.clutter_size,
        }
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::with_extent(self.world_width, self.world_height, self.resolution)
    }

    fn noise(&self) -> ScanNoise {
        ScanNoise {
            range: self.range_noise,
            bearing: self.bearing_noise,
        }
    }
}

/// Ground-truth world, true trajectory and the recorded log of one SLAM trial.
#[derive(Debug, Clone)]
pub struct SlamDataset {
    pub world: GroundTruthWorld,
    pub truth: Trajectory,
    pub log: ScanLog,
}

/// Builds the loop world and its log. Everything depends only on `seed`.
pub fn simulate_dataset(cfg: &Config, seed: u64) -> Result<SlamDataset> {
    let path = loop_trajectory(cfg.world_width, cfg.world_height, cfg.loop_margin, cfg.corner_radius, cfg.steps)?;
    let mut world = GroundTruthWorld::generate(&cfg.world_params(), seed, &mut stream_rng(seed, 0, 0, TAG_WORLD))?;
    world.clear_along(&path, cfg.clearance);
    let odom = noisy_odometry(&path, &cfg.odometry(), &mut stream_rng(seed, 0, 0, TAG_ODOMETRY));
    let geometry = cfg.geometry();
    let mut rng = stream_rng(seed, 0, 0, TAG_SCANS);
    let mut log = ScanLog::new(geometry.clone());
    let times: Vec<f64> = (0..path.len()).map(|k| k as f64 * 0.1).collect();
    for ((pose, odo), &t) in path.iter().zip(&odom).zip(&times) {
        let scan = simulate_scan(&world, pose, &geometry, cfg.noise(), t, &mut rng)?;
        log.records.push(Record::Odom { t, pose: *odo });
        log.records.push(Record::Scan {
            t,
            ranges: scan.beams.iter().map(|b| b.range).collect(),
        });
    }
    Ok(SlamDataset {
        world,
        truth: Trajectory { times, poses: path },
        log,
    })
}

#[derive(Debug, Clone)]
pub struct SlamRun {
    pub trajectory: Trajectory,
    pub grid: GridSpec,
    /// Occupancy raster of the highest-weight particle's map.
    pub map: Vec<f64>,
    pub resamples: usize,
    pub elapsed_s: f64,
}

trait RasterMap: ParticleMap {
    fn raster(&self) -> Vec<f64>;
}

impl RasterMap for ConfidenceRichMap {
    fn raster(&self) -> Vec<f64> {
        self.expected_occupancy().to_vec()
    }
}

impl RasterMap for LogOddsMap {
    fn raster(&self) -> Vec<f64> {
        self.occupancy_raster()
    }
}

fn drive<M: RasterMap>(log: &ScanLog, start: Pose2D, map: M, cfg: &Config, seed: u64) -> Result<(Trajectory, Vec<f64>, usize)> {
    let filter = cfg.filter();
    let mut set = ParticleSet::new(cfg.particles, start, map, seed)?;
    let mut traj = Trajectory::default();
    let mut resamples = 0;
    for (u, scan) in log.steps()? {
        let report = set.step(&u, &scan, &filter)?;
        resamples += report.resampled as usize;
        traj.times.push(scan.timestamp);
        traj.poses.push(estimate(report.poses.iter().copied(), &report.weights));
    }
    let best = set
        .weights()
        .iter()
        .enumerate()
        .fold(0, |b, (i, &w)| if w > set.weights()[b] { i } else { b });
    Ok((traj, set.particles()[best].map.raster(), resamples))
}

/// Runs the filter over `log`, starting every particle at the first odometry pose.
pub fn run_slam(log: &ScanLog, mode: SlamMode, cfg: &Config, seed: u64) -> Result<SlamRun> {
    let t0 = Instant::now();
    let start = log
        .records
        .iter()
        .find_map(|r| match r {
            Record::Odom { pose, .. } => Some(*pose),
            _ => None,
        })
        .unwrap_or_else(Pose2D::identity);
    let grid = cfg.grid()?;
    let (trajectory, map, resamples) = match mode {
        SlamMode::Clam => drive(log, start, ConfidenceRichMap::init_uniform(grid.clone(), cfg.lambda_m), cfg, seed)?,
        SlamMode::Ogm => drive(log, start, LogOddsMap::new(grid.clone(), OgmParams::default()), cfg, seed)?,
    };
    Ok(SlamRun {
        trajectory,
        grid,
        map,
        resamples,
        elapsed_s: t0.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SlamSummary {
    pub mode: SlamMode,
    pub seed: u64,
    pub particles: usize,
    pub steps: usize,
    pub resamples: usize,
    pub metrics: Metrics,
    pub elapsed_s: f64,
}

/// Simulates the trial's dataset and runs one filter on it.
pub fn slam_trial(cfg: &Config, seed: u64, mode: SlamMode) -> Result<(SlamDataset, SlamRun, SlamSummary)> {
    let data = simulate_dataset(cfg, seed)?;
    let run = run_slam(&data.log, mode, cfg, seed)?;
    let metrics = compute_metrics(&run.trajectory.poses, &data.truth.poses)?;
    let summary = SlamSummary {
        mode,
        seed,
        particles: cfg.particles,
        steps: run.trajectory.poses.len(),
        resamples: run.resamples,
        metrics,
        elapsed_s: run.elapsed_s,
    };
    Ok((data, run, summary))
}

/// Exploration world with the robot's initial maps.
#[derive(Debug, Clone)]
pub struct ExploreSetup {
    pub world: GroundTruthWorld,
    pub start: Pose2D,
    pub crm: ConfidenceRichMap,
    pub ogm: LogOddsMap,
}

pub fn explore_setup(cfg: &Config, seed: u64) -> Result<ExploreSetup> {
    let start = Pose2D::new(cfg.start_x, cfg.start_y, 0.0);
    let mut world = GroundTruthWorld::generate(&cfg.world_params(), seed, &mut stream_rng(seed, 0, 0, TAG_WORLD))?;
    world.clear_along(&[start], cfg.clearance);
    let grid = world.grid.clone();
    let mut crm = ConfidenceRichMap::init_uniform(grid.clone(), cfg.lambda_m);
    let mut ogm = LogOddsMap::new(grid, OgmParams::default());
    let geometry = Config {
        n_beams: cfg.survey_beams.max(1),
        ..cfg.clone()
    }
    .geometry();
    let beam = cfg.beam();
    let mut rng = stream_rng(seed, 0, 0, TAG_SCANS);
    for k in 0..cfg.initial_scans.max(1) {
        let scan = simulate_scan(&world, &start, &geometry, cfg.noise(), k as f64, &mut rng)?;
        crm.integrate_scan(&start, &scan, &beam)?;
        ogm.integrate_scan_og(&start, &scan, &beam)?;
    }
    Ok(ExploreSetup { world, start, crm, ogm })
}

#[derive(Debug, Clone, Serialize)]
pub struct ExploreSummary {
    pub selector: String,
    pub seed: u64,
    pub nodes: usize,
    pub samples: usize,
    pub best_path_info: f64,
    pub best_path_cost: f64,
    pub tree_cost: f64,
    pub mean_i_ric: f64,
    pub converged: bool,
    pub stalled: bool,
    pub elapsed_s: f64,
}

pub fn run_explore(setup: &ExploreSetup, selector: InfoSelector, cfg: &Config, seed: u64) -> Result<(PlanResult, ExploreSummary)> {
    let n = cfg.planner_particles;
    let snapshot = ParticleSnapshot {
        poses: vec![setup.start; n],
        weights: vec![1.0 / n as f64; n],
    };
    let map = match selector {
        InfoSelector::Ogmi => PlannerMap::Ogm(&setup.ogm),
        _ => PlannerMap::Crm(&setup.crm),
    };
    let result = plan(&snapshot, map, &cfg.planner(selector, seed))?;
    let summary = ExploreSummary {
        selector: selector.name().to_string(),
        seed,
        nodes: result.nodes.len(),
        samples: result.total_samples,
        best_path_info: result.best_path_info(),
        best_path_cost: result.best_path.last().map(|&i| result.nodes[i].cum_cost).unwrap_or(0.0),
        tree_cost: result.total_cost(),
        mean_i_ric: result.mean_i_ric(),
        converged: result.converged,
        stalled: result.stalled,
        elapsed_s: result.elapsed_s,
    };
    Ok((result, summary))
}

pub fn explore_trial(cfg: &Config, seed: u64, selector: InfoSelector) -> Result<(ExploreSetup, PlanResult, ExploreSummary)> {
    let setup = explore_setup(cfg, seed)?;
    let (result, summary) = run_explore(&setup, selector, cfg, seed)?;
    Ok((setup, result, summary))
}

/// `<root>/<command>-<config hash>-s<seed>`
pub fn run_dir(root: &Path, command: &str, cfg: &Config, seed: u64) -> PathBuf {
    root.join(format!("{command}-{}-s{seed}", cfg.hash8()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// JSON document echoing the configuration next to the headline numbers.
pub fn write_summary<S: Serialize>(dir: &Path, cfg: &Config, summary: &S) -> Result<()> {
    let doc = serde_json::json!({ "config": cfg, "summary": summary });
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(dir.join("summary.json"), text)?;
    Ok(())
}

pub fn write_slam_outputs(dir: &Path, cfg: &Config, run: &SlamRun, summary: &SlamSummary) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    run.trajectory.write_csv(create(&dir.join("trajectory.csv"))?)?;
    raster::write_pgm(&dir.join("map.pgm"), &run.grid, &run.map)?;
    let mut out = create(&dir.join("errors.csv"))?;
    writeln!(out, "step,dx,dy,dtheta")?;
    for (k, e) in summary.metrics.errors.iter().enumerate() {
        writeln!(out, "{k},{},{},{}", e[0], e[1], e[2])?;
    }
    out.flush()?;
    write_summary(dir, cfg, summary)
}

pub fn write_explore_outputs(dir: &Path, cfg: &Config, setup: &ExploreSetup, result: &PlanResult, summary: &ExploreSummary) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    setup.world.write_pgm(&dir.join("world.pgm"))?;
    setup.crm.write_pgm(&dir.join("initial_map.pgm"))?;
    result.write_tree_csv(create(&dir.join("tree.csv"))?)?;
    result.write_path_csv(create(&dir.join("path.csv"))?)?;
    let mut out = create(&dir.join("series.csv"))?;
    writeln!(out, "node,samples,elapsed_s,tree_cost,info_sum,i_ric,cum_i_ric")?;
    let mut cum = 0.0;
    for r in &result.series {
        cum += r.i_ric;
        writeln!(out, "{},{},{},{},{},{},{}", r.node, r.samples, r.elapsed_s, r.tree_cost, r.info_sum, r.i_ric, cum)?;
    }
    out.flush()?;
    write_summary(dir, cfg, summary)
}

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crmslam::harness::config::{Config, Preset};
use crmslam::harness::experiment::{self, SlamMode, SlamSummary};
use crmslam::harness::{compute_metrics, ScanLog, Trajectory};
use crmslam::planner::InfoSelector;
use crmslam::{raster, Result};

#[derive(Parser)]
#[command(name = "crmslam", version, about = "Confidence-rich mapping, RBPF SLAM and informative exploration")]
struct Cli {
    /// TOML file overriding preset defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Single `key=value` override (repeatable, applied after --config).
    #[arg(long = "set", global = true)]
    set: Vec<String>,
    /// Root directory for run outputs.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(flatten)]
    flags: Flags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Flags {
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    particles: Option<usize>,
    /// UCRMI weight on map information.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Occupancy bins per cell.
    #[arg(long = "lambda-m", global = true)]
    lambda_m: Option<usize>,
    /// Measurement outcome spacing (m).
    #[arg(long = "lambda-z", global = true)]
    lambda_z: Option<f64>,
    #[arg(long = "lambda-ric", global = true)]
    lambda_ric: Option<f64>,
    #[arg(long, global = true)]
    budget: Option<f64>,
    #[arg(long = "z-hit", global = true)]
    z_hit: Option<f64>,
    #[arg(long = "z-short", global = true)]
    z_short: Option<f64>,
    #[arg(long = "z-max", global = true)]
    z_max: Option<f64>,
    #[arg(long = "z-rand", global = true)]
    z_rand: Option<f64>,
    #[arg(long = "sigma-hit", global = true)]
    sigma_hit: Option<f64>,
    #[arg(long = "lambda-short", global = true)]
    lambda_short: Option<f64>,
    #[arg(long = "max-range", global = true)]
    max_range: Option<f64>,
    #[arg(long = "n-beams", global = true)]
    n_beams: Option<usize>,
    #[arg(long = "fov-deg", global = true)]
    fov_deg: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a loop world, its true trajectory and a scan log.
    Simulate,
    /// Run RBPF SLAM on a simulated world or a recorded log.
    Slam {
        #[arg(long, default_value = "clam")]
        mode: SlamMode,
        /// Scan log to replay instead of simulating.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Reference trajectory CSV for a replayed log.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Plan an informative exploration tree from a start pose.
    Explore {
        #[arg(long, default_value = "crmi")]
        info: InfoSelector,
    },
    /// Trajectory error metrics from two CSV files.
    Eval {
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long)]
        reference: PathBuf,
    },
}

impl Flags {
    fn assignments(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push(format!("{k}={v}"));
            }
        };
        let f = |v: Option<f64>| v.map(|x| format!("{x:?}"));
        push("seed", self.seed.map(|v| v.to_string()));
        push("particles", self.particles.map(|v| v.to_string()));
        push("alpha", f(self.alpha));
        push("lambda_m", self.lambda_m.map(|v| v.to_string()));
        push("lambda_z", f(self.lambda_z));
        push("lambda_ric", f(self.lambda_ric));
        push("budget", f(self.budget));
        push("z_hit", f(self.z_hit));
        push("z_short", f(self.z_short));
        push("z_max", f(self.z_max));
        push("z_rand", f(self.z_rand));
        push("sigma_hit", f(self.sigma_hit));
        push("lambda_short", f(self.lambda_short));
        push("max_range", f(self.max_range));
        push("n_beams", self.n_beams.map(|v| v.to_string()));
        push("fov_deg", f(self.fov_deg));
        out
    }
}

fn load_config(cli: &Cli, preset: Preset) -> Result<Config> {
    let mut cfg = Config::preset(preset);
    if let Some(path) = &cli.config {
        cfg = cfg.merge_file(path)?;
    }
    for a in cli.set.iter().cloned().chain(cli.flags.assignments()) {
        cfg = cfg.set(&a)?;
    }
    Ok(cfg)
}

fn read_trajectory(path: &Path) -> Result<Trajectory> {
    Trajectory::read_csv(BufReader::new(File::open(path)?))
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate => {
            let cfg = load_config(&cli, Preset::Slam)?;
            let data = experiment::simulate_dataset(&cfg, cfg.seed)?;
            let dir = experiment::run_dir(&cli.out, "simulate", &cfg, cfg.seed);
            std::fs::create_dir_all(&dir)?;
            data.world.write_pgm(&dir.join("world.pgm"))?;
            data.log.save(&dir.join("log.txt"))?;
            data.truth.write_csv(File::create(dir.join("truth.csv"))?)?;
            experiment::write_summary(&dir, &cfg, &serde_json::json!({ "scans": data.log.scan_count() }))?;
            println!("{}", dir.display());
        }
        Command::Slam { mode, log, truth } => {
            let cfg = load_config(&cli, Preset::Slam)?;
            let dir = experiment::run_dir(&cli.out, &format!("slam-{}", mode.name()), &cfg, cfg.seed);
            let (run, reference) = match log {
                Some(path) => {
                    let log = ScanLog::load(path)?;
                    let reference = truth.as_deref().map(read_trajectory).transpose()?;
                    (experiment::run_slam(&log, *mode, &cfg, cfg.seed)?, reference)
                }
                None => {
                    let data = experiment::simulate_dataset(&cfg, cfg.seed)?;
                    (experiment::run_slam(&data.log, *mode, &cfg, cfg.seed)?, Some(data.truth))
                }
            };
            match reference {
                Some(reference) => {
                    let metrics = compute_metrics(&run.trajectory.poses, &reference.poses)?;
                    let summary = SlamSummary {
                        mode: *mode,
                        seed: cfg.seed,
                        particles: cfg.particles,
                        steps: run.trajectory.poses.len(),
                        resamples: run.resamples,
                        metrics,
                        elapsed_s: run.elapsed_s,
                    };
                    experiment::write_slam_outputs(&dir, &cfg, &run, &summary)?;
                    let m = &summary.metrics;
                    println!(
                        "mode={} mae_x={:.4} mae_y={:.4} mae_theta={:.4} avg_rmse={:.4} time={:.1}s",
                        mode.name(),
                        m.mae_x,
                        m.mae_y,
                        m.mae_theta,
                        m.avg_rmse,
                        run.elapsed_s
                    );
                }
                None => {
                    std::fs::create_dir_all(&dir)?;
                    run.trajectory.write_csv(File::create(dir.join("trajectory.csv"))?)?;
                    raster::write_pgm(&dir.join("map.pgm"), &run.grid, &run.map)?;
                    experiment::write_summary(&dir, &cfg, &serde_json::json!({ "steps": run.trajectory.poses.len() }))?;
                }
            }
            println!("{}", dir.display());
        }
        Command::Explore { info } => {
            let cfg = load_config(&cli, Preset::Explore)?;
            let (setup, result, summary) = experiment::explore_trial(&cfg, cfg.seed, *info)?;
            let dir = experiment::run_dir(&cli.out, &format!("explore-{}", info.name()), &cfg, cfg.seed);
            experiment::write_explore_outputs(&dir, &cfg, &setup, &result, &summary)?;
            println!(
                "info={} nodes={} samples={} path_info={:.3} path_cost={:.2} mean_i_ric={:.5} converged={} time={:.2}s",
                summary.selector,
                summary.nodes,
                summary.samples,
                summary.best_path_info,
                summary.best_path_cost,
                summary.mean_i_ric,
                summary.converged,
                summary.elapsed_s
            );
            println!("{}", dir.display());
        }
        Command::Eval { estimate, reference } => {
            let m = compute_metrics(&read_trajectory(estimate)?.poses, &read_trajectory(reference)?.poses)?;
            println!("{}", serde_json::to_string_pretty(&m).expect("metrics serialize"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

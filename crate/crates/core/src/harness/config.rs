//! Flat key-value configuration. A preset supplies every default; a TOML file and
//! `key=value` overrides replace individual keys.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::info::InfoConfig;
use crate::planner::{InfoSelector, PlannerConfig};
use crate::rbpf::{FilterConfig, OdometryModelParams, TrajectoryMode};
use crate::sensor::{BeamModelParams, ScanGeometry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub trials: usize,

    pub world_width: f64,
    pub world_height: f64,
    pub resolution: f64,
    pub rooms: usize,
    pub clutter: usize,
    pub clutter_size: f64,
    /// Free band kept around the robot's path (m).
    pub clearance: f64,

    pub fov_deg: f64,
    pub n_beams: usize,
    pub max_range: f64,
    pub range_noise: f64,
    pub bearing_noise: f64,

    pub z_hit: f64,
    pub z_short: f64,
    pub z_max: f64,
    pub z_rand: f64,
    pub sigma_hit: f64,
    pub lambda_short: f64,
    pub outcome_bin: f64,

    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub alpha4: f64,

    pub particles: usize,
    pub steps: usize,
    pub loop_margin: f64,
    pub corner_radius: f64,
    pub resample_ratio: f64,
    pub lambda_m: usize,

    pub lambda_z: f64,
    pub alpha: f64,
    pub lambda_ric: f64,
    pub budget: f64,
    pub steer_step: f64,
    pub window: usize,
    pub planner_particles: usize,
    pub max_samples: usize,
    pub stall_limit: usize,
    pub initial_scans: usize,
    /// Beam count of the survey scans that seed the exploration map.
    pub survey_beams: usize,
    pub start_x: f64,
    pub start_y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Slam,
    Explore,
}

impl Config {
    /// Loop-closure SLAM runs: larger world, wide scanner, long range.
    pub fn slam() -> Self {
        Self {
            world_width: 40.0,
            world_height: 40.0,
            rooms: 4,
            clutter: 150,
            clutter_size: 0.8,
            clearance: 1.2,
            fov_deg: 360.0,
            n_beams: 361,
            max_range: 8.0,
            loop_margin: 13.0,
            corner_radius: 2.0,
            trials: 15,
            ..Self::explore()
        }
    }

    /// Exploration runs: 20 m square world, 10-beam full-circle scanner.
    pub fn explore() -> Self {
        Self {
            seed: 1,
            trials: 20,
            world_width: 20.0,
            world_height: 20.0,
            resolution: 0.2,
            rooms: 3,
            clutter: 8,
            clutter_size: 0.8,
            clearance: 1.0,
            fov_deg: 360.0,
            n_beams: 10,
            max_range: 5.0,
            range_noise: 0.01,
            bearing_noise: 0.01,
            z_hit: 0.7,
            z_short: 0.1,
            z_max: 0.1,
            z_rand: 0.1,
            sigma_hit: 0.05,
            lambda_short: 0.2,
            outcome_bin: 0.1,
            alpha1: 0.02,
            alpha2: 0.01,
            alpha3: 0.02,
            alpha4: 0.01,
            particles: 100,
            steps: 200,
            loop_margin: 6.0,
            corner_radius: 3.0,
            resample_ratio: 0.5,
            lambda_m: 10,
            lambda_z: 0.1,
            alpha: 0.5,
            lambda_ric: 0.005,
            budget: 1000.0,
            steer_step: 1.0,
            window: 30,
            planner_particles: 20,
            max_samples: 4000,
            stall_limit: 500,
            initial_scans: 3,
            survey_beams: 360,
            start_x: 2.0,
            start_y: 2.0,
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Slam => Self::slam(),
            Preset::Explore => Self::explore(),
        }
    }

    fn to_table(&self) -> Result<toml::Table> {
        toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: Config = table.try_into().map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Replaces the keys present in `overrides`. Integers are accepted for float keys.
    pub fn merge(&self, overrides: &toml::Table) -> Result<Self> {
        let mut table = self.to_table()?;
        for (key, value) in overrides {
            let Some(current) = table.get(key) else {
                return Err(Error::Config(format!("unknown key '{key}'")));
            };
            let value = match (current, value) {
                (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(*i as f64),
                _ => value.clone(),
            };
            table.insert(key.clone(), value);
        }
        Self::from_table(table)
    }

    pub fn merge_str(&self, text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        self.merge(&table)
    }

    pub fn merge_file(&self, path: &Path) -> Result<Self> {
        self.merge_str(&std::fs::read_to_string(path)?)
    }

    /// Applies one `key=value` override; the value uses TOML syntax.
    pub fn set(&self, assignment: &str) -> Result<Self> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got '{assignment}'")))?;
        self.merge_str(&format!("{} = {}", k.trim(), v.trim()))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("world_width", self.world_width),
            ("world_height", self.world_height),
            ("resolution", self.resolution),
            ("max_range", self.max_range),
            ("lambda_z", self.lambda_z),
            ("lambda_ric", self.lambda_ric),
            ("steer_step", self.steer_step),
        ];
        for (k, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if self.particles == 0 || self.planner_particles == 0 || self.lambda_m == 0 {
            return Err(Error::Config("particle and bin counts must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config("alpha must lie in [0, 1]".into()));
        }
        self.beam().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.odometry().validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// First eight hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash8(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().take(4).map(|b| format!("{b:02x}")).collect()
    }

    pub fn beam(&self) -> BeamModelParams {
        BeamModelParams {
            z_hit: self.z_hit,
            z_short: self.z_short,
            z_max: self.z_max,
            z_rand: self.z_rand,
            sigma_hit: self.sigma_hit,
            lambda_short: self.lambda_short,
            max_range: self.max_range,
            outcome_bin: self.outcome_bin,
        }
    }

    pub fn odometry(&self) -> OdometryModelParams {
        OdometryModelParams {
            alpha1: self.alpha1,
            alpha2: self.alpha2,
            alpha3: self.alpha3,
            alpha4: self.alpha4,
        }
    }

    pub fn geometry(&self) -> ScanGeometry {
        ScanGeometry::new(self.fov_deg.to_radians(), self.n_beams, self.max_range)
    }

    pub fn filter(&self) -> FilterConfig {
        FilterConfig {
            odometry: self.odometry(),
            beam: self.beam(),
            resample_ratio: self.resample_ratio,
            trajectory: TrajectoryMode::CurrentOnly,
        }
    }

    pub fn info(&self) -> InfoConfig {
        InfoConfig {
            lambda_z: self.lambda_z,
            alpha: self.alpha,
            normalize_entropy: false,
        }
    }

    pub fn planner(&self, selector: InfoSelector, seed: u64) -> PlannerConfig {
        PlannerConfig {
            budget: self.budget,
            lambda_ric: self.lambda_ric,
            steer_step: self.steer_step,
            window: self.window,
            selector,
            seed,
            particles: self.planner_particles,
            max_samples: self.max_samples,
            stall_limit: self.stall_limit,
            info: self.info(),
            geometry: self.geometry(),
            beam: self.beam(),
            odometry: self.odometry(),
            ..PlannerConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        Config::slam().validate().unwrap();
        Config::explore().validate().unwrap();
    }

    #[test]
    fn file_overrides_and_integer_promotion() {
        let c = Config::explore().merge_str("budget = 250\nseed = 9\n# comment\nalpha = 0.25").unwrap();
        assert_eq!(c.budget, 250.0);
        assert_eq!(c.seed, 9);
        assert_eq!(c.alpha, 0.25);
        assert_eq!(c.n_beams, 10);
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(matches!(Config::explore().merge_str("bugdet = 1.0"), Err(Error::Config(_))));
        assert!(matches!(Config::explore().set("alpha"), Err(Error::Config(_))));
        assert!(matches!(Config::explore().set("alpha = 2.0"), Err(Error::Config(_))));
    }

    #[test]
    fn single_assignment() {
        let c = Config::slam().set("particles=7").unwrap();
        assert_eq!(c.particles, 7);
    }

    #[test]
    fn hash_tracks_content() {
        let a = Config::explore();
        assert_eq!(a.hash8().len(), 8);
        assert_eq!(a.hash8(), Config::explore().hash8());
        assert_ne!(a.hash8(), a.set("seed = 2").unwrap().hash8());
    }
}

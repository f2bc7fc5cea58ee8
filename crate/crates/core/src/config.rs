//! Tunable constants for the simulator, planner and oracle.
//!
//! Every constant has a default; a TOML file named by the
//! `SKILLBENCH_CONFIG` environment variable may override any subset.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

/// Environment variable naming an optional TOML override file.
pub const CONFIG_ENV: &str = "SKILLBENCH_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    /// Integration step (s).
    pub dt: f64,
    pub gravity: f64,
    /// Per-step clamp on each translation component (m).
    pub max_translation: f64,
    /// Per-step clamp on each rotation-vector component (rad).
    pub max_rotation: f64,
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
    /// Suction engages objects whose top face lies at most this far below the tip.
    pub grasp_window: f64,
    /// Radius of the spherical tool body that sits directly above the tip.
    pub ee_radius: f64,
    /// Number of poses kept for velocity estimation.
    pub velocity_window: usize,
    /// Releases faster than this launch the object ballistically.
    pub throw_speed_threshold: f64,
    pub topple_hit_speed: f64,
    pub topple_sweep_speed: f64,
    /// Fraction of object height above which an EE contact can topple it.
    pub topple_height_fraction: f64,
    pub support_overlap: f64,
    pub density: f64,
    pub k_tilt: f64,
    pub tilt_clamp: f64,
    pub flight_substeps: usize,
    /// Separation under which two bodies count as touching (m).
    pub contact_tolerance: f64,
    /// Wall/floor thickness of containers (m).
    pub container_wall: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            dt: 0.02,
            gravity: 9.81,
            max_translation: 0.05,
            max_rotation: 0.2,
            bounds_min: [-0.6, -0.6, 0.0],
            bounds_max: [0.6, 0.6, 0.8],
            grasp_window: 0.02,
            ee_radius: 0.01,
            velocity_window: 5,
            throw_speed_threshold: 0.5,
            topple_hit_speed: 1.0,
            topple_sweep_speed: 0.15,
            topple_height_fraction: 2.0 / 3.0,
            support_overlap: 0.25,
            density: 1000.0,
            k_tilt: 0.5,
            tilt_clamp: 0.3,
            flight_substeps: 10,
            contact_tolerance: 1e-3,
            container_wall: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub node_budget: usize,
    pub step_size: f64,
    pub goal_bias: f64,
    pub smoothing_attempts: usize,
    /// Minimum clearance kept between the moving body and obstacles (m).
    pub clearance: f64,
    /// Max translation between consecutive waypoints of a returned path.
    pub waypoint_resolution: f64,
    /// Spacing of collision checks along an edge.
    pub check_resolution: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            node_budget: 20_000,
            step_size: 0.04,
            goal_bias: 0.1,
            smoothing_attempts: 100,
            clearance: 0.01,
            waypoint_resolution: 0.02,
            check_resolution: 0.005,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub replan_deviation: f64,
    pub episode_timeout: usize,
    /// Translation per step while following a plan.
    pub move_step: f64,
    pub throw_angle_deg: f64,
    /// Height of the free-space travel layer above the tallest object.
    pub travel_clearance: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            replan_deviation: 0.05,
            episode_timeout: 2000,
            move_step: 0.04,
            throw_angle_deg: 45.0,
            travel_clearance: 0.06,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub world: WorldConfig,
    pub planner: PlannerConfig,
    pub solver: SolverConfig,
    /// Weight of rotation error (rad) in the combined pose error.
    pub pose_rotation_weight: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            planner: PlannerConfig::default(),
            solver: SolverConfig::default(),
            pose_rotation_weight: crate::geom::ROTATION_WEIGHT,
        }
    }
}

impl Config {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.pose_rotation_weight == 0.0 {
            cfg.pose_rotation_weight = crate::geom::ROTATION_WEIGHT;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Defaults, overridden by the file named in `SKILLBENCH_CONFIG` if set.
    pub fn from_env() -> Result<Self> {
        match std::env::var_os(CONFIG_ENV) {
            Some(p) => Self::from_file(Path::new(&p)),
            None => Ok(Self::new()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_override_keeps_other_defaults() {
        let cfg = Config::from_toml_str("[world]\ndt = 0.01\n[planner]\nnode_budget = 5\n").unwrap();
        assert_eq!(cfg.world.dt, 0.01);
        assert_eq!(cfg.world.gravity, 9.81);
        assert_eq!(cfg.planner.node_budget, 5);
        assert_eq!(cfg.pose_rotation_weight, 0.1);
    }

    #[test]
    fn bad_toml_is_config_error() {
        assert!(matches!(Config::from_toml_str("world = 3"), Err(Error::Config(_))));
    }
}

//! Experiment configuration. One TOML file; unknown keys are rejected and
//! every field has a default.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::shapes::{Category, ShapeError};
use crate::unmake::UnmakeConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Arch,
    MultiHeight,
    Tower,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub height: u8,
    pub heights: Vec<u8>,
    pub n_cubes: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig { kind: TaskKind::Arch, height: 3, heights: vec![3, 4, 5], n_cubes: 3 }
    }
}

impl TaskConfig {
    pub fn category(&self) -> Result<Category, ShapeError> {
        match self.kind {
            TaskKind::Arch => Category::arch(self.height),
            TaskKind::MultiHeight => Category::arches(&self.heights),
            TaskKind::Tower => Category::tower(self.n_cubes),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchColors {
    /// Color identifies piece length.
    ByLength,
    /// Uniform over the palette.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValueConfig {
    /// Training rounds `K`.
    pub rounds: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Minimum number of raw state-value pairs generated per round.
    pub dv_target_pairs: usize,
    pub min_expansions_per_state: usize,
    pub paths_per_instance: usize,
    /// Length of the random-move walks that expand each graph state.
    pub walk_length: usize,
    pub discovery_attempts: usize,
    /// Per-step probability of a random action during discovery rollouts.
    pub discovery_epsilon: f64,
    /// Greedy rollout length during discovery; 0 means `2 * M_MAX`.
    pub max_steps: usize,
    pub arch_colors: ArchColors,
    pub max_retries: usize,
}

impl Default for ValueConfig {
    fn default() -> Self {
        ValueConfig {
            rounds: 5,
            epochs: 300,
            lr: 1e-3,
            batch_size: 64,
            dv_target_pairs: 20_000,
            min_expansions_per_state: 4,
            paths_per_instance: 1,
            walk_length: 3,
            discovery_attempts: 200,
            discovery_epsilon: 0.2,
            max_steps: 0,
            arch_colors: ArchColors::ByLength,
            max_retries: 3,
        }
    }
}

impl ValueConfig {
    pub fn rollout_steps(&self) -> usize {
        if self.max_steps == 0 {
            2 * crate::world::M_MAX
        } else {
            self.max_steps
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub max_env_steps: u64,
    pub simulations_per_move: usize,
    pub uct_c: f64,
    pub rollout_depth: usize,
    pub episodes: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { max_env_steps: 200_000, simulations_per_move: 50, uct_c: 1.4, rollout_depth: 8, episodes: 200 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    /// Vertical field of view in degrees.
    pub fov_deg: f64,
    /// Camera position in U.
    pub eye: [f64; 3],
    pub target: [f64; 3],
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig { width: 256, height: 256, fov_deg: 60.0, eye: [8.0, -10.0, 20.0], target: [8.0, 7.0, 0.0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub bernoulli_p: f64,
    pub extent_noise: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { bernoulli_p: 0.0, extent_noise: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeatmapConfig {
    pub sigma: f64,
    pub nms_radius: usize,
    pub threshold: f64,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        HeatmapConfig { sigma: 1.5, nms_radius: 2, threshold: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyDataConfig {
    pub paths_per_instance: usize,
    pub perturbations_per_state: usize,
}

impl Default for PolicyDataConfig {
    fn default() -> Self {
        PolicyDataConfig { paths_per_instance: 1, perturbations_per_state: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Pick-place steps allowed per episode; 0 means `2 * M_MAX`.
    pub max_steps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { episodes: 50, max_steps: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub gamma: f64,
    pub task: TaskConfig,
    pub unmake: UnmakeConfig,
    pub value: ValueConfig,
    pub search: SearchConfig,
    pub camera: CameraConfig,
    pub augment: AugmentConfig,
    pub heatmap: HeatmapConfig,
    pub policy_data: PolicyDataConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            gamma: 0.95,
            task: TaskConfig::default(),
            unmake: UnmakeConfig::default(),
            value: ValueConfig::default(),
            search: SearchConfig::default(),
            camera: CameraConfig::default(),
            augment: AugmentConfig::default(),
            heatmap: HeatmapConfig::default(),
            policy_data: PolicyDataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(ConfigError::Invalid(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if self.unmake.table_samples == 0 || self.unmake.node_budget == 0 {
            return Err(ConfigError::Invalid("unmake budgets must be positive".into()));
        }
        let s = &self.search;
        if s.simulations_per_move == 0 || s.rollout_depth == 0 || s.uct_c < 0.0 {
            return Err(ConfigError::Invalid("search budgets must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.augment.bernoulli_p) {
            return Err(ConfigError::Invalid("bernoulli_p must lie in [0, 1)".into()));
        }
        if self.value.batch_size < 2 {
            return Err(ConfigError::Invalid("batch_size must be at least 2".into()));
        }
        self.task.category()?;
        Ok(())
    }

    /// Unmake settings with the experiment-wide discount.
    pub fn unmake_config(&self) -> UnmakeConfig {
        UnmakeConfig { gamma: self.gamma, ..self.unmake.clone() }
    }

    /// Hex SHA-256 of the resolved config.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canon.as_bytes()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_hash_is_stable() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("seed = 1\nbogus = 2\n").is_err());
        assert!(ExperimentConfig::from_toml("[task]\nkind = \"arch\"\nhieght = 4\n").is_err());
        let c = ExperimentConfig::from_toml("[task]\nkind = \"tower\"\nn_cubes = 5\n").unwrap();
        assert_eq!(c.task.category().unwrap().label(), "tower5");
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ExperimentConfig::from_toml("gamma = 1.5\n").is_err());
        assert!(ExperimentConfig::from_toml("[task]\nheight = 7\n").is_err());
    }
}

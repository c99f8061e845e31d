//! Experiment configuration: one JSON document with the blocks `teacher`,
//! `student`, `optimizer`, `sweep` and `output`.
//!
//! Every field has a default, so `{}` is a valid config describing the
//! balanced-teacher phase-transition sweep. The fully resolved config is
//! echoed into each run's metadata together with its hash.

use std::path::{Path, PathBuf};

use extrapolab_core::optim::{paper_milestones, LossKind, Method};
use extrapolab_core::Structure;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    Balanced,
    Delay,
    RandomUnbalanced,
    Gru,
    /// Load a serialized linear teacher from `teacher.path`.
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub kind: TeacherKind,
    pub dh: usize,
    /// Fixed teacher seed. When absent, each sweep seed draws its own teacher.
    pub seed: Option<u64>,
    pub path: Option<PathBuf>,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            kind: TeacherKind::Balanced,
            dh: 5,
            seed: None,
            path: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitName {
    /// `C = Bᵀ` with a symmetric `A`.
    Balanced,
    /// Independent Gaussian entries with block norm about `scale`.
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub kind: InitName,
    /// Linear students default to 1e-2, GRU students to 1e-4 per entry.
    pub scale: Option<f64>,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            kind: InitName::Balanced,
            scale: None,
        }
    }
}

pub const LINEAR_INIT_SCALE: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentConfig {
    pub d: usize,
    pub structure: Structure,
    pub init: InitConfig,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            d: 40,
            structure: Structure::Symmetric,
            init: InitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Multiply the rate by 0.1 at steps 5000, 10000, 15000 and 30000.
    Multistep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub method: Method,
    /// Step size for GD and Adam; integration step for GF.
    pub lr: f64,
    pub max_steps: usize,
    pub loss: LossKind,
    /// Defaults to 1e-12 for population-type losses and 1e-8 otherwise.
    pub early_stop_loss: Option<f64>,
    pub schedule: Schedule,
    /// Mini-batch size for empirical losses.
    pub batch_size: usize,
    /// Training sequences drawn for empirical losses.
    pub n_train: usize,
    pub record_every: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            method: Method::Adam,
            lr: 1e-3,
            max_steps: 15_000,
            loss: LossKind::Population,
            early_stop_loss: None,
            schedule: Schedule::Constant,
            batch_size: 100,
            n_train: 10_000,
            record_every: 100,
        }
    }
}

impl OptimizerConfig {
    pub fn early_stop(&self) -> f64 {
        self.early_stop_loss.unwrap_or_else(|| self.loss.default_early_stop())
    }

    pub fn milestones(&self) -> Vec<(usize, f64)> {
        match self.schedule {
            Schedule::Constant => Vec::new(),
            Schedule::Multistep => paper_milestones(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub k_values: Vec<usize>,
    /// Number of seeds per sweep point.
    pub seeds: usize,
    /// Master seed; run seeds are derived from it by seed index.
    pub master_seed: u64,
    /// Initialization scales for `sweep-init-scale`.
    pub eps_values: Vec<f64>,
    /// End of the linear tail window; defaults to `max(4k, 200)`.
    pub tail_end: Option<usize>,
    /// Input sequences used to score GRU extrapolation.
    pub eval_inputs: usize,
    /// GRU evaluation horizon; defaults to `max(2·max k, 64)`.
    pub horizon: Option<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            k_values: (4..=20).collect(),
            seeds: 3,
            master_seed: 0,
            eps_values: vec![1e-5, 1e-4, 1e-3, 1e-2, 1e-1],
            tail_end: None,
            eval_inputs: 100,
            horizon: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Write per-run trajectories as JSON lines.
    pub trajectories: bool,
    /// Fill the `wall_time_s` column. When false it is written as 0 so that
    /// repeated runs produce byte-identical files.
    pub wall_time: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            trajectories: true,
            wall_time: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub optimizer: OptimizerConfig,
    pub sweep: SweepConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: &str| Err(CliError::Usage(format!("invalid config: {msg}")));
        if self.teacher.dh == 0 && self.teacher.kind != TeacherKind::File {
            return bad("teacher.dh must be at least 1");
        }
        if self.teacher.kind == TeacherKind::File && self.teacher.path.is_none() {
            return bad("teacher.kind = file needs teacher.path");
        }
        if self.student.d == 0 {
            return bad("student.d must be at least 1");
        }
        if let Some(s) = self.student.init.scale {
            if !(s > 0.0 && s.is_finite()) {
                return bad("student.init.scale must be positive");
            }
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return bad("optimizer.lr must be positive");
        }
        if self.optimizer.max_steps == 0 || self.optimizer.record_every == 0 {
            return bad("optimizer.max_steps and optimizer.record_every must be at least 1");
        }
        if self.optimizer.loss == LossKind::Empirical && (self.optimizer.n_train == 0 || self.optimizer.batch_size == 0) {
            return bad("empirical loss needs optimizer.n_train and optimizer.batch_size of at least 1");
        }
        if self.sweep.k_values.is_empty() || self.sweep.k_values.contains(&0) {
            return bad("sweep.k_values must be non-empty and positive");
        }
        if self.sweep.seeds == 0 {
            return bad("sweep.seeds must be at least 1");
        }
        if self.sweep.eps_values.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return bad("sweep.eps_values must be positive");
        }
        if self.sweep.eval_inputs == 0 {
            return bad("sweep.eval_inputs must be at least 1");
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form of the resolved config.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn linear_init_scale(&self) -> f64 {
        self.student.init.scale.unwrap_or(LINEAR_INIT_SCALE)
    }

    pub fn gru_init_scale(&self) -> f64 {
        self.student.init.scale.unwrap_or(1e-4)
    }
}

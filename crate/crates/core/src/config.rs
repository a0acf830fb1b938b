//! Pipeline configuration: a TOML file with one table per stage. Unknown
//! keys are rejected and every value is validated against the consuming
//! module's preconditions at load time.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inversion::{FdMode, InversionSchedule, InversionStage};
use crate::missing_region::ProjectionAxis;
use crate::nn::OptimKind;
use crate::synth::SynthConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// Raster resolution as (rows, cols).
    pub resolution: (usize, usize),
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            resolution: (64, 64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Estimate and strip the background plane before downsampling.
    pub background_removal: bool,
    pub ransac_iterations: usize,
    /// RANSAC inlier threshold as a fraction of the bounding-box diagonal.
    pub ransac_threshold_fraction: f64,
    /// Foreground margin above the plane, same units.
    pub margin_fraction: f64,
    pub seed: u64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            background_removal: false,
            ransac_iterations: 256,
            ransac_threshold_fraction: 0.005,
            margin_fraction: 0.005,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FpfhConfig {
    pub neighbors: usize,
    pub bins: usize,
}

impl Default for FpfhConfig {
    fn default() -> Self {
        Self {
            neighbors: 30,
            bins: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoresetConfig {
    pub fraction: f64,
    pub seed: u64,
}

impl Default for CoresetConfig {
    fn default() -> Self {
        Self {
            fraction: 0.01,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanConfig {
    pub latent_dim: usize,
    pub prior_points: usize,
    pub gen_hidden: Vec<usize>,
    pub disc_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_d: f64,
    pub lr_g: f64,
    pub optimizer: String,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            latent_dim: 128,
            prior_points: 1024,
            gen_hidden: vec![64, 64],
            disc_hidden: vec![64, 128],
            feature_dim: 64,
            epochs: 300,
            batch_size: 4,
            lr_d: 1e-4,
            lr_g: 1e-4,
            optimizer: "sgd".into(),
            momentum: 0.9,
            seed: 23,
        }
    }
}

impl GanConfig {
    pub fn optim_kind(&self) -> Result<OptimKind> {
        match self.optimizer.as_str() {
            "sgd" => Ok(OptimKind::sgd(self.momentum)),
            "adam" => Ok(OptimKind::adam()),
            other => Err(Error::Config(format!(
                "gan.optimizer must be 'sgd' or 'adam', got '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub lr_z: f64,
    pub lr_theta: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionConfig {
    pub stages: Vec<StageConfig>,
    pub candidates: usize,
    pub fd_mode: FdMode,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        let stages = InversionSchedule::default()
            .stages
            .iter()
            .map(|s| StageConfig {
                lr_z: s.lr_z,
                lr_theta: s.lr_theta,
                iterations: s.iterations,
            })
            .collect();
        Self {
            stages,
            candidates: 8,
            fd_mode: FdMode::Feature,
            seed: 31,
        }
    }
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            lr_z: 2e-5,
            lr_theta: 1e-4,
            iterations: 40,
        }
    }
}

impl InversionConfig {
    pub fn schedule(&self) -> InversionSchedule {
        InversionSchedule {
            stages: self
                .stages
                .iter()
                .map(|s| InversionStage {
                    lr_z: s.lr_z,
                    lr_theta: s.lr_theta,
                    iterations: s.iterations,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MissingConfig {
    /// DBSCAN radius in grid-cell widths.
    pub eps_cells: f64,
    pub min_pts: usize,
    pub dilate_radius: usize,
    /// Branch-2 flagging threshold: this quantile of branch-2 scores over
    /// normal validation samples.
    pub threshold_quantile: f64,
    pub projection_axis: ProjectionAxis,
}

impl Default for MissingConfig {
    fn default() -> Self {
        Self {
            eps_cells: 2.0,
            min_pts: 5,
            dilate_radius: 2,
            threshold_quantile: 0.95,
            projection_axis: ProjectionAxis::Z,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub nu: f64,
    /// RBF bandwidth; omit for the median heuristic.
    pub gamma: Option<f64>,
    pub quantile_grid_points: usize,
    pub max_pairs: usize,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            nu: 0.1,
            gamma: None,
            quantile_grid_points: 21,
            max_pairs: 20_000,
            seed: 41,
        }
    }
}

impl FusionConfig {
    pub fn quantile_grid(&self) -> Vec<f64> {
        let n = self.quantile_grid_points.max(2);
        (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub limit: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { limit: 0.3 }
    }
}

/// Root configuration; every section has working defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub grid: GridConfig,
    pub preprocess: PreprocessConfig,
    pub fpfh: FpfhConfig,
    pub coreset: CoresetConfig,
    pub gan: GanConfig,
    pub inversion: InversionConfig,
    pub missing: MissingConfig,
    pub fusion: FusionConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("serializable config")
    }

    /// Stable hash of the serialized configuration, for run provenance.
    pub fn content_hash(&self) -> u64 {
        crate::memory_bank::fnv1a64(self.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let (rows, cols) = self.grid.resolution;
        if rows == 0 || cols == 0 {
            return Err(Error::Config("grid.resolution must be at least 1x1".into()));
        }
        if self.preprocess.ransac_iterations == 0 {
            return Err(Error::Config(
                "preprocess.ransac_iterations must be positive".into(),
            ));
        }
        if !(self.preprocess.ransac_threshold_fraction > 0.0) {
            return Err(Error::Config(
                "preprocess.ransac_threshold_fraction must be positive".into(),
            ));
        }
        if self.fpfh.neighbors == 0 {
            return Err(Error::Config("fpfh.neighbors must be at least 1".into()));
        }
        if self.fpfh.bins == 0 {
            return Err(Error::Config("fpfh.bins must be at least 1".into()));
        }
        if !(self.coreset.fraction > 0.0 && self.coreset.fraction <= 1.0) {
            return Err(Error::Config("coreset.fraction must lie in (0, 1]".into()));
        }
        if self.gan.latent_dim == 0 || self.gan.prior_points == 0 {
            return Err(Error::Config(
                "gan.latent_dim and gan.prior_points must be positive".into(),
            ));
        }
        if self.gan.gen_hidden.is_empty() || self.gan.disc_hidden.is_empty() {
            return Err(Error::Config("gan hidden layers must be non-empty".into()));
        }
        if self.gan.feature_dim == 0 {
            return Err(Error::Config("gan.feature_dim must be positive".into()));
        }
        if self.gan.epochs == 0 || self.gan.batch_size == 0 {
            return Err(Error::Config(
                "gan.epochs and gan.batch_size must be positive".into(),
            ));
        }
        if !(self.gan.lr_d > 0.0 && self.gan.lr_g > 0.0) {
            return Err(Error::Config("gan learning rates must be positive".into()));
        }
        self.gan.optim_kind()?;
        if self.inversion.candidates == 0 {
            return Err(Error::Config(
                "inversion.candidates must be at least 1".into(),
            ));
        }
        self.inversion
            .schedule()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if !(self.missing.eps_cells > 0.0) {
            return Err(Error::Config("missing.eps_cells must be positive".into()));
        }
        if self.missing.min_pts == 0 {
            return Err(Error::Config("missing.min_pts must be at least 1".into()));
        }
        if !(self.missing.threshold_quantile >= 0.0 && self.missing.threshold_quantile <= 1.0) {
            return Err(Error::Config(
                "missing.threshold_quantile must lie in [0, 1]".into(),
            ));
        }
        if !(self.fusion.nu > 0.0 && self.fusion.nu <= 1.0) {
            return Err(Error::Config("fusion.nu must lie in (0, 1]".into()));
        }
        if let Some(g) = self.fusion.gamma {
            if !(g > 0.0) {
                return Err(Error::Config("fusion.gamma must be positive".into()));
            }
        }
        if self.fusion.quantile_grid_points < 2 {
            return Err(Error::Config(
                "fusion.quantile_grid_points must be at least 2".into(),
            ));
        }
        if self.fusion.max_pairs < 8 {
            return Err(Error::Config("fusion.max_pairs must be at least 8".into()));
        }
        if !(self.eval.limit > 0.0 && self.eval.limit <= 1.0) {
            return Err(Error::Config("eval.limit must lie in (0, 1]".into()));
        }
        self.synth.validate()?;
        Ok(())
    }
}

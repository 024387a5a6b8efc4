//! Experiment configuration: one JSON document with a section per module.
//!
//! Every section rejects unknown keys, so a typo fails the run instead of
//! silently falling back to a default. Omitted sections (or fields) take
//! the documented defaults, which match the committed fixture scale.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::{RgsdConfig, SdsConfig};
use crate::nncore::DenoiserConfig;
use crate::rgnv::RgnvConfig;
use crate::scheduler::ScheduleKind;
use crate::toyworld::ViewGeometry;
use crate::{Error, Result};

/// Scene geometry plus the severity used to fabricate coarse views.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub view: usize,
    pub grid: usize,
    pub degrade_severity: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            view: 16,
            grid: 32,
            degrade_severity: 0.6,
        }
    }
}

/// Ladder used while training the denoiser. Enhancement and distillation
/// carry their own step counts in their sections.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub train_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            kind: ScheduleKind::Cosine,
            train_steps: 50,
        }
    }
}

/// Denoiser training run: optimization plus the procedural corpus size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub num_scenes: usize,
    pub views_per_scene: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 80,
            lr: 0.03,
            batch_size: 8,
            num_scenes: 12,
            views_per_scene: 6,
        }
    }
}

/// Iteration budget of the two distillation stages, how often field
/// checkpoints are written, and the step size of the reconstruction-style
/// field updates (the distillation etas live in their own sections).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub coarse_iters: usize,
    pub refine_iters: usize,
    pub checkpoint_every: usize,
    pub field_lr: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            coarse_iters: 200,
            refine_iters: 200,
            checkpoint_every: 50,
            field_lr: 0.5,
        }
    }
}

/// Which quality columns the metric CSVs carry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricToggles {
    pub psnr: bool,
    pub ssim: bool,
    pub mse: bool,
}

impl Default for MetricToggles {
    fn default() -> Self {
        MetricToggles {
            psnr: true,
            ssim: true,
            mse: true,
        }
    }
}

/// The whole experiment, straight from one JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub scene_seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub world: WorldConfig,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub rgnv: RgnvConfig,
    pub sds: SdsConfig,
    pub rgsd: RgsdConfig,
    pub stages: StageConfig,
    pub metrics: MetricToggles,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            scene_seeds: (1..=20).collect(),
            out_dir: PathBuf::from("out"),
            world: WorldConfig::default(),
            schedule: ScheduleConfig::default(),
            denoiser: DenoiserConfig {
                image_size: 16,
                base_channels: 12,
                attn_resolution: 4,
                ..DenoiserConfig::default()
            },
            train: TrainConfig::default(),
            rgnv: RgnvConfig::default(),
            sds: SdsConfig::default(),
            rgsd: RgsdConfig::default(),
            stages: StageConfig::default(),
            metrics: MetricToggles::default(),
        }
    }
}

impl ExperimentConfig {
    /// Read, parse, and validate. All failures are config errors naming
    /// the offending path or key.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scene_seeds.is_empty() {
            return Err(Error::Config("scene_seeds must not be empty".into()));
        }
        if !(0.0..=1.0).contains(&self.world.degrade_severity) {
            return Err(Error::Config(format!(
                "world.degrade_severity must be in [0, 1], got {}",
                self.world.degrade_severity
            )));
        }
        // the builder enforces the view/grid relation; run it for the message
        ViewGeometry::new(self.world.view, self.world.grid)?;
        if self.denoiser.image_size != self.world.view {
            return Err(Error::Config(format!(
                "denoiser.image_size {} must equal world.view {} so the net consumes rendered views",
                self.denoiser.image_size, self.world.view
            )));
        }
        self.denoiser.validate()?;
        if self.schedule.train_steps == 0 {
            return Err(Error::Config("schedule.train_steps must be positive".into()));
        }
        if self.train.epochs == 0
            || self.train.batch_size == 0
            || self.train.num_scenes == 0
            || self.train.views_per_scene == 0
        {
            return Err(Error::Config(
                "train counts (epochs, batch_size, num_scenes, views_per_scene) must be positive"
                    .into(),
            ));
        }
        if !self.train.lr.is_finite() || self.train.lr <= 0.0 {
            return Err(Error::Config(format!(
                "train.lr must be finite and positive, got {}",
                self.train.lr
            )));
        }
        if self.stages.checkpoint_every == 0 {
            return Err(Error::Config("stages.checkpoint_every must be positive".into()));
        }
        if !self.stages.field_lr.is_finite() || self.stages.field_lr <= 0.0 {
            return Err(Error::Config(format!(
                "stages.field_lr must be finite and positive, got {}",
                self.stages.field_lr
            )));
        }
        if !self.metrics.psnr && !self.metrics.ssim && !self.metrics.mse {
            return Err(Error::Config("at least one metric toggle must be on".into()));
        }
        self.rgnv.validate()?;
        self.sds.validate()?;
        self.rgsd.validate()?;
        Ok(())
    }

    pub fn geometry(&self) -> ViewGeometry {
        ViewGeometry::new(self.world.view, self.world.grid)
            .expect("geometry was validated with the config")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_and_round_trips_through_json() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn empty_document_means_all_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_not_ignored() {
        let err = serde_json::from_str::<ExperimentConfig>(r#"{"sede": 3}"#).unwrap_err();
        assert!(err.to_string().contains("sede"), "message: {err}");
        let err =
            serde_json::from_str::<ExperimentConfig>(r#"{"rgnv": {"step": 10}}"#).unwrap_err();
        assert!(err.to_string().contains("step"), "message: {err}");
    }

    #[test]
    fn load_reports_missing_file_as_a_config_error_naming_the_path() {
        let err = ExperimentConfig::load(Path::new("/nonexistent/lab.json")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("/nonexistent/lab.json"), "got {err}");
    }

    #[test]
    fn load_rejects_inconsistent_sections() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lab.json");

        std::fs::write(&path, r#"{"world": {"view": 16, "grid": 32, "degrade_severity": 2.0}}"#)
            .unwrap();
        let err = ExperimentConfig::load(&path).unwrap_err();
        assert!(err.to_string().contains("degrade_severity"), "got {err}");

        std::fs::write(&path, r#"{"denoiser": {"image_size": 32}}"#).unwrap();
        let err = ExperimentConfig::load(&path).unwrap_err();
        assert!(err.to_string().contains("image_size"), "got {err}");

        std::fs::write(&path, r#"{"rgsd": {"inject_from": 40}}"#).unwrap();
        let err = ExperimentConfig::load(&path).unwrap_err();
        assert!(err.to_string().contains("inject_from"), "got {err}");
    }

    #[test]
    fn partial_sections_fill_from_defaults() {
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"train": {"epochs": 3}, "rgnv": {"guidance": 2.5}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.rgnv.guidance, 2.5);
        assert_eq!(cfg.rgnv.steps, 50, "untouched rgnv fields keep defaults");
    }
}

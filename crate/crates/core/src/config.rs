//! Run configuration files (TOML).
//!
//! ```toml
//! seed = 7
//! budget = "desk"            # or "full"
//!
//! [paths]
//! data_dir = "data/train"    # relative paths resolve against the file's directory
//! output_dir = "runs/toy"
//! checkpoint = "runs/s1/checkpoints/stage1.safetensors"   # optional
//!
//! [model]
//! num_cascades = 6
//! channels = 8
//!
//! [eval]
//! crop_fraction = 0.5
//! ```
//!
//! `[stage1]`, `[stage2]` and `[stage3]` may hold explicit plans
//! (`[[stage2.steps]]` tables) that replace the built-in ones.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::nn::ModelConfig;
use crate::objectives::LossWeights;
use crate::training::{AdamWConfig, StagePlan, TrainOptions};

/// Environment variable that, when set, becomes the base directory of every
/// relative output path.
pub const OUTPUT_ROOT_ENV: &str = "CRUNET_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    /// Epochs ÷ 10 and samples per epoch ÷ 100 (stage 3 keeps its epochs).
    #[default]
    Desk,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    /// Starting weights; stage 3 requires them.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub crop_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { crop_fraction: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    One,
    Two,
    Three,
}

impl TryFrom<u8> for Stage {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            3 => Ok(Stage::Three),
            _ => Err(Error::validation(format!("stage must be 1, 2 or 3, got {v}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub budget: Budget,
    #[serde(default)]
    pub mixed_precision: bool,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub stage1: Option<StagePlan>,
    #[serde(default)]
    pub stage2: Option<StagePlan>,
    #[serde(default)]
    pub stage3: Option<StagePlan>,
}

/// Places a relative output path under the output-root override, if set.
pub fn output_path(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() && !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

impl RunConfig {
    /// Parses a config file and resolves its relative input paths against
    /// the file's directory. Relative output paths resolve against the
    /// output-root override when set, else the file's directory too.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Validation(msg) => Error::Parse {
                path: path.to_path_buf(),
                reason: msg,
            },
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.paths.data_dir = base.join(&cfg.paths.data_dir);
        cfg.paths.checkpoint = cfg.paths.checkpoint.map(|c| base.join(c));
        cfg.paths.output_dir = if std::env::var_os(OUTPUT_ROOT_ENV).is_some() {
            output_path(&cfg.paths.output_dir)
        } else {
            base.join(&cfg.paths.output_dir)
        };
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::validation(e.to_string().trim_end().to_string()))
    }

    /// Schema-level checks plus existence of the referenced inputs.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::validation("optimizer.beta1/beta2: must lie in [0, 1)"));
        }
        if !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            return Err(Error::validation("optimizer.eps must be > 0 and optimizer.weight_decay >= 0"));
        }
        let crop = self.eval.crop_fraction;
        if !(crop > 0.0 && crop <= 1.0) {
            return Err(Error::validation(format!("eval.crop_fraction: must lie in (0, 1], got {crop}")));
        }
        if !self.paths.data_dir.is_dir() {
            return Err(Error::validation(format!(
                "paths.data_dir: directory {} does not exist",
                self.paths.data_dir.display()
            )));
        }
        if let Some(c) = &self.paths.checkpoint {
            if !c.is_file() {
                return Err(Error::validation(format!("paths.checkpoint: file {} does not exist", c.display())));
            }
        }
        for (name, plan) in [("stage1", &self.stage1), ("stage2", &self.stage2), ("stage3", &self.stage3)] {
            if let Some(p) = plan {
                p.validate(1).map_err(|e| Error::validation(format!("{name}: {e}")))?;
            }
        }
        Ok(())
    }

    /// The plan a stage runs, given the cascade count of the starting model.
    pub fn plan(&self, stage: Stage, cascades: usize) -> StagePlan {
        let explicit = match stage {
            Stage::One => &self.stage1,
            Stage::Two => &self.stage2,
            Stage::Three => &self.stage3,
        };
        if let Some(p) = explicit {
            return p.clone();
        }
        let full = match stage {
            Stage::One => StagePlan::stage1(),
            Stage::Two => StagePlan::curriculum(),
            Stage::Three => StagePlan::stage3(cascades),
        };
        match (self.budget, stage) {
            (Budget::Full, _) => full,
            (Budget::Desk, Stage::Three) => full.scaled(1.0, 100.0),
            (Budget::Desk, _) => full.desk(),
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            seed: self.seed,
            loss: self.loss,
            optimizer: self.optimizer,
            mixed_precision: self.mixed_precision,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[paths]\ndata_dir = \"d\"\noutput_dir = \"o\"\n";

    #[test]
    fn defaults_fill_missing_sections() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!(cfg.loss, LossWeights::default());
        assert_eq!(cfg.budget, Budget::Desk);
        assert_eq!(cfg.eval.crop_fraction, 0.5);
    }

    #[test]
    fn unknown_field_names_the_field() {
        let err = RunConfig::parse(&format!("{MINIMAL}[model]\nchanels = 3\n")).unwrap_err();
        assert!(err.to_string().contains("chanels"), "{err}");
    }

    #[test]
    fn desk_budgets() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        let s2 = cfg.plan(Stage::Two, 6);
        let iters: Vec<usize> = s2.steps.iter().map(|s| s.epochs * s.samples_per_epoch).collect();
        assert_eq!(iters, vec![240, 240, 180, 160]);
        let s3 = cfg.plan(Stage::Three, 12);
        assert_eq!((s3.steps[0].epochs, s3.steps[0].samples_per_epoch), (4, 900));
        assert_eq!(s3.steps[0].cascade_target, 12);
        let s1 = cfg.plan(Stage::One, 6);
        assert_eq!((s1.steps[0].epochs, s1.steps[0].samples_per_epoch), (6, 60));
    }

    #[test]
    fn missing_data_dir_fails_validation() {
        let cfg = RunConfig::parse("[paths]\ndata_dir = \"/nonexistent/xyz\"\noutput_dir = \"o\"\n").unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("paths.data_dir"));
    }

    #[test]
    fn bad_crop_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            "[paths]\ndata_dir = {:?}\noutput_dir = \"o\"\n[eval]\ncrop_fraction = 1.5\n",
            dir.path()
        );
        let err = RunConfig::parse(&text).unwrap().validate().unwrap_err();
        assert!(err.to_string().contains("eval.crop_fraction"));
    }
}

//! Run configuration: one TOML file holding data paths, model and training
//! constants, the evaluation grid, seeds and the output directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoencoder::{AeConfig, Feeding};
use crate::data::Mode;
use crate::error::{Error, Result};
use crate::eval::downstream::{full_grid, DownstreamSpec};
use crate::eval::{DiscriminativeConfig, EvalGrid, PredictiveConfig};
use crate::missing::{Binarize, MissingConfig};
use crate::train::FitConfig;
use crate::wgan::GanConfig;

/// Fixed offsets added to the master seed for each stage.
pub mod seed_offset {
    pub const SPLIT: u64 = 0;
    pub const AE_INIT: u64 = 1;
    pub const AE_TRAIN: u64 = 2;
    pub const GAN_INIT: u64 = 3;
    pub const GAN_TRAIN: u64 = 4;
    pub const GENERATE: u64 = 5;
    pub const EVAL: u64 = 100;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    /// One row per observation, described by a schema spec.
    #[default]
    Observations,
    /// A numeric table cut into stride-1 windows.
    Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub format: DataFormat,
    /// Schema spec file; required for observation files.
    #[serde(default)]
    pub schema: Option<PathBuf>,
    pub train: PathBuf,
    /// Held-out file. Without one, `test_fraction` of the instances are split off.
    #[serde(default)]
    pub test: Option<PathBuf>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Window length of a numeric table, in rows.
    #[serde(default)]
    pub window_steps: Option<usize>,
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Recurrent layers of encoder and decoder.
    pub layers: usize,
    /// Hidden width; unset means `width_multiplier * d_x` for complete data
    /// and 128 for incomplete data.
    pub hidden: Option<usize>,
    pub width_multiplier: usize,
    /// Decision-stack layers of the missing-aware decoder.
    pub decide_layers: usize,
    /// Embedding width; unset means the hidden width.
    pub embed_dim: Option<usize>,
    pub observation_embedding: bool,
    pub two_step_decoder: bool,
    pub binarize: Binarize,
    /// Ground-truth probability of the complete-data decoder's sampled feeding.
    pub teacher_prob: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            hidden: None,
            width_multiplier: 4,
            decide_layers: 2,
            embed_dim: None,
            observation_embedding: true,
            two_step_decoder: true,
            binarize: Binarize::Threshold,
            teacher_prob: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Unset means 1000 (complete) or 800 (incomplete).
    pub ae_epochs: Option<usize>,
    /// Unset means 512 (complete) or 128 (incomplete).
    pub ae_batch_size: Option<usize>,
    pub ae_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            ae_epochs: None,
            ae_batch_size: None,
            ae_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            grad_clip: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seeds: Vec<u64>,
    /// Unset metric sections fall back to the mode's default grid when all
    /// three are unset.
    pub discriminative: Option<DiscriminativeConfig>,
    pub predictive: Option<PredictiveConfig>,
    pub downstream: Option<Vec<DownstreamSpec>>,
    pub projection_sample: usize,
    /// Synthetic instances to generate; unset means the training-set size.
    pub synthetic_count: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            discriminative: None,
            predictive: None,
            downstream: None,
            projection_sample: 500,
            synthetic_count: None,
        }
    }
}

impl EvalConfig {
    pub fn grid(&self, mode: Mode) -> Result<EvalGrid> {
        let grid = if self.discriminative.is_none() && self.predictive.is_none() && self.downstream.is_none() {
            match mode {
                Mode::Complete => EvalGrid::complete(),
                Mode::Incomplete => EvalGrid::incomplete(full_grid()),
            }
        } else {
            EvalGrid {
                discriminative: self.discriminative.clone(),
                predictive: self.predictive.clone(),
                predictive_oracle: self.predictive.is_some(),
                downstream_oracle: self.downstream.is_some(),
                downstream: self.downstream.clone().unwrap_or_default(),
                projection_sample: self.projection_sample,
            }
        };
        let grid = EvalGrid {
            projection_sample: self.projection_sample,
            ..grid
        };
        grid.check_mode(mode)?;
        Ok(grid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointConfig {
    pub ae_every_epochs: usize,
    pub gan_every_iterations: usize,
}

impl Default for CheckpointConfig {
    fn default() -> Self {
        Self {
            ae_every_epochs: 100,
            gan_every_iterations: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub gan: GanConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub checkpoint: CheckpointConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("run")
}

/// Model and training constants once the data mode and width are known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ResolvedModel {
    Complete(AeConfig),
    Incomplete(MissingConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub model: ResolvedModel,
    pub fit: FitConfig,
    pub gan: GanConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative data and output paths are taken
    /// relative to it.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Config(format!("config {} does not exist", path.display())));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.out_dir);
        rebase(&mut cfg.data.train);
        if let Some(p) = cfg.data.test.as_mut() {
            rebase(p);
        }
        if let Some(p) = cfg.data.schema.as_mut() {
            rebase(p);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Short digest of the serialized config without its output directory,
    /// recorded in bundles and checkpoints.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        hex::encode(&Sha256::digest(c.to_toml().as_bytes())[..8])
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.data.test_fraction) {
            return Err(Error::Config("test_fraction must lie in [0, 1)".into()));
        }
        if self.data.format == DataFormat::Observations && self.data.schema.is_none() {
            return Err(Error::Config("observation files need a schema spec".into()));
        }
        if self.data.format == DataFormat::Table && self.data.window_steps.is_none() {
            return Err(Error::Config("table data needs window_steps".into()));
        }
        if self.model.layers == 0 || self.model.width_multiplier == 0 {
            return Err(Error::Config("layers and width_multiplier must be positive".into()));
        }
        if self.eval.seeds.is_empty() {
            return Err(Error::Config("eval.seeds must not be empty".into()));
        }
        if self.checkpoint.ae_every_epochs == 0 || self.checkpoint.gan_every_iterations == 0 {
            return Err(Error::Config("checkpoint cadence must be positive".into()));
        }
        self.gan.validate()
    }

    /// Fills the mode-dependent defaults for data with `d_x` encoded
    /// dynamic columns.
    pub fn resolve(&self, mode: Mode, d_x: usize) -> Result<Resolved> {
        let m = &self.model;
        let (model, epochs, batch) = match mode {
            Mode::Complete => {
                let cfg = AeConfig {
                    layers: m.layers,
                    hidden: m.hidden.unwrap_or(m.width_multiplier * d_x),
                    feeding: Feeding::Sampling {
                        teacher_prob: m.teacher_prob,
                    },
                };
                cfg.validate()?;
                (ResolvedModel::Complete(cfg), 1000, 512)
            }
            Mode::Incomplete => {
                let hidden = m.hidden.unwrap_or(128);
                let cfg = MissingConfig {
                    layers: m.layers,
                    hidden,
                    decide_layers: m.decide_layers,
                    embed_dim: m.embed_dim.unwrap_or(hidden),
                    observation_embedding: m.observation_embedding,
                    two_step_decoder: m.two_step_decoder,
                    binarize: m.binarize,
                };
                cfg.validate()?;
                (ResolvedModel::Incomplete(cfg), 800, 128)
            }
        };
        let fit = FitConfig {
            epochs: self.train.ae_epochs.unwrap_or(epochs),
            batch_size: self.train.ae_batch_size.unwrap_or(batch),
            lr: self.train.ae_lr,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            grad_clip: self.train.grad_clip,
        };
        fit.validate()?;
        Ok(Resolved {
            model,
            fit,
            gan: self.gan.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[data]\nformat = \"table\"\ntrain = \"prices.csv\"\nwindow_steps = 24\n";

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.eval.seeds, vec![0, 1, 2]);
        assert_eq!(cfg.checkpoint, CheckpointConfig::default());
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        for bad in [
            "[data]\ntrain = \"x.csv\"\n",
            "[data]\nformat = \"table\"\ntrain = \"x.csv\"\n",
            "[data]\nformat = \"table\"\ntrain = \"x.csv\"\nwindow_steps = 4\ntest_fraction = 1.0\n",
            "[data]\nformat = \"table\"\ntrain = \"x.csv\"\nwindow_steps = 4\n[gan]\nlambda = 0.0\n",
            "[data]\nformat = \"table\"\ntrain = \"x.csv\"\nwindow_steps = 4\nbogus = 1\n",
        ] {
            assert!(matches!(RunConfig::from_toml(bad), Err(Error::Config(_))), "{bad}");
        }
        let mut cfg = RunConfig::from_toml(MINIMAL).unwrap();
        cfg.model.decide_layers = 3;
        assert!(matches!(cfg.resolve(Mode::Incomplete, 4), Err(Error::Config(_))));
        assert!(cfg.resolve(Mode::Complete, 4).is_ok());
    }

    #[test]
    fn partial_gan_table_keeps_other_defaults() {
        let cfg = RunConfig::from_toml(&format!("{MINIMAL}[gan]\niterations = 50\n")).unwrap();
        assert_eq!(cfg.gan.iterations, 50);
        assert_eq!(cfg.gan.lambda, 10.0);
    }

    #[test]
    fn eval_grid_rejects_predictive_on_incomplete_data() {
        let mut e = EvalConfig::default();
        assert_eq!(e.grid(Mode::Incomplete).unwrap().downstream.len(), 7);
        assert!(e.grid(Mode::Complete).unwrap().predictive.is_some());
        e.predictive = Some(PredictiveConfig::default());
        assert!(matches!(e.grid(Mode::Incomplete), Err(Error::Config(_))));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, MINIMAL).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.data.train, dir.path().join("prices.csv"));
        let missing = RunConfig::load(&dir.path().join("nope.toml")).unwrap_err();
        assert!(matches!(&missing, Error::Config(m) if m.contains("nope.toml")));
    }
}

//! Model and experiment configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the two modalities are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    /// Stage-1 features concatenated, shared trunk and encoder, one branch.
    EarlyConcat,
    /// Per-level concatenation of encoder outputs, one branch.
    LateConcat,
    /// Trident decoder with multi-modal deformable cross-attention.
    LooselyCoupled,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 3] = [
        FusionStrategy::EarlyConcat,
        FusionStrategy::LateConcat,
        FusionStrategy::LooselyCoupled,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::EarlyConcat => "early_concat",
            FusionStrategy::LateConcat => "late_concat",
            FusionStrategy::LooselyCoupled => "loosely_coupled",
        }
    }
}

impl std::str::FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionStrategy::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion strategy {s:?}")))
    }
}

/// Network hyperparameters. Everything here feeds the checkpoint digest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub levels: usize,
    pub heads: usize,
    pub points: usize,
    pub queries: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_hidden: usize,
    /// Channel widths of the two stride-2 stages before the first level.
    pub stem_widths: [usize; 2],
    pub visible_channels: usize,
    pub thermal_channels: usize,
    pub fusion: FusionStrategy,
    /// Standard deviation of the query content embedding init.
    pub content_init_std: f64,
    /// Standard deviation of the query positional embedding init.
    pub position_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            levels: 4,
            heads: 8,
            points: 4,
            queries: 20,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn_hidden: 64,
            stem_widths: [16, 32],
            visible_channels: 3,
            thermal_channels: 1,
            fusion: FusionStrategy::LooselyCoupled,
            content_init_std: 0.02,
            position_init_std: 1.0,
        }
    }
}

impl ModelConfig {
    /// Total downsampling of the coarsest level.
    pub fn coarsest_stride(&self) -> usize {
        8 << (self.levels - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("d_model must be a positive multiple of heads");
        }
        if self.d_model % 4 != 0 {
            return bad("d_model must be divisible by 4 for the sinusoidal encoding");
        }
        if !(1..=6).contains(&self.levels) {
            return bad("levels must be in 1..=6");
        }
        if self.points == 0 || self.queries == 0 || self.decoder_layers == 0 {
            return bad("points, queries and decoder_layers must be positive");
        }
        if self.encoder_layers > 6 {
            return bad("encoder_layers must be in 0..=6");
        }
        if self.visible_channels == 0 || self.thermal_channels == 0 || self.ffn_hidden == 0 {
            return bad("channel counts must be positive");
        }
        Ok(())
    }
}

/// Optimizer and schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of the epochs after which the step size is multiplied by
    /// `lr_drop_factor`.
    pub lr_drop_at: f64,
    pub lr_drop_factor: f64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 4,
            lr_drop_at: 0.5,
            lr_drop_factor: 0.1,
            grad_clip: 0.1,
        }
    }
}

impl OptimConfig {
    /// Step size used during 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drop = (self.epochs as f64 * self.lr_drop_at).round() as usize;
        if epoch > drop {
            self.lr * self.lr_drop_factor
        } else {
            self.lr
        }
    }
}

/// Where training and evaluation data live.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: std::path::PathBuf,
    pub train_split: String,
    pub test_split: String,
    /// Number of test scenes scored after each epoch (0 disables).
    pub val_scenes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: "data".into(),
            train_split: "train".into(),
            test_split: "test".into(),
            val_scenes: 100,
        }
    }
}

/// Complete description of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub mbo_enabled: bool,
    pub out_dir: std::path::PathBuf,
    pub model: ModelConfig,
    pub loss: crate::losses::LossConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub eval: crate::metrics::EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mbo_enabled: true,
            out_dir: "runs".into(),
            model: ModelConfig::default(),
            loss: crate::losses::LossConfig::default(),
            optim: OptimConfig::default(),
            data: DataConfig::default(),
            eval: crate::metrics::EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.eval.validate()?;
        let o = &self.optim;
        if o.epochs == 0 || o.batch_size == 0 || !(o.lr > 0.0) || o.grad_clip < 0.0 {
            return Err(Error::Config("epochs, batch size and step size must be positive".into()));
        }
        Ok(())
    }
}

/// Hex SHA-256 of the model configuration, stored in checkpoints.
pub fn model_digest(cfg: &ModelConfig) -> String {
    use sha2::{Digest, Sha256};
    let text = serde_json::to_string(cfg).expect("config serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

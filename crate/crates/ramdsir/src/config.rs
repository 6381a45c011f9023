//! Run configuration files.
//!
//! ```toml
//! [data]
//! domains = 4
//! per_domain = 50
//! seed = 7
//!
//! [train]
//! epochs = 60
//! held_out = 0
//!
//! [loss]
//! rec = 0.1
//!
//! [ram]
//! beta = 0.2
//!
//! [model]
//! base_channels = 8
//! ```
//!
//! Every key is optional; missing keys take their defaults.

use std::path::Path;

use anyhow::{Context, Result};
use ramdsir_core::losses::LossWeights;
use ramdsir_core::nn::Mode;
use ramdsir_core::synthdata::DataConfig;
use ramdsir_core::trainer::{Ablation, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub domains: usize,
    pub per_domain: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let d = DataConfig::default();
        Self { domains: 4, per_domain: 50, seed: 7, height: d.height, width: d.width, channels: d.channels, classes: d.classes }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub poly_power: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub held_out: usize,
    pub ram_aug: bool,
    pub dsir: bool,
    pub consistency: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            poly_power: t.poly_power,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
            held_out: 0,
            ram_aug: true,
            dsir: true,
            consistency: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub seg: f64,
    pub seg_aug: f64,
    pub rec: f64,
    pub consist: f64,
    pub dice_eps: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        Self { seg: w.seg, seg_aug: w.seg_aug, rec: w.rec, consist: w.consist, dice_eps: w.dice_eps }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RamSection {
    pub beta: f64,
    /// Fixed mixing ratio; sampled uniformly per pair when absent.
    pub lambda: Option<f64>,
}

impl Default for RamSection {
    fn default() -> Self {
        Self { beta: ramdsir_core::spectral::DEFAULT_BETA, lambda: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub base_channels: usize,
    pub depth: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self { base_channels: t.base_channels, depth: t.depth }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub train: TrainSection,
    pub loss: LossSection,
    pub ram: RamSection,
    pub model: ModelSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("malformed run config")?;
        cfg.train_config().validate()?;
        cfg.data_config().validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<u8>)> {
        let bytes = std::fs::read(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let text = std::str::from_utf8(&bytes).context("config is not UTF-8")?;
        Ok((Self::parse(text)?, bytes))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn ablation(&self) -> Ablation {
        Ablation { ram_aug: self.train.ram_aug, dsir: self.train.dsir, consistency: self.train.consistency }
    }

    pub fn set_ablation(&mut self, a: Ablation) {
        self.train.ram_aug = a.ram_aug;
        self.train.dsir = a.dsir;
        self.train.consistency = a.consistency;
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig { height: self.data.height, width: self.data.width, channels: self.data.channels, classes: self.data.classes }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            poly_power: self.train.poly_power,
            weights: LossWeights {
                seg: self.loss.seg,
                seg_aug: self.loss.seg_aug,
                rec: self.loss.rec,
                consist: self.loss.consist,
                dice_eps: self.loss.dice_eps,
            },
            beta: self.ram.beta,
            fixed_lambda: self.ram.lambda,
            seed: self.train.seed,
            checkpoint_every: self.train.checkpoint_every,
            ablation: self.ablation(),
            norm_mode: Mode::Train,
            base_channels: self.model.base_channels,
            depth: self.model.depth,
        }
    }
}

/// Hex SHA-256 prefix of the exact config bytes.
pub fn fingerprint(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

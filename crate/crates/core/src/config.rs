//! Run configuration: a flat key/value file with sections (TOML), one
//! struct per pipeline stage. Every field has a default so partial files
//! work; the SHA-256 of the canonical serialization is recorded in every
//! checkpoint and report.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub canvas: usize,
    pub n_identities: usize,
    pub views_per_identity: usize,
    pub disease_fraction: f64,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
    /// Views per identity held out of anonymizer training: the last one is
    /// the eval view, the one before it the selection view.
    pub holdout_views: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            canvas: 64,
            n_identities: 64,
            views_per_identity: 10,
            disease_fraction: 0.5,
            train_ratio: 0.6,
            val_ratio: 0.1,
            test_ratio: 0.3,
            holdout_views: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature channels at the 1/8 grid (also the transformer token dim).
    pub channels: usize,
    pub n_heads: usize,
    pub mlp_ratio: f64,
    /// Translator/restorer transformer depth (accepted range 2..=10).
    pub n_blocks: usize,
    /// DA-Former depth.
    pub refine_blocks: usize,
    pub key_dim: usize,
    /// Sign-map threshold.
    pub tau: f64,
    /// Use raw sign scores instead of a hard mask when substituting.
    pub soft_mask: bool,
    pub leaky_slope: f64,
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 64,
            n_heads: 4,
            mlp_ratio: 2.0,
            n_blocks: 6,
            refine_blocks: 2,
            key_dim: 512,
            tau: 0.5,
            soft_mask: false,
            leaky_slope: 0.2,
            embed_dim: 128,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    // AdamW
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub steps: usize,
    /// lr is divided by 10 at ceil(decay_at * steps).
    pub decay_at: f64,
    pub eval_interval: usize,
    /// Discriminator learning rate = ttur_ratio * lr.
    pub ttur_ratio: f64,
    pub flip_prob: f64,
    // sign detector
    pub detector_steps: usize,
    pub detector_batch: usize,
    pub crop_min_scale: f64,
    // embedders
    pub embedder_steps: usize,
    pub embedder_batch: usize,
    pub margin: f64,
    pub margin_scale: f64,
    // diagnostic toy classifier
    pub classifier_steps: usize,
    pub classifier_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            weight_decay: 1e-8,
            batch: 12,
            steps: 5000,
            decay_at: 0.9,
            eval_interval: 100,
            ttur_ratio: 4.0,
            flip_prob: 0.5,
            detector_steps: 1200,
            detector_batch: 16,
            crop_min_scale: 0.3,
            embedder_steps: 1500,
            embedder_batch: 32,
            margin: 0.2,
            margin_scale: 16.0,
            classifier_steps: 600,
            classifier_batch: 16,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub diversity_keys: usize,
    pub brute_force_attempts: usize,
    pub brute_force_samples: usize,
    pub universal_key_steps: usize,
    pub bim_steps: usize,
    pub bim_epsilons: Vec<f64>,
    pub defense_noise_std: f64,
    pub gallery_views: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            diversity_keys: 100,
            brute_force_attempts: 1000,
            brute_force_samples: 50,
            universal_key_steps: 500,
            bim_steps: 15,
            bim_epsilons: vec![0.01, 0.03, 0.05],
            defense_noise_std: 0.05,
            gallery_views: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.canvas % 8 != 0 || d.canvas < 32 {
            return Err(Error::Config(format!(
                "canvas {} must be a multiple of 8 and at least 32",
                d.canvas
            )));
        }
        let ratio_sum = d.train_ratio + d.val_ratio + d.test_ratio;
        if (ratio_sum - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("split ratios sum to {ratio_sum}")));
        }
        if !(0.0..=1.0).contains(&d.disease_fraction) {
            return Err(Error::Config("disease_fraction outside [0,1]".into()));
        }
        if d.holdout_views + 1 >= d.views_per_identity {
            return Err(Error::Config(
                "holdout_views must leave at least one training view".into(),
            ));
        }
        let m = &self.model;
        if m.channels % m.n_heads != 0 {
            return Err(Error::Config(format!(
                "channels {} not divisible by heads {}",
                m.channels, m.n_heads
            )));
        }
        if !(2..=10).contains(&m.n_blocks) {
            return Err(Error::Config(format!(
                "n_blocks {} outside accepted range 2..=10",
                m.n_blocks
            )));
        }
        if m.key_dim != 512 {
            return Err(Error::Config("key_dim is fixed at 512".into()));
        }
        if !(m.tau > 0.0 && m.tau < 1.0) {
            return Err(Error::Config(format!("tau {} outside (0,1)", m.tau)));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of the canonical serialization; stable across field order in
    /// the source file.
    pub fn hash(&self) -> String {
        let canon = self.to_toml();
        let mut h = Sha256::new();
        h.update(canon.as_bytes());
        hex::encode(&h.finalize()[..16])
    }

    /// Derived count of identities per split (train, val, test).
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let n = self.dataset.n_identities;
        let tr = (n as f64 * self.dataset.train_ratio).floor() as usize;
        let va = (n as f64 * self.dataset.val_ratio).floor() as usize;
        let te = n - tr - va;
        (tr, va, te)
    }

    /// Step at which the learning rate decays by 10x.
    pub fn decay_step(&self) -> usize {
        (self.train.decay_at * self.train.steps as f64).ceil() as usize
    }
}

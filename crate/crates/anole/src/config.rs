//! Run configuration, read from TOML.

use std::path::Path;

use anole_core::decoder::{SamplerSettings, SamplingParams};
use anole_core::finetune::FinetuneHyper;
use anole_core::transformer::ModelConfig;
use anole_core::vocab::{ByteTokenizer, VocabLayout};
use anole_core::vq::VqConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-stage seed offsets so stages never share a random stream.
pub mod stream {
    pub const VQ_INIT: u64 = 0;
    pub const VQ_BATCHES: u64 = 1;
    pub const LM_INIT: u64 = 2;
    pub const LM_BATCHES: u64 = 3;
    pub const FINETUNE_BATCHES: u64 = 4;
}

pub fn stage_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream.wrapping_mul(0xBF58_476D_1CE4_E5B9))
}

/// Byte-level text ids followed by the tokenizer's codebook.
pub fn layout_for(vq: &VqConfig) -> Result<VocabLayout> {
    let text = ByteTokenizer::default().vocab();
    Ok(VocabLayout::new(text, vq.codebook_size as u32, vq.grid_height() as u32, vq.grid_width() as u32)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSettings,
    pub vq: VqSettings,
    pub lm: LmSettings,
    pub finetune: FinetuneSettings,
    pub sampling: SamplingSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSettings {
    /// Every n-th manifest record is held out from training.
    pub holdout_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqSettings {
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub image_size: usize,
    pub downsample: usize,
    pub hidden_channels: usize,
    pub commitment_weight: f64,
    pub ema_decay: f64,
    pub learning_rate: f64,
    pub dead_code_threshold: f64,
    pub batch_size: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmSettings {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub learning_rate: f64,
    /// Learning rate at the last step, reached by linear decay.
    pub final_learning_rate: f64,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    pub batch_size: usize,
    pub steps: usize,
    /// Loss weight of image-token targets during pre-training.
    pub image_loss_weight: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSettings {
    pub learning_rate: f64,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    pub batch_size: usize,
    pub steps: usize,
    pub train_sentinel_rows: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSettings {
    #[serde(deserialize_with = "text_sampler")]
    pub text: SamplerSettings,
    #[serde(deserialize_with = "image_sampler")]
    pub image: SamplerSettings,
    pub max_tokens: usize,
    pub max_images: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSettings::default(),
            vq: VqSettings::default(),
            lm: LmSettings::default(),
            finetune: FinetuneSettings::default(),
            sampling: SamplingSettings::default(),
        }
    }
}

impl Default for DataSettings {
    fn default() -> Self {
        Self { holdout_every: 16 }
    }
}

impl Default for VqSettings {
    fn default() -> Self {
        let c = VqConfig::default();
        Self {
            codebook_size: c.codebook_size,
            latent_dim: c.latent_dim,
            image_size: c.image_height,
            downsample: c.downsample,
            hidden_channels: c.hidden_channels,
            commitment_weight: c.commitment_weight,
            ema_decay: c.ema_decay,
            learning_rate: c.learning_rate,
            dead_code_threshold: c.dead_code_threshold,
            batch_size: 32,
            steps: 1500,
        }
    }
}

impl Default for LmSettings {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 96,
            learning_rate: 0.1,
            final_learning_rate: 0.01,
            momentum: 0.9,
            clip_norm: Some(1.0),
            batch_size: 16,
            steps: 1500,
            image_loss_weight: 0.1,
        }
    }
}

impl Default for FinetuneSettings {
    fn default() -> Self {
        let h = FinetuneHyper::default();
        Self {
            learning_rate: h.learning_rate,
            momentum: h.momentum,
            clip_norm: h.clip_norm,
            batch_size: 16,
            steps: h.max_steps,
            train_sentinel_rows: h.train_sentinel_rows,
        }
    }
}

/// Sampler table where omitted keys keep the text or image default.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialSampler {
    temperature: Option<f64>,
    top_k: Option<usize>,
    top_p: Option<f64>,
}

impl PartialSampler {
    fn over(self, base: SamplerSettings) -> SamplerSettings {
        SamplerSettings {
            temperature: self.temperature.unwrap_or(base.temperature),
            top_k: self.top_k.unwrap_or(base.top_k),
            top_p: self.top_p.unwrap_or(base.top_p),
        }
    }
}

fn text_sampler<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<SamplerSettings, D::Error> {
    Ok(PartialSampler::deserialize(d)?.over(SamplingParams::default().text))
}

fn image_sampler<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<SamplerSettings, D::Error> {
    Ok(PartialSampler::deserialize(d)?.over(SamplingParams::default().image))
}

impl Default for SamplingSettings {
    fn default() -> Self {
        let p = SamplingParams::default();
        Self { text: p.text, image: p.image, max_tokens: p.max_tokens, max_images: p.max_images }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let config: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn vq_config(&self) -> VqConfig {
        let v = &self.vq;
        VqConfig {
            codebook_size: v.codebook_size,
            latent_dim: v.latent_dim,
            image_height: v.image_size,
            image_width: v.image_size,
            downsample: v.downsample,
            hidden_channels: v.hidden_channels,
            commitment_weight: v.commitment_weight,
            ema_decay: v.ema_decay,
            learning_rate: v.learning_rate,
            dead_code_threshold: v.dead_code_threshold,
            seed: stage_seed(self.seed, stream::VQ_INIT),
        }
    }

    pub fn layout(&self) -> Result<VocabLayout> {
        layout_for(&self.vq_config())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let l = &self.lm;
        Ok(ModelConfig {
            d_model: l.d_model,
            n_layers: l.n_layers,
            n_heads: l.n_heads,
            d_ff: l.d_ff,
            max_seq_len: l.max_seq_len,
            vocab_size: self.layout()?.total() as usize,
            seed: stage_seed(self.seed, stream::LM_INIT),
        })
    }

    pub fn finetune_hyper(&self) -> FinetuneHyper {
        let f = &self.finetune;
        FinetuneHyper {
            learning_rate: f.learning_rate,
            momentum: f.momentum,
            clip_norm: f.clip_norm,
            max_steps: f.steps,
            train_sentinel_rows: f.train_sentinel_rows,
        }
    }

    pub fn sampling(&self, seed: u64) -> SamplingParams {
        let s = &self.sampling;
        SamplingParams { text: s.text, image: s.image, seed, max_tokens: s.max_tokens, max_images: s.max_images }
    }

    /// Checks every module config and the constraints between them.
    pub fn validate(&self) -> Result<()> {
        let vq = self.vq_config();
        vq.validate()?;
        let layout = self.layout()?;
        let model = self.model_config()?;
        model.validate()?;
        model.check_layout(&layout)?;
        self.sampling.text.validate()?;
        self.sampling.image.validate()?;
        let positive = [
            ("data.holdout_every", self.data.holdout_every),
            ("vq.batch_size", self.vq.batch_size),
            ("lm.batch_size", self.lm.batch_size),
            ("finetune.batch_size", self.finetune.batch_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        for (name, v) in [
            ("lm.learning_rate", self.lm.learning_rate),
            ("lm.final_learning_rate", self.lm.final_learning_rate),
            ("lm.momentum", self.lm.momentum),
            ("finetune.learning_rate", self.finetune.learning_rate),
            ("finetune.momentum", self.finetune.momentum),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if self.lm.momentum >= 1.0 || self.finetune.momentum >= 1.0 {
            return Err(Error::Config("momentum must be below 1".into()));
        }
        if !self.lm.image_loss_weight.is_finite() || self.lm.image_loss_weight < 0.0 {
            return Err(Error::Config("lm.image_loss_weight must be finite and non-negative".into()));
        }
        for (name, c) in [("lm.clip_norm", self.lm.clip_norm), ("finetune.clip_norm", self.finetune.clip_norm)] {
            if c.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.sampling.max_tokens < 2 {
            return Err(Error::Config("sampling.max_tokens must allow at least BOS and EOS".into()));
        }
        Ok(())
    }
}

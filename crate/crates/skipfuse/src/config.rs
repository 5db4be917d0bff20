//! Architecture and objective hyperparameters, plus the config-file loader.

use serde::Deserialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub itc: f64,
    pub itm: f64,
    pub mlm: f64,
    pub prefixlm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            itc: 1.0,
            itm: 1.0,
            mlm: 1.0,
            prefixlm: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_visual_layers: usize,
    pub n_text_layers: usize,
    /// L: number of asymmetric co-attention layers in the fusion network.
    pub n_fusion_asym_layers: usize,
    /// S: asymmetric layers per connected-attention layer.
    pub stride: usize,
    pub n_decoder_layers: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub ffn_multiplier: usize,
    pub queue_size: usize,
    pub momentum: f64,
    pub temperature: f64,
    pub loss_weights: LossWeights,
    pub mlm_mask_rate: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Small configuration that trains end-to-end in seconds.
    pub fn toy() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_visual_layers: 2,
            n_text_layers: 2,
            n_fusion_asym_layers: 2,
            stride: 2,
            n_decoder_layers: 2,
            image_size: 16,
            patch_size: 8,
            channels: 3,
            vocab_size: 64,
            max_text_len: 16,
            ffn_multiplier: 4,
            queue_size: 128,
            momentum: 0.995,
            temperature: 0.07,
            loss_weights: LossWeights::default(),
            mlm_mask_rate: 0.15,
            seed: 0,
        }
    }

    /// ViT-B/16-like dimensions used for forward benchmarking only. The text
    /// length 30 is a stand-in; published timing figures do not state it.
    pub fn paper_profile() -> Self {
        Self {
            d_model: 768,
            n_heads: 12,
            n_visual_layers: 12,
            n_text_layers: 6,
            n_fusion_asym_layers: 6,
            stride: 6,
            n_decoder_layers: 12,
            image_size: 256,
            patch_size: 16,
            channels: 3,
            vocab_size: 30522,
            max_text_len: 30,
            ffn_multiplier: 4,
            queue_size: 65_536,
            momentum: 0.995,
            temperature: 0.07,
            loss_weights: LossWeights::default(),
            mlm_mask_rate: 0.15,
            seed: 0,
        }
    }

    /// Number of image patches M.
    pub fn n_patches(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.stride == 0 || self.n_fusion_asym_layers % self.stride != 0 {
            return Err(Error::Config(format!(
                "stride {} must divide the {} asymmetric fusion layers",
                self.stride, self.n_fusion_asym_layers
            )));
        }
        if self.queue_size == 0 {
            return Err(Error::Config("queue_size must be positive".into()));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::Config(format!(
                "momentum {} must lie in (0,1)",
                self.momentum
            )));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if !(self.mlm_mask_rate > 0.0 && self.mlm_mask_rate < 1.0) {
            return Err(Error::Config(format!(
                "mlm_mask_rate {} must lie in (0,1)",
                self.mlm_mask_rate
            )));
        }
        if self.channels == 0 || self.vocab_size == 0 || self.max_text_len == 0 {
            return Err(Error::Config("zero-sized dimension".into()));
        }
        Ok(())
    }
}

// --- config file (key = value per line, one section per module) ---

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    #[serde(default)]
    encoders: EncodersSection,
    #[serde(default)]
    fusion: FusionSection,
    #[serde(default)]
    objectives: ObjectivesSection,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncodersSection {
    d_model: Option<usize>,
    n_heads: Option<usize>,
    n_visual_layers: Option<usize>,
    n_text_layers: Option<usize>,
    image_size: Option<usize>,
    patch_size: Option<usize>,
    channels: Option<usize>,
    vocab_size: Option<usize>,
    max_text_len: Option<usize>,
    ffn_multiplier: Option<usize>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FusionSection {
    n_fusion_asym_layers: Option<usize>,
    stride: Option<usize>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectivesSection {
    n_decoder_layers: Option<usize>,
    queue_size: Option<usize>,
    momentum: Option<f64>,
    temperature: Option<f64>,
    mlm_mask_rate: Option<f64>,
    loss_itc: Option<f64>,
    loss_itm: Option<f64>,
    loss_mlm: Option<f64>,
    loss_prefixlm: Option<f64>,
}

impl ModelConfig {
    /// Parses a config file and overlays it on `base`. Unknown keys error.
    pub fn from_file_str(text: &str, base: ModelConfig) -> Result<Self> {
        let file: FileConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
        let mut cfg = base;
        macro_rules! take {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src {
                    $dst = v;
                }
            };
        }
        take!(cfg.seed, file.seed);
        take!(cfg.d_model, file.encoders.d_model);
        take!(cfg.n_heads, file.encoders.n_heads);
        take!(cfg.n_visual_layers, file.encoders.n_visual_layers);
        take!(cfg.n_text_layers, file.encoders.n_text_layers);
        take!(cfg.image_size, file.encoders.image_size);
        take!(cfg.patch_size, file.encoders.patch_size);
        take!(cfg.channels, file.encoders.channels);
        take!(cfg.vocab_size, file.encoders.vocab_size);
        take!(cfg.max_text_len, file.encoders.max_text_len);
        take!(cfg.ffn_multiplier, file.encoders.ffn_multiplier);
        take!(cfg.n_fusion_asym_layers, file.fusion.n_fusion_asym_layers);
        take!(cfg.stride, file.fusion.stride);
        take!(cfg.n_decoder_layers, file.objectives.n_decoder_layers);
        take!(cfg.queue_size, file.objectives.queue_size);
        take!(cfg.momentum, file.objectives.momentum);
        take!(cfg.temperature, file.objectives.temperature);
        take!(cfg.mlm_mask_rate, file.objectives.mlm_mask_rate);
        take!(cfg.loss_weights.itc, file.objectives.loss_itc);
        take!(cfg.loss_weights.itm, file.objectives.loss_itm);
        take!(cfg.loss_weights.mlm, file.objectives.loss_mlm);
        take!(cfg.loss_weights.prefixlm, file.objectives.loss_prefixlm);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path, base: ModelConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_file_str(&text, base)
    }
}

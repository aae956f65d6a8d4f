use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One convolution of the input stem. Padding is `kernel / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemConv {
    pub kernel: usize,
    pub stride: usize,
}

impl StemConv {
    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        let padded = input_len + 2 * self.padding();
        if padded < self.kernel {
            0
        } else {
            (padded - self.kernel) / self.stride + 1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub vocab_size: usize,
    /// Feature channels per input frame.
    pub n_mel: usize,
    pub ffn_dim: usize,
    /// Encoder positions available after the stem.
    pub max_source_len: usize,
    /// Rows of the learned decoder position table.
    pub max_target_len: usize,
    /// Hard cap on generated tokens per utterance.
    pub max_new_tokens: usize,
    /// First conv maps `n_mel -> d_model`, the rest `d_model -> d_model`.
    pub stem: Vec<StemConv>,
    pub sot_token: u32,
    pub eot_token: u32,
}

/// Desk-scale model sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// L=4, N=64, H=4, T=128, 80 feature channels.
    Tiny,
    /// L=8, N=128, H=8, T=512, 128 feature channels.
    Small,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "small" => Ok(Preset::Small),
            other => Err(Error::Config(format!(
                "preset: unknown value {other:?} (expected tiny or small)"
            ))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Tiny => "tiny",
            Preset::Small => "small",
        })
    }
}

impl ModelConfig {
    pub fn preset(preset: Preset) -> Self {
        let (d_model, n_heads, layers, vocab, source, n_mel) = match preset {
            Preset::Tiny => (64, 4, 4, 32, 128, 80),
            Preset::Small => (128, 8, 8, 64, 512, 128),
        };
        Self {
            d_model,
            n_heads,
            n_encoder_layers: layers,
            n_decoder_layers: 2,
            vocab_size: vocab,
            n_mel,
            ffn_dim: 4 * d_model,
            max_source_len: source,
            max_target_len: 448,
            max_new_tokens: 224,
            stem: vec![
                StemConv { kernel: 3, stride: 1 },
                StemConv { kernel: 3, stride: 2 },
            ],
            sot_token: vocab as u32 - 2,
            eot_token: vocab as u32 - 1,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_encoder_layers", self.n_encoder_layers),
            ("n_decoder_layers", self.n_decoder_layers),
            ("vocab_size", self.vocab_size),
            ("n_mel", self.n_mel),
            ("ffn_dim", self.ffn_dim),
            ("max_source_len", self.max_source_len),
            ("max_target_len", self.max_target_len),
            ("max_new_tokens", self.max_new_tokens),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name}: must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "n_heads: d_model {} not divisible by {}",
                self.d_model, self.n_heads
            )));
        }
        if self.stem.is_empty() {
            return Err(Error::Config("stem: at least one convolution required".into()));
        }
        if self.stem.iter().any(|c| c.kernel == 0 || c.stride == 0) {
            return Err(Error::Config("stem: kernel and stride must be positive".into()));
        }
        for (name, tok) in [("sot_token", self.sot_token), ("eot_token", self.eot_token)] {
            if tok as usize >= self.vocab_size {
                return Err(Error::Config(format!(
                    "{name}: {tok} outside vocabulary of {}",
                    self.vocab_size
                )));
            }
        }
        if self.sot_token == self.eot_token {
            return Err(Error::Config("eot_token: must differ from sot_token".into()));
        }
        Ok(())
    }

    /// Encoder sequence length produced by the stem for `frames` input frames.
    pub fn stem_output_len(&self, frames: usize) -> usize {
        self.stem.iter().fold(frames, |t, c| c.output_len(t))
    }

    /// Input frames that fill the encoder exactly (product of strides times
    /// `max_source_len`).
    pub fn feature_frames(&self) -> usize {
        self.max_source_len * self.stem.iter().map(|c| c.stride).product::<usize>()
    }

    /// Largest decode budget the decoder position table supports.
    pub fn decode_capacity(&self) -> usize {
        self.max_new_tokens.min(self.max_target_len.saturating_sub(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for p in [Preset::Tiny, Preset::Small] {
            let cfg = ModelConfig::preset(p);
            cfg.validate().unwrap();
            assert_eq!(cfg.stem_output_len(cfg.feature_frames()), cfg.max_source_len);
        }
        let small = ModelConfig::preset(Preset::Small);
        assert_eq!((small.n_encoder_layers, small.d_model, small.n_heads), (8, 128, 8));
    }

    #[test]
    fn rejects_bad_heads() {
        let mut cfg = ModelConfig::preset(Preset::Tiny);
        cfg.n_heads = 5;
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.starts_with("n_heads")));
        let mut cfg = ModelConfig::preset(Preset::Tiny);
        cfg.max_new_tokens = 0;
        assert!(cfg.validate().is_err());
    }
}

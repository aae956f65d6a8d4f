//! Parameter containers and the seeded initialization scheme.
//!
//! Random weights are drawn from a `ChaCha8Rng` seeded with the caller's
//! seed, visiting parameters in archive order:
//!
//! * linear and conv kernels: uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in))`
//! * biases: uniform with the same bound as their kernel
//! * layer-norm gains 1, offsets 0
//! * token embedding: uniform in `[-1, 1)`
//! * decoder position table: uniform in `[-0.1, 0.1)`
//! * encoder position table: fixed sinusoids (not drawn)

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{layernorm, linear, Tensor};

pub const LAYERNORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamKind {
    Kernel { fan_in: usize },
    Bias { fan_in: usize },
    NormGain,
    NormBias,
    TokenEmbedding,
    EncoderPositions,
    DecoderPositions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    fn zeros(d_in: usize, d_out: usize, bias: bool) -> Self {
        Self {
            weight: Tensor::zeros(&[d_in, d_out]),
            bias: bias.then(|| Tensor::zeros(&[d_out])),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        linear(x, &self.weight, self.bias.as_ref())
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &mut Tensor)) {
        let fan_in = self.weight.shape()[0];
        f(format!("{prefix}.weight"), ParamKind::Kernel { fan_in }, &mut self.weight);
        if let Some(b) = self.bias.as_mut() {
            f(format!("{prefix}.bias"), ParamKind::Bias { fan_in }, b);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        Self {
            gamma: Tensor::full(&[d], 1.0),
            beta: Tensor::zeros(&[d]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layernorm(x, &self.gamma, &self.beta, LAYERNORM_EPS)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &mut Tensor)) {
        f(format!("{prefix}.gamma"), ParamKind::NormGain, &mut self.gamma);
        f(format!("{prefix}.beta"), ParamKind::NormBias, &mut self.beta);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub q: Linear,
    /// Key projection carries no bias.
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl AttentionWeights {
    fn zeros(d: usize) -> Self {
        Self {
            q: Linear::zeros(d, d, true),
            k: Linear::zeros(d, d, false),
            v: Linear::zeros(d, d, true),
            out: Linear::zeros(d, d, true),
        }
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &mut Tensor)) {
        self.q.visit(&format!("{prefix}.q"), f);
        self.k.visit(&format!("{prefix}.k"), f);
        self.v.visit(&format!("{prefix}.v"), f);
        self.out.visit(&format!("{prefix}.out"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    fn zeros(d: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::zeros(d, hidden, true),
            fc2: Linear::zeros(hidden, d, true),
        }
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &mut Tensor)) {
        self.fc1.visit(&format!("{prefix}.fc1"), f);
        self.fc2.visit(&format!("{prefix}.fc2"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attn_ln: LayerNorm,
    pub attn: AttentionWeights,
    pub mlp_ln: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub self_ln: LayerNorm,
    pub self_attn: AttentionWeights,
    pub cross_ln: LayerNorm,
    pub cross_attn: AttentionWeights,
    pub mlp_ln: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    /// `[C_out, C_in, K]`
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub stem: Vec<ConvWeights>,
    /// `[max_source_len, d_model]`
    pub encoder_positions: Tensor,
    pub encoder_layers: Vec<EncoderLayer>,
    pub encoder_ln: LayerNorm,
    /// `[vocab_size, d_model]`, also used as the output projection.
    pub token_embedding: Tensor,
    /// `[max_target_len, d_model]`
    pub decoder_positions: Tensor,
    pub decoder_layers: Vec<DecoderLayer>,
    pub decoder_ln: LayerNorm,
}

/// Fixed sinusoidal table: first half sines, second half cosines, with
/// timescales spaced geometrically from 1 to 10000.
pub fn sinusoids(length: usize, channels: usize) -> Tensor {
    let half = channels / 2;
    let increment = if half > 1 {
        (10_000f64).ln() / (half - 1) as f64
    } else {
        0.0
    };
    Tensor::from_fn(&[length, channels], |i| {
        let (t, c) = (i / channels, i % channels);
        if c >= 2 * half {
            return 0.0;
        }
        let inv = (-(increment * (c % half) as f64)).exp();
        let angle = t as f64 * inv;
        (if c < half { angle.sin() } else { angle.cos() }) as f32
    })
}

impl ModelWeights {
    /// Correctly shaped parameters: zero kernels and biases, unit gains.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let mut stem = Vec::with_capacity(cfg.stem.len());
        let mut c_in = cfg.n_mel;
        for conv in &cfg.stem {
            stem.push(ConvWeights {
                weight: Tensor::zeros(&[d, c_in, conv.kernel]),
                bias: Tensor::zeros(&[d]),
            });
            c_in = d;
        }
        Self {
            stem,
            encoder_positions: sinusoids(cfg.max_source_len, d),
            encoder_layers: (0..cfg.n_encoder_layers)
                .map(|_| EncoderLayer {
                    attn_ln: LayerNorm::new(d),
                    attn: AttentionWeights::zeros(d),
                    mlp_ln: LayerNorm::new(d),
                    mlp: Mlp::zeros(d, cfg.ffn_dim),
                })
                .collect(),
            encoder_ln: LayerNorm::new(d),
            token_embedding: Tensor::zeros(&[cfg.vocab_size, d]),
            decoder_positions: Tensor::zeros(&[cfg.max_target_len, d]),
            decoder_layers: (0..cfg.n_decoder_layers)
                .map(|_| DecoderLayer {
                    self_ln: LayerNorm::new(d),
                    self_attn: AttentionWeights::zeros(d),
                    cross_ln: LayerNorm::new(d),
                    cross_attn: AttentionWeights::zeros(d),
                    mlp_ln: LayerNorm::new(d),
                    mlp: Mlp::zeros(d, cfg.ffn_dim),
                })
                .collect(),
            decoder_ln: LayerNorm::new(d),
        }
    }

    /// Visit every parameter in archive order.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, ParamKind, &mut Tensor)) {
        for (i, conv) in self.stem.iter_mut().enumerate() {
            let fan_in = conv.weight.shape()[1] * conv.weight.shape()[2];
            f(format!("stem.{i}.weight"), ParamKind::Kernel { fan_in }, &mut conv.weight);
            f(format!("stem.{i}.bias"), ParamKind::Bias { fan_in }, &mut conv.bias);
        }
        f(
            "encoder.positions".into(),
            ParamKind::EncoderPositions,
            &mut self.encoder_positions,
        );
        for (l, layer) in self.encoder_layers.iter_mut().enumerate() {
            let p = format!("encoder.layers.{l}");
            layer.attn_ln.visit(&format!("{p}.attn_ln"), f);
            layer.attn.visit(&format!("{p}.attn"), f);
            layer.mlp_ln.visit(&format!("{p}.mlp_ln"), f);
            layer.mlp.visit(&format!("{p}.mlp"), f);
        }
        self.encoder_ln.visit("encoder.ln", f);
        f(
            "decoder.token_embedding".into(),
            ParamKind::TokenEmbedding,
            &mut self.token_embedding,
        );
        f(
            "decoder.positions".into(),
            ParamKind::DecoderPositions,
            &mut self.decoder_positions,
        );
        for (l, layer) in self.decoder_layers.iter_mut().enumerate() {
            let p = format!("decoder.layers.{l}");
            layer.self_ln.visit(&format!("{p}.self_ln"), f);
            layer.self_attn.visit(&format!("{p}.self_attn"), f);
            layer.cross_ln.visit(&format!("{p}.cross_ln"), f);
            layer.cross_attn.visit(&format!("{p}.cross_attn"), f);
            layer.mlp_ln.visit(&format!("{p}.mlp_ln"), f);
            layer.mlp.visit(&format!("{p}.mlp"), f);
        }
        self.decoder_ln.visit("decoder.ln", f);
    }

    /// Seeded random weights (see module docs for the scheme).
    pub fn random(cfg: &ModelConfig, seed: u64) -> Self {
        let mut w = Self::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        w.visit_mut(&mut |_, kind, t| {
            let bound = match kind {
                ParamKind::Kernel { fan_in } | ParamKind::Bias { fan_in } => {
                    1.0 / (fan_in as f32).sqrt()
                }
                ParamKind::TokenEmbedding => 1.0,
                ParamKind::DecoderPositions => 0.1,
                ParamKind::NormGain | ParamKind::NormBias | ParamKind::EncoderPositions => {
                    return;
                }
            };
            for v in t.data_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        });
        w
    }

    /// Named tensors in archive order.
    pub fn to_entries(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.clone().visit_mut(&mut |name, _, t| out.push((name, t.clone())));
        out
    }

    /// Rebuild from named tensors, checking every shape against `cfg`.
    /// Missing, extra or misshapen entries are errors.
    pub fn from_entries(cfg: &ModelConfig, entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut map: HashMap<String, Tensor> = entries.into_iter().collect();
        let mut w = Self::zeros(cfg);
        let mut err = None;
        w.visit_mut(&mut |name, _, t| {
            if err.is_some() {
                return;
            }
            match map.remove(&name) {
                None => err = Some(Error::Data(format!("weights: missing tensor {name:?}"))),
                Some(src) if src.shape() != t.shape() => {
                    err = Some(Error::Data(format!(
                        "weights: tensor {name:?} has shape {:?}, config expects {:?}",
                        src.shape(),
                        t.shape()
                    )))
                }
                Some(src) if !src.is_finite() => {
                    err = Some(Error::Data(format!("weights: tensor {name:?} has non-finite values")))
                }
                Some(src) => *t = src,
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if let Some(extra) = map.keys().min() {
            return Err(Error::Data(format!("weights: unexpected tensor {extra:?}")));
        }
        Ok(w)
    }
}

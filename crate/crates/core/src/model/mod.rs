//! Encoder-decoder transcription model with an early sparsification hook.
//!
//! The encoder is a conv stem followed by pre-norm transformer layers. When
//! an [`EasConfig`] is supplied, the post-softmax attention of the cut layer
//! is materialized, turned into per-token importance, and the hidden state is
//! gathered down to the kept time steps before the next layer runs. Only that
//! layer (or every layer, in cross-layer mode) keeps its score tensor; all
//! others run the same kernel without storing scores.

mod attention;
mod config;
pub mod echo;
mod weights;

pub use attention::multi_head_attention;
pub use config::{ModelConfig, Preset, StemConv};
pub use weights::{
    sinusoids, AttentionWeights, ConvWeights, DecoderLayer, EncoderLayer, LayerNorm, Linear, Mlp,
    ModelWeights, ParamKind, LAYERNORM_EPS,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparsifier::{aggregate_cross_layer, importance_mean, sparsify, EasConfig, Importance};
use crate::tensor::{conv1d, gelu_in_place, Tensor};

/// Word-level vocabulary; index = token id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    pub tokens: Vec<String>,
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.tokens.iter().position(|t| t == word).map(|i| i as u32)
    }
}

/// Encoder output plus the bookkeeping of what was dropped.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    /// `[T', N]`, after the final encoder layer norm.
    pub hidden: Tensor,
    /// Surviving positions of the stem output, strictly ascending.
    pub kept: Vec<usize>,
    /// Sequence length before any dropping.
    pub source_len: usize,
    /// `[H, T, T]` post-softmax scores of the cut layer, when one was requested.
    pub tap_attention: Option<Tensor>,
    /// Per-layer importance vectors (cross-layer mode only).
    pub layer_importance: Vec<Importance>,
    /// Sequence length leaving each encoder layer.
    pub layer_lengths: Vec<usize>,
}

/// Output of a greedy decode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    /// Generated ids, excluding the start token and any end-of-text token.
    pub tokens: Vec<u32>,
    /// The budget ran out before end-of-text was produced.
    pub cap_hit: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transcription {
    pub tokens: Vec<u32>,
    pub cap_hit: bool,
    pub encoder_len: usize,
}

/// One pre-norm encoder layer. Scores are returned only when requested; the
/// computed hidden state is identical either way.
pub fn encoder_layer_forward(
    z: &Tensor,
    layer: &EncoderLayer,
    n_heads: usize,
    materialize_scores: bool,
) -> Result<(Tensor, Option<Tensor>)> {
    let (t, _) = z.dims2()?;
    let h = layer.attn_ln.forward(z)?;
    let q = layer.attn.q.forward(&h)?;
    let k = layer.attn.k.forward(&h)?;
    let v = layer.attn.v.forward(&h)?;
    let mut scores = materialize_scores.then(|| vec![0.0f32; n_heads * t * t]);
    let a = multi_head_attention(&q, &k, &v, n_heads, scores.as_deref_mut())?;
    let mut x = z.clone();
    x.add_assign(&layer.attn.out.forward(&a)?)?;
    let m = mlp_forward(&layer.mlp_ln.forward(&x)?, &layer.mlp)?;
    x.add_assign(&m)?;
    let scores = scores
        .map(|s| Tensor::new(vec![n_heads, t, t], s))
        .transpose()?;
    Ok((x, scores))
}

fn mlp_forward(h: &Tensor, mlp: &Mlp) -> Result<Tensor> {
    let mut u = mlp.fc1.forward(h)?;
    gelu_in_place(&mut u);
    mlp.fc2.forward(&u)
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: ModelWeights,
    pub vocab: Vocab,
}

impl Model {
    pub fn new(config: ModelConfig, weights: ModelWeights, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::Config(format!(
                "vocab: {} entries for vocab_size {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        // Shape check by round-tripping through the named view.
        let weights = ModelWeights::from_entries(&config, weights.to_entries())?;
        Ok(Self {
            config,
            weights,
            vocab,
        })
    }

    /// Conv stem with GELU after each convolution, plus encoder positions.
    pub fn stem(&self, features: &Tensor) -> Result<Tensor> {
        let (frames, mel) = features.dims2()?;
        if mel != self.config.n_mel {
            return Err(Error::Shape(format!(
                "features have {mel} channels, model expects {}",
                self.config.n_mel
            )));
        }
        let t = self.config.stem_output_len(frames);
        if t == 0 || t > self.config.max_source_len {
            return Err(Error::Shape(format!(
                "{frames} feature frames give encoder length {t}, capacity is {}",
                self.config.max_source_len
            )));
        }
        let mut x = features.clone();
        for (spec, w) in self.config.stem.iter().zip(&self.weights.stem) {
            x = conv1d(&x, &w.weight, &w.bias, spec.stride, spec.padding())?;
            gelu_in_place(&mut x);
        }
        let n = self.config.d_model;
        let pos = &self.weights.encoder_positions.data()[..t * n];
        for (v, &p) in x.data_mut().iter_mut().zip(pos) {
            *v += p;
        }
        Ok(x)
    }

    /// Encoder layers 1..L on a stem output, shortening the sequence after
    /// layer `eas.stage`. Positions are not re-added after the gather.
    pub fn encoder_stack(&self, x: Tensor, eas: Option<&EasConfig>) -> Result<EncoderTrace> {
        let n_layers = self.config.n_encoder_layers;
        if let Some(e) = eas {
            e.validate(n_layers)?;
        }
        let (source_len, _) = x.dims2()?;
        let mut z = x;
        let mut kept: Vec<usize> = (0..source_len).collect();
        let mut tap_attention = None;
        let mut layer_importance = Vec::new();
        let mut layer_lengths = Vec::with_capacity(n_layers);

        for (idx, layer) in self.weights.encoder_layers.iter().enumerate() {
            let l = idx + 1;
            let at_stage = eas.is_some_and(|e| e.stage == l);
            let cross = eas.is_some_and(|e| e.cross_layer);
            let (out, scores) =
                encoder_layer_forward(&z, layer, self.config.n_heads, at_stage || cross)?;
            z = out;
            if cross {
                let s = scores.as_ref().expect("scores requested");
                layer_importance.push(importance_mean(s)?);
            }
            if let (true, Some(e)) = (at_stage, eas) {
                let scores = scores.expect("scores requested");
                let importance = if e.cross_layer {
                    aggregate_cross_layer(&layer_importance, e.aggregation, e.rng_seed)?
                } else {
                    aggregate_cross_layer(&[importance_mean(&scores)?], e.aggregation, e.rng_seed)?
                };
                let (short, idx) = sparsify(&z, &importance, e.sparsity)?;
                kept = idx.into_iter().map(|i| kept[i]).collect();
                z = short;
                tap_attention = Some(scores);
            }
            layer_lengths.push(z.shape()[0]);
        }
        let hidden = self.weights.encoder_ln.forward(&z)?;
        Ok(EncoderTrace {
            hidden,
            kept,
            source_len,
            tap_attention,
            layer_importance,
            layer_lengths,
        })
    }

    pub fn encode(&self, features: &Tensor, eas: Option<&EasConfig>) -> Result<EncoderTrace> {
        let x = self.stem(features)?;
        self.encoder_stack(x, eas)
    }

    /// Incremental decoder over a fixed encoder output.
    pub fn decoder(&self, encoder_out: &Tensor) -> Result<Decoder<'_>> {
        Decoder::new(self, encoder_out)
    }

    /// Argmax decoding from the start token. Stops at end-of-text or after
    /// `max_new_tokens` tokens, whichever comes first.
    pub fn greedy_decode(&self, trace: &EncoderTrace, max_new_tokens: usize) -> Result<Decoded> {
        let cap = max_new_tokens.min(self.config.decode_capacity());
        if cap == 0 {
            return Err(Error::Config("max_new_tokens: must be positive".into()));
        }
        let mut dec = self.decoder(&trace.hidden)?;
        let mut tokens = Vec::new();
        let mut next = self.config.sot_token;
        loop {
            let logits = dec.step(next)?;
            next = argmax(&logits);
            if next == self.config.eot_token {
                return Ok(Decoded {
                    tokens,
                    cap_hit: false,
                });
            }
            tokens.push(next);
            if tokens.len() >= cap {
                return Ok(Decoded {
                    tokens,
                    cap_hit: true,
                });
            }
        }
    }

    pub fn transcribe(
        &self,
        features: &Tensor,
        eas: Option<&EasConfig>,
        max_new_tokens: usize,
    ) -> Result<Transcription> {
        let trace = self.encode(features, eas)?;
        let decoded = self.greedy_decode(&trace, max_new_tokens)?;
        Ok(Transcription {
            tokens: decoded.tokens,
            cap_hit: decoded.cap_hit,
            encoder_len: trace.kept.len(),
        })
    }

    /// Space-joined words for `ids`, skipping start and end tokens.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| i != self.config.sot_token && i != self.config.eot_token)
            .filter_map(|&i| self.vocab.tokens.get(i as usize))
            .map(String::as_str)
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Index of the largest logit; ties go to the lower id.
pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Decoder state: cross-attention keys/values for the encoder output and a
/// growing self-attention cache.
pub struct Decoder<'m> {
    model: &'m Model,
    cross_kv: Vec<(Tensor, Tensor)>,
    self_k: Vec<Vec<f32>>,
    self_v: Vec<Vec<f32>>,
    position: usize,
}

impl<'m> Decoder<'m> {
    fn new(model: &'m Model, encoder_out: &Tensor) -> Result<Self> {
        let (_, n) = encoder_out.dims2()?;
        if n != model.config.d_model {
            return Err(Error::Shape(format!(
                "encoder output width {n}, decoder expects {}",
                model.config.d_model
            )));
        }
        let cross_kv = model
            .weights
            .decoder_layers
            .iter()
            .map(|l| {
                Ok((
                    l.cross_attn.k.forward(encoder_out)?,
                    l.cross_attn.v.forward(encoder_out)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let layers = model.weights.decoder_layers.len();
        Ok(Self {
            model,
            cross_kv,
            self_k: vec![Vec::new(); layers],
            self_v: vec![Vec::new(); layers],
            position: 0,
        })
    }

    pub fn position(&self) -> usize {
        self.position
    }

    /// Feed one token, return next-token logits `[vocab_size]`.
    pub fn step(&mut self, token: u32) -> Result<Vec<f32>> {
        let cfg = &self.model.config;
        let w = &self.model.weights;
        let n = cfg.d_model;
        if token as usize >= cfg.vocab_size {
            return Err(Error::Argument(format!("token id {token} outside vocabulary")));
        }
        if self.position >= cfg.max_target_len {
            return Err(Error::Argument(format!(
                "decoder position {} exceeds table of {}",
                self.position, cfg.max_target_len
            )));
        }
        let emb = w.token_embedding.row(token as usize);
        let pos = w.decoder_positions.row(self.position);
        let mut x = Tensor::new(vec![1, n], emb.iter().zip(pos).map(|(a, b)| a + b).collect())?;

        for (l, layer) in w.decoder_layers.iter().enumerate() {
            let h = layer.self_ln.forward(&x)?;
            let q = layer.self_attn.q.forward(&h)?;
            self.self_k[l].extend_from_slice(layer.self_attn.k.forward(&h)?.data());
            self.self_v[l].extend_from_slice(layer.self_attn.v.forward(&h)?.data());
            let len = self.position + 1;
            let k = Tensor::new(vec![len, n], self.self_k[l].clone())?;
            let v = Tensor::new(vec![len, n], self.self_v[l].clone())?;
            let a = multi_head_attention(&q, &k, &v, cfg.n_heads, None)?;
            x.add_assign(&layer.self_attn.out.forward(&a)?)?;

            let h = layer.cross_ln.forward(&x)?;
            let q = layer.cross_attn.q.forward(&h)?;
            let (ck, cv) = &self.cross_kv[l];
            let a = multi_head_attention(&q, ck, cv, cfg.n_heads, None)?;
            x.add_assign(&layer.cross_attn.out.forward(&a)?)?;

            let m = mlp_forward(&layer.mlp_ln.forward(&x)?, &layer.mlp)?;
            x.add_assign(&m)?;
        }
        let h = w.decoder_ln.forward(&x)?;
        let logits = (0..cfg.vocab_size)
            .map(|v| {
                w.token_embedding
                    .row(v)
                    .iter()
                    .zip(h.data())
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        self.position += 1;
        Ok(logits)
    }
}

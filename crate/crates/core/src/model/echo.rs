//! Hand-built weights whose transcription task is solvable by construction.
//!
//! In the "echo task" every speech frame carries three things in dedicated
//! feature channels: the ordinal of the word it belongs to (two one-of-8
//! codes, `j % 8` and `j / 8`), the word id (one-hot), and a salience level
//! that peaks at the middle of each word. Padding frames carry only a
//! silence marker. The weights below:
//!
//! * copy those channels through the conv stem unchanged (identity center tap),
//! * make every encoder head attend by salience (constant query, key reads the
//!   salience channel), so mean received attention ranks word centers first,
//!   then word edges and the end marker, then padding,
//! * leave the residual stream untouched in the encoder,
//! * let decoder step `j` cross-attend to frames whose ordinal code matches
//!   `j` and copy their word id into the logits.
//!
//! Dropping a whole word therefore yields a substitution; dropping the
//! end-of-text segment leaves the decoder with nothing telling it to stop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::weights::ModelWeights;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Width of the ordinal code (two one-of-8 blocks).
pub const ORDINAL_DIMS: usize = 16;
/// Largest ordinal representable without aliasing.
pub const MAX_ORDINAL: usize = 64;

/// Amplitude of active feature channels.
pub const SIGNAL: f32 = 8.0;

const SALIENCE_GAIN: f32 = 7.5;
const CROSS_SHARPNESS: f32 = 2.5;
const COPY_GAIN: f32 = 3.0;

/// Channel and hidden-dimension assignment of the echo task for one config.
#[derive(Debug, Clone, PartialEq)]
pub struct EchoLayout {
    pub ordinal_dims: Vec<usize>,
    pub word_dims: Vec<usize>,
    pub salience_dim: usize,
    pub silence_dim: usize,
    /// Cross-attention heads that carry word ids.
    pub value_heads: usize,
}

/// What a single encoder frame of an echo utterance contains.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EchoFrame {
    Silence,
    Token {
        ordinal: usize,
        token: u32,
        salience: f32,
    },
}

impl EchoLayout {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.d_model;
        let hd = cfg.head_dim();
        if hd < ORDINAL_DIMS {
            return Err(Error::Config(format!(
                "n_heads: echo weights need head width >= {ORDINAL_DIMS}, got {hd}"
            )));
        }
        let value_heads = cfg.vocab_size.div_ceil(hd);
        if value_heads > cfg.n_heads {
            return Err(Error::Config(format!(
                "vocab_size: {} ids need {value_heads} heads, model has {}",
                cfg.vocab_size, cfg.n_heads
            )));
        }
        if ORDINAL_DIMS + cfg.vocab_size + 2 > n {
            return Err(Error::Config(format!(
                "d_model: {n} too narrow for echo layout with vocab {}",
                cfg.vocab_size
            )));
        }
        if ORDINAL_DIMS + cfg.vocab_size + 2 > cfg.n_mel {
            return Err(Error::Config(format!(
                "n_mel: {} channels too few for echo layout with vocab {}",
                cfg.n_mel, cfg.vocab_size
            )));
        }
        // Last sine and last cosine channels of the position table barely
        // move over a few thousand steps; park the scalar markers there.
        let salience_dim = n / 2 - 1;
        let silence_dim = n - 1;
        let mut free = (0..n).filter(|&d| d != salience_dim && d != silence_dim);
        let ordinal_dims = free.by_ref().take(ORDINAL_DIMS).collect();
        let word_dims = free.take(cfg.vocab_size).collect();
        Ok(Self {
            ordinal_dims,
            word_dims,
            salience_dim,
            silence_dim,
            value_heads,
        })
    }

    /// Feature channel feeding hidden dimension slot: ordinals, words,
    /// salience, silence in that order.
    fn channel_map(&self) -> Vec<(usize, usize)> {
        self.ordinal_dims
            .iter()
            .chain(&self.word_dims)
            .chain([&self.salience_dim, &self.silence_dim])
            .enumerate()
            .map(|(c, &d)| (c, d))
            .collect()
    }

    fn ordinal_code(ordinal: usize) -> [usize; 2] {
        [ordinal % 8, 8 + (ordinal / 8) % 8]
    }

    /// Feature vector for one frame (before noise).
    pub fn frame_features(&self, cfg: &ModelConfig, frame: EchoFrame) -> Vec<f32> {
        let mut f = vec![0.0f32; cfg.n_mel];
        let n_words = self.word_dims.len();
        match frame {
            EchoFrame::Silence => f[ORDINAL_DIMS + n_words + 1] = SIGNAL,
            EchoFrame::Token {
                ordinal,
                token,
                salience,
            } => {
                for c in Self::ordinal_code(ordinal) {
                    f[c] = SIGNAL;
                }
                f[ORDINAL_DIMS + token as usize] = SIGNAL;
                f[ORDINAL_DIMS + n_words] = SIGNAL * salience;
            }
        }
        f
    }

    /// `[frames * stride, n_mel]` features for a sequence of encoder frames,
    /// each repeated over the stem's total stride, with uniform noise of
    /// amplitude `noise` from `rng`.
    pub fn features(
        &self,
        cfg: &ModelConfig,
        frames: &[EchoFrame],
        noise: f32,
        rng: &mut impl Rng,
    ) -> Result<Tensor> {
        let stride: usize = cfg.stem.iter().map(|c| c.stride).product();
        let mut data = Vec::with_capacity(frames.len() * stride * cfg.n_mel);
        for &frame in frames {
            let base = self.frame_features(cfg, frame);
            for _ in 0..stride {
                data.extend(base.iter().map(|&v| {
                    if noise > 0.0 {
                        v + rng.gen_range(-noise..noise)
                    } else {
                        v
                    }
                }));
            }
        }
        Tensor::new(vec![frames.len() * stride, cfg.n_mel], data)
    }
}

impl ModelWeights {
    /// Echo-task weights. `noise` adds seeded uniform perturbations to the
    /// encoder key projections so layers disagree slightly about importance.
    pub fn echo(cfg: &ModelConfig, seed: u64, noise: f32) -> Result<Self> {
        let layout = EchoLayout::new(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = ModelWeights::zeros(cfg);
        let n = cfg.d_model;
        let hd = cfg.head_dim();

        // Stem: identity on the used channels at the center tap.
        let map = layout.channel_map();
        for (i, (conv, spec)) in w.stem.iter_mut().zip(&cfg.stem).enumerate() {
            let (c_in, k) = (conv.weight.shape()[1], spec.kernel);
            let center = spec.padding();
            let data = conv.weight.data_mut();
            for &(c, d) in &map {
                let src = if i == 0 { c } else { d };
                data[(d * c_in + src) * k + center] = 1.0;
            }
        }

        for (l, layer) in w.encoder_layers.iter_mut().enumerate() {
            let bias = layer.attn.q.bias.as_mut().expect("q bias");
            for h in 0..cfg.n_heads {
                let gain = SALIENCE_GAIN * (1.0 + 0.1 * l as f32 + 0.05 * h as f32);
                bias.data_mut()[h * hd] = gain;
            }
            let k = layer.attn.k.weight.data_mut();
            if noise > 0.0 {
                for v in k.iter_mut() {
                    *v = rng.gen_range(-noise..noise);
                }
            }
            for h in 0..cfg.n_heads {
                k[layout.salience_dim * n + h * hd] += 1.0;
            }
        }

        // Tied embedding: ids live on the word dimensions.
        for (v, &d) in layout.word_dims.iter().enumerate() {
            w.token_embedding.row_mut(v)[d] = 1.0;
        }
        for j in 0..cfg.max_target_len {
            let row = w.decoder_positions.row_mut(j);
            for c in EchoLayout::ordinal_code(j % MAX_ORDINAL) {
                row[layout.ordinal_dims[c]] = 1.0;
            }
        }

        let cross = &mut w.decoder_layers[0].cross_attn;
        for h in 0..layout.value_heads {
            for i in 0..ORDINAL_DIMS {
                let od = layout.ordinal_dims[i];
                cross.q.weight.data_mut()[od * n + h * hd + i] = CROSS_SHARPNESS;
                cross.k.weight.data_mut()[od * n + h * hd + i] = 1.0;
            }
            for i in 0..hd {
                let id = h * hd + i;
                if id >= cfg.vocab_size {
                    break;
                }
                let wd = layout.word_dims[id];
                cross.v.weight.data_mut()[wd * n + h * hd + i] = 1.0;
                cross.out.weight.data_mut()[(h * hd + i) * n + wd] = COPY_GAIN;
            }
        }
        Ok(w)
    }

    /// Random weights rigged so every decode step emits `token`: the final
    /// decoder norm outputs a constant aligned with that token's embedding.
    pub fn constant_output(cfg: &ModelConfig, seed: u64, token: u32) -> Result<Self> {
        cfg.validate()?;
        if token as usize >= cfg.vocab_size {
            return Err(Error::Argument(format!("token {token} outside vocabulary")));
        }
        let mut w = ModelWeights::random(cfg, seed);
        let row = w.token_embedding.row_mut(token as usize);
        for v in row.iter_mut() {
            *v *= 4.0;
        }
        let direction = row.to_vec();
        w.decoder_ln.gamma = Tensor::zeros(&[cfg.d_model]);
        w.decoder_ln.beta = Tensor::new(vec![cfg.d_model], direction)?;
        Ok(w)
    }
}

//! Deterministic toy models and echo-task datasets.
//!
//! An echo utterance is a handful of words, each a short segment of frames
//! whose salience peaks mid-word, separated by short gaps, followed by an
//! end-of-text segment and silence padding up to the full encoder length.
//! The reference transcript is the word sequence itself, so WER is defined
//! without any trained model.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{save_model, write_manifest, ManifestRecord, TaskExample, TensorArchive};
use crate::model::echo::{EchoFrame, EchoLayout, MAX_ORDINAL};
use crate::model::{Model, ModelConfig, ModelWeights, Preset, Vocab};

/// Audio time covered by one encoder frame.
pub const FRAME_SECONDS: f64 = 0.02;
/// Uniform noise added to echo features.
pub const FEATURE_NOISE: f32 = 0.1;
/// Uniform noise on echo key projections.
pub const KEY_NOISE: f32 = 0.02;
/// Salience of the end-of-text segment.
pub const EOT_SALIENCE: f32 = 0.55;
const EOT_FRAMES: usize = 3;

const WORDS: [&str; 62] = [
    "the", "of", "and", "to", "in", "a", "is", "that", "for", "it", "as", "was", "with", "be",
    "by", "on", "not", "he", "this", "are", "or", "his", "from", "at", "which", "but", "have",
    "an", "had", "they", "you", "were", "their", "one", "all", "we", "can", "her", "has",
    "there", "been", "if", "more", "when", "will", "would", "who", "so", "no", "she", "other",
    "its", "may", "these", "what", "them", "than", "some", "him", "time", "into", "only",
];

/// Real words for ids `0..V-2`, then start and end markers.
pub fn default_vocab(cfg: &ModelConfig) -> Result<Vocab> {
    let n_words = cfg.vocab_size.saturating_sub(2);
    if n_words > WORDS.len() {
        return Err(Error::Config(format!(
            "vocab_size: at most {} supported by the built-in word list",
            WORDS.len() + 2
        )));
    }
    if cfg.sot_token as usize != n_words || cfg.eot_token as usize != n_words + 1 {
        return Err(Error::Config(
            "sot_token: default vocabulary expects start and end as the last two ids".into(),
        ));
    }
    let mut tokens: Vec<String> = WORDS[..n_words].iter().map(|w| w.to_string()).collect();
    tokens.push("<|startoftranscript|>".into());
    tokens.push("<|endoftext|>".into());
    Ok(Vocab { tokens })
}

/// Which weights `gen-fixtures` writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightsKind {
    Echo,
    Random,
}

impl std::str::FromStr for WeightsKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "echo" => Ok(WeightsKind::Echo),
            "random" => Ok(WeightsKind::Random),
            other => Err(Error::Config(format!(
                "weights: unknown value {other:?} (expected echo or random)"
            ))),
        }
    }
}

pub fn toy_model(preset: Preset, kind: WeightsKind, seed: u64) -> Result<Model> {
    let cfg = ModelConfig::preset(preset);
    let weights = match kind {
        WeightsKind::Echo => ModelWeights::echo(&cfg, seed, KEY_NOISE)?,
        WeightsKind::Random => ModelWeights::random(&cfg, seed),
    };
    let vocab = default_vocab(&cfg)?;
    Model::new(cfg, weights, vocab)
}

/// One generated utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct EchoUtterance {
    pub frames: Vec<EchoFrame>,
    pub words: Vec<u32>,
    /// Frames up to and including the end-of-text segment.
    pub content_frames: usize,
}

/// Word count range for an encoder of `t` frames.
fn word_range(t: usize) -> (usize, usize) {
    let hi = (t / 20).clamp(2, 40).min(MAX_ORDINAL - 1);
    ((hi / 3).max(2), hi)
}

pub fn echo_utterance(cfg: &ModelConfig, rng: &mut impl Rng) -> EchoUtterance {
    let t = cfg.max_source_len;
    let n_words = cfg.vocab_size - 2;
    let (lo, hi) = word_range(t);
    let count = rng.gen_range(lo..=hi);
    let mut frames = Vec::with_capacity(t);
    for _ in 0..rng.gen_range(0..=4) {
        frames.push(EchoFrame::Silence);
    }
    let mut words = Vec::with_capacity(count);
    let segment = |frames: &mut Vec<EchoFrame>, ordinal, token, len: usize, peak: Option<f32>| {
        let c = (len as f32 - 1.0) / 2.0;
        for p in 0..len {
            let salience = peak.unwrap_or_else(|| (1.0 - 0.15 * (p as f32 - c).abs()).max(0.4));
            frames.push(EchoFrame::Token {
                ordinal,
                token,
                salience,
            });
        }
    };
    for j in 0..count {
        let word = rng.gen_range(0..n_words) as u32;
        words.push(word);
        let len = rng.gen_range(4..=7);
        segment(&mut frames, j, word, len, None);
        for _ in 0..rng.gen_range(0..=3) {
            frames.push(EchoFrame::Silence);
        }
    }
    segment(&mut frames, count, cfg.eot_token, EOT_FRAMES, Some(EOT_SALIENCE));
    let content_frames = frames.len();
    frames.truncate(t);
    frames.resize(t, EchoFrame::Silence);
    EchoUtterance {
        frames,
        words,
        content_frames: content_frames.min(t),
    }
}

/// `n` echo utterances; features carry seeded noise.
pub fn echo_dataset(model: &Model, seed: u64, n: usize) -> Result<Vec<TaskExample>> {
    let cfg = &model.config;
    let layout = EchoLayout::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let utt = echo_utterance(cfg, &mut rng);
            let features = layout.features(cfg, &utt.frames, FEATURE_NOISE, &mut rng)?;
            Ok(TaskExample {
                id: format!("utt{i:04}"),
                features,
                duration_seconds: utt.content_frames as f64 * FRAME_SECONDS,
                reference_text: model.detokenize(&utt.words),
            })
        })
        .collect()
}

/// Paths written by [`write_fixtures`].
#[derive(Debug, Clone)]
pub struct FixturePaths {
    pub model: PathBuf,
    pub features: PathBuf,
    pub manifest: PathBuf,
}

/// Write `model.eas` (plus its JSON sidecar), `features.eas` and
/// `manifest.jsonl` into `dir`. Identical arguments give identical bytes.
pub fn write_fixtures(
    dir: &Path,
    preset: Preset,
    kind: WeightsKind,
    seed: u64,
    n_examples: usize,
) -> Result<FixturePaths> {
    if n_examples == 0 {
        return Err(Error::Config("n-examples: must be positive".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let model = toy_model(preset, kind, seed)?;
    let dataset = echo_dataset(&model, seed.wrapping_add(1), n_examples)?;
    let paths = FixturePaths {
        model: dir.join("model.eas"),
        features: dir.join("features.eas"),
        manifest: dir.join("manifest.jsonl"),
    };
    save_model(&model, &paths.model)?;
    let mut archive = TensorArchive::new();
    let mut records = Vec::with_capacity(n_examples);
    for ex in dataset {
        records.push(ManifestRecord {
            features: format!("features.eas#{}", ex.id),
            duration_seconds: ex.duration_seconds,
            reference_text: ex.reference_text,
        });
        archive.insert(ex.id, ex.features)?;
    }
    archive.save(&paths.features)?;
    write_manifest(&paths.manifest, &records)?;
    Ok(paths)
}

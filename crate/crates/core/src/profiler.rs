//! Wall-clock measurement of the three model components.
//!
//! Timed sections take a process-wide write lock; untimed parallel work takes
//! the read side. A timed repeat therefore never overlaps other inference in
//! the same process.

use std::sync::{RwLock, RwLockReadGuard, RwLockWriteGuard};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{transcribe_dataset, DecodeBudget};
use crate::io::TaskExample;
use crate::model::{Model, Transcription};
use crate::sparsifier::EasConfig;
use crate::tensor::Tensor;

static EXCLUSIVE: RwLock<()> = RwLock::new(());

/// Held while running untimed inference.
pub fn shared_section() -> RwLockReadGuard<'static, ()> {
    EXCLUSIVE.read().unwrap_or_else(|e| e.into_inner())
}

/// Held while timing; excludes all shared sections.
pub fn exclusive_section() -> RwLockWriteGuard<'static, ()> {
    EXCLUSIVE.write().unwrap_or_else(|e| e.into_inner())
}

/// Number of separately timed sections per repeat.
pub const SECTIONS: usize = 3;

/// One timed inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingSample {
    pub stem_seconds: f64,
    pub encoder_seconds: f64,
    pub decoder_seconds: f64,
    /// Measured by an independent outer stopwatch.
    pub total_seconds: f64,
    pub tokens: usize,
    /// Utterances that reached the decode cap (0 or 1 for a single one).
    pub cap_hits: usize,
}

impl TimingSample {
    pub fn component_sum(&self) -> f64 {
        self.stem_seconds + self.encoder_seconds + self.decoder_seconds
    }
}

/// Median of a sequence; mean of the middle pair for even lengths, 0 if empty.
pub fn median(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Time stem, encoder stack and decode once, exclusively.
pub fn time_once(
    model: &Model,
    features: &Tensor,
    eas: Option<&EasConfig>,
    max_new_tokens: usize,
) -> Result<(Transcription, TimingSample)> {
    let _guard = exclusive_section();
    let outer = Instant::now();
    let t0 = Instant::now();
    let x = model.stem(features)?;
    let t1 = Instant::now();
    let trace = model.encoder_stack(x, eas)?;
    let t2 = Instant::now();
    let decoded = model.greedy_decode(&trace, max_new_tokens)?;
    let t3 = Instant::now();
    let total = outer.elapsed();
    let sample = TimingSample {
        stem_seconds: (t1 - t0).as_secs_f64(),
        encoder_seconds: (t2 - t1).as_secs_f64(),
        decoder_seconds: (t3 - t2).as_secs_f64(),
        total_seconds: total.as_secs_f64(),
        tokens: decoded.tokens.len(),
        cap_hits: usize::from(decoded.cap_hit),
    };
    Ok((
        Transcription {
            tokens: decoded.tokens,
            cap_hit: decoded.cap_hit,
            encoder_len: trace.kept.len(),
        },
        sample,
    ))
}

/// Repeated timing of one utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentTiming {
    pub samples: Vec<TimingSample>,
}

impl ComponentTiming {
    pub fn median_stem(&self) -> f64 {
        median(self.samples.iter().map(|s| s.stem_seconds))
    }
    pub fn median_encoder(&self) -> f64 {
        median(self.samples.iter().map(|s| s.encoder_seconds))
    }
    pub fn median_decoder(&self) -> f64 {
        median(self.samples.iter().map(|s| s.decoder_seconds))
    }
    pub fn median_total(&self) -> f64 {
        median(self.samples.iter().map(|s| s.total_seconds))
    }
}

/// One untimed warm-up, then `n_repeats` timed runs. Fails if any repeat
/// decodes different tokens.
pub fn timed_transcribe(
    model: &Model,
    features: &Tensor,
    eas: Option<&EasConfig>,
    max_new_tokens: usize,
    n_repeats: usize,
) -> Result<(Transcription, ComponentTiming)> {
    if n_repeats == 0 {
        return Err(Error::Argument("repeats: must be positive".into()));
    }
    let reference = {
        let _shared = shared_section();
        model.transcribe(features, eas, max_new_tokens)?
    };
    let mut samples = Vec::with_capacity(n_repeats);
    for r in 0..n_repeats {
        let (t, s) = time_once(model, features, eas, max_new_tokens)?;
        if t.tokens != reference.tokens {
            return Err(Error::Measurement(format!(
                "repeat {r} decoded {} tokens, warm-up decoded {}",
                t.tokens.len(),
                reference.tokens.len()
            )));
        }
        samples.push(s);
    }
    Ok((reference, ComponentTiming { samples }))
}

/// Upper bound on `total - (stem + encoder + decoder)` for one repeat: the
/// worst observed cost of an empty timed section, times the number of
/// stopwatch reads the outer timer spans beyond the component timers.
pub fn harness_overhead_bound(trials: usize) -> f64 {
    let worst = (0..trials.max(1))
        .map(|_| {
            let a = Instant::now();
            let b = Instant::now();
            (b - a).as_secs_f64()
        })
        .fold(0.0f64, f64::max);
    // Floor at the clock's practical resolution.
    (worst.max(1e-7)) * (SECTIONS + 2) as f64
}

/// Time a whole dataset: warm-up per utterance, then repeat `r` of every
/// utterance is summed into sample `r`.
pub fn profile_dataset(
    model: &Model,
    dataset: &[TaskExample],
    eas: Option<&EasConfig>,
    budget: DecodeBudget,
    n_repeats: usize,
) -> Result<ComponentTiming> {
    if dataset.is_empty() {
        return Err(Error::Argument("profile needs a non-empty dataset".into()));
    }
    let mut totals = vec![
        TimingSample {
            stem_seconds: 0.0,
            encoder_seconds: 0.0,
            decoder_seconds: 0.0,
            total_seconds: 0.0,
            tokens: 0,
            cap_hits: 0,
        };
        n_repeats
    ];
    for ex in dataset {
        let cap = budget.cap(ex.reference_words().len());
        let (_, timing) = timed_transcribe(model, &ex.features, eas, cap, n_repeats)?;
        for (acc, s) in totals.iter_mut().zip(&timing.samples) {
            acc.stem_seconds += s.stem_seconds;
            acc.encoder_seconds += s.encoder_seconds;
            acc.decoder_seconds += s.decoder_seconds;
            acc.total_seconds += s.total_seconds;
            acc.tokens += s.tokens;
            acc.cap_hits += s.cap_hits;
        }
    }
    Ok(ComponentTiming { samples: totals })
}

/// Raw samples as CSV: `config,repeat,stem_s,encoder_s,decoder_s,tokens,cap_hit`,
/// where `cap_hit` counts capped utterances in that repeat.
pub fn samples_csv(rows: &[(String, ComponentTiming)]) -> String {
    let mut out = String::from("config,repeat,stem_s,encoder_s,decoder_s,tokens,cap_hit\n");
    for (label, timing) in rows {
        for (r, s) in timing.samples.iter().enumerate() {
            out.push_str(&format!(
                "\"{label}\",{r},{:.9},{:.9},{:.9},{},{}\n",
                s.stem_seconds, s.encoder_seconds, s.decoder_seconds, s.tokens, s.cap_hits
            ));
        }
    }
    out
}

/// `stage,sparsity,avg_generated_tokens,cap_hit_fraction,baseline_avg_tokens`.
pub fn token_growth_csv(curve: &TokenGrowth) -> String {
    let mut out =
        String::from("stage,sparsity,avg_generated_tokens,cap_hit_fraction,baseline_avg_tokens\n");
    for p in &curve.points {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            curve.stage,
            p.sparsity,
            p.avg_generated_tokens,
            p.cap_hit_fraction,
            curve.baseline.avg_generated_tokens
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenGrowthPoint {
    pub sparsity: f64,
    pub avg_generated_tokens: f64,
    pub cap_hit_fraction: f64,
}

/// Generated-token statistics against sparsity at a fixed stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenGrowth {
    pub stage: usize,
    pub baseline: TokenGrowthPoint,
    pub points: Vec<TokenGrowthPoint>,
}

pub fn token_growth_curve(
    model: &Model,
    dataset: &[TaskExample],
    stage: usize,
    sparsities: &[f64],
    budget: DecodeBudget,
    threads: usize,
) -> Result<TokenGrowth> {
    if dataset.is_empty() {
        return Err(Error::Argument("token growth needs a non-empty dataset".into()));
    }
    let point = |sparsity: f64, eas: Option<&EasConfig>| -> Result<TokenGrowthPoint> {
        let out = transcribe_dataset(model, dataset, eas, budget, threads)?;
        let n = out.len() as f64;
        Ok(TokenGrowthPoint {
            sparsity,
            avg_generated_tokens: out.iter().map(|o| o.tokens.len()).sum::<usize>() as f64 / n,
            cap_hit_fraction: out.iter().filter(|o| o.cap_hit).count() as f64 / n,
        })
    };
    let baseline = point(0.0, None)?;
    let points = sparsities
        .iter()
        .map(|&s| {
            let eas = EasConfig::new(stage, s);
            eas.validate(model.config.n_encoder_layers)?;
            point(s, Some(&eas))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TokenGrowth {
        stage,
        baseline,
        points,
    })
}

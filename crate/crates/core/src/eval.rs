//! Dataset-level evaluation of one model variant.
//!
//! Transcription runs in two passes. The first is untimed and may fan out
//! over a worker pool; it produces the tokens that WER is computed from.
//! The second (optional) pass re-runs every example serially inside the
//! profiler's exclusive section to measure wall-clock time, and checks that
//! timing reproduced the same tokens.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::TaskExample;
use crate::metrics::{
    normalize_words, rtf, ComponentTimes, ConfigLabel, CorpusWer, EvalRecord, ExampleFailure,
    RecordTiming,
};
use crate::model::Model;
use crate::profiler::{self, median};
use crate::sparsifier::EasConfig;

/// Environment variable capping evaluation parallelism.
pub const THREADS_ENV: &str = "EAS_THREADS";

/// Per-utterance decode budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecodeBudget {
    /// `max(32, 4 * reference words)`.
    #[default]
    PerReference,
    Fixed(usize),
}

impl DecodeBudget {
    pub fn cap(&self, reference_words: usize) -> usize {
        match *self {
            DecodeBudget::PerReference => (4 * reference_words).max(32),
            DecodeBudget::Fixed(n) => n,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub budget: DecodeBudget,
    pub threads: usize,
    /// Run the serial timed pass (otherwise all timing fields stay zero).
    pub timing: bool,
    /// Timed repeats per example; the median is used.
    pub repeats: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            budget: DecodeBudget::PerReference,
            threads: threads_from_env(),
            timing: true,
            repeats: 1,
        }
    }
}

/// Worker count from `EAS_THREADS`, falling back to available parallelism.
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Untimed outcome for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleOutcome {
    pub tokens: Vec<u32>,
    pub cap_hit: bool,
    pub score: CorpusWer,
    pub failure: Option<String>,
}

fn score_example(model: &Model, ex: &TaskExample, tokens: &[u32]) -> CorpusWer {
    let reference = ex.reference_words();
    let hypothesis = normalize_words(&model.detokenize(tokens));
    let mut c = CorpusWer::default();
    c.add(&reference, &hypothesis);
    c
}

fn run_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("threads: {e}")))?;
    Ok(pool.install(f))
}

/// Transcribe every example (untimed, in parallel). Failures are captured
/// per example and scored as empty hypotheses.
pub fn transcribe_dataset(
    model: &Model,
    dataset: &[TaskExample],
    eas: Option<&EasConfig>,
    budget: DecodeBudget,
    threads: usize,
) -> Result<Vec<ExampleOutcome>> {
    run_pool(threads, || {
        dataset
            .par_iter()
            .map(|ex| {
                let _shared = profiler::shared_section();
                let cap = budget.cap(ex.reference_words().len());
                match model.transcribe(&ex.features, eas, cap) {
                    Ok(t) => ExampleOutcome {
                        score: score_example(model, ex, &t.tokens),
                        tokens: t.tokens,
                        cap_hit: t.cap_hit,
                        failure: None,
                    },
                    Err(e) => ExampleOutcome {
                        score: score_example(model, ex, &[]),
                        tokens: Vec::new(),
                        cap_hit: false,
                        failure: Some(e.to_string()),
                    },
                }
            })
            .collect()
    })
}

/// Evaluate one configuration over `dataset`. `accuracy_ratio` and `speedup`
/// are left neutral (1.0) until related to a baseline.
pub fn evaluate(
    model: &Model,
    dataset: &[TaskExample],
    label: ConfigLabel,
    opts: &EvalOptions,
) -> Result<EvalRecord> {
    if dataset.is_empty() {
        return Err(Error::Argument("evaluation dataset is empty".into()));
    }
    let eas = label.eas();
    let mut outcomes = transcribe_dataset(model, dataset, eas, opts.budget, opts.threads)?;

    let mut times = ComponentTimes::default();
    if opts.timing {
        let repeats = opts.repeats.max(1);
        let mut warmed = false;
        for (ex, outcome) in dataset.iter().zip(outcomes.iter_mut()) {
            if outcome.failure.is_some() {
                continue;
            }
            let cap = opts.budget.cap(ex.reference_words().len());
            if !warmed {
                model.transcribe(&ex.features, eas, cap)?;
                warmed = true;
            }
            let mut samples = Vec::with_capacity(repeats);
            for _ in 0..repeats {
                let (t, s) = profiler::time_once(model, &ex.features, eas, cap)?;
                if t.tokens != outcome.tokens {
                    outcome.failure = Some("timed run produced different tokens".into());
                }
                samples.push(s);
            }
            times.stem_seconds += median(samples.iter().map(|s| s.stem_seconds));
            times.encoder_seconds += median(samples.iter().map(|s| s.encoder_seconds));
            times.decoder_seconds += median(samples.iter().map(|s| s.decoder_seconds));
        }
    }

    let score: CorpusWer = outcomes.iter().map(|o| o.score).sum();
    let n = dataset.len();
    let audio: f64 = dataset.iter().map(|e| e.duration_seconds).sum();
    let total = times.total();
    Ok(EvalRecord {
        config: label,
        wer: score.wer()?,
        accuracy_ratio: 1.0,
        edits: score.edits,
        ref_words: score.ref_words,
        n_examples: n,
        avg_generated_tokens: outcomes.iter().map(|o| o.tokens.len()).sum::<usize>() as f64
            / n as f64,
        cap_hit_fraction: outcomes.iter().filter(|o| o.cap_hit).count() as f64 / n as f64,
        failures: outcomes
            .iter()
            .enumerate()
            .filter_map(|(i, o)| {
                o.failure.clone().map(|message| ExampleFailure { index: i, message })
            })
            .collect(),
        timing: RecordTiming {
            rtf: if opts.timing { rtf(total, audio)? } else { 0.0 },
            speedup: 1.0,
            total_inference_seconds: total,
            total_audio_seconds: audio,
            component_times: times,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_rule() {
        assert_eq!(DecodeBudget::PerReference.cap(3), 32);
        assert_eq!(DecodeBudget::PerReference.cap(20), 80);
        assert_eq!(DecodeBudget::Fixed(5).cap(100), 5);
    }
}

//! Accuracy and speed metrics: word error rate, accuracy ratio, real-time
//! factor, relative speedup, and the per-configuration evaluation record.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparsifier::EasConfig;

/// Minimum `(1 - wer) / (1 - wer0)` for a configuration to be admissible.
pub const ACCURACY_THRESHOLD: f64 = 0.99;

/// Lowercase, drop punctuation, collapse whitespace.
pub fn normalize_text(s: &str) -> String {
    let cleaned: String = s
        .chars()
        .map(|c| {
            if c.is_alphanumeric() {
                c.to_lowercase().next().unwrap_or(c)
            } else if c.is_whitespace() {
                ' '
            } else {
                '\u{0}'
            }
        })
        .filter(|&c| c != '\u{0}')
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn normalize_words(s: &str) -> Vec<String> {
    normalize_text(s)
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Levenshtein distance with unit substitution, insertion and deletion costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Word error rate of one hypothesis. May exceed 1.
pub fn wer<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> Result<f64> {
    let mut c = CorpusWer::default();
    c.add(reference, hypothesis);
    c.wer()
}

/// Pooled word error: total edits over total reference words.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusWer {
    pub edits: usize,
    pub ref_words: usize,
}

impl CorpusWer {
    pub fn add<S: AsRef<str>>(&mut self, reference: &[S], hypothesis: &[S]) {
        let r: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
        let h: Vec<&str> = hypothesis.iter().map(AsRef::as_ref).collect();
        self.edits += edit_distance(&r, &h);
        self.ref_words += r.len();
    }

    pub fn merge(&mut self, other: CorpusWer) {
        self.edits += other.edits;
        self.ref_words += other.ref_words;
    }

    pub fn wer(&self) -> Result<f64> {
        if self.ref_words == 0 {
            return Err(Error::Argument("word error rate needs reference words".into()));
        }
        Ok(self.edits as f64 / self.ref_words as f64)
    }
}

impl std::iter::Sum for CorpusWer {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |mut a, b| {
            a.merge(b);
            a
        })
    }
}

/// `(1 - wer) / (1 - wer0)`.
pub fn accuracy_ratio(wer: f64, wer0: f64) -> Result<f64> {
    if wer0.is_nan() || wer0 >= 1.0 {
        return Err(Error::Argument(format!(
            "baseline word error rate {wer0} leaves no accuracy to compare against"
        )));
    }
    Ok((1.0 - wer) / (1.0 - wer0))
}

pub fn is_admissible(accuracy_ratio: f64) -> bool {
    accuracy_ratio >= ACCURACY_THRESHOLD
}

/// Largest word error rate that still satisfies the accuracy constraint.
pub fn max_admissible_wer(wer0: f64) -> f64 {
    1.0 - ACCURACY_THRESHOLD * (1.0 - wer0)
}

/// Real-time factor: inference time over audio time. Lower is faster.
pub fn rtf(total_inference_seconds: f64, total_audio_seconds: f64) -> Result<f64> {
    if total_audio_seconds.is_nan() || total_audio_seconds <= 0.0 {
        return Err(Error::Argument(format!(
            "real-time factor needs positive audio duration, got {total_audio_seconds}"
        )));
    }
    Ok(total_inference_seconds / total_audio_seconds)
}

/// `rtf0 / rtf`.
pub fn relative_speedup(rtf0: f64, rtf: f64) -> Result<f64> {
    if rtf.is_nan() || rtf <= 0.0 {
        return Err(Error::Argument(format!("speedup needs positive rtf, got {rtf}")));
    }
    Ok(rtf0 / rtf)
}

/// Which model variant a record describes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConfigLabel {
    Baseline,
    Eas(EasConfig),
}

impl ConfigLabel {
    pub fn eas(&self) -> Option<&EasConfig> {
        match self {
            ConfigLabel::Baseline => None,
            ConfigLabel::Eas(c) => Some(c),
        }
    }

    /// `(stage, sparsity)` with the baseline ordered first.
    pub fn sort_key(&self) -> (usize, f64) {
        match self {
            ConfigLabel::Baseline => (0, 0.0),
            ConfigLabel::Eas(c) => (c.stage, c.sparsity),
        }
    }
}

impl fmt::Display for ConfigLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigLabel::Baseline => f.write_str("Baseline"),
            ConfigLabel::Eas(c) => write!(f, "({}, {:.1})", c.stage, c.sparsity),
        }
    }
}

/// Seconds spent per model component, summed over a dataset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ComponentTimes {
    pub stem_seconds: f64,
    pub encoder_seconds: f64,
    pub decoder_seconds: f64,
}

impl ComponentTimes {
    pub fn total(&self) -> f64 {
        self.stem_seconds + self.encoder_seconds + self.decoder_seconds
    }
}

/// Wall-clock derived fields; kept in one subtree so reports can be compared
/// across runs with exactly this part excluded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordTiming {
    pub rtf: f64,
    pub speedup: f64,
    pub total_inference_seconds: f64,
    pub total_audio_seconds: f64,
    pub component_times: ComponentTimes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleFailure {
    pub index: usize,
    pub message: String,
}

/// Result of evaluating one configuration over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub config: ConfigLabel,
    pub wer: f64,
    pub accuracy_ratio: f64,
    pub edits: usize,
    pub ref_words: usize,
    pub n_examples: usize,
    pub avg_generated_tokens: f64,
    pub cap_hit_fraction: f64,
    /// Examples whose inference failed; each counts as an empty hypothesis.
    #[serde(default)]
    pub failures: Vec<ExampleFailure>,
    pub timing: RecordTiming,
}

impl EvalRecord {
    /// Record carrying only the two objectives (for fixtures and tests).
    pub fn from_metrics(config: ConfigLabel, wer: f64, rtf: f64) -> Self {
        Self {
            config,
            wer,
            accuracy_ratio: 1.0,
            edits: 0,
            ref_words: 0,
            n_examples: 0,
            avg_generated_tokens: 0.0,
            cap_hit_fraction: 0.0,
            failures: Vec::new(),
            timing: RecordTiming {
                rtf,
                speedup: 1.0,
                ..RecordTiming::default()
            },
        }
    }

    pub fn rtf(&self) -> f64 {
        self.timing.rtf
    }

    /// Fill `accuracy_ratio` and `speedup` relative to a baseline.
    pub fn relate_to(&mut self, wer0: f64, rtf0: f64) -> Result<()> {
        self.accuracy_ratio = accuracy_ratio(self.wer, wer0)?;
        self.timing.speedup = if self.timing.rtf > 0.0 {
            relative_speedup(rtf0, self.timing.rtf)?
        } else {
            // Untimed records carry rtf 0; leave speedup neutral.
            1.0
        };
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(s: &str) -> Vec<String> {
        normalize_words(s)
    }

    fn dp_oracle(a: &[String], b: &[String]) -> usize {
        // Full (m+1) x (n+1) table.
        let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in d.iter_mut().enumerate() {
            row[0] = i;
        }
        for (j, cell) in d[0].iter_mut().enumerate() {
            *cell = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let c = if a[i - 1] == b[j - 1] { 0 } else { 1 };
                d[i][j] = (d[i - 1][j - 1] + c).min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
            }
        }
        d[a.len()][b.len()]
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer(&words("a b c"), &words("a b c")).unwrap(), 0.0);
        assert!((wer(&words("a b c"), &words("a c")).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(wer(&words("a b"), &words("x y z")).unwrap(), 1.5);
        assert!(wer(&words(""), &words("x")).is_err());
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_text("  Hello,  WORLD!\tIt's  "), "hello world its");
        assert_eq!(normalize_words("...").len(), 0);
    }

    #[test]
    fn corpus_pooling_differs_from_mean() {
        // Example 1: 1 ref word, 1 error (wer 1.0). Example 2: 9 ref words, 0 errors.
        let mut c = CorpusWer::default();
        c.add(&words("a"), &words("b"));
        c.add(&words("a b c d e f g h i"), &words("a b c d e f g h i"));
        assert_eq!(c.wer().unwrap(), 0.1);
        let mean_of_examples = (1.0 + 0.0) / 2.0;
        assert_ne!(c.wer().unwrap(), mean_of_examples);
    }

    #[test]
    fn accuracy_ratio_table_rows() {
        let r = accuracy_ratio(0.07050, 0.06266).unwrap();
        assert!((r - 0.9916).abs() < 1e-4);
        assert_eq!(format!("{r:.3}"), "0.992");
        let r = accuracy_ratio(0.02489, 0.01671).unwrap();
        assert_eq!(format!("{r:.3}"), "0.992");
        assert_eq!(accuracy_ratio(0.3, 0.3).unwrap(), 1.0);
        assert!(accuracy_ratio(0.1, 1.0).is_err());
        assert!((max_admissible_wer(0.01671) - 0.0265429).abs() < 1e-7);
    }

    #[test]
    fn rtf_and_speedup() {
        assert!((rtf(1.0, 20.0).unwrap() - 0.05).abs() < 1e-15);
        assert_eq!(rtf(3.0, 3.0).unwrap(), 1.0);
        assert!(rtf(1.0, 0.0).is_err());
        assert!((relative_speedup(0.10, 0.05).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(relative_speedup(0.2, 0.2).unwrap(), 1.0);
        // Table-rounded RTFs give 1.581, not the printed 1.601.
        assert_eq!(format!("{:.3}", relative_speedup(0.049, 0.031).unwrap()), "1.581");
        assert!(relative_speedup(0.1, 0.0).is_err());
    }

    #[test]
    fn label_serialization() {
        let j = serde_json::to_value(ConfigLabel::Baseline).unwrap();
        assert_eq!(j["kind"], "baseline");
        let j = serde_json::to_value(ConfigLabel::Eas(EasConfig::new(2, 0.6))).unwrap();
        assert_eq!(j["kind"], "eas");
        assert_eq!(j["stage"], 2);
        assert_eq!(ConfigLabel::Eas(EasConfig::new(2, 0.6)).to_string(), "(2, 0.6)");
    }

    fn word_list() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]), 0..12)
            .prop_map(|v| v.into_iter().map(String::from).collect())
    }

    proptest! {
        #[test]
        fn edit_distance_matches_dp(a in word_list(), b in word_list()) {
            prop_assert_eq!(edit_distance(&a, &b), dp_oracle(&a, &b));
        }

        #[test]
        fn edit_distance_is_a_metric(a in word_list(), b in word_list(), c in word_list()) {
            prop_assert_eq!(edit_distance(&a, &a), 0);
            prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
            prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
        }

        #[test]
        fn accuracy_ratio_decreasing(w0 in 0.0f64..0.9, a in 0.0f64..2.0, b in 0.0f64..2.0) {
            prop_assume!(a != b);
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(accuracy_ratio(lo, w0).unwrap() > accuracy_ratio(hi, w0).unwrap());
        }

        #[test]
        fn speedup_reciprocal(r0 in 1e-4f64..10.0, r in 1e-4f64..10.0) {
            let p = relative_speedup(r0, r).unwrap() * relative_speedup(r, r0).unwrap();
            prop_assert!((p - 1.0).abs() <= 1e-9);
        }
    }
}

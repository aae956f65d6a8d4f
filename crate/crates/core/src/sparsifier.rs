//! Early attentive sparsification.
//!
//! Tokens are scored by how much post-softmax attention they receive
//! (mean over heads and query positions), the top `k` are kept in temporal
//! order and every other time step is dropped from the hidden state.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gather_time, topk_indices, Tensor};

/// Allowed deviation of an attention row sum from one.
pub const ROW_SUM_TOLERANCE: f32 = 1e-5;

/// Floor applied before the logarithm in the geometric mean.
pub const GEOMETRIC_MEAN_FLOOR: f64 = 1e-12;

/// Statistic used to combine per-layer importance vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
    Min,
    GeometricMean,
    /// Ignores the scores; drops a seeded uniformly random subset.
    Random,
}

impl Aggregation {
    pub const ALL: [Aggregation; 5] = [
        Aggregation::Mean,
        Aggregation::Max,
        Aggregation::Min,
        Aggregation::GeometricMean,
        Aggregation::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::Mean => "mean",
            Aggregation::Max => "max",
            Aggregation::Min => "min",
            Aggregation::GeometricMean => "geometric_mean",
            Aggregation::Random => "random",
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Aggregation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "aggregation: unknown value {s:?} (expected mean, max, min, geometric_mean or random)"
                ))
            })
    }
}

/// One point of the search space: where to cut and how much to drop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EasConfig {
    /// 1-based encoder layer after which the sequence is shortened.
    pub stage: usize,
    /// Fraction of time steps dropped, in `[0, 1)`.
    pub sparsity: f64,
    #[serde(default)]
    pub aggregation: Aggregation,
    /// Aggregate importance over every encoder layer and drop after the last.
    #[serde(default)]
    pub cross_layer: bool,
    #[serde(default)]
    pub rng_seed: u64,
}

impl EasConfig {
    pub fn new(stage: usize, sparsity: f64) -> Self {
        Self {
            stage,
            sparsity,
            aggregation: Aggregation::Mean,
            cross_layer: false,
            rng_seed: 0,
        }
    }

    /// Cross-layer variant: importance aggregated over all `n_layers`, cut after the last.
    pub fn cross_layer(n_layers: usize, sparsity: f64, aggregation: Aggregation) -> Self {
        Self {
            stage: n_layers,
            sparsity,
            aggregation,
            cross_layer: true,
            rng_seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::Config(format!(
                "sparsity: {} outside [0, 1)",
                self.sparsity
            )));
        }
        if self.stage == 0 || self.stage > n_layers {
            return Err(Error::Config(format!(
                "stage: {} outside [1, {n_layers}]",
                self.stage
            )));
        }
        if self.cross_layer && self.stage != n_layers {
            return Err(Error::Config(format!(
                "stage: cross-layer aggregation drops after the last layer ({n_layers}), got {}",
                self.stage
            )));
        }
        Ok(())
    }
}

/// Per-token importance score, one entry per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct Importance(pub Vec<f32>);

impl Importance {
    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Mean attention received by each key position over heads and queries:
/// `I[t] = 1/(H*T) * sum_{h,t'} attn[h,t',t]`.
pub fn importance_mean(attn: &Tensor) -> Result<Importance> {
    importance_mean_with_tolerance(attn, ROW_SUM_TOLERANCE)
}

/// [`importance_mean`] with an explicit row-sum tolerance, for attention
/// tensors produced elsewhere with looser normalization.
pub fn importance_mean_with_tolerance(attn: &Tensor, tolerance: f32) -> Result<Importance> {
    let (h, tq, tk) = attn.dims3()?;
    if tq != tk {
        return Err(Error::Shape(format!(
            "self-attention scores must be square, got [{h},{tq},{tk}]"
        )));
    }
    let t = tk;
    let mut acc = vec![0.0f64; t];
    for (r, row) in attn.data().chunks_exact(t).enumerate() {
        let mut sum = 0.0f64;
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64;
            sum += v as f64;
        }
        if (sum - 1.0).abs() > tolerance as f64 {
            return Err(Error::Precondition(format!(
                "attention row (head {}, query {}) sums to {sum}, not 1",
                r / t,
                r % t
            )));
        }
    }
    let norm = (h * t) as f64;
    Ok(Importance(acc.into_iter().map(|v| (v / norm) as f32).collect()))
}

/// Seeded uniform scores in `[0, 1)`; independent of any attention input.
pub fn random_importance(len: usize, seed: u64) -> Importance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Importance((0..len).map(|_| rng.gen::<f32>()).collect())
}

/// Element-wise statistic across layers.
pub fn aggregate_cross_layer(
    per_layer: &[Importance],
    aggregation: Aggregation,
    seed: u64,
) -> Result<Importance> {
    let first = per_layer
        .first()
        .ok_or_else(|| Error::Argument("no importance vectors to aggregate".into()))?;
    let t = first.len();
    if let Some(bad) = per_layer.iter().position(|v| v.len() != t) {
        return Err(Error::Shape(format!(
            "importance vector {bad} has length {}, expected {t}",
            per_layer[bad].len()
        )));
    }
    if aggregation == Aggregation::Random {
        return Ok(random_importance(t, seed));
    }
    let n = per_layer.len() as f64;
    let out = (0..t)
        .map(|i| {
            let column = per_layer.iter().map(|v| v.0[i]);
            match aggregation {
                Aggregation::Mean => (column.map(|x| x as f64).sum::<f64>() / n) as f32,
                Aggregation::Max => column.fold(f32::NEG_INFINITY, f32::max),
                Aggregation::Min => column.fold(f32::INFINITY, f32::min),
                Aggregation::GeometricMean => {
                    let log_sum: f64 = column
                        .map(|x| (x as f64).max(GEOMETRIC_MEAN_FLOOR).ln())
                        .sum();
                    (log_sum / n).exp() as f32
                }
                Aggregation::Random => unreachable!(),
            }
        })
        .collect();
    Ok(Importance(out))
}

/// Number of time steps kept: `round_half_up((1 - s) * T)`, clamped to `[1, T]`.
///
/// The sparsity is quantized to 1e-9 and the product evaluated in integers,
/// so decimal grid values such as 0.3 or 0.7 round exactly.
pub fn keep_count(len: usize, sparsity: f64) -> usize {
    const SCALE: u128 = 1_000_000_000;
    let s = (sparsity.clamp(0.0, 1.0) * SCALE as f64).round() as u128;
    let numer = (SCALE - s.min(SCALE)) * len as u128;
    let k = (2 * numer + SCALE) / (2 * SCALE);
    (k as usize).clamp(1, len.max(1))
}

/// Keep the `keep_count(T, s)` most important time steps of `z`.
pub fn sparsify(z: &Tensor, importance: &Importance, sparsity: f64) -> Result<(Tensor, Vec<usize>)> {
    let (t, _) = z.dims2()?;
    if importance.len() != t {
        return Err(Error::Shape(format!(
            "importance length {} does not match sequence length {t}",
            importance.len()
        )));
    }
    let kept = topk_indices(importance.values(), keep_count(t, sparsity))?;
    let z = gather_time(z, &kept)?;
    Ok((z, kept))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::softmax_rows;
    use proptest::prelude::*;
    use rand::Rng;

    fn attn(h: usize, t: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        softmax_rows(&Tensor::from_fn(&[h, t, t], |_| rng.gen_range(-3.0..3.0)))
    }

    #[test]
    fn uniform_attention() {
        let a = Tensor::full(&[1, 2, 2], 0.5);
        assert_eq!(importance_mean(&a).unwrap().0, vec![0.5, 0.5]);
    }

    #[test]
    fn hand_column_sums() {
        let a = Tensor::new(
            vec![1, 3, 3],
            vec![0.2, 0.3, 0.5, 0.1, 0.6, 0.3, 0.4, 0.4, 0.2],
        )
        .unwrap();
        let i = importance_mean(&a).unwrap();
        for (got, want) in i.0.iter().zip([0.2333f32, 0.4333, 0.3333]) {
            assert!((got - want).abs() < 1e-4);
        }
    }

    #[test]
    fn unnormalized_attention_is_rejected() {
        let a = Tensor::full(&[1, 2, 2], 0.6);
        assert!(matches!(importance_mean(&a), Err(Error::Precondition(_))));
        assert!(importance_mean_with_tolerance(&a, 0.25).is_ok());
    }

    #[test]
    fn non_square_scores_rejected() {
        assert!(importance_mean(&Tensor::full(&[1, 2, 4], 0.25)).is_err());
    }

    #[test]
    fn aggregation_examples() {
        let layers = [Importance(vec![0.2, 0.8]), Importance(vec![0.4, 0.6])];
        let mean = aggregate_cross_layer(&layers, Aggregation::Mean, 0).unwrap();
        assert!((mean.0[0] - 0.3).abs() < 1e-7 && (mean.0[1] - 0.7).abs() < 1e-7);
        assert_eq!(aggregate_cross_layer(&layers, Aggregation::Max, 0).unwrap().0, vec![0.4, 0.8]);
        assert_eq!(aggregate_cross_layer(&layers, Aggregation::Min, 0).unwrap().0, vec![0.2, 0.6]);
        let geo = aggregate_cross_layer(
            &[Importance(vec![0.25, 1.0]), Importance(vec![1.0, 0.25])],
            Aggregation::GeometricMean,
            0,
        )
        .unwrap();
        assert!((geo.0[0] - 0.5).abs() < 1e-6 && (geo.0[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn geometric_mean_survives_zeros() {
        let geo = aggregate_cross_layer(
            &[Importance(vec![0.0, 0.5]), Importance(vec![0.5, 0.5])],
            Aggregation::GeometricMean,
            0,
        )
        .unwrap();
        assert!(geo.0.iter().all(|v| v.is_finite()));
        assert!((geo.0[0] as f64 - (1e-12f64 * 0.5).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn aggregation_errors() {
        assert!(aggregate_cross_layer(&[], Aggregation::Mean, 0).is_err());
        let ragged = [Importance(vec![0.1]), Importance(vec![0.1, 0.2])];
        assert!(aggregate_cross_layer(&ragged, Aggregation::Max, 0).is_err());
    }

    #[test]
    fn keep_count_examples() {
        assert_eq!(keep_count(1500, 0.6), 600);
        assert_eq!(keep_count(10, 0.7), 3);
        assert_eq!(keep_count(3, 0.5), 2);
        assert_eq!(keep_count(5, 0.3), 4); // 3.5 rounds up
        assert_eq!(keep_count(5, 0.0), 5);
        assert_eq!(keep_count(2, 0.9), 1); // clamped away from zero
    }

    #[test]
    fn sparsify_examples() {
        let z = Tensor::from_fn(&[4, 3], |i| i as f32);
        let imp = Importance(vec![0.1, 0.4, 0.3, 0.2]);
        let (zz, kept) = sparsify(&z, &imp, 0.0).unwrap();
        assert_eq!(zz, z);
        assert_eq!(kept, vec![0, 1, 2, 3]);
        let (zz, kept) = sparsify(&z, &imp, 0.5).unwrap();
        assert_eq!(kept, vec![1, 2]);
        assert_eq!(zz.row(0), z.row(1));
        assert_eq!(zz.row(1), z.row(2));
    }

    #[test]
    fn config_validation() {
        assert!(EasConfig::new(1, 0.5).validate(4).is_ok());
        assert!(EasConfig::new(0, 0.5).validate(4).is_err());
        assert!(EasConfig::new(5, 0.5).validate(4).is_err());
        assert!(EasConfig::new(2, 1.0).validate(4).is_err());
        assert!(EasConfig::new(2, -0.1).validate(4).is_err());
        let mut c = EasConfig::cross_layer(4, 0.5, Aggregation::Max);
        assert!(c.validate(4).is_ok());
        c.stage = 2;
        assert!(c.validate(4).is_err());
    }

    #[test]
    fn aggregation_parses() {
        for a in Aggregation::ALL {
            assert_eq!(a.as_str().parse::<Aggregation>().unwrap(), a);
        }
        assert!("median".parse::<Aggregation>().is_err());
    }

    proptest! {
        #[test]
        fn mean_importance_sums_to_one(h in 1usize..6, t in 1usize..40, seed in any::<u64>()) {
            let i = importance_mean(&attn(h, t, seed)).unwrap();
            let s: f64 = i.0.iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() <= 1e-5);
            prop_assert!(i.0.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn keep_count_monotone(t in 1usize..3000, a in 0u32..1000, b in 0u32..1000) {
            let (lo, hi) = (a.min(b) as f64 / 1000.0, a.max(b) as f64 / 1000.0);
            prop_assert!(keep_count(t, lo) >= keep_count(t, hi));
            prop_assert!(keep_count(t, hi) >= 1);
            prop_assert_eq!(keep_count(t, 0.0), t);
        }

        #[test]
        fn positive_scaling_keeps_selection(
            seed in any::<u64>(),
            t in 2usize..80,
            s in 0.0f64..0.95,
            c in 0.01f32..100.0,
        ) {
            let imp = random_importance(t, seed);
            let scaled = Importance(imp.0.iter().map(|v| v * c).collect());
            let z = Tensor::zeros(&[t, 2]);
            let (_, a) = sparsify(&z, &imp, s).unwrap();
            let (_, b) = sparsify(&z, &scaled, s).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn kept_scores_dominate_dropped(seed in any::<u64>(), t in 2usize..100, s in 0.0f64..0.99) {
            let imp = random_importance(t, seed);
            let z = Tensor::zeros(&[t, 1]);
            let (_, kept) = sparsify(&z, &imp, s).unwrap();
            let min_kept = kept.iter().map(|&i| imp.0[i]).fold(f32::INFINITY, f32::min);
            let max_dropped = (0..t)
                .filter(|i| !kept.contains(i))
                .map(|i| imp.0[i])
                .fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(min_kept >= max_dropped);
            prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn single_layer_aggregation_is_identity(seed in any::<u64>(), t in 1usize..50) {
            let imp = random_importance(t, seed);
            for agg in [Aggregation::Mean, Aggregation::Max, Aggregation::Min, Aggregation::GeometricMean] {
                let out = aggregate_cross_layer(std::slice::from_ref(&imp), agg, 0).unwrap();
                for (a, b) in out.0.iter().zip(&imp.0) {
                    prop_assert!((a - b).abs() <= 1e-6);
                }
            }
        }
    }
}

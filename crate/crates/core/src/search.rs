//! Grid search over `(stage, sparsity)`, Pareto-front extraction and
//! accuracy-constrained selection, plus the dataset-size stability study.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, transcribe_dataset, DecodeBudget, EvalOptions};
use crate::io::TaskExample;
use crate::metrics::{
    accuracy_ratio, is_admissible, max_admissible_wer, ConfigLabel, CorpusWer, EvalRecord,
};
use crate::model::Model;
use crate::sparsifier::{Aggregation, EasConfig};

/// Stages and sparsities to sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchGrid {
    pub stages: Vec<usize>,
    pub sparsities: Vec<f64>,
}

/// `{0.0, 0.1, ..., 0.9}`.
pub fn default_sparsities() -> Vec<f64> {
    (0..10).map(|i| i as f64 / 10.0).collect()
}

fn round9(x: f64) -> f64 {
    (x * 1e9).round() / 1e9
}

impl SearchGrid {
    /// Every stage `1..=n_layers` against the default sparsities.
    pub fn full(n_layers: usize) -> Self {
        Self {
            stages: (1..=n_layers).collect(),
            sparsities: default_sparsities(),
        }
    }

    /// Parse `stages=1..L;sparsities=0.0:0.9:0.1`. Stages accept `a..b`
    /// (inclusive) or a comma list, with `L` standing for the encoder depth.
    /// Sparsities accept `start:stop:step` (inclusive) or a comma list.
    pub fn parse(spec: &str, n_layers: usize) -> Result<Self> {
        let mut stages = None;
        let mut sparsities = None;
        for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("grid: expected key=value, got {part:?}")))?;
            match key.trim() {
                "stages" => stages = Some(parse_stages(value.trim(), n_layers)?),
                "sparsities" => sparsities = Some(parse_sparsities(value.trim())?),
                other => return Err(Error::Config(format!("grid: unknown key {other:?}"))),
            }
        }
        let grid = Self {
            stages: stages.unwrap_or_else(|| (1..=n_layers).collect()),
            sparsities: sparsities.unwrap_or_else(default_sparsities),
        };
        grid.validate(n_layers)?;
        Ok(grid)
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("grid.stages: must not be empty".into()));
        }
        if let Some(s) = self.stages.iter().find(|&&s| s == 0 || s > n_layers) {
            return Err(Error::Config(format!(
                "grid.stages: {s} outside 1..={n_layers}"
            )));
        }
        if self.sparsities.is_empty() {
            return Err(Error::Config("grid.sparsities: must not be empty".into()));
        }
        if let Some(s) = self.sparsities.iter().find(|s| !(0.0..1.0).contains(*s)) {
            return Err(Error::Config(format!("grid.sparsities: {s} outside [0, 1)")));
        }
        Ok(())
    }

    /// Grid points with `s > 0`, sorted by `(stage, sparsity)` and
    /// deduplicated. `s = 0` points coincide with the baseline.
    pub fn points(&self, aggregation: Aggregation, cross_layer: bool, seed: u64) -> Vec<EasConfig> {
        let mut stages = self.stages.clone();
        stages.sort_unstable();
        stages.dedup();
        let mut sparsities: Vec<f64> = self.sparsities.iter().copied().filter(|&s| s > 0.0).collect();
        sparsities.sort_by(f64::total_cmp);
        sparsities.dedup();
        stages
            .iter()
            .flat_map(|&stage| {
                sparsities.iter().map(move |&s| EasConfig {
                    stage,
                    sparsity: s,
                    aggregation,
                    cross_layer,
                    rng_seed: seed,
                })
            })
            .collect()
    }
}

fn parse_stages(v: &str, n_layers: usize) -> Result<Vec<usize>> {
    let num = |t: &str| -> Result<usize> {
        let t = t.trim();
        if t == "L" {
            return Ok(n_layers);
        }
        t.parse()
            .map_err(|_| Error::Config(format!("grid.stages: bad stage {t:?}")))
    };
    if let Some((a, b)) = v.split_once("..") {
        let (a, b) = (num(a)?, num(b)?);
        if a > b {
            return Err(Error::Config(format!("grid.stages: empty range {v:?}")));
        }
        Ok((a..=b).collect())
    } else {
        v.split(',').map(num).collect()
    }
}

fn parse_sparsities(v: &str) -> Result<Vec<f64>> {
    let num = |t: &str| -> Result<f64> {
        t.trim()
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| Error::Config(format!("grid.sparsities: bad value {t:?}")))
    };
    let parts: Vec<&str> = v.split(':').collect();
    match parts.as_slice() {
        [start, stop, step] => {
            let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
            if step <= 0.0 || stop < start {
                return Err(Error::Config(format!("grid.sparsities: bad range {v:?}")));
            }
            let n = ((stop - start) / step + 1e-9).floor() as usize;
            Ok((0..=n).map(|i| round9(start + i as f64 * step)).collect())
        }
        [_] => v.split(',').map(num).collect(),
        _ => Err(Error::Config(format!(
            "grid.sparsities: expected start:stop:step or a list, got {v:?}"
        ))),
    }
}

#[derive(Debug, Clone)]
pub struct GridOptions {
    pub eval: EvalOptions,
    pub aggregation: Aggregation,
    pub cross_layer: bool,
    pub seed: u64,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self {
            eval: EvalOptions::default(),
            aggregation: Aggregation::Mean,
            cross_layer: false,
            seed: 0,
        }
    }
}

/// Baseline record first, then one record per `s > 0` grid point in
/// `(stage, sparsity)` order, all related to the baseline.
pub fn run_grid(
    model: &Model,
    dataset: &[TaskExample],
    grid: &SearchGrid,
    opts: &GridOptions,
) -> Result<Vec<EvalRecord>> {
    if dataset.is_empty() {
        return Err(Error::Argument("dataset: must not be empty".into()));
    }
    let n_layers = model.config.n_encoder_layers;
    grid.validate(n_layers)?;
    let points = grid.points(opts.aggregation, opts.cross_layer, opts.seed);
    for p in &points {
        p.validate(n_layers)?;
    }
    let mut records = vec![evaluate(model, dataset, ConfigLabel::Baseline, &opts.eval)?];
    for p in points {
        log::info!("evaluating {}", ConfigLabel::Eas(p));
        records.push(evaluate(model, dataset, ConfigLabel::Eas(p), &opts.eval)?);
    }
    let (wer0, rtf0) = (records[0].wer, records[0].rtf());
    for r in &mut records {
        r.relate_to(wer0, rtf0)?;
    }
    Ok(records)
}

/// Indices of points `(wer, rtf)` not strictly dominated in both
/// coordinates, ordered by ascending rtf, then wer, then index.
pub fn pareto_front_indices(points: &[(f64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .1
            .total_cmp(&points[b].1)
            .then(points[a].0.total_cmp(&points[b].0))
            .then(a.cmp(&b))
    });
    let mut front = Vec::new();
    // Lowest wer among points with strictly smaller rtf than the current group.
    let mut best_before = f64::INFINITY;
    let mut i = 0;
    while i < order.len() {
        let rtf = points[order[i]].1;
        let mut j = i;
        let mut group_best = f64::INFINITY;
        while j < order.len() && points[order[j]].1 == rtf {
            let w = points[order[j]].0;
            if w <= best_before {
                front.push(order[j]);
            }
            group_best = group_best.min(w);
            j += 1;
        }
        best_before = best_before.min(group_best);
        i = j;
    }
    front
}

/// Records on the front, ordered by ascending rtf.
pub fn pareto_front(records: &[EvalRecord]) -> Vec<EvalRecord> {
    let pts: Vec<(f64, f64)> = records.iter().map(|r| (r.wer, r.rtf())).collect();
    pareto_front_indices(&pts)
        .into_iter()
        .map(|i| records[i].clone())
        .collect()
}

fn top3_order(a: &EvalRecord, b: &EvalRecord) -> std::cmp::Ordering {
    let (sa, pa) = a.config.sort_key();
    let (sb, pb) = b.config.sort_key();
    a.rtf()
        .total_cmp(&b.rtf())
        .then(a.wer.total_cmp(&b.wer))
        .then(sa.cmp(&sb))
        .then(pa.total_cmp(&pb))
}

/// Selections that depend on measured rtf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub rtf0: f64,
    pub front: Vec<EvalRecord>,
    pub admissible: Vec<EvalRecord>,
    pub top3: Vec<EvalRecord>,
    pub no_admissible_configuration: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoReport {
    pub baseline: EvalRecord,
    pub all_records: Vec<EvalRecord>,
    pub wer0: f64,
    pub max_admissible_wer: f64,
    #[serde(rename = "timing")]
    pub selection: Selection,
}

impl ParetoReport {
    pub fn front(&self) -> &[EvalRecord] {
        &self.selection.front
    }
    pub fn admissible(&self) -> &[EvalRecord] {
        &self.selection.admissible
    }
    pub fn top3(&self) -> &[EvalRecord] {
        &self.selection.top3
    }
}

/// Relate every record to `baseline`, compute the front, keep admissible
/// members and take the three fastest. Only `records` are candidates; pass
/// the baseline among them for it to compete (as `run_grid` output does).
pub fn select_constrained(records: &[EvalRecord], baseline: &EvalRecord) -> Result<ParetoReport> {
    if baseline.config != ConfigLabel::Baseline {
        return Err(Error::Argument(format!(
            "baseline record has config {}",
            baseline.config
        )));
    }
    let (wer0, rtf0) = (baseline.wer, baseline.rtf());
    let mut all: Vec<EvalRecord> = records.to_vec();
    for r in &mut all {
        r.relate_to(wer0, rtf0)?;
    }
    let mut base = baseline.clone();
    base.relate_to(wer0, rtf0)?;

    let front = pareto_front(&all);
    let admissible: Vec<EvalRecord> = front
        .iter()
        .filter(|r| is_admissible(r.accuracy_ratio))
        .cloned()
        .collect();
    let mut sorted = admissible.clone();
    sorted.sort_by(top3_order);
    sorted.truncate(3);
    Ok(ParetoReport {
        baseline: base,
        all_records: all,
        wer0,
        max_admissible_wer: max_admissible_wer(wer0),
        selection: Selection {
            rtf0,
            no_admissible_configuration: admissible.is_empty(),
            front,
            admissible,
            top3: sorted,
        },
    })
}

/// Table-1-style text: baseline row then the top three, WER in percent with
/// the accuracy ratio, RTF with the relative speedup.
pub fn format_table(report: &ParetoReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<12} {:<18} RTF", "config", "WER [%]");
    let _ = writeln!(
        out,
        "{:<12} {:<18} {:.3}",
        "Baseline",
        format!("{:.3}", 100.0 * report.baseline.wer),
        report.baseline.rtf()
    );
    for r in report.top3() {
        let _ = writeln!(
            out,
            "{:<12} {:<18} {:.3} ({:.3}x)",
            r.config.to_string(),
            format!("{:.3} ({:.3})", 100.0 * r.wer, r.accuracy_ratio),
            r.rtf(),
            r.timing.speedup
        );
    }
    if report.selection.no_admissible_configuration {
        out.push_str("no admissible configuration\n");
    }
    out
}

/// Scatter data for every record: one row per record with front and
/// admissibility flags.
pub fn scatter_csv(report: &ParetoReport) -> String {
    let same = |a: &EvalRecord, b: &EvalRecord| a.config == b.config;
    let mut out = String::from("config,stage,sparsity,wer,rtf,accuracy_ratio,speedup,on_front,admissible,top3_rank\n");
    for r in &report.all_records {
        let (stage, sparsity) = r.config.sort_key();
        let rank = report
            .top3()
            .iter()
            .position(|t| same(t, r))
            .map_or(String::new(), |p| (p + 1).to_string());
        let _ = writeln!(
            out,
            "\"{}\",{stage},{sparsity},{},{},{},{},{},{},{rank}",
            r.config,
            r.wer,
            r.rtf(),
            r.accuracy_ratio,
            r.timing.speedup,
            report.front().iter().any(|f| same(f, r)),
            report.admissible().iter().any(|f| same(f, r)),
        );
    }
    out
}

/// Accuracy-ratio spread over disjoint groups of one size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub size: usize,
    pub groups: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

/// Acceptance tolerance on the accuracy-ratio spread.
pub const STABILITY_TOLERANCE: f64 = 0.01;

/// Per-example `(baseline, eas)` scores. Groups of each size are contiguous
/// in dataset order, or in a seeded shuffle of it. Sizes larger than the
/// dataset are skipped with a warning.
pub fn stability_analysis(
    pairs: &[(CorpusWer, CorpusWer)],
    sizes: &[usize],
    shuffle_seed: Option<u64>,
) -> Result<Vec<StabilityRow>> {
    if sizes.contains(&0) {
        return Err(Error::Argument("group-sizes: must be positive".into()));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let mut rows = Vec::new();
    for &size in sizes {
        if size > pairs.len() {
            log::warn!("group size {size} exceeds {} examples, skipped", pairs.len());
            continue;
        }
        let groups = pairs.len() / size;
        let ratios = (0..groups)
            .map(|g| {
                let (mut base, mut eas) = (CorpusWer::default(), CorpusWer::default());
                for &i in &order[g * size..(g + 1) * size] {
                    base.merge(pairs[i].0);
                    eas.merge(pairs[i].1);
                }
                accuracy_ratio(eas.wer()?, base.wer()?)
            })
            .collect::<Result<Vec<f64>>>()?;
        // Shifted by the first group so equal ratios give an exact mean and zero spread.
        let pivot = ratios[0];
        let mean = pivot + ratios.iter().map(|r| r - pivot).sum::<f64>() / groups as f64;
        let var = ratios.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / groups as f64;
        rows.push(StabilityRow {
            size,
            groups,
            mean,
            std: var.sqrt(),
        });
    }
    Ok(rows)
}

/// Smallest analysed size whose spread is within `tolerance`.
pub fn smallest_stable_size(rows: &[StabilityRow], tolerance: f64) -> Option<usize> {
    rows.iter()
        .filter(|r| r.std <= tolerance + 1e-12)
        .map(|r| r.size)
        .min()
}

/// `size,groups,mean,std` CSV.
pub fn stability_csv(rows: &[StabilityRow]) -> String {
    let mut out = String::from("size,groups,mean,std\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.size, r.groups, r.mean, r.std);
    }
    out
}

/// Untimed per-example scores of the baseline and of `eas`.
pub fn correctness_pairs(
    model: &Model,
    dataset: &[TaskExample],
    eas: &EasConfig,
    budget: DecodeBudget,
    threads: usize,
) -> Result<Vec<(CorpusWer, CorpusWer)>> {
    let base = transcribe_dataset(model, dataset, None, budget, threads)?;
    let sparse = transcribe_dataset(model, dataset, Some(eas), budget, threads)?;
    Ok(base
        .into_iter()
        .zip(sparse)
        .map(|(b, s)| (b.score, s.score))
        .collect())
}

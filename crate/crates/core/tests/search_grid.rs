use eas_core::eval::{DecodeBudget, EvalOptions};
use eas_core::fixtures::{echo_dataset, toy_model, WeightsKind};
use eas_core::metrics::ConfigLabel;
use eas_core::model::Preset;
use eas_core::search::{run_grid, select_constrained, GridOptions, SearchGrid};

fn untimed() -> GridOptions {
    GridOptions {
        eval: EvalOptions {
            budget: DecodeBudget::PerReference,
            threads: 2,
            timing: false,
            repeats: 1,
        },
        ..GridOptions::default()
    }
}

#[test]
fn zero_sparsity_grid_is_just_the_baseline() {
    let model = toy_model(Preset::Tiny, WeightsKind::Echo, 1).unwrap();
    let data = echo_dataset(&model, 2, 6).unwrap();
    let grid = SearchGrid {
        stages: vec![1],
        sparsities: vec![0.0],
    };
    let records = run_grid(&model, &data, &grid, &untimed()).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].config, ConfigLabel::Baseline);
}

#[test]
fn full_grid_counts_and_determinism() {
    let model = toy_model(Preset::Tiny, WeightsKind::Echo, 1).unwrap();
    let data = echo_dataset(&model, 2, 12).unwrap();
    let grid = SearchGrid::full(4);
    let a = run_grid(&model, &data, &grid, &untimed()).unwrap();
    // Four stages times nine non-zero sparsities, plus the shared baseline.
    assert_eq!(a.len(), 37);
    let b = run_grid(&model, &data, &grid, &untimed()).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.config, y.config);
        assert_eq!(x.wer.to_bits(), y.wer.to_bits());
        assert_eq!(x.edits, y.edits);
    }
    let keys: Vec<_> = a[1..].iter().map(|r| r.config.sort_key()).collect();
    assert!(keys.windows(2).all(|w| w[0] < w[1]));
    // Identical worker counts do not matter for WER.
    let mut one = untimed();
    one.eval.threads = 1;
    let c = run_grid(&model, &data, &grid, &one).unwrap();
    assert!(a.iter().zip(&c).all(|(x, y)| x.wer == y.wer));
}

#[test]
fn timed_grid_produces_a_report() {
    let model = toy_model(Preset::Tiny, WeightsKind::Echo, 1).unwrap();
    let data = echo_dataset(&model, 2, 4).unwrap();
    let grid = SearchGrid::parse("stages=1,4;sparsities=0.5,0.9", 4).unwrap();
    let mut opts = untimed();
    opts.eval.timing = true;
    let records = run_grid(&model, &data, &grid, &opts).unwrap();
    assert_eq!(records.len(), 5);
    assert!(records.iter().all(|r| r.rtf() > 0.0 && r.failures.is_empty()));
    let report = select_constrained(&records, &records[0]).unwrap();
    assert!(!report.top3().is_empty());
    assert!(report.top3().len() <= 3);
    for r in report.admissible() {
        assert!(report.front().contains(r));
        assert!(r.accuracy_ratio >= 0.99);
    }
    let best = report.top3()[0].rtf();
    assert!(report.admissible().iter().all(|r| r.rtf() >= best));
}

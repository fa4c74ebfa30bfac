mod common;

use common::*;
use widen_core::analysis::{analyze, write_analysis, AnalysisConfig, Tier, TierScope};
use widen_core::engine::{MergeRecipe, Method};
use widen_core::widen::Variant;

fn fixture(dir: &std::path::Path) -> MergeRecipe {
    let (b, ms) = fixture_set(dir, 31, 2, 10, 16, 0.05);
    MergeRecipe::new(b, ms, Method::Widen, dir.join("unused.safetensors"))
}

#[test]
fn same_variant_gives_diagonal_transitions() {
    let dir = tempfile::tempdir().unwrap();
    let r = fixture(dir.path());
    let config = AnalysisConfig { from: Variant::Full, to: Variant::Full, ..Default::default() };
    let report = analyze(&r, &config).unwrap();
    assert_eq!(report.transitions.len(), 2);
    for tr in &report.transitions {
        for from in Tier::ALL {
            for to in Tier::ALL {
                if from != to {
                    assert_eq!(tr.fraction(from, to), 0.0);
                }
            }
        }
        assert!((tr.fractions().iter().flatten().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn histogram_counts_and_deciles_hold_their_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let r = fixture(dir.path());
    let config = AnalysisConfig { bins: 20, ..Default::default() };
    let report = analyze(&r, &config).unwrap();
    assert!(!report.tensors.is_empty());
    for hist in [&report.histogram_from, &report.histogram_to] {
        assert_eq!(hist.edges.len(), 21);
        for n in 0..2 {
            assert_eq!(hist.total(n), report.score_entries);
        }
    }
    for d in &report.deciles {
        assert_eq!(d.len(), 11);
        assert!(d.windows(2).all(|w| w[0] <= w[1]));
    }

    let out = dir.path().join("analysis");
    let written = write_analysis(&report, &out).unwrap();
    assert_eq!(written.len(), 4);
    let deciles = std::fs::read_to_string(out.join("deciles.csv")).unwrap();
    assert_eq!(deciles.lines().count(), 1 + 2 * 11);
}

#[test]
fn per_tensor_scope_aggregates_by_column_count() {
    let dir = tempfile::tempdir().unwrap();
    let r = fixture(dir.path());
    let config = AnalysisConfig { scope: TierScope::Tensor, ..Default::default() };
    let report = analyze(&r, &config).unwrap();
    let per_tensor = report.tensor_transitions.as_ref().unwrap();
    for n in 0..2 {
        let columns: u64 = per_tensor.iter().map(|t| t.columns as u64).sum();
        assert_eq!(report.transitions[n].total(), columns);
        let summed: u64 = per_tensor.iter().map(|t| t.transitions[n].total()).sum();
        assert_eq!(summed, columns);
    }
}

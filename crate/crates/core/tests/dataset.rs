use std::collections::BTreeSet;

use proptest::prelude::*;
use synicl::dataset::{ingest_reader, make_fewshot_split, make_optimization_split, SplitBundle, SplitMode};
use synicl::synthgen::{sample_dataset, sample_world_with, WorldSpec};

fn synthetic(seed: u64, drugs: usize, cells: usize, count: usize) -> synicl::dataset::Dataset {
    let world = sample_world_with(&WorldSpec::new(drugs, cells, 3), seed).unwrap();
    sample_dataset(&world, count, seed).unwrap()
}

fn covered(split: &SplitBundle) -> BTreeSet<usize> {
    split
        .train
        .iter()
        .chain(&split.context_bank)
        .chain(&split.validation)
        .chain(&split.test)
        .copied()
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fewshot_split_hygiene(seed in 0u64..10_000, m in 1usize..5, n in 1usize..8, cell in any::<bool>()) {
        let data = synthetic(seed, 15, 6, 400);
        let mode = if cell { SplitMode::UnknownCell } else { SplitMode::UnknownDrug };
        let split = make_fewshot_split(&data, m, n, mode, seed).unwrap();
        split.validate(&data).unwrap();
        prop_assert_eq!(split.held_out.len(), m);
        prop_assert_eq!(split.context_bank.len(), m * n);
        prop_assert_eq!(covered(&split).len(), data.tuples.len());
        for &i in &split.train {
            prop_assert!(!data.tuples[i].mentions_any(&split.held_out));
        }
        for &i in split.context_bank.iter().chain(&split.test) {
            prop_assert!(split.designated(&data.tuples[i]).is_some());
        }
        // The same seed reproduces the split exactly.
        let again = make_fewshot_split(&data, m, n, mode, seed).unwrap();
        prop_assert_eq!(split.to_json().unwrap(), again.to_json().unwrap());
    }

    #[test]
    fn optimization_split_hygiene(seed in 0u64..10_000, m in 1usize..5) {
        let data = synthetic(seed, 15, 4, 300);
        let split = make_optimization_split(&data, m, SplitMode::UnknownDrug, seed).unwrap();
        split.validate(&data).unwrap();
        prop_assert_eq!(covered(&split).len(), data.tuples.len());
        let sizes = [split.context_bank.len(), split.validation.len(), split.test.len()];
        let max = *sizes.iter().max().unwrap();
        let min = *sizes.iter().min().unwrap();
        prop_assert!(max - min <= 1);
    }
}

#[test]
fn split_roundtrips_through_json() {
    let data = synthetic(1, 12, 3, 200);
    let split = make_fewshot_split(&data, 2, 3, SplitMode::UnknownDrug, 4).unwrap();
    let back = SplitBundle::from_json(&split.to_json().unwrap()).unwrap();
    assert_eq!(split, back);
}

#[test]
fn synthetic_csv_roundtrip_keeps_tuples() {
    let data = synthetic(2, 8, 2, 50);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    data.write_csv(&path).unwrap();
    let back = ingest_reader(std::fs::File::open(&path).unwrap(), 0.0).unwrap();
    assert_eq!(back.tuples.len(), data.tuples.len());
    for (a, b) in data.tuples.iter().zip(&back.tuples) {
        assert_eq!(a.label, b.label);
        assert_eq!(data.vocab.drug_name(a.drug_a), back.vocab.drug_name(b.drug_a));
        assert_eq!(data.vocab.cell_name(a.cell), back.vocab.cell_name(b.cell));
    }
}

use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use synicl::context::Strategy;
use synicl::dataset::{make_fewshot_split, DrugId, EntityVocab, SplitMode};
use synicl::inverse::{BankSource, CandidatePool, DrugEmbeddingBank, QuerySet, RankConfig, rank_curve};
use synicl::model::{Model, ModelConfig};
use synicl::rng;
use synicl::synthgen::{sample_dataset, sample_world_with, WorldSpec};
use synicl::Error;

fn random_bank(seed: u64, drugs: usize, dim: usize) -> DrugEmbeddingBank {
    let mut r = rng::stream(seed, "bank");
    let rows = (0..drugs)
        .map(|_| vec![(0..dim).map(|_| StandardNormal.sample(&mut r)).collect()])
        .collect();
    DrugEmbeddingBank::from_rows(rows, BankSource::File).unwrap()
}

fn all(n: usize) -> Vec<DrugId> {
    (0..n as u32).map(DrugId).collect()
}

#[test]
fn bank_row_as_prediction_ranks_first() {
    let bank = random_bank(1, 30, 5);
    for d in 0..30 {
        let v = bank.primary(DrugId(d)).unwrap().to_vec();
        assert_eq!(bank.retrieve(&v, &all(30)).unwrap().rank_of(DrugId(d)), Some(1));
    }
}

#[test]
fn orthogonal_prediction_falls_back_to_drug_order() {
    let rows = (0..6).map(|i| vec![vec![1.0 + i as f64, 0.0, 0.0]]).collect();
    let bank = DrugEmbeddingBank::from_rows(rows, BankSource::File).unwrap();
    let r = bank.retrieve(&[0.0, 2.0, -1.0], &all(6)).unwrap();
    let order: Vec<u32> = r.order.iter().map(|(d, _)| d.0).collect();
    assert_eq!(order, vec![0, 1, 2, 3, 4, 5]);
    let zero = bank.retrieve(&[0.0; 3], &all(6)).unwrap();
    assert_eq!(zero.rank_of(DrugId(5)), Some(6));
}

#[test]
fn random_predictions_have_middle_expected_rank() {
    let v = 40;
    let bank = random_bank(2, v, 6);
    let mut r = rng::stream(3, "mc");
    let trials = 10_000;
    let total: usize = (0..trials)
        .map(|_| {
            let pred: Vec<f64> = (0..6).map(|_| StandardNormal.sample(&mut r)).collect();
            let truth = DrugId(r.random_range(0..v as u32));
            bank.retrieve(&pred, &all(v)).unwrap().rank_of(truth).unwrap()
        })
        .sum();
    let mean = total as f64 / trials as f64;
    // Ranks are uniform on 1..=V with standard deviation ~11.5; 4 standard
    // errors is ~0.46.
    assert!((mean - (v as f64 + 1.0) / 2.0).abs() < 0.5, "{mean}");
}

#[test]
fn augmented_rows_score_by_best_match() {
    let rows = vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0], vec![0.9, 0.1]]];
    let bank = DrugEmbeddingBank::from_rows(rows, BankSource::File).unwrap();
    let r = bank.retrieve(&[0.8, 0.2], &all(2)).unwrap();
    assert_eq!(r.rank_of(DrugId(1)), Some(1));
    assert_eq!(bank.primary(DrugId(1)).unwrap(), &[0.0, 1.0]);
}

#[test]
fn bank_csv_roundtrip_and_missing_drug() {
    let vocab = EntityVocab::synthetic(4, 1);
    let bank = random_bank(4, 4, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bank.csv");
    bank.write_csv(&path, &vocab).unwrap();
    let back = DrugEmbeddingBank::read_csv(&path, &vocab).unwrap();
    for d in 0..4 {
        let a = bank.primary(DrugId(d)).unwrap();
        let b = back.primary(DrugId(d)).unwrap();
        assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-15));
    }
    let text = std::fs::read_to_string(&path).unwrap();
    let truncated: String = text.lines().take(4).map(|l| format!("{l}\n")).collect();
    std::fs::write(&path, truncated).unwrap();
    assert!(matches!(DrugEmbeddingBank::read_csv(&path, &vocab), Err(Error::Config(_))));
    std::fs::write(&path, "drug,dim_0\nnot_a_drug,1.0\n").unwrap();
    assert!(matches!(DrugEmbeddingBank::read_csv(&path, &vocab), Err(Error::Value { line: 2, .. })));
}

#[test]
fn zero_rows_are_rejected() {
    let err = DrugEmbeddingBank::from_rows(vec![vec![vec![0.0, 0.0]]], BankSource::File).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn rank_curve_shape_and_consistency() {
    let world = sample_world_with(&WorldSpec::new(16, 3, 3), 5).unwrap();
    let data = sample_dataset(&world, 300, 5).unwrap();
    let split = make_fewshot_split(&data, 3, 4, SplitMode::UnknownDrug, 5).unwrap();
    let bank = DrugEmbeddingBank::from_world(&world).unwrap();
    let cfg = ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        max_ctx_examples: 4,
        num_drugs: 16,
        num_cells: 3,
        retrieval_dim: 3,
    };
    let model = Model::<f64>::init(cfg, 5).unwrap();
    for queries in [QuerySet::HeldOut, QuerySet::Seen] {
        let rc = RankConfig {
            n_ctx_max: 4,
            strategy: Strategy::UnknownFirst,
            pool: CandidatePool::All,
            queries,
            max_queries: Some(25),
            seed: 1,
        };
        let curve = rank_curve(&model, &data, &split, &bank, &rc).unwrap();
        assert_eq!(curve.mean_rank.len(), 5);
        assert_eq!(curve.per_query.len(), 25);
        for k in 0..5 {
            let mean = curve.per_query.iter().map(|q| q.ranks[k] as f64).sum::<f64>() / 25.0;
            assert!((curve.mean_rank[k] - mean).abs() < 1e-12);
        }
        assert!(curve.per_query.iter().flat_map(|q| &q.ranks).all(|&r| (1..=16).contains(&r)));
        assert_eq!(curve, rank_curve(&model, &data, &split, &bank, &rc).unwrap());
    }
    let held = CandidatePool::HeldOut.drugs(16, &split);
    assert_eq!(held.len(), 3);
    assert_eq!(CandidatePool::Seen.drugs(16, &split).len(), 13);
    // A single query's curve is its own trajectory.
    let q = split.test[0];
    let rc = RankConfig {
        n_ctx_max: 4,
        strategy: Strategy::UnknownFirst,
        pool: CandidatePool::All,
        queries: QuerySet::HeldOut,
        max_queries: Some(1),
        seed: 1,
    };
    let one = rank_curve(&model, &data, &split, &bank, &rc).unwrap();
    assert_eq!(one.per_query[0].item, q);
    let as_f64: Vec<f64> = one.per_query[0].ranks.iter().map(|&r| r as f64).collect();
    assert_eq!(one.mean_rank, as_f64);
}

proptest! {
    #[test]
    fn cosine_ranking_is_scale_invariant(seed in 0u64..1000, scale in 1e-3f64..1e3) {
        let bank = random_bank(seed, 25, 4);
        let mut r = rng::stream(seed, "scale");
        let pred: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut r)).collect();
        let scaled: Vec<f64> = pred.iter().map(|x| x * scale).collect();
        let a: Vec<DrugId> = bank.retrieve(&pred, &all(25)).unwrap().order.iter().map(|x| x.0).collect();
        let b: Vec<DrugId> = bank.retrieve(&scaled, &all(25)).unwrap().order.iter().map(|x| x.0).collect();
        prop_assert_eq!(a, b);
    }
}

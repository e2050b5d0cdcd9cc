//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! Runs without the libtest harness so the report lines are always shown.
//! `SYNICL_ACCEPTANCE=1,2,8` restricts the run to the listed criteria.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use synicl::context::{mask_and_assemble, select_context, ContextGraph, Masking, Query, Strategy};
use synicl::ctxopt::{best_of_budget_random, error_reduction, mean_test_auc, run_ga, GaConfig, Problem};
use synicl::dataset::{
    make_fewshot_split, make_optimization_split, Dataset, DrugId, Entity, SplitBundle, SplitMode, SynergyTuple, Token,
};
use synicl::inverse::{BankSource, CandidatePool, DrugEmbeddingBank, QuerySet, RankConfig, rank_curve};
use synicl::metrics::{mean_rank, pr_auc, roc_auc, thresholded};
use synicl::model::checkpoint::Checkpoint;
use synicl::model::grad::{gradient, Objective, Sample};
use synicl::model::loss::loss_retrieval;
use synicl::model::{Model, ModelConfig};
use synicl::rng;
use synicl::synthgen::{sample_dataset, sample_world_with, LatentWorld, WorldSpec};
use synicl::train::{evaluate, train, EvalConfig, TrainConfig};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const DESK_TUPLES: usize = 4000;
const HELD_OUT: usize = 10;
const N_CTX: usize = 20;
const FEWSHOT_EPOCHS: usize = 12;
const GA_EPOCHS: usize = 8;
const RETRIEVAL_EPOCHS: usize = 6;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn desk(seed: u64) -> (LatentWorld, Dataset) {
    let world = sample_world_with(&WorldSpec::desk(), seed).expect("world");
    let data = sample_dataset(&world, DESK_TUPLES, seed).expect("dataset");
    (world, data)
}

fn desk_model(data: &Dataset, rdim: usize, seed: u64) -> Model<f32> {
    Model::init(ModelConfig::desk(&data.vocab, rdim), seed).expect("model")
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// Criterion 1

fn small_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        max_ctx_examples: 4,
        num_drugs: 9,
        num_cells: 3,
        retrieval_dim: 5,
    }
}

fn gradient_sample(seed: u64, n_ctx: usize) -> Sample<f64> {
    let mut g = rng::stream(seed, "acceptance.sample");
    let h = 4u32;
    let mut draw = |with: Option<u32>| {
        let a = with.unwrap_or_else(|| g.random_range(0..9));
        let mut b = g.random_range(0..9);
        while b == a {
            b = g.random_range(0..9);
        }
        SynergyTuple::new(a, b, g.random_range(0..3), g.random())
    };
    let ctx: Vec<SynergyTuple> = (0..n_ctx).map(|i| draw((i % 2 == 0).then_some(h))).collect();
    let query = draw(Some(h));
    let refs: Vec<&SynergyTuple> = ctx.iter().collect();
    let prompt = mask_and_assemble(&refs, &query, &Masking::single(Entity::Drug(DrugId(h))));
    let labels = ctx.iter().chain([&query]).map(|t| t.label).collect();
    let v: Vec<f64> = (0..5).map(|_| g.random_range(-1.0..1.0)).collect();
    let targets = (0..=n_ctx)
        .map(|j| if prompt.unknown_position(j).is_some() { v.clone() } else { vec![0.0; 5] })
        .collect();
    Sample {
        prompt,
        labels,
        targets: Some(targets),
    }
}

fn criterion_gradients() -> Outcome {
    let mut model = Model::<f64>::init(small_config(), 11).unwrap();
    let mut g = rng::stream(11, "acceptance.perturb");
    model.params.iter_mut().for_each(|p| *p += g.random_range(-0.3..0.3));
    let batch: Vec<Sample<f64>> = (0..3).map(|i| gradient_sample(100 + i, 2 + i as usize)).collect();
    let mut details = Vec::new();
    let mut pass = true;
    for objective in [Objective::Synergy, Objective::Retrieval] {
        let analytic = gradient(&model, &batch, objective).unwrap().grads;
        let mut worst = 0.0f64;
        let mut checked = 0;
        let mut pick = rng::stream(5, "acceptance.coords");
        let h = 1e-4;
        while checked < 120 {
            let k = pick.random_range(0..model.num_params());
            if analytic[k].abs() < 1e-10 {
                continue;
            }
            let orig = model.params[k];
            model.params[k] = orig + h;
            let up = gradient(&model, &batch, objective).unwrap().loss;
            model.params[k] = orig - h;
            let down = gradient(&model, &batch, objective).unwrap().loss;
            model.params[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max((numeric - analytic[k]).abs() / numeric.abs().max(analytic[k].abs()));
            checked += 1;
        }
        pass &= worst < 1e-4;
        details.push(format!("{objective:?}: {checked} coords, worst rel err {worst:.2e}"));
    }
    outcome(pass, details.join("; "))
}

// Criterion 2

fn auc_oracle(s: &[f64], y: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if y[i] && !y[j] {
                den += 1.0;
                num += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
            }
        }
    }
    num / den
}

fn ap_oracle(s: &[f64], y: &[bool]) -> f64 {
    let mut ts = s.to_vec();
    ts.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ts.dedup();
    let p = y.iter().filter(|&&v| v).count() as f64;
    let (mut prev, mut area) = (0.0, 0.0);
    for t in ts {
        let tp = s.iter().zip(y).filter(|(&v, &l)| v >= t && l).count() as f64;
        let pp = s.iter().filter(|&&v| v >= t).count() as f64;
        area += (tp / p - prev) * (tp / pp);
        prev = tp / p;
    }
    area
}

fn criterion_metrics() -> Outcome {
    let mut worst = 0.0f64;
    let mut count_ok = true;
    for seed in 0..1000u64 {
        let mut r = rng::stream(seed, "acceptance.metrics");
        let n = r.random_range(2..60);
        let levels = r.random_range(1..12) as f64;
        let s: Vec<f64> = (0..n).map(|_| (r.random::<f64>() * levels).floor() / levels).collect();
        let mut y: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        y[0] = true;
        y[1] = false;
        worst = worst.max((roc_auc(&s, &y).unwrap() - auc_oracle(&s, &y)).abs());
        worst = worst.max((pr_auc(&s, &y).unwrap() - ap_oracle(&s, &y)).abs());
        let t = r.random::<f64>();
        let m = thresholded(&s, &y, t).unwrap();
        let tp = s.iter().zip(&y).filter(|(&v, &l)| v >= t && l).count() as u64;
        let fp = s.iter().zip(&y).filter(|(&v, &l)| v >= t && !l).count() as u64;
        count_ok &= m.confusion.tp == tp && m.confusion.fp == fp && m.confusion.total() == n as u64;
        let tn = s.iter().zip(&y).filter(|(&v, &l)| v < t && !l).count() as u64;
        worst = worst.max((m.accuracy - (tp + tn) as f64 / n as f64).abs());
        let ranks: Vec<usize> = (0..r.random_range(1..30)).map(|_| r.random_range(1..100)).collect();
        let expect = ranks.iter().sum::<usize>() as f64 / ranks.len() as f64;
        worst = worst.max((mean_rank(&ranks).unwrap() - expect).abs());
    }
    let hand = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
    outcome(
        worst < 1e-12 && count_ok && hand == 0.75,
        format!("1000 instances, worst deviation {worst:.1e}, hand case {hand}"),
    )
}

// Criterion 3 + 4

fn criteria_fewshot() -> (Outcome, Outcome) {
    let (mut zero, mut few, mut rand_ctx) = (Vec::new(), Vec::new(), Vec::new());
    for seed in SEEDS {
        let (_, data) = desk(seed);
        let split = make_fewshot_split(&data, HELD_OUT, N_CTX, SplitMode::UnknownDrug, seed).unwrap();
        let mut model = desk_model(&data, 4, seed);
        let cfg = TrainConfig {
            epochs: FEWSHOT_EPOCHS,
            ..TrainConfig::desk(SplitMode::UnknownDrug, seed)
        };
        train(&mut model, &data, &split, &cfg, None, |_| {}).unwrap();
        let auc = |strategy, n_ctx| {
            evaluate(&model, &data, &split, &EvalConfig { strategy, n_ctx, seed })
                .unwrap()
                .report
                .roc_auc
                .unwrap()
        };
        zero.push(auc(Strategy::UnknownFirst, 0));
        few.push(auc(Strategy::UnknownFirst, N_CTX));
        rand_ctx.push(auc(Strategy::Random, N_CTX));
        println!(
            "    seed {seed}: zero-shot {:.4}  few-shot UF {:.4}  few-shot Random {:.4}",
            zero.last().unwrap(),
            few.last().unwrap(),
            rand_ctx.last().unwrap()
        );
    }
    let (z, f, r) = (mean(&zero), mean(&few), mean(&rand_ctx));
    let gain = Outcome {
        pass: f - z >= 0.02 && z > 0.55 && f > 0.55,
        detail: format!("mean zero-shot {z:.4}, few-shot {f:.4}, gain {:+.2} points", 100.0 * (f - z)),
    };
    let order = Outcome {
        pass: f > r,
        detail: format!("mean few-shot UnknownFirst {f:.4} vs Random {r:.4} (per seed UF {}, Random {})", fmt(&few), fmt(&rand_ctx)),
    };
    (gain, order)
}

// Criterion 5 + 6

fn criteria_ga() -> (Outcome, Outcome) {
    let (mut wins, mut monotone) = (0, true);
    let (mut ga_test, mut er_test, mut lines) = (Vec::new(), Vec::new(), Vec::new());
    for seed in SEEDS {
        let (_, data) = desk(seed);
        let split = make_optimization_split(&data, HELD_OUT, SplitMode::UnknownDrug, seed).unwrap();
        let mut model = desk_model(&data, 4, seed);
        let cfg = TrainConfig {
            epochs: GA_EPOCHS,
            ..TrainConfig::desk(SplitMode::UnknownDrug, seed)
        };
        train(&mut model, &data, &split, &cfg, None, |_| {}).unwrap();
        let p = Problem::new(&model, &data, &split, N_CTX).unwrap();
        let ga = run_ga(&p, &GaConfig::default(), seed).unwrap();
        monotone &= ga.trace.windows(2).all(|w| w[1].best_so_far >= w[0].best_so_far)
            && ga.best_fitness >= ga.initial_best;
        let rs = best_of_budget_random(&p, ga.evaluations, seed).unwrap();
        let er = error_reduction(&p, ga.evaluations, seed).unwrap();
        let g = p.auc(&ga.best, &split.test).unwrap();
        let rand_mean = mean_test_auc(&p, &rs.samples).unwrap();
        let e = p.auc(&er.chromosome, &split.test).unwrap();
        let won = ga.best_fitness >= rs.max_fitness && g > rand_mean;
        wins += usize::from(won);
        ga_test.push(g);
        er_test.push(e);
        let line = format!(
            "    seed {seed}: {} evals; val GA {:.4} vs random max {:.4}; test GA {g:.4} vs random mean {rand_mean:.4}; error-reduction test {e:.4}",
            ga.evaluations, ga.best_fitness, rs.max_fitness
        );
        println!("{line}");
        lines.push(line);
    }
    let uplift = Outcome {
        pass: wins >= 4 && monotone,
        detail: format!("GA beat the equal-budget random baseline on {wins}/5 seeds; running best monotone: {monotone}"),
    };
    let (g, e) = (mean(&ga_test), mean(&er_test));
    let er = Outcome {
        pass: e <= g,
        detail: format!("mean test error-reduction {e:.4} vs GA {g:.4} (per seed ER {}, GA {})", fmt(&er_test), fmt(&ga_test)),
    };
    (uplift, er)
}

// Criterion 7

fn criterion_retrieval() -> Outcome {
    let mut held = [0.0; N_CTX + 1];
    let mut seen = [0.0; N_CTX + 1];
    for seed in SEEDS {
        let (world, data) = desk(seed);
        let split = make_fewshot_split(&data, HELD_OUT, N_CTX, SplitMode::UnknownDrug, seed).unwrap();
        let bank = DrugEmbeddingBank::from_world(&world).unwrap();
        let mut model = desk_model(&data, bank.dim(), seed);
        let cfg = TrainConfig {
            epochs: RETRIEVAL_EPOCHS,
            objective: Objective::Retrieval,
            ..TrainConfig::desk(SplitMode::UnknownDrug, seed)
        };
        train(&mut model, &data, &split, &cfg, Some(&bank), |_| {}).unwrap();
        let curve = |queries| {
            let rc = RankConfig {
                n_ctx_max: N_CTX,
                strategy: Strategy::UnknownFirst,
                pool: CandidatePool::All,
                queries,
                max_queries: Some(400),
                seed,
            };
            rank_curve(&model, &data, &split, &bank, &rc).unwrap().mean_rank
        };
        let h = curve(QuerySet::HeldOut);
        let s = curve(QuerySet::Seen);
        println!(
            "    seed {seed}: held-out rank {:.2} -> {:.2}, seen rank {:.2} -> {:.2}",
            h[0], h[N_CTX], s[0], s[N_CTX]
        );
        for i in 0..=N_CTX {
            held[i] += h[i] / SEEDS.len() as f64;
            seen[i] += s[i] / SEEDS.len() as f64;
        }
    }
    let decreasing = held[N_CTX] < held[0] && seen[N_CTX] < seen[0];
    let gap = (0..=N_CTX).all(|i| seen[i] < held[i]);
    outcome(
        decreasing && gap,
        format!(
            "mean rank held-out {:.2} -> {:.2}, seen {:.2} -> {:.2}; seen below held-out at every context size: {gap}",
            held[0], held[N_CTX], seen[0], seen[N_CTX]
        ),
    )
}

// Criterion 8

fn criterion_invariants() -> Outcome {
    let mut failures: Vec<&str> = Vec::new();
    let mut check = |ok: bool, name: &'static str| {
        if !ok {
            failures.push(name);
        }
    };

    // Causality: editing a later token never changes earlier outputs.
    let model = Model::<f64>::init(small_config(), 3).unwrap();
    for seed in 0..20 {
        let s = gradient_sample(seed, 4);
        let base = model.forward(&s.prompt).unwrap();
        let mut edited = s.prompt.clone();
        let k = 4 * 2 + 3;
        edited.tokens[k].1 = Token::Label(!matches!(edited.tokens[k].1, Token::Label(true)));
        let after = model.forward(&edited).unwrap();
        check(base.logits[..3] == after.logits[..3] && base.retrieval[..3] == after.retrieval[..3], "causality");
    }

    // Masking totality and prompt length.
    let mut r = rng::stream(8, "acceptance.masking");
    for _ in 0..500 {
        let n = r.random_range(0..21);
        let held: BTreeSet<Entity> = (0..r.random_range(1..4)).map(|_| Entity::Drug(DrugId(r.random_range(0..10)))).collect();
        let mut tup = || SynergyTuple::new(r.random_range(0..10), r.random_range(0..10), r.random_range(0..3), r.random());
        let ctx: Vec<SynergyTuple> = (0..n).map(|_| tup()).collect();
        let q = tup();
        let refs: Vec<&SynergyTuple> = ctx.iter().collect();
        let h = *held.iter().next().unwrap();
        let p = mask_and_assemble(&refs, &q, &Masking::with_held_out(h, &held));
        check(held.iter().all(|&e| !p.contains_entity(e)), "masking totality");
        check(p.len() == 4 * n + 3, "prompt length");
    }

    // Graph adjacency against brute force.
    for seed in 0..20 {
        let mut r = rng::stream(seed, "acceptance.graph");
        let pool: Vec<SynergyTuple> = (0..r.random_range(1..=200))
            .map(|_| SynergyTuple::new(r.random_range(0..15), r.random_range(0..15), r.random_range(0..4), true))
            .collect();
        let g = ContextGraph::build(pool.clone());
        for i in 0..pool.len() {
            let (a, b) = (&pool[i], &pool);
            let drug: Vec<u32> = (0..b.len())
                .filter(|&j| j != i && [a.drug_a, a.drug_b].iter().any(|d| *d == b[j].drug_a || *d == b[j].drug_b))
                .map(|j| j as u32)
                .collect();
            let cell: Vec<u32> = (0..b.len()).filter(|&j| j != i && a.cell == b[j].cell).map(|j| j as u32).collect();
            check(g.drug_neighbors(i) == drug.as_slice() && g.cell_neighbors(i) == cell.as_slice(), "graph adjacency");
        }
        let q = &pool[0];
        let picks = select_context(&g, Query { tuple: q, node: Some(0), unknown: Entity::Drug(q.drug_a) }, 10, Strategy::UnknownFirst, &mut r);
        check(!picks.contains(&0), "query excluded from its own context");
    }

    // Split hygiene.
    for seed in 0..10 {
        let world = sample_world_with(&WorldSpec::new(20, 4, 3), seed).unwrap();
        let data = sample_dataset(&world, 600, seed).unwrap();
        let few = make_fewshot_split(&data, 3, 5, SplitMode::UnknownDrug, seed).unwrap();
        let cell = make_fewshot_split(&data, 1, 5, SplitMode::UnknownCell, seed).unwrap();
        let opt = make_optimization_split(&data, 3, SplitMode::UnknownDrug, seed).unwrap();
        for s in [&few, &cell, &opt] {
            check(s.validate(&data).is_ok(), "split hygiene");
            let total = s.train.len() + s.context_bank.len() + s.validation.len() + s.test.len();
            check(total == data.tuples.len(), "split coverage");
        }
        check(few.context_bank.len() == 15, "bank size");
    }

    // Contrastive loss of a single row is zero.
    for seed in 0..20 {
        let mut r = rng::stream(seed, "acceptance.contrastive");
        let p = vec![(0..6).map(|_| StandardNormal.sample(&mut r)).collect::<Vec<f64>>()];
        let t = vec![(0..6).map(|_| StandardNormal.sample(&mut r)).collect::<Vec<f64>>()];
        check(loss_retrieval(&p, &t, r.random_range(-2.0..3.0)).unwrap().loss == 0.0, "b=1 contrastive loss");
    }

    // Cosine ranking is invariant to positive scaling.
    for seed in 0..50 {
        let mut r = rng::stream(seed, "acceptance.cosine");
        let rows = (0..30).map(|_| vec![(0..5).map(|_| StandardNormal.sample(&mut r)).collect()]).collect();
        let bank = DrugEmbeddingBank::from_rows(rows, BankSource::File).unwrap();
        let pool: Vec<DrugId> = (0..30).map(DrugId).collect();
        let pred: Vec<f64> = (0..5).map(|_| StandardNormal.sample(&mut r)).collect();
        let scale = 10f64.powf(r.random_range(-3.0..3.0));
        let scaled: Vec<f64> = pred.iter().map(|x| x * scale).collect();
        let a: Vec<DrugId> = bank.retrieve(&pred, &pool).unwrap().order.iter().map(|x| x.0).collect();
        let b: Vec<DrugId> = bank.retrieve(&scaled, &pool).unwrap().order.iter().map(|x| x.0).collect();
        check(a == b, "cosine scale invariance");
    }

    // Byte-identical reruns.
    let run = || {
        let world = sample_world_with(&WorldSpec::new(16, 3, 3), 21).unwrap();
        let data = sample_dataset(&world, 300, 21).unwrap();
        let split: SplitBundle = make_fewshot_split(&data, 3, 4, SplitMode::UnknownDrug, 21).unwrap();
        let cfg = ModelConfig {
            max_ctx_examples: 4,
            num_drugs: 16,
            num_cells: 3,
            ..small_config()
        };
        let mut model = Model::<f32>::init(cfg, 21).unwrap();
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 16,
            n_ctx: 4,
            ..TrainConfig::desk(SplitMode::UnknownDrug, 21)
        };
        train(&mut model, &data, &split, &tc, None, |_| {}).unwrap();
        let ck = serde_json::to_vec(&Checkpoint::from_model(&model, &data.vocab, 21)).unwrap();
        (split.to_json().unwrap(), ck)
    };
    check(run() == run(), "byte-identical reruns");

    failures.dedup();
    let pass = failures.is_empty();
    outcome(
        pass,
        if pass {
            "causality, masking, prompt length, graph, splits, b=1 loss, cosine scaling, reruns".into()
        } else {
            format!("failed: {}", failures.join(", "))
        },
    )
}

// Runner

fn main() {
    let selected: Option<BTreeSet<u32>> = std::env::var("SYNICL_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |ids: &[u32]| selected.as_ref().is_none_or(|s| ids.iter().any(|i| s.contains(i)));
    let mut results: Vec<(u32, &str, Duration, Outcome)> = Vec::new();
    let mut timed = |ids: &[u32], names: &[&'static str], f: &mut dyn FnMut() -> Vec<Outcome>| {
        if !wanted(ids) {
            return;
        }
        println!("running criterion {}", ids.iter().map(u32::to_string).collect::<Vec<_>>().join("+"));
        let t = Instant::now();
        let outs = f();
        let dt = t.elapsed();
        for ((&id, &name), o) in ids.iter().zip(names).zip(outs) {
            println!("criterion {id} ({name}): {} - {} [{:.1}s]", if o.pass { "PASS" } else { "FAIL" }, o.detail, dt.as_secs_f64());
            results.push((id, name, dt, o));
        }
    };
    timed(&[1], &["gradient correctness"], &mut || vec![criterion_gradients()]);
    timed(&[2], &["metric oracles"], &mut || vec![criterion_metrics()]);
    timed(&[8], &["structural invariants"], &mut || vec![criterion_invariants()]);
    timed(&[3, 4], &["in-context gain", "strategy ordering"], &mut || {
        let (a, b) = criteria_fewshot();
        vec![a, b]
    });
    timed(&[5, 6], &["GA uplift", "error-reduction inferiority"], &mut || {
        let (a, b) = criteria_ga();
        vec![a, b]
    });
    timed(&[7], &["retrieval rank curve"], &mut || vec![criterion_retrieval()]);

    results.sort_by_key(|r| r.0);
    println!("\nacceptance summary");
    for (id, name, dt, o) in &results {
        println!("  [{}] criterion {id}: {name} ({:.1}s)", if o.pass { "PASS" } else { "FAIL" }, dt.as_secs_f64());
    }
    let failed = results.iter().filter(|r| !r.3.pass).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

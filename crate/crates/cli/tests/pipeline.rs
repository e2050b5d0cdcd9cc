use std::ffi::{OsStr, OsString};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_synicl");

const TINY_MODEL: [&str; 10] = [
    "--set",
    "model.d_model=16",
    "--set",
    "model.n_layers=1",
    "--set",
    "model.n_heads=2",
    "--set",
    "model.max_ctx_examples=6",
    "--set",
    "train.n_ctx=6",
];

/// Argument vector from a mix of strings and paths.
macro_rules! argv {
    ($($x:expr),* $(,)?) => {
        [$(OsStr::new(&$x).to_os_string()),*]
    };
}

fn synicl(args: &[OsString]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[OsString]) {
    let out = synicl(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
}

fn json(p: PathBuf) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

struct Pipeline {
    root: PathBuf,
}

impl Pipeline {
    fn dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn data(&self) -> PathBuf {
        self.dir("synth").join("data.csv")
    }

    fn split(&self) -> PathBuf {
        self.dir("split").join("split.json")
    }

    fn bank(&self) -> PathBuf {
        self.dir("synth").join("bank.csv")
    }

    fn checkpoint(&self, run: &str) -> PathBuf {
        self.dir(run).join("checkpoint.json")
    }

    /// synth, optimization split, synergy training and retrieval training.
    fn build(root: &Path) -> Self {
        let p = Pipeline { root: root.to_path_buf() };
        ok(&argv![
            "synth", "--out", p.dir("synth"), "--tuples", "600", "--seed", "3",
            "--set", "world.num_drugs=16", "--set", "world.num_cells=3",
        ]);
        ok(&argv![
            "split", "--out", p.dir("split"), "--data", p.data(),
            "--regime", "optimization", "--m", "3", "--seed", "3",
        ]);
        let mut train = Vec::from(argv![
            "train", "--out", p.dir("train"), "--data", p.data(), "--split", p.split(),
            "--epochs", "1", "--seed", "3",
        ]);
        train.extend(TINY_MODEL.map(OsString::from));
        ok(&train);
        let mut retr = Vec::from(argv![
            "train", "--out", p.dir("train_retrieval"), "--data", p.data(), "--split", p.split(),
            "--bank", p.bank(), "--objective", "retrieval", "--epochs", "1", "--seed", "3",
        ]);
        retr.extend(TINY_MODEL.map(OsString::from));
        ok(&retr);
        p
    }

    /// Subcommand, output directory and the data/split inputs.
    fn args(&self, sub: &str, out: &str) -> Vec<OsString> {
        argv![sub, "--out", self.dir(out), "--data", self.data(), "--split", self.split()].to_vec()
    }
}

#[test]
fn full_pipeline_and_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let p = Pipeline::build(tmp.path());
    for f in ["data.csv", "world.json", "bank.csv", "config.json", "manifest.json"] {
        assert!(p.dir("synth").join(f).exists(), "{f}");
    }
    let history = std::fs::read_to_string(p.dir("train").join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 1);

    // Zero-shot evaluation.
    let ck = p.checkpoint("train");
    let mut zero = p.args("eval", "eval0");
    zero.extend(argv!["--checkpoint", ck, "--n-ctx", "0"]);
    ok(&zero);
    let e0 = json(p.dir("eval0").join("eval.json"));
    assert_eq!(e0["n_ctx"], 0);
    assert!(e0["report"]["roc_auc"].is_number());
    let support = e0["report"]["support"].as_u64().unwrap() as usize;
    assert_eq!(e0["scores"].as_array().unwrap().len(), support);

    // Optimized contexts feed back into eval.
    let mut opt = p.args("optimize", "opt");
    opt.extend(argv!["--checkpoint", ck, "--n-ctx", "3", "--set", "ga.epochs=2"]);
    ok(&opt);
    let contexts = json(p.dir("opt").join("contexts.json"));
    assert_eq!(contexts.as_object().unwrap().len(), 3);
    let trace = std::fs::read_to_string(p.dir("opt").join("trace.jsonl")).unwrap();
    let best: Vec<f64> = trace
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["best_so_far"].as_f64().unwrap())
        .collect();
    assert!(!best.is_empty());
    assert!(best.windows(2).all(|w| w[1] >= w[0]));
    let mut fixed = p.args("eval", "eval_fixed");
    fixed.extend(argv!["--checkpoint", ck, "--context-file", p.dir("opt").join("contexts.json")]);
    ok(&fixed);
    let optimized = json(p.dir("opt").join("optimize.json"));
    let replay = json(p.dir("eval_fixed").join("eval.json"));
    assert_eq!(optimized["test"]["roc_auc"], replay["report"]["roc_auc"]);
    assert_eq!(replay["n_ctx"], 3);

    for method in ["random", "error-reduction"] {
        let out = format!("opt_{method}");
        let mut args = p.args("optimize", &out);
        args.extend(argv!["--checkpoint", ck, "--n-ctx", "3", "--method", method, "--budget", "5"]);
        ok(&args);
        assert_eq!(json(p.dir(&out).join("optimize.json"))["evaluations"], 5);
    }

    // Rank curves from the retrieval checkpoint.
    let mut rank = p.args("rank", "rank");
    rank.extend(argv![
        "--checkpoint", p.checkpoint("train_retrieval"), "--bank", p.bank(),
        "--n-ctx-max", "4", "--max-queries", "7",
    ]);
    ok(&rank);
    let curve = json(p.dir("rank").join("rank.json"));
    assert_eq!(curve["mean_rank"].as_array().unwrap().len(), 5);
    assert_eq!(curve["per_query"].as_array().unwrap().len(), 7);

    // Every run records its inputs and artifacts.
    let m = json(p.dir("rank").join("manifest.json"));
    assert_eq!(m["inputs"].as_array().unwrap().len(), 4);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    assert!(m["artifacts"].as_array().unwrap().len() >= 2);
    assert!(m["wall_clock_secs"].as_f64().unwrap() >= 0.0);
}

/// Every output file except the manifest, and except `config.json`, which
/// records the (differing) input paths.
fn outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), p))
        .filter(|(name, _)| name != "manifest.json" && name != "config.json")
        .map(|(name, p)| (name, std::fs::read(p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = Pipeline::build(&tmp.path().join("a"));
    let b = Pipeline::build(&tmp.path().join("b"));
    for stage in ["synth", "split", "train", "train_retrieval"] {
        let (oa, ob) = (outputs(&a.dir(stage)), outputs(&b.dir(stage)));
        assert!(!oa.is_empty());
        assert_eq!(oa, ob, "{stage}");
    }
    assert_eq!(
        std::fs::read(a.dir("synth").join("config.json")).unwrap(),
        std::fs::read(b.dir("synth").join("config.json")).unwrap()
    );
    for p in [&a, &b] {
        let mut args = p.args("eval", "eval");
        args.extend(argv!["--checkpoint", p.checkpoint("train"), "--strategy", "random"]);
        ok(&args);
    }
    assert_eq!(outputs(&a.dir("eval")), outputs(&b.dir("eval")));
}

#[test]
fn exit_codes_follow_error_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let t = |name: &str| tmp.path().join(name);
    ok(&argv!["synth", "--out", t("o"), "--tuples", "300", "--set", "world.num_drugs=12"]);
    let data = t("o").join("data.csv");

    let code = |args: &[OsString]| synicl(args).status.code();
    assert_eq!(code(&argv!["split", "--out", t("x"), "--data", data, "--set", "bogus=1"]), Some(2));
    assert_eq!(code(&argv!["split", "--out", t("x"), "--data", data, "--set", "noequals"]), Some(2));
    assert_eq!(code(&argv!["split", "--frobnicate"]), Some(2));
    assert_eq!(code(&argv!["split", "--out", t("x"), "--data", data, "--mode", "unknown-tissue"]), Some(2));

    assert_eq!(code(&argv!["split", "--out", t("x"), "--data", t("nope.csv")]), Some(3));
    std::fs::write(t("bad.csv"), "a,b\n1,2\n").unwrap();
    assert_eq!(code(&argv!["split", "--out", t("x"), "--data", t("bad.csv")]), Some(3));

    // A config file sits under flags, and --set wins over both.
    std::fs::write(t("split.json"), r#"{"m": 2, "n": 3, "regime": "fewshot"}"#).unwrap();
    ok(&argv![
        "split", "--config", t("split.json"), "--out", t("l"), "--data", data, "--m", "4", "--set", "n=2",
    ]);
    let resolved = json(t("l").join("config.json"));
    assert_eq!(resolved["m"], 4);
    assert_eq!(resolved["n"], 2);
    let split = json(t("l").join("split.json"));
    assert_eq!(split["held_out"].as_array().unwrap().len(), 4);
    assert_eq!(split["context_bank"].as_array().unwrap().len(), 8);
}

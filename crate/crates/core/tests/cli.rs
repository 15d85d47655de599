//! The command line, driven in-process and through the built binary.

use std::path::{Path, PathBuf};
use std::process::Command;

use dialrank::cli::{layout, run, RunConfig};
use dialrank::fusion::{ensemble, InstanceId, LogitMatrix, Provenance};
use dialrank::metrics::{load_annotations, save_annotations, MetricReport};
use dialrank::synth::Dataset;
use dialrank::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

const SMALL: &str = "[data]\nn_examples = 35\n[model]\nembed = 8\nhidden = 8\nd_m = 16\n[train]\nepochs = 2\n";

fn call(args: &[&str]) -> Result<String, (i32, String)> {
    let mut out = Vec::new();
    let mut argv = vec!["dialrank"];
    argv.extend_from_slice(args);
    run(argv, &mut out).map_err(|f| (f.code, f.message))?;
    Ok(String::from_utf8(out).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn first_json(text: &str) -> Value {
    serde_json::from_str(text.lines().next().unwrap()).unwrap()
}

/// A temporary workspace holding a small config and generated data.
struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("run.toml"), config).unwrap();
        let ws = Self { dir };
        call(&["gen", "--config", s(&ws.path("run.toml")), "--out", s(&ws.path("data"))]).unwrap();
        ws
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn train(&self, model: &str, out: &str, extra: &[&str]) -> String {
        let (cfg, data, out) = (self.path("run.toml"), self.path("data"), self.path(out));
        let mut args = vec!["train", "--config", s(&cfg), "--data", s(&data), "--model", model, "--out", s(&out)];
        args.extend_from_slice(extra);
        call(&args).unwrap()
    }
}

#[test]
fn gen_is_deterministic_and_reports_the_history_fraction() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut texts = Vec::new();
    for dir in [&a, &b] {
        let out = call(&["gen", "--seed", "7", "--n-examples", "70", "--out", s(&dir.path().join("d"))]).unwrap();
        texts.push(out.replace(s(dir.path()), ""));
    }
    assert_eq!(texts[0], texts[1]);
    assert!(texts[0].contains("history-dependent questions"));
    for f in [layout::TRAIN, layout::VAL, layout::VOCAB, layout::TRAIN_ANN, layout::VAL_ANN] {
        let x = std::fs::read(a.path().join("d").join(f)).unwrap();
        assert_eq!(x, std::fs::read(b.path().join("d").join(f)).unwrap(), "{f}");
    }
    let (tr, va) = dialrank::cli::load_data_dir(&a.path().join("d")).unwrap();
    assert_eq!(tr.examples.len() + va.examples.len(), 70);
    let flagged = tr.examples.iter().flat_map(|e| &e.rounds).filter(|r| r.needs_history).count();
    let frac = flagged as f64 / tr.n_instances() as f64;
    assert!((frac - 0.19).abs() < 0.01, "train history fraction {frac}");
    let flagged = va.examples.iter().flat_map(|e| &e.rounds).filter(|r| r.needs_history).count();
    let frac = flagged as f64 / va.n_instances() as f64;
    assert!((frac - 0.19).abs() <= 0.02, "validation history fraction {frac}");
}

#[test]
fn gen_flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    call(&["gen", "--n-examples", "14", "--history-fraction", "0.0", "--out", s(&out)]).unwrap();
    let (tr, va) = dialrank::cli::load_data_dir(&out).unwrap();
    assert_eq!(tr.examples.len() + va.examples.len(), 14);
    assert!(tr.examples.iter().chain(&va.examples).flat_map(|e| &e.rounds).all(|r| !r.needs_history));
}

#[test]
fn train_writes_checkpoint_logits_log_and_report() {
    let ws = Workspace::new(SMALL);
    let out = ws.train("joint", "j", &[]);
    let report = first_json(out.lines().nth(1).unwrap());
    for key in ["ndcg", "mrr", "r1", "r5", "r10", "mean_rank"] {
        assert!(report[key].is_f64(), "{key} missing from {report}");
    }
    for f in [layout::CHECKPOINT, layout::VAL_LOGITS, layout::LOG, layout::REPORT] {
        assert!(ws.path("j").join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(ws.path("j").join(layout::LOG)).unwrap();
    assert_eq!(log.lines().count(), 2);
    let stored: MetricReport = serde_json::from_str(&std::fs::read_to_string(ws.path("j").join(layout::REPORT)).unwrap()).unwrap();
    let evald = call(&["eval", "--logits", s(&ws.path("j/val.logits")), "--annotations", s(&ws.path("data/val.ann"))]).unwrap();
    let evald: MetricReport = serde_json::from_str(evald.lines().next().unwrap()).unwrap();
    assert_eq!(stored, evald);
}

#[test]
fn round_dropout_toggle_changes_training() {
    let ws = Workspace::new(SMALL);
    ws.train("joint", "on", &["--round-dropout", "on"]);
    ws.train("joint", "off", &["--round-dropout", "off"]);
    let on = std::fs::read_to_string(ws.path("on").join(layout::LOG)).unwrap();
    let off = std::fs::read_to_string(ws.path("off").join(layout::LOG)).unwrap();
    assert_ne!(on, off);
}

#[test]
fn fused_model_trains_for_each_dropout_probability() {
    let ws = Workspace::new(SMALL);
    let mut logs = Vec::new();
    for p in ["0", "0.15", "0.25", "0.35"] {
        let out = ws.train("cdf", &format!("p{p}"), &["--p", p]);
        let report = first_json(out.lines().nth(1).unwrap());
        assert!(report["mrr"].as_f64().unwrap().is_finite());
        logs.push(std::fs::read_to_string(ws.path(&format!("p{p}")).join(layout::LOG)).unwrap());
    }
    logs.dedup();
    assert_eq!(logs.len(), 4, "different p must give different runs");
}

#[test]
fn eval_of_perfect_logits_is_perfect() {
    let ws = Workspace::new(SMALL);
    let ann = load_annotations(ws.path("data/val.ann")).unwrap();
    let c = ann[0].relevance.as_ref().unwrap().len();
    let mut values = Vec::new();
    for a in &ann {
        let rel = a.relevance.as_ref().unwrap();
        // ground truth first, then the other candidates by relevance
        values.extend((0..c).map(|j| if j == a.gt_index { 10.0 } else { rel[j] }));
    }
    let ids: Vec<InstanceId> = ann.iter().map(|a| a.id).collect();
    let logits = LogitMatrix::new(ids, Tensor::new(vec![ann.len(), c], values).unwrap(), Provenance::Ensemble).unwrap();
    logits.save(ws.path("perfect.logits")).unwrap();
    let out = call(&["eval", "--logits", s(&ws.path("perfect.logits")), "--annotations", s(&ws.path("data/val.ann"))]).unwrap();
    let r: MetricReport = serde_json::from_str(out.lines().next().unwrap()).unwrap();
    assert_eq!((r.r1, r.mrr, r.mean_rank, r.ndcg), (1.0, 1.0, 1.0, Some(1.0)));
}

#[test]
fn eval_of_random_logits_has_chance_mean_rank() {
    let dir = tempfile::tempdir().unwrap();
    let (n, c) = (3000, 20);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ann: Vec<dialrank::metrics::Annotation> = (0..n)
        .map(|i| dialrank::metrics::Annotation {
            id: InstanceId { example_id: i, round: 1 },
            gt_index: rng.random_range(0..c),
            relevance: None,
        })
        .collect();
    let values = (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let logits = LogitMatrix::new(ann.iter().map(|a| a.id).collect(), Tensor::new(vec![n, c], values).unwrap(), Provenance::ImageOnly).unwrap();
    save_annotations(dir.path().join("a.ann"), &ann).unwrap();
    logits.save(dir.path().join("r.logits")).unwrap();
    let out = call(&["eval", "--logits", s(&dir.path().join("r.logits")), "--annotations", s(&dir.path().join("a.ann"))]).unwrap();
    let r: MetricReport = serde_json::from_str(out.lines().next().unwrap()).unwrap();
    assert!((r.mean_rank - 10.5).abs() <= 0.5, "mean rank {}", r.mean_rank);
    assert!(r.ndcg.is_none());
}

#[test]
fn compare_and_ensemble_through_the_command_line() {
    let ws = Workspace::new(SMALL);
    ws.train("image_only", "i", &[]);
    ws.train("joint", "j", &[]);
    let (li, lj, ann) = (ws.path("i/val.logits"), ws.path("j/val.logits"), ws.path("data/val.ann"));

    let out = call(&["compare", "--annotations", s(&ann), s(&li), s(&lj)]).unwrap();
    let c = first_json(&out);
    assert_eq!(c.as_object().unwrap().len(), 4);
    assert!(c["r1_intersection"].as_f64().unwrap() <= c["r1_union"].as_f64().unwrap());

    call(&["ensemble", "--annotations", s(&ann), "--out", s(&ws.path("ij.logits")), s(&li), s(&lj)]).unwrap();
    let merged = LogitMatrix::load(ws.path("ij.logits"), Provenance::Ensemble).unwrap();
    let parts = [
        LogitMatrix::load(&li, Provenance::ImageOnly).unwrap(),
        LogitMatrix::load(&lj, Provenance::Joint).unwrap(),
    ];
    assert_eq!(merged.values(), ensemble(&parts).unwrap().values());

    call(&["ensemble", "--annotations", s(&ann), "--out", s(&ws.path("jj.logits")), s(&lj), s(&lj)]).unwrap();
    let doubled = LogitMatrix::load(ws.path("jj.logits"), Provenance::Ensemble).unwrap();
    assert_eq!(doubled.rankings(), parts[1].rankings());

    assert_eq!(call(&["ensemble", "--annotations", s(&ann), "--out", s(&ws.path("x")), s(&lj)]).unwrap_err().0, 1);
}

#[test]
fn history_ablation_rows_and_image_only_reference() {
    let cfg = "[train]\nepochs = 30\nselect_best = false\n\
               [train.schedule]\nbase = 0.003\ndecrement = 0.0\nlinear_until = 25\ndecay = 0.7\n";
    let ws = Workspace::new(cfg);
    // round dropout often removes the one row a history question needs
    ws.train("joint", "j", &["--round-dropout", "off"]);
    ws.train("image_only", "i", &[]);
    let out = call(&[
        "ablate-history",
        "--data",
        s(&ws.path("data")),
        "--k",
        "0,1,full",
        "--joint",
        s(&ws.path("j/checkpoint.txt")),
        "--image",
        s(&ws.path("i/checkpoint.txt")),
    ])
    .unwrap();
    let rows: Vec<Value> = out.lines().take(4).map(|l| serde_json::from_str(l).unwrap()).collect();
    let labels: Vec<&str> = rows.iter().map(|r| r["model"].as_str().unwrap()).collect();
    assert_eq!(labels, ["FULL", "H-0", "H-1", "Img-only"]);
    let r1 = |i: usize| rows[i]["metrics"]["r1"].as_f64().unwrap();
    assert!(r1(1) <= r1(0), "H-0 {} above FULL {}", r1(1), r1(0));
    for row in &rows {
        for key in ["ndcg", "mrr", "r1", "r5", "r10", "mean_rank"] {
            assert!(row["metrics"][key].is_f64());
        }
    }
    let img = call(&["eval", "--logits", s(&ws.path("i/val.logits")), "--annotations", s(&ws.path("data/val.ann"))]).unwrap();
    let img: MetricReport = serde_json::from_str(img.lines().next().unwrap()).unwrap();
    let row: MetricReport = serde_json::from_value(rows[3]["metrics"].clone()).unwrap();
    assert_eq!(row, img);
    assert!(out.contains("Img-only"));
}

#[test]
fn ablation_can_train_its_own_models() {
    let ws = Workspace::new(SMALL);
    let out = call(&["ablate-history", "--data", s(&ws.path("data")), "--k", "0,full", "--train", "--config", s(&ws.path("run.toml")), "--epochs", "1"]).unwrap();
    let labels: Vec<String> = out
        .lines()
        .take(3)
        .map(|l| first_json(l)["model"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(labels, ["FULL", "H-0", "Img-only"]);
}

#[test]
fn configuration_files_round_trip_and_reject_unknown_keys() {
    let cfg = RunConfig::from_toml(SMALL).unwrap();
    assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[train]\nepoch = 3\n").unwrap();
    let err = call(&["gen", "--config", s(&dir.path().join("bad.toml")), "--out", s(&dir.path().join("d"))]).unwrap_err();
    assert_eq!(err.0, 1);
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(call(&["train"]).unwrap_err().0, 1);
    assert_eq!(call(&["frobnicate"]).unwrap_err().0, 1);
    let missing = dir.path().join("nope");
    let err = call(&["train", "--data", s(&missing), "--model", "joint", "--out", s(&dir.path().join("o"))]).unwrap_err();
    assert_eq!(err.0, 2);
    let err = call(&["train", "--data", s(&missing), "--model", "resnet", "--out", s(&dir.path().join("o"))]).unwrap_err();
    assert_eq!(err.0, 1);
    std::fs::write(dir.path().join("bad.logits"), "C=3 INSTANCES=1\n1 1 0.5 oops 2\n").unwrap();
    std::fs::write(dir.path().join("a.ann"), "").unwrap();
    let err = call(&["eval", "--logits", s(&dir.path().join("bad.logits")), "--annotations", s(&dir.path().join("a.ann"))]).unwrap_err();
    assert_eq!(err.0, 2);
    assert!(err.1.contains("line 2"), "{}", err.1);
    assert!(call(&["--help"]).unwrap().contains("ablate-history"));
}

#[test]
fn binary_reports_errors_on_stderr_with_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_dialrank");
    let ok = Command::new(bin).arg("--help").output().unwrap();
    assert!(ok.status.success());
    assert!(String::from_utf8_lossy(&ok.stdout).contains("gen"));
    let usage = Command::new(bin).arg("train").output().unwrap();
    assert_eq!(usage.status.code(), Some(1));
    assert!(!usage.stderr.is_empty());
    let dir = tempfile::tempdir().unwrap();
    let missing = Command::new(bin)
        .args(["eval", "--logits", s(&dir.path().join("x")), "--annotations", s(&dir.path().join("y"))])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn generated_dataset_files_parse_back_identically() {
    let ws = Workspace::new(SMALL);
    let vocab = dialrank::encoders::Vocabulary::read_from(std::io::BufReader::new(std::fs::File::open(ws.path("data/vocab.txt")).unwrap())).unwrap();
    for f in ["data/train.txt", "data/val.txt"] {
        let text = std::fs::read_to_string(ws.path(f)).unwrap();
        assert_eq!(Dataset::load(ws.path(f), &vocab).unwrap().to_text(), text);
    }
}

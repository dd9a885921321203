use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qadwh::cli::config::RunConfig;
use qadwh::cli::io::{read_checkpoint, read_codes, read_dataset, CODES_HEADER_LEN};
use qadwh::cli::pipeline::{encode_dataset, init_model};

fn qadwh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qadwh")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = qadwh(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

struct Work {
    dir: tempfile::TempDir,
}

impl Work {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("run.toml"), config).unwrap();
        Work { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn p(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }
}

const SMALL: &str = "\
synth.n = 150
synth.d = 6
synth.c = 3
synth.num_queries = 12
synth.seed = 1
model.hidden = [8]
model.code_length = 10
train.max_steps = 50
train.batch_size = 16
train.initial_lr = 0.01
";

fn synth(w: &Work) {
    ok(&["gen-synth", "--config", &w.p("run.toml"), "--database", &w.p("db.tsv"), "--queries", &w.p("q.tsv")]);
}

fn train(w: &Work, extra: &[&str]) -> Output {
    let (cfg, db, ckpt, log) = (w.p("run.toml"), w.p("db.tsv"), w.p("model.ckpt"), w.p("loss.tsv"));
    let mut args = vec!["train", "--config", &cfg, "--database", &db, "--checkpoint", &ckpt, "--loss-log", &log];
    args.extend(extra);
    qadwh(&args)
}

fn encode(w: &Work) {
    ok(&[
        "encode", "--checkpoint", &w.p("model.ckpt"), "--dataset", &w.p("db.tsv"), "--codes", &w.p("db.qdwh"),
    ]);
}

#[test]
fn help_and_usage_exit_codes() {
    assert_eq!(qadwh(&["--help"]).status.code(), Some(0));
    assert_eq!(qadwh(&["train", "--help"]).status.code(), Some(0));
    assert_eq!(qadwh(&[]).status.code(), Some(1));
    assert_eq!(qadwh(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(qadwh(&["baseline", "--variant", "nope", "--out-dir", "x"]).status.code(), Some(1));
}

#[test]
fn config_errors_exit_one_before_writing() {
    let w = Work::new("train.learning_rate = 0.1\n");
    let out = qadwh(&["gen-synth", "--config", &w.p("run.toml"), "--database", &w.p("db.tsv"), "--queries", &w.p("q.tsv")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));
    assert!(!w.path("db.tsv").exists());
}

#[test]
fn dataset_parse_errors_name_the_line() {
    let w = Work::new(SMALL);
    std::fs::write(w.path("db.tsv"), "2\t2\t2\n1.0\t0.0\t0\n0.0\t1.0\t2\n").unwrap();
    let out = train(&w, &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains(":3:"), "{}", stderr(&out));
    assert!(!w.path("model.ckpt").exists());
}

#[test]
fn gen_synth_is_deterministic() {
    let (a, b) = (Work::new(SMALL), Work::new(SMALL));
    synth(&a);
    synth(&b);
    let db = std::fs::read(a.path("db.tsv")).unwrap();
    assert_eq!(db, std::fs::read(b.path("db.tsv")).unwrap());
    assert!(String::from_utf8(db).unwrap().starts_with("150\t6\t3\n"));
    assert_eq!(read_dataset(&a.path("q.tsv")).unwrap().num_items(), 12);
}

#[test]
fn zero_step_training_writes_the_initialization() {
    let w = Work::new(SMALL);
    synth(&w);
    assert!(train(&w, &["--max-steps", "0"]).status.success());
    let ckpt = read_checkpoint(&w.path("model.ckpt")).unwrap();
    let cfg = RunConfig::parse(SMALL).unwrap();
    assert_eq!(ckpt.params, init_model(&cfg, 6, 3).unwrap());
    assert_eq!(ckpt.step, 0);
    assert_eq!(ckpt.config.train.max_steps, 0);
}

#[test]
fn divergence_exits_two() {
    let w = Work::new(SMALL);
    synth(&w);
    let out = train(&w, &["--initial-lr", "1e300"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("diverged at step"), "{}", stderr(&out));
    assert!(!w.path("model.ckpt").exists());
}

#[test]
fn encode_matches_in_memory_codes_and_size() {
    let w = Work::new(SMALL);
    synth(&w);
    assert!(train(&w, &[]).status.success());
    let log = std::fs::read_to_string(w.path("loss.tsv")).unwrap();
    assert!(log.starts_with("step\ttriplet_loss\tclass_loss\tlr\n"));
    assert_eq!(log.lines().count(), 51);
    encode(&w);
    let bytes = std::fs::read(w.path("db.qdwh")).unwrap();
    assert_eq!(bytes.len(), CODES_HEADER_LEN + 150 * 2);
    let first = bytes.clone();
    encode(&w);
    assert_eq!(std::fs::read(w.path("db.qdwh")).unwrap(), first);

    let ckpt = read_checkpoint(&w.path("model.ckpt")).unwrap();
    let db = read_dataset(&w.path("db.tsv")).unwrap();
    assert_eq!(read_codes(&w.path("db.qdwh")).unwrap(), encode_dataset(&ckpt.params, &db).unwrap());
}

#[test]
fn encode_rejects_mismatched_dims() {
    let w = Work::new(SMALL);
    synth(&w);
    assert!(train(&w, &["--max-steps", "0"]).status.success());
    std::fs::write(w.path("other.tsv"), "1\t3\t2\n0.0\t1.0\t2.0\t0\n").unwrap();
    let out = qadwh(&["encode", "--checkpoint", &w.p("model.ckpt"), "--dataset", &w.p("other.tsv"), "--codes", &w.p("x.qdwh")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("expected 6, got 3"), "{}", stderr(&out));
}

fn query(w: &Work, out: &str, extra: &[&str]) {
    let (ckpt, codes, queries, out) = (w.p("model.ckpt"), w.p("db.qdwh"), w.p("q.tsv"), w.p(out));
    let mut args = vec!["query", "--checkpoint", &ckpt, "--codes", &codes, "--queries", &queries, "--out", &out];
    args.extend(extra);
    ok(&args);
}

#[test]
fn two_phase_at_full_radius_matches_exact() {
    let w = Work::new(SMALL);
    synth(&w);
    assert!(train(&w, &[]).status.success());
    encode(&w);
    query(&w, "exact.tsv", &["--mode", "exact", "--k", "20"]);
    query(&w, "wide.tsv", &["--mode", "two-phase", "--radius", "10", "--k", "20"]);
    let exact = std::fs::read_to_string(w.path("exact.tsv")).unwrap();
    assert_eq!(exact, std::fs::read_to_string(w.path("wide.tsv")).unwrap());
    assert_eq!(exact.lines().count(), 12 * 20);
    let first = exact.lines().next().unwrap();
    assert!(first.starts_with("0\t1\t"), "{first}");
}

#[test]
fn eval_requires_every_query() {
    let w = Work::new(SMALL);
    synth(&w);
    assert!(train(&w, &["--max-steps", "0"]).status.success());
    encode(&w);
    query(&w, "full.tsv", &[]);
    let full = std::fs::read_to_string(w.path("full.tsv")).unwrap();
    let partial: String = full
        .lines()
        .filter(|l| !l.starts_with("2\t") && !l.starts_with("3\t"))
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(w.path("partial.tsv"), partial).unwrap();
    let eval = |rankings: &str, report: &str| {
        qadwh(&[
            "eval", "--checkpoint", &w.p("model.ckpt"), "--codes", &w.p("db.qdwh"), "--database", &w.p("db.tsv"),
            "--queries", &w.p("q.tsv"), "--rankings", &w.p(rankings), "--report", &w.p(report),
        ])
    };
    let out = eval("partial.tsv", "bad.toml");
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("missing rankings for queries 2, 3"), "{}", stderr(&out));
    assert!(!w.path("bad.toml").exists());

    assert!(eval("full.tsv", "a.toml").status.success());
    assert!(eval("full.tsv", "b.toml").status.success());
    assert_eq!(std::fs::read(w.path("a.toml")).unwrap(), std::fs::read(w.path("b.toml")).unwrap());
}

fn report_map(path: &Path) -> f64 {
    let report: toml::Value = toml::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    report["map"].as_float().unwrap()
}

#[test]
fn eval_reports_fixture_average_precision() {
    let w = Work::new("model.hidden = []\nmodel.code_length = 2\neval.radius = 1\n");
    std::fs::write(w.path("db.tsv"), "3\t2\t2\n1.0\t0.0\t0\n0.0\t1.0\t1\n0.9\t0.1\t0\n").unwrap();
    std::fs::write(w.path("q.tsv"), "1\t2\t2\n1.0\t0.0\t0\n").unwrap();
    ok(&["train", "--config", &w.p("run.toml"), "--database", &w.p("db.tsv"), "--checkpoint", &w.p("model.ckpt"), "--max-steps", "0"]);
    encode(&w);
    // relevant items at ranks 1 and 3
    std::fs::write(w.path("r.tsv"), "0\t1\t0\t0.0\n0\t2\t1\t1.0\n0\t3\t2\t2.0\n").unwrap();
    ok(&[
        "eval", "--config", &w.p("run.toml"), "--checkpoint", &w.p("model.ckpt"), "--codes", &w.p("db.qdwh"),
        "--database", &w.p("db.tsv"), "--queries", &w.p("q.tsv"), "--rankings", &w.p("r.tsv"), "--report",
        &w.p("report.toml"),
    ]);
    assert!((report_map(&w.path("report.toml")) - 0.8333).abs() < 1e-4);
    assert!((report_map(&w.path("report.toml")) - 5.0 / 6.0).abs() < 1e-9);

    // perfect ordering
    std::fs::write(w.path("r.tsv"), "0\t1\t0\t0.0\n0\t2\t2\t1.0\n0\t3\t1\t2.0\n").unwrap();
    ok(&[
        "eval", "--config", &w.p("run.toml"), "--checkpoint", &w.p("model.ckpt"), "--codes", &w.p("db.qdwh"),
        "--database", &w.p("db.tsv"), "--queries", &w.p("q.tsv"), "--rankings", &w.p("r.tsv"), "--report",
        &w.p("report.toml"),
    ]);
    assert_eq!(report_map(&w.path("report.toml")), 1.0);

    // duplicated item
    std::fs::write(w.path("r.tsv"), "0\t1\t0\t0.0\n0\t2\t0\t1.0\n0\t3\t1\t2.0\n").unwrap();
    let out = qadwh(&[
        "eval", "--config", &w.p("run.toml"), "--checkpoint", &w.p("model.ckpt"), "--codes", &w.p("db.qdwh"),
        "--database", &w.p("db.tsv"), "--queries", &w.p("q.tsv"), "--rankings", &w.p("r.tsv"),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn baseline_writes_the_artifact_chain() {
    let w = Work::new(SMALL);
    synth(&w);
    for variant in ["qadwh", "unweighted", "lsh"] {
        let out_dir = w.p(variant);
        ok(&[
            "baseline", "--config", &w.p("run.toml"), "--variant", variant, "--database", &w.p("db.tsv"),
            "--queries", &w.p("q.tsv"), "--out-dir", &out_dir,
        ]);
        for file in qadwh::cli::BASELINE_FILES {
            assert!(w.path(variant).join(file).exists(), "{variant}/{file}");
        }
    }
    // dwh reuses the trained checkpoint
    let trained = w.path("qadwh").join("checkpoint.txt");
    ok(&[
        "baseline", "--config", &w.p("run.toml"), "--variant", "dwh", "--database", &w.p("db.tsv"), "--queries",
        &w.p("q.tsv"), "--checkpoint", trained.to_str().unwrap(), "--out-dir", &w.p("dwh"),
    ]);
    let dwh = read_checkpoint(&w.path("dwh").join("checkpoint.txt")).unwrap();
    let qa = read_checkpoint(&trained).unwrap();
    assert_eq!(dwh.params.hash_weight, qa.params.hash_weight);
    let rows: Vec<_> = dwh.params.class_weights.rows().into_iter().collect();
    assert!(rows.windows(2).all(|p| p[0] == p[1]));
    let mean = qa.params.class_weights.mean_axis(ndarray::Axis(0)).unwrap();
    assert!(rows[0].iter().zip(&mean).all(|(a, b)| (a - b).abs() < 1e-12));

    let un = read_checkpoint(&w.path("unweighted").join("checkpoint.txt")).unwrap();
    assert!(un.params.class_weights.iter().all(|&v| v == 1.0));
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hiersim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hiersim"))
        .args(args)
        .env("HIERSIM_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = hiersim(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn gen_writes_one_line_per_record() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    let out = ok(&["gen", "--seed", "7", "--classes", "200", "--variants", "4", "--out", p(&a)]);
    assert_eq!(fs::read_to_string(&a).unwrap().lines().count(), 800);
    assert!(stderr(&out).contains("seed = 7"));

    // The printed configuration reproduces the run when fed back.
    let cfg = dir.path().join("resolved.cfg");
    let printed: String = stderr(&out)
        .lines()
        .filter(|l| l.contains(" = ") && !l.starts_with("out ="))
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(&cfg, printed).unwrap();
    ok(&["gen", "--config", p(&cfg), "--out", p(&b)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn eval_without_model_is_a_usage_error() {
    let out = hiersim(&["eval", "--corpus", "c.jsonl", "--vocab", "v.txt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--model-dir"));
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    assert_eq!(hiersim(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(hiersim(&["gen", "--colour", "blue"]).status.code(), Some(1));
    assert_eq!(hiersim(&["gen", "--classes", "many"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "colour = blue\n").unwrap();
    let out = dir.path().join("c.jsonl");
    assert_eq!(hiersim(&["gen", "--config", p(&cfg), "--out", p(&out)]).status.code(), Some(1));
    assert!(!out.exists());

    let missing = dir.path().join("missing.jsonl");
    let vocab = dir.path().join("v.txt");
    assert_eq!(
        hiersim(&["tokenize", "--corpus", p(&missing), "--out", p(&vocab)]).status.code(),
        Some(2)
    );
    assert_eq!(hiersim(&["gen", "--classes", "0", "--out", p(&out)]).status.code(), Some(2));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# small corpus\nclasses = 5\nvariants = 3\n").unwrap();
    let corpus = dir.path().join("c.jsonl");
    let out = ok(&["gen", "--config", p(&cfg), "--variants", "2", "--out", p(&corpus)]);
    assert_eq!(fs::read_to_string(&corpus).unwrap().lines().count(), 10);
    let err = stderr(&out);
    assert!(err.contains("classes = 5") && err.contains("variants = 2"));
}

#[test]
fn ablate_cache_reports_one_row_per_cache_size() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    let csv = dir.path().join("ablation.csv");
    ok(&["gen", "--classes", "40", "--variants", "3", "--out", p(&corpus)]);
    ok(&[
        "ablate-cache", "--corpus", p(&corpus), "--l-values", "2,64,1024", "--vocab-size", "300",
        "--steps", "5", "--batch-size", "8", "--dim", "8", "--queries", "5", "--poolsize", "16",
        "--out", p(&csv),
    ]);
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("cache_size,"));
    let sizes: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(sizes, ["2", "64", "1024"]);
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name);
    let (corpus, vocab, models) = (d("c.jsonl"), d("v.txt"), d("models"));
    ok(&["gen", "--seed", "3", "--classes", "30", "--variants", "3", "--vuln-classes", "4", "--out", p(&corpus)]);
    ok(&["tokenize", "--corpus", p(&corpus), "--vocab-size", "300", "--out", p(&vocab)]);
    let small = ["--corpus", p(&corpus), "--vocab", p(&vocab), "--out-dir", p(&models)];
    ok(&[&["train-embed"][..], &small, &["--steps", "10", "--batch-size", "8", "--dim", "16"]].concat());
    ok(&[&["train-compare"][..], &small, &["--compare-steps", "5", "--compare-batch-size", "4", "--compare-dim", "8"]].concat());
    for f in ["query.hsenc", "reference.hsenc", "comparer.hscmp", "embed_metrics.csv", "compare_metrics.csv"] {
        assert!(models.join(f).exists(), "{f} missing");
    }
    let model = ["--corpus", p(&corpus), "--vocab", p(&vocab), "--model-dir", p(&models)];

    let index = d("pool.hsix");
    ok(&[&["index"][..], &model, &["--out", p(&index)]].concat());
    let results = d("results.csv");
    ok(&[
        &["query"][..], &model,
        &["--index", p(&index), "--query-corpus", p(&corpus), "--k", "20", "--k-out", "3", "--out", p(&results)],
    ]
    .concat());
    let text = fs::read_to_string(&results).unwrap();
    let records = fs::read_to_string(&corpus).unwrap().lines().count();
    assert_eq!(text.lines().count(), 1 + 3 * records);
    assert!(text.starts_with("query_id,rank,candidate_id,embed_sim,rerank_d\n"));

    let report = d("report.csv");
    ok(&[&["eval"][..], &model, &["--queries", "10", "--poolsize", "8", "--out", p(&report)]].concat());
    assert_eq!(fs::read_to_string(&report).unwrap().lines().count(), 2);
    let again = d("again.csv");
    ok(&[&["eval"][..], &model, &["--queries", "10", "--poolsize", "8", "--out", p(&again)]].concat());
    assert_eq!(fs::read(&report).unwrap(), fs::read(&again).unwrap());

    let sweep = d("sweep.csv");
    ok(&[&["sweep"][..], &model, &["--queries", "10", "--exponents", "1,3,5", "--rerank", "false", "--out", p(&sweep)]].concat());
    assert_eq!(fs::read_to_string(&sweep).unwrap().lines().count(), 4);

    let vuln = d("vuln.csv");
    ok(&[&["vuln-eval"][..], &model, &["--out", p(&vuln)]].concat());
    assert_eq!(fs::read_to_string(&vuln).unwrap().lines().count(), 5);

    let stray = ok(&[&["index"][..], &model, &["--out", p(&index), "--index-mode", "exact"]].concat());
    assert!(stderr(&stray).contains("index_mode = exact"));
    let foreign = d("foreign.jsonl");
    ok(&["gen", "--classes", "5", "--variants", "2", "--out", p(&foreign)]);
    let mismatch = hiersim(&[&["query"][..], &["--corpus", p(&foreign), "--vocab", p(&vocab), "--model-dir", p(&models)], &["--index", p(&index), "--query-corpus", p(&foreign), "--out", p(&d("x.csv"))]].concat());
    assert_eq!(mismatch.status.code(), Some(2));
}

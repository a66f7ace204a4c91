//! End-to-end tests of the `ltc` binary: pipeline plumbing, exit codes, and
//! the compression identity at the run-file level.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ltc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ltc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Generate data and train a small checkpoint; returns the data dir paths.
struct Pipeline {
    dir: tempfile::TempDir,
}

impl Pipeline {
    fn new(seed: u64) -> Pipeline {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline { dir };
        let out_dir = p.path().to_str().unwrap().to_string();
        assert_success(&ltc(&[
            "synth",
            "--out-dir",
            &out_dir,
            "--queries",
            "6",
            "--doc-len",
            "16",
            "--negatives",
            "3",
            "--seed",
            &seed.to_string(),
        ]));
        assert_success(&ltc(&[
            "train",
            "--output",
            p.file("model.ckpt").to_str().unwrap(),
            "--model",
            "tiny",
            "--epochs",
            "2",
            "--queries",
            "16",
            "--heldout",
            "8",
            "--doc-len",
            "16",
            "--negatives",
            "3",
            "--batch-size",
            "8",
            "--seed",
            &seed.to_string(),
            "--log",
            p.file("train.log").to_str().unwrap(),
        ]));
        p
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn file(&self, name: &str) -> PathBuf {
        self.path().join(name)
    }

    fn rerank_args<'a>(&self, output: &'a str, extra: &[&'a str]) -> Vec<String> {
        let mut args: Vec<String> = vec![
            "rerank".into(),
            "--corpus".into(),
            self.file("corpus.jsonl").to_str().unwrap().into(),
            "--queries".into(),
            self.file("queries.tsv").to_str().unwrap().into(),
            "--run".into(),
            self.file("run.txt").to_str().unwrap().into(),
            "--checkpoint".into(),
            self.file("model.ckpt").to_str().unwrap().into(),
            "--output".into(),
            self.file(output).to_str().unwrap().into(),
        ];
        args.extend(extra.iter().map(|s| s.to_string()));
        args
    }
}

fn run_strs(args: &[String]) -> Output {
    let refs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    ltc(&refs)
}

#[test]
fn full_pipeline_and_rate_identity() {
    let p = Pipeline::new(5);
    let log = std::fs::read_to_string(p.file("train.log")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        assert_eq!(line.split('\t').count(), 3);
    }

    assert_success(&run_strs(&p.rerank_args("plain.txt", &[])));
    assert_success(&run_strs(
        &p.rerank_args("rate1.txt", &["--rate", "1.0", "--layer", "2"]),
    ));
    let plain = std::fs::read(p.file("plain.txt")).unwrap();
    let rate1 = std::fs::read(p.file("rate1.txt")).unwrap();
    assert_eq!(plain, rate1, "rate 1.0 must reproduce the uncompressed run byte for byte");

    // The reranked run is a permutation of the first-stage candidates.
    let first: std::collections::HashSet<String> = std::fs::read_to_string(p.file("run.txt"))
        .unwrap()
        .lines()
        .map(|l| l.split_whitespace().nth(2).unwrap().to_string())
        .collect();
    let reranked: std::collections::HashSet<String> = String::from_utf8(plain)
        .unwrap()
        .lines()
        .map(|l| l.split_whitespace().nth(2).unwrap().to_string())
        .collect();
    assert_eq!(first, reranked);

    let out = ltc(&[
        "eval",
        "--run",
        p.file("plain.txt").to_str().unwrap(),
        "--qrels",
        p.file("qrels.txt").to_str().unwrap(),
    ]);
    assert_success(&out);
    let text = stdout(&out);
    assert!(text.lines().last().unwrap().starts_with("all\t"), "{text}");

    let out = ltc(&[
        "eval",
        "--run",
        p.file("plain.txt").to_str().unwrap(),
        "--qrels",
        p.file("qrels.txt").to_str().unwrap(),
        "--baseline",
        p.file("run.txt").to_str().unwrap(),
    ]);
    assert_success(&out);
    let text = stdout(&out);
    assert!(text.contains("t_stat\t"), "{text}");
    assert!(text.contains("p_value\t"), "{text}");
}

#[test]
fn listwise_rerank_produces_valid_run() {
    let p = Pipeline::new(9);
    let mut args = p.rerank_args("lw.txt", &["--window", "4", "--step", "2"]);
    args[0] = "listwise-rerank".into();
    assert_success(&run_strs(&args));
    let text = std::fs::read_to_string(p.file("lw.txt")).unwrap();
    // 6 queries x 4 candidates.
    assert_eq!(text.lines().count(), 24);
    for line in text.lines() {
        assert_eq!(line.split_whitespace().count(), 6);
    }
}

#[test]
fn threads_flag_is_deterministic() {
    let p = Pipeline::new(13);
    assert_success(&run_strs(&p.rerank_args("t1.txt", &["--threads", "1"])));
    assert_success(&run_strs(&p.rerank_args("t4.txt", &["--threads", "4"])));
    assert_eq!(
        std::fs::read(p.file("t1.txt")).unwrap(),
        std::fs::read(p.file("t4.txt")).unwrap()
    );
}

#[test]
fn rate_zero_exits_one_and_names_interval() {
    let out = ltc(&[
        "rerank", "--rate", "0", "--corpus", "x", "--queries", "x", "--run", "x",
        "--checkpoint", "x", "--output", "x",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("(0, 1]"), "{}", stderr(&out));
}

#[test]
fn usage_error_exits_one() {
    let out = ltc(&["rerank", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    let out = ltc(&["definitely-not-a-subcommand"]);
    assert_eq!(out.status.code(), Some(1));
    // Help goes to exit 0.
    let out = ltc(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn data_errors_exit_two_with_location() {
    let p = Pipeline::new(21);
    // Corrupt the run file: five columns on line 2.
    let run_path = p.file("run.txt");
    let mut lines: Vec<String> =
        std::fs::read_to_string(&run_path).unwrap().lines().map(String::from).collect();
    lines[1] = "q0 Q0 dX 9".to_string();
    std::fs::write(&run_path, lines.join("\n")).unwrap();
    let out = run_strs(&p.rerank_args("broken.txt", &[]));
    assert_eq!(out.status.code(), Some(2));
    let msg = stderr(&out);
    assert!(msg.contains("run.txt:2"), "{msg}");

    // Missing file is also a data error.
    let out = ltc(&[
        "eval", "--run", "/nonexistent/run.txt", "--qrels", "/nonexistent/qrels.txt",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergent_training_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = ltc(&[
        "train",
        "--output",
        dir.path().join("m.ckpt").to_str().unwrap(),
        "--model",
        "tiny",
        "--epochs",
        "2",
        "--queries",
        "8",
        "--heldout",
        "4",
        "--negatives",
        "2",
        "--learning-rate",
        "1e9",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn gradcheck_reports_small_error() {
    let out = ltc(&["gradcheck", "--rate", "0.5", "--layer", "1", "--seed", "3"]);
    assert_success(&out);
    assert!(stdout(&out).starts_with("max_rel_err "), "{}", stdout(&out));
    // A step outside the allowed range is a usage error.
    let out = ltc(&["gradcheck", "--epsilon", "1e-2"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn sweep_writes_grid_csv() {
    let p = Pipeline::new(33);
    let out = ltc(&[
        "sweep",
        "--corpus",
        p.file("corpus.jsonl").to_str().unwrap(),
        "--queries",
        p.file("queries.tsv").to_str().unwrap(),
        "--run",
        p.file("run.txt").to_str().unwrap(),
        "--qrels",
        p.file("qrels.txt").to_str().unwrap(),
        "--checkpoint",
        p.file("model.ckpt").to_str().unwrap(),
        "--output",
        p.file("sweep.csv").to_str().unwrap(),
        "--rates",
        "0.5,1.0",
        "--layers",
        "1,2",
        "--depth",
        "4",
        "--warmup",
        "0",
        "--repeats",
        "1",
    ]);
    assert_success(&out);
    let csv = std::fs::read_to_string(p.file("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "target_layer,rate,ndcg_at_10,p_value,qps,predicted_attn_ratio"
    );
    assert_eq!(lines.count(), 4);
}

#[test]
fn default_sweep_grid_has_five_rates() {
    let p = Pipeline::new(41);
    let out = ltc(&[
        "sweep",
        "--corpus",
        p.file("corpus.jsonl").to_str().unwrap(),
        "--queries",
        p.file("queries.tsv").to_str().unwrap(),
        "--run",
        p.file("run.txt").to_str().unwrap(),
        "--qrels",
        p.file("qrels.txt").to_str().unwrap(),
        "--checkpoint",
        p.file("model.ckpt").to_str().unwrap(),
        "--output",
        p.file("sweep.csv").to_str().unwrap(),
        "--depth",
        "4",
        "--warmup",
        "0",
        "--repeats",
        "1",
    ]);
    assert_success(&out);
    let csv = std::fs::read_to_string(p.file("sweep.csv")).unwrap();
    // Default grid: 5 rates x 2 layers of the tiny model.
    assert_eq!(csv.lines().count(), 1 + 5 * 2);
    for rate in ["0.2", "0.4", "0.6", "0.8", "1"] {
        assert!(
            csv.lines().any(|l| l.split(',').nth(1) == Some(rate)),
            "rate {rate} missing:\n{csv}"
        );
    }
}

#[test]
fn bench_prints_cost_table() {
    let out = ltc(&["bench", "--num-layers", "4", "--n", "100"]);
    assert_success(&out);
    let text = stdout(&out);
    assert!(text.starts_with("target_layer\trate\tattn_speedup\tlinear_speedup"));
    // 4 layers x 5 rates.
    assert_eq!(text.lines().count(), 21);
}

#[test]
fn synth_is_deterministic_per_seed() {
    let a = Pipeline::new(55);
    let b = Pipeline::new(55);
    for name in ["corpus.jsonl", "queries.tsv", "run.txt", "qrels.txt"] {
        assert_eq!(
            std::fs::read(a.file(name)).unwrap(),
            std::fs::read(b.file(name)).unwrap(),
            "{name} differs across identical seeds"
        );
    }
}

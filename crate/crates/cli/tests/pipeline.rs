use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

const SMALL: &[&str] = &[
    "--corpus.n=4",
    "--corpus.samples_per_task=40",
    "--model.hidden_dims=[8]",
    "--meta_train.max_epochs=10",
    "--selection.m=20",
];

fn gradex(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradex"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("GRADEX_OUT")
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> Output {
    let o = gradex(out, args);
    assert!(o.status.success(), "gradex {args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// gen, meta-train and cache on the small configuration.
fn prepared(dir: &Path) {
    let mut gen = vec!["gen"];
    gen.extend_from_slice(SMALL);
    ok(dir, &gen);
    ok(dir, &["meta-train"]);
    ok(dir, &["cache"]);
}

#[test]
fn small_pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    prepared(&dir);
    ok(&dir, &["estimate", "--subset", "1,2", "--subset", "3;4", "--random", "2"]);
    ok(&dir, &["select", "fs"]);
    ok(&dir, &["select", "re"]);
    ok(&dir, &["select", "re", "--selection.threshold=fraction"]);
    ok(&dir, &["report"]);

    for f in ["config.toml", "corpus.txt", "checkpoint.bin", "meta_train.txt", "cache.bin", "estimates.csv", "selection_fs.txt", "selection_re.txt", "report.md"] {
        assert!(dir.join(f).is_file(), "{f} missing");
    }
    assert!(!dir.join(".gradex.lock").exists());

    let estimates = fs::read_to_string(dir.join("estimates.csv")).unwrap();
    assert!(estimates.contains("# config: "));
    assert!(estimates.contains("# cache: "));
    assert!(estimates.contains("subset,f_hat,solver_iters,seconds,flags\n1;2,"));
    assert_eq!(estimates.lines().filter(|l| !l.starts_with('#')).count(), 5);

    let fs_report = fs::read_to_string(dir.join("selection_fs.txt")).unwrap();
    assert!(fs_report.contains("# checkpoint: "));
    assert!(fs_report.contains("method: forward_selection"));
    assert!(fs_report.contains("fine_tune_runs=0"));

    let report = fs::read_to_string(dir.join("report.md")).unwrap();
    assert!(report.contains("cache built from stored checkpoint: ok"));
    assert!(report.contains("checkpoint trained on stored corpus: ok"));

    // The stored config reflects the last override.
    let cfg = fs::read_to_string(dir.join("config.toml")).unwrap();
    assert!(cfg.contains("threshold = \"fraction\""));
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    prepared(&dir);
    ok(&dir, &["select", "re"]);
    ok(&dir, &["report"]);
    let files = ["config.toml", "corpus.txt", "checkpoint.bin", "meta_train.txt", "cache.bin", "selection_re.txt", "report.md"];
    let before: Vec<Vec<u8>> = files.iter().map(|f| fs::read(dir.join(f)).unwrap()).collect();
    ok(&dir, &["gen"]);
    ok(&dir, &["meta-train"]);
    ok(&dir, &["cache"]);
    ok(&dir, &["select", "re"]);
    ok(&dir, &["report"]);
    for (f, old) in files.iter().zip(&before) {
        assert_eq!(&fs::read(dir.join(f)).unwrap(), old, "{f} changed on rerun");
    }
}

#[test]
fn unknown_task_id_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    prepared(&dir);
    let o = gradex(&dir, &["estimate", "--subset", "1,99"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("unknown task id 99"), "{}", stderr(&o));
    assert!(!dir.join("estimates.csv").exists());
}

#[test]
fn missing_stage_points_to_prerequisite() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let mut gen = vec!["gen"];
    gen.extend_from_slice(SMALL);
    ok(&dir, &gen);
    let o = gradex(&dir, &["cache"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("gradex cache: error"));
    assert!(stderr(&o).contains("run `gradex meta-train` first"), "{}", stderr(&o));

    let o = gradex(&tmp.path().join("nowhere"), &["meta-train"]);
    assert!(stderr(&o).contains("run `gradex gen` first"));
    assert!(!tmp.path().join("nowhere").exists());
}

#[test]
fn stale_cache_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    prepared(&dir);
    ok(&dir, &["meta-train", "--meta_train.seed=5"]);
    let o = gradex(&dir, &["select", "fs"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("digest mismatch"), "{}", stderr(&o));

    // A changed model section invalidates the checkpoint.
    let o = gradex(&dir, &["cache", "--model.init_scale=0.5"]);
    assert!(stderr(&o).contains("run `gradex meta-train` first"), "{}", stderr(&o));
}

#[test]
fn report_on_empty_directory_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let o = gradex(tmp.path(), &["report"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("nothing to report"));
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
}

#[test]
fn locked_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join(".gradex.lock"), "1\n").unwrap();
    let o = gradex(&dir, &["gen"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("locked"));
    assert!(!dir.join("corpus.txt").exists());
}

#[test]
fn env_var_sets_output_root_and_bad_overrides_fail() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_gradex"))
        .args(["gen", "--corpus.n=3"])
        .env("GRADEX_OUT", &dir)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.join("corpus.txt").is_file());

    let o = gradex(&dir, &["gen", "--corpus.nope=1"]);
    assert!(stderr(&o).contains("unknown config key `corpus.nope`"));
}

#[test]
fn config_file_and_seed_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let mut gen = vec!["gen", "--seed", "3"];
    gen.extend_from_slice(SMALL);
    ok(&a, &gen);
    let cfg = fs::read_to_string(a.join("config.toml")).unwrap();
    assert!(cfg.contains("seed = 3"));
    assert!(!cfg.contains("seed = 0"));

    // Same config file in a fresh directory reproduces the corpus exactly.
    let b = tmp.path().join("b");
    let config = a.join("config.toml");
    ok(&b, &["gen", "--config", config.to_str().unwrap()]);
    assert_eq!(fs::read(a.join("corpus.txt")).unwrap(), fs::read(b.join("corpus.txt")).unwrap());
}

#[test]
fn addition_bench_needs_addition_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    prepared(&dir);
    let o = gradex(&dir, &["bench", "addition"]);
    assert!(stderr(&o).contains("noisy-addition corpus"));
    ok(&dir, &["bench", "structure"]);
    ok(&dir, &["bench", "speedup"]);
    let summary = fs::read_to_string(dir.join("bench/speedup.txt")).unwrap();
    assert!(summary.contains("# corpus: "));
    assert!(summary.contains("oracle_fs_task_units"));
    assert!(dir.join("bench/speedup.timings.csv").is_file());
}

#[test]
fn default_pipeline_finishes_within_ten_minutes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let start = Instant::now();
    for stage in [&["gen"][..], &["meta-train"], &["cache"], &["select", "fs"], &["report"]] {
        ok(&dir, stage);
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 600.0, "default pipeline took {secs:.0}s");
    let fs_report = fs::read_to_string(dir.join("selection_fs.txt")).unwrap();
    assert!(fs_report.contains("chosen: {"));
}

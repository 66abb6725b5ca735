use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_idreveal"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn value(o: &Output, key: &str) -> String {
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}\t")).map(str::to_string))
        .unwrap_or_else(|| panic!("no `{key}` in output:\n{}", stdout(o)))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen_small(out: &Path, seed: &str) -> Output {
    run(&[
        "gen-data", "--out", p(out), "--ids", "4", "--val-ids", "3", "--test-ids", "3", "--vids", "3",
        "--frames", "40", "--contexts", "3", "--swaps", "1", "--reenactments", "1", "--seed", seed,
    ])
}

const TRAIN_SMALL: &[&str] = &[
    "--phase2-epochs", "1", "--iterations", "2", "--frames", "16",
    "--batch-ids", "3", "--batch-vids", "2", "--val-batches", "1", "--tid-hidden", "8",
    "--gen-hidden", "8", "--groups", "2",
];

fn train_small(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", p(data), "--out", p(out)];
    args.extend_from_slice(TRAIN_SMALL);
    if !extra.contains(&"--phase1-epochs") {
        args.extend_from_slice(&["--phase1-epochs", "1"]);
    }
    args.extend_from_slice(extra);
    run(&args)
}

fn files_in(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn gen_data_writes_one_file_per_video() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = run(&["gen-data", "--out", p(&data), "--ids", "16", "--vids", "8", "--frames", "30"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(files_in(&data.join("train")).len(), 128);
    assert_eq!(value(&o, "train_videos"), "128");
    // 8 test identities with 8 reals and 4 + 4 fakes each
    assert_eq!(files_in(&data.join("test")).len(), 128);
    let manifest = fs::read_to_string(data.join("train.tsv")).unwrap();
    assert_eq!(manifest.lines().filter(|l| l.ends_with(".idrf") || l.contains(".idrf\t")).count(), 128);
}

#[test]
fn gen_data_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert!(gen_small(&a, "11").status.success());
    assert!(gen_small(&b, "11").status.success());
    assert!(gen_small(&c, "12").status.success());
    let bytes = |d: &Path| -> Vec<Vec<u8>> { files_in(&d.join("train")).iter().map(|f| fs::read(f).unwrap()).collect() };
    assert_eq!(bytes(&a), bytes(&b));
    assert_ne!(bytes(&a), bytes(&c));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(run(&["gen-data"]).status.code(), Some(2));
    assert_eq!(run(&["verify", "--model", "m.idrc"]).status.code(), Some(2));
    assert_eq!(run(&["train", "--out", "x"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["verify", "--model", "a", "--test", "b", "--refs", "c", "--threshold-sq", "big"]).status.code(), Some(2));
}

#[test]
fn missing_files_are_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.idrc");
    let o = run(&["verify", "--model", p(&missing), "--test", "t.idrf", "--refs", "r.idrf"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.idrc"));
}

#[test]
fn train_verify_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run_dir) = (dir.path().join("data"), dir.path().join("run"));
    assert!(gen_small(&data, "3").status.success());
    let o = train_small(&data, &run_dir, &["--adversarial"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["model.idrc", "model.toml", "generator.idrc", "train_log.tsv", "config.toml"] {
        assert!(run_dir.join(f).is_file(), "{f} missing");
    }
    let model = run_dir.join("model.idrc");
    let test_files = files_in(&data.join("test"));
    let video = p(&test_files[0]);

    let same = run(&["verify", "--model", p(&model), "--test", video, "--refs", video]);
    assert_eq!(same.status.code(), Some(0));
    assert_eq!(value(&same, "verdict"), "REAL");
    assert_eq!(value(&same, "distance"), "0");

    let other = p(&test_files[1]);
    let strict = run(&["verify", "--model", p(&model), "--test", video, "--refs", other, "--threshold-sq", "0"]);
    assert_eq!(strict.status.code(), Some(3));
    assert_eq!(value(&strict, "verdict"), "FAKE");

    let eval_dir = dir.path().join("eval");
    let e = run(&["evaluate", "--model", p(&model), "--data", p(&data), "--out", p(&eval_dir)]);
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    let auc: f64 = value(&e, "auc").parse().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    let distances = fs::read_to_string(eval_dir.join("distances.tsv")).unwrap();
    // header plus 9 reals and 6 fakes
    assert_eq!(distances.lines().count(), 1 + 9 + 6);
    assert!(eval_dir.join("summary.tsv").is_file());

    let emb = dir.path().join("emb.tsv");
    let o = run(&["embed", "--model", p(&model), "--manifest", p(&data.join("val.tsv")), "--out", p(&emb)]);
    assert!(o.status.success());
    assert_eq!(value(&o, "videos"), "9");
}

#[test]
fn training_is_reproducible_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(gen_small(&data, "4").status.success());
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert!(train_small(&data, &a, &["--phase1-epochs", "2"]).status.success());
    assert!(train_small(&data, &b, &["--phase1-epochs", "2"]).status.success());
    assert_eq!(fs::read(a.join("model.idrc")).unwrap(), fs::read(b.join("model.idrc")).unwrap());
    assert_eq!(fs::read(a.join("train_log.tsv")).unwrap(), fs::read(b.join("train_log.tsv")).unwrap());

    assert!(train_small(&data, &c, &["--phase1-epochs", "1"]).status.success());
    let o = train_small(&data, &c, &["--phase1-epochs", "2", "--resume"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(a.join("model.idrc")).unwrap(), fs::read(c.join("model.idrc")).unwrap());
    assert_eq!(fs::read(a.join("train_log.tsv")).unwrap(), fs::read(c.join("train_log.tsv")).unwrap());

    let changed = train_small(&data, &c, &["--phase1-epochs", "3", "--lr-tid", "0.01", "--resume"]);
    assert_eq!(changed.status.code(), Some(1));
}

#[test]
fn scores_file_hand_case() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("scores.tsv");
    fs::write(&scores, "distance\tlabel\n0.2\treal\n0.4\treal\n0.9\treal\n0.5\tfake\n1.3\tfake\n1.6\tfake\n").unwrap();
    let o = run(&["evaluate", "--scores-file", p(&scores)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let auc: f64 = value(&o, "auc").parse().unwrap();
    let acc: f64 = value(&o, "accuracy").parse().unwrap();
    assert_eq!(auc, 8.0 / 9.0);
    assert_eq!(acc, 5.0 / 6.0);

    let single = dir.path().join("single.tsv");
    fs::write(&single, "0.2\treal\n0.4\treal\n").unwrap();
    assert_eq!(run(&["evaluate", "--scores-file", p(&single)]).status.code(), Some(1));
}

#[test]
fn jobs_flag_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let gen = |out: &Path, jobs: &str| {
        run(&["--jobs", jobs, "gen-data", "--out", p(out), "--ids", "3", "--val-ids", "2", "--test-ids", "2", "--vids", "2", "--frames", "20"])
    };
    assert!(gen(&a, "1").status.success());
    assert!(gen(&b, "3").status.success());
    let bytes = |d: &Path| -> Vec<Vec<u8>> { files_in(&d.join("test")).iter().map(|f| fs::read(f).unwrap()).collect() };
    assert_eq!(bytes(&a), bytes(&b));
    assert_eq!(run(&["--jobs", "0", "gen-data", "--out", p(&dir.path().join("z"))]).status.code(), Some(1));
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMOKE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.conf");

fn ickd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ickd")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn run_ok(args: &[&str]) -> Output {
    let out = ickd(args);
    assert_eq!(code(&out), 0, "ickd {args:?} failed: {}", stderr(&out));
    out
}

#[test]
fn unknown_key_is_a_config_error_with_position() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.conf");
    fs::write(&cfg, "train.epochs = 3\n  loss.gama_picd = 1\n").unwrap();
    let out = ickd(&["distill", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("loss.gama_picd"), "{err}");
    assert!(err.contains("bad.conf:2:3"), "{err}");
}

#[test]
fn bad_value_and_invalid_setting_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = ickd(&[
        "distill",
        "--config",
        SMOKE,
        "--set",
        "train.epochs=three",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("train.epochs"));
    let out = ickd(&[
        "distill",
        "--config",
        SMOKE,
        "--set",
        "loss.alpha=2",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(code(&out), 2);
    let out = ickd(&[
        "distill",
        "--config",
        SMOKE,
        "--set",
        "train.epochs=0",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_inputs_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = ickd(&["distill", "--config", "/no/such/file.conf"]);
    assert_eq!(code(&out), 4);
    let out = ickd(&[
        "train-teacher",
        "--config",
        SMOKE,
        "--set",
        "data.source=file",
        "--set",
        "data.train_file=/no/such/train.bin",
        "--set",
        "data.test_file=/no/such/test.bin",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(code(&out), 4);
    assert!(stderr(&out).contains("/no/such/train.bin"));
    let out = ickd(&["plotdata", "/no/such/metrics.csv"]);
    assert_eq!(code(&out), 4);
}

#[test]
fn corrupt_dataset_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("junk.bin");
    fs::write(&f, b"ICKD\x01garbage").unwrap();
    let out = ickd(&[
        "train-teacher",
        "--config",
        SMOKE,
        "--set",
        "data.source=file",
        "--set",
        &format!("data.train_file={}", p(&f)),
        "--set",
        &format!("data.test_file={}", p(&f)),
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn divergence_exits_3_and_keeps_partial_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = ickd(&[
        "train-teacher",
        "--config",
        SMOKE,
        "--set",
        "train.lr=1e200",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    let partial = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(partial.starts_with("epoch,"));
    assert!(partial.lines().last().unwrap().starts_with("#final"));
}

#[test]
fn metrics_have_one_row_per_epoch_and_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "distill",
        "-q",
        "--config",
        SMOKE,
        "--set",
        "train.epochs=5",
        "--out",
        p(dir.path()),
    ]);
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 5 + 1);
    assert_eq!(csv.lines().filter(|l| l.starts_with("#final")).count(), 1);
    for f in ["student.ckpt", "teacher.ckpt", "teacher_metrics.csv"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "distill");
    assert_eq!(manifest["overrides"][0], "train.epochs=5");
    assert_eq!(manifest["config"]["train.epochs"], "5");
    assert_eq!(manifest["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn quiet_suppresses_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let loud = run_ok(&["train-teacher", "--config", SMOKE, "--out", p(dir.path())]);
    assert!(!loud.stdout.is_empty());
    let quiet = run_ok(&["train-teacher", "-q", "--config", SMOKE, "--out", p(dir.path())]);
    assert!(quiet.stdout.is_empty());
}

#[test]
fn zero_gamma_override_matches_the_ablation_row() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_ok(&[
        "distill",
        "-q",
        "--config",
        SMOKE,
        "--set",
        "loss.gamma_picd=0",
        "--out",
        p(&a),
    ]);
    run_ok(&[
        "distill",
        "-q",
        "--config",
        SMOKE,
        "--set",
        "train.ablation=kd_nicd",
        "--out",
        p(&b),
    ]);
    assert_eq!(
        fs::read(a.join("metrics.csv")).unwrap(),
        fs::read(b.join("metrics.csv")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("student.ckpt")).unwrap(),
        fs::read(b.join("student.ckpt")).unwrap()
    );
}

#[test]
fn teacher_checkpoint_is_reused() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    run_ok(&["distill", "-q", "--config", SMOKE, "--out", p(&first)]);
    let ckpt = first.join("teacher.ckpt");
    run_ok(&[
        "distill",
        "-q",
        "--config",
        SMOKE,
        "--set",
        &format!("model.teacher_checkpoint={}", p(&ckpt)),
        "--out",
        p(&second),
    ]);
    assert!(!second.join("teacher.ckpt").exists());
    assert_eq!(
        fs::read(first.join("metrics.csv")).unwrap(),
        fs::read(second.join("metrics.csv")).unwrap()
    );
}

#[test]
fn plotdata_is_long_format_and_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "train-teacher",
        "-q",
        "--config",
        SMOKE,
        "--set",
        "train.epochs=10",
        "--out",
        p(dir.path()),
    ]);
    let metrics = dir.path().join("metrics.csv");
    let first = run_ok(&["plotdata", p(&metrics)]).stdout;
    let second = run_ok(&["plotdata", p(&metrics)]).stdout;
    assert_eq!(first, second);
    let text = String::from_utf8(first).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("run,epoch,series,value"));
    assert_eq!(lines.count(), 10 * 8);

    let out = dir.path().join("plot");
    run_ok(&["plotdata", p(&metrics), "--out", p(&out)]);
    assert_eq!(fs::read_to_string(out.join("plotdata.csv")).unwrap(), text);
}

#[test]
fn plotdata_rejects_malformed_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("m.csv");
    fs::write(
        &f,
        "epoch,ce,kd,picd,nicd,total,train_acc,test_acc,bank_checksum,wall_ms\n0,1,2,3\n",
    )
    .unwrap();
    let out = ickd(&["plotdata", p(&f)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
    fs::write(&f, "not,a,metrics,file\n").unwrap();
    assert_eq!(code(&ickd(&["plotdata", p(&f)])), 2);
}

#[test]
fn verify_passes_and_catches_an_injected_fault() {
    let out = run_ok(&["verify"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("lsr_kd_constant"), "{text}");
    let out = ickd(&["verify", "--inject-fault", "kl-sign-flip"]);
    assert_eq!(code(&out), 1);
    let err = stderr(&out);
    assert!(err.contains("kl_divergence_bounds"), "{err}");
}

#[test]
fn ablate_table_has_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "ablate",
        "-q",
        "--config",
        SMOKE,
        "--set",
        "experiment.seeds=3",
        "--set",
        "experiment.rows=kd_only,full",
        "--set",
        "experiment.weight_variants=false",
        "--out",
        p(dir.path()),
    ]);
    let table = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 2, "{table}");
    assert!(rows[0].starts_with("kd_only,kd_only,true,true,1,"));
    assert!(rows[0].contains(",+0,"), "{}", rows[0]);
    assert!(rows[1].starts_with("full,full,"));
    let baselines = fs::read_to_string(dir.path().join("baselines.csv")).unwrap();
    assert!(baselines.starts_with("seed,teacher_ce,student_ce\n3,"));

    let empty = ickd(&[
        "ablate",
        "--config",
        SMOKE,
        "--set",
        "experiment.rows=",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(code(&empty), 2);
}

#[test]
fn online_degenerate_features_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = ickd(&[
        "online",
        "--config",
        SMOKE,
        "--set",
        "model.student_hidden=1",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("degenerate"), "{}", stderr(&out));
    assert!(stderr(&out).contains("sample"), "{}", stderr(&out));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_ok(&["train-teacher", "-q", "--config", SMOKE, "--seed", "9", "--out", p(&a)]);
    run_ok(&[
        "train-teacher",
        "-q",
        "--config",
        SMOKE,
        "--set",
        "train.seed=9",
        "--out",
        p(&b),
    ]);
    assert_eq!(
        fs::read(a.join("model.ckpt")).unwrap(),
        fs::read(b.join("model.ckpt")).unwrap()
    );
}

#[test]
fn show_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let once = run_ok(&["show-config", "--config", SMOKE, "--set", "retrieval.k_positive=all"]).stdout;
    let f = dir.path().join("resolved.conf");
    fs::write(&f, &once).unwrap();
    let twice = run_ok(&["show-config", "--config", p(&f)]).stdout;
    assert_eq!(once, twice);
    assert!(String::from_utf8(once).unwrap().contains("retrieval.k_positive = all"));
}

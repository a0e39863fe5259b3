use std::path::Path;
use std::process::{Command, Output};

fn adp(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adp"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

#[test]
fn validation_errors_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let wrong_periods = adp(&["train", "--set", "schedules.periods=12,6"], dir.path());
    assert_eq!(wrong_periods.status.code(), Some(1));
    assert!(text(&wrong_periods.stderr).contains("schedules.periods"));

    let unknown = adp(&["schedule", "--set", "model.depth=2"], dir.path());
    assert_eq!(unknown.status.code(), Some(1));
    assert!(text(&unknown.stderr).contains("model.depth"));

    assert_eq!(adp(&["launch"], dir.path()).status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = adp(&["schedule", "--config", "absent.cfg"], dir.path());
    assert_eq!(missing.status.code(), Some(2));

    let no_checkpoint = adp(&["eval", "nothing.ckpt"], dir.path());
    assert_eq!(no_checkpoint.status.code(), Some(2));

    std::fs::create_dir_all(dir.path().join("runs/blocked")).unwrap();
    let unwritable = adp(
        &["schedule", "--set", "io.schedule_csv=blocked"],
        dir.path(),
    );
    assert_eq!(unwritable.status.code(), Some(2));
}

#[test]
fn divergence_names_the_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let out = adp(
        &[
            "train",
            "--set",
            "schedules.main_eta=1e8",
            "--set",
            "schedules.eta_min=1e6",
            "--set",
            "schedules.grad_clip=0",
            "--set",
            "schedules.epochs=3",
            "--set",
            "schedules.periods=3,3,3",
            "--set",
            "schedules.warmup_epochs=1",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let err = text(&out.stderr);
    assert!(err.contains("non-finite") && err.contains("epoch"), "{err}");
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.cfg");
    std::fs::write(
        &cfg,
        "# short run\nschedules.epochs = 3\nschedules.periods = 3, 3, 1\nschedules.steps_per_epoch = 4\n",
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    let train = adp(&["train", "--config", cfg, "--out", "run"], dir.path());
    assert!(train.status.success(), "{}", text(&train.stderr));
    assert_eq!(text(&train.stdout).matches("epoch ").count(), 3);
    let metrics = std::fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,total,ce,triplet,dcml,lr_main,lr_b1,lr_b2,lr_b3\n"));

    let first = adp(&["eval", "--config", cfg, "--out", "run"], dir.path());
    let second = adp(&["eval", "--config", cfg, "--out", "run"], dir.path());
    assert!(first.status.success(), "{}", text(&first.stderr));
    assert_eq!(first.stdout, second.stdout);
    assert!(text(&first.stdout).contains("held-out domain: mAP"));

    let mismatch = adp(
        &[
            "eval",
            "--config",
            cfg,
            "--out",
            "run",
            "--set",
            "model.k=2",
            "--set",
            "schedules.periods=3,3",
        ],
        dir.path(),
    );
    assert_eq!(mismatch.status.code(), Some(2));
    assert!(text(&mismatch.stderr).contains("branch2.classifier"));
}

#[test]
fn perfect_features_score_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = adp(&["eval", "--perfect-features"], dir.path());
    assert!(out.status.success());
    let stdout = text(&out.stdout);
    assert!(
        stdout.contains("held-out domain: mAP 1.0000  Rank-1 1.0000"),
        "{stdout}"
    );
}

#[test]
fn schedule_prints_full_size_maximum() {
    let dir = tempfile::tempdir().unwrap();
    let out = adp(&["schedule", "--paper-defaults"], dir.path());
    assert!(out.status.success());
    let stdout = text(&out.stdout);
    let global: f64 = stdout
        .lines()
        .find_map(|l| l.strip_prefix("global max = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!((global - 0.2559).abs() < 1e-3);
    let csv = std::fs::read_to_string(dir.path().join("runs/schedule.csv")).unwrap();
    assert_eq!(csv.lines().count(), 121);

    let single = adp(
        &[
            "schedule",
            "--set",
            "model.k=1",
            "--set",
            "schedules.periods=12",
            "--out",
            "one",
        ],
        dir.path(),
    );
    assert!(single.status.success());
    let csv = std::fs::read_to_string(dir.path().join("one/schedule.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "epoch,main,branch1");
}

use std::path::Path;
use std::process::{Command, Output};

use idat_core::distill::LossKind;
use idat_core::model::AdapterVariant;
use idat_core::presets::tiny;

fn idat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_idat"))
        .args(args)
        .env("IDAT_LOG", "quiet")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, teacher: bool) -> String {
    let kind = if teacher {
        LossKind::Kl
    } else {
        LossKind::None
    };
    let mut cfg = tiny(AdapterVariant::Parallel, teacher, kind);
    cfg.out_dir = dir.join("run");
    let path = dir.join("tiny.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path.to_string_lossy().into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_eval_analyze_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), true);
    let out = tmp.path().join("out");
    let o = idat(&["train", "--config", &cfg, "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(summary["epochs"], 2);
    assert!(summary["teacher"].is_object());
    for f in [
        "student.ckpt",
        "teacher.ckpt",
        "metrics.csv",
        "summary.json",
        "effective_config.toml",
    ] {
        assert!(out.join(f).is_file(), "{f}");
    }

    let data = tmp.path().join("d").join("test.idds");
    let o = idat(&[
        "gen-data",
        "--out",
        s(&data),
        "--classes",
        "4",
        "--samples-per-class",
        "3",
        "--image-size",
        "8",
        "--split",
        "test",
    ]);
    assert!(o.status.success());
    let o = idat(&["eval", s(&out.join("student.ckpt")), s(&data)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let acc: f64 = stdout(&o).trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let report = tmp.path().join("analysis");
    let o = idat(&[
        "analyze",
        s(&out.join("student.ckpt")),
        s(&out.join("teacher.ckpt")),
        "--out",
        s(&report),
        "--bins",
        "21",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("# student vs teacher"));
    for f in [
        "student__weights.csv",
        "student__stats.txt",
        "teacher__weights.csv",
        "student__vs__teacher__comparison.csv",
    ] {
        assert!(report.join(f).is_file(), "{f}");
    }
    let csv = std::fs::read_to_string(report.join("teacher__weights.csv")).unwrap();
    let total: u64 = csv
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap())
        .sum();
    // teacher: depth 1, width 8, hidden 4 -> two 8x4 matrices
    assert_eq!(total, 64);
}

#[test]
fn seed_override_changes_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), false);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(idat(&["train", "--config", &cfg, "--out", s(&a)])
        .status
        .success());
    assert!(
        idat(&["train", "--config", &cfg, "--out", s(&b), "--seed", "7"])
            .status
            .success()
    );
    assert_ne!(
        std::fs::read(a.join("student.ckpt")).unwrap(),
        std::fs::read(b.join("student.ckpt")).unwrap()
    );
    let eff = std::fs::read_to_string(b.join("effective_config.toml")).unwrap();
    assert!(eff.contains("seed = 7"));
}

#[test]
fn user_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.toml");
    let cases: Vec<Vec<&str>> = vec![
        vec!["train", "--config", s(&missing)],
        vec!["train", "--preset", "no-such-preset"],
        vec!["train"],
        vec!["frobnicate"],
        vec!["eval", s(&missing), s(&missing)],
        vec!["gen-data", "--out", "x.idds", "--classes", "0"],
        vec!["analyze", s(&missing)],
    ];
    for args in cases {
        let o = idat(&args);
        assert_eq!(
            o.status.code(),
            Some(2),
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "epochs = 0\n").unwrap();
    let o = idat(&["train", "--config", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: "));

    let corrupt = tmp.path().join("corrupt.ckpt");
    std::fs::write(&corrupt, b"IDAT\x07\0\0\0").unwrap();
    let o = idat(&["analyze", s(&corrupt)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("version"));

    let o = Command::new(env!("CARGO_BIN_EXE_idat"))
        .args(["gen-data", "--out", "x"])
        .env("IDAT_LOG", "loud")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_through_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(AdapterVariant::Parallel, true, LossKind::Kl);
    cfg.epochs = 1;
    cfg.pretext.epochs = 0;
    let path = tmp.path().join("c.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    let out = tmp.path().join("grid");
    let o = idat(&[
        "train",
        "--config",
        s(&path),
        "--out",
        s(&out),
        "--sweep",
        "kl-grid",
        "--jobs",
        "4",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("sweep_summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 17);
    assert_eq!(
        idat(&["train", "--config", s(&path), "--sweep", "nope"])
            .status
            .code(),
        Some(2)
    );
}

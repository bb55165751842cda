use std::path::{Path, PathBuf};

use idat_core::data::{generate_synthetic, save_dataset, Split};
use idat_core::distill::LossKind;
use idat_core::experiment::{
    run_experiment, DataSource, ExperimentConfig, EFFECTIVE_CONFIG_FILE, METRICS_FILE,
    STUDENT_CKPT, SUMMARY_FILE, TEACHER_CKPT,
};
use idat_core::model::{checkpoint, AdapterVariant};
use idat_core::presets::{preset, tiny, PRESET_NAMES};
use idat_core::sweep::{kl_grid, run_sweep, SWEEP_HEADER};
use idat_core::Error;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn shipped_configs_equal_builtin_presets() {
    for name in PRESET_NAMES {
        let path = configs_dir().join(format!("{name}.toml"));
        let loaded = ExperimentConfig::load(&path).unwrap();
        assert_eq!(loaded, preset(name).unwrap(), "{name}");
    }
}

fn field_of(cfg: &ExperimentConfig) -> String {
    match cfg.validate().unwrap_err() {
        Error::Config { field, .. } => field,
        other => panic!("expected a config error, got {other}"),
    }
}

#[test]
fn validation_names_the_offending_field() {
    let good = tiny(AdapterVariant::Parallel, true, LossKind::Kl);
    good.validate().unwrap();

    let mut c = good.clone();
    c.epochs = 0;
    assert_eq!(field_of(&c), "epochs");

    let mut c = good.clone();
    c.student.adapter.hidden_dim = 0;
    assert!(field_of(&c).starts_with("student.adapter"));

    let mut c = good.clone();
    c.plan.temperature = -1.0;
    assert!(field_of(&c).starts_with("plan"));

    let mut c = good.clone();
    c.teacher = None;
    assert_eq!(field_of(&c), "plan.loss_kind");

    let mut c = good.clone();
    c.teacher.as_mut().unwrap().model.num_classes = 3;
    assert_eq!(field_of(&c), "teacher.model.num_classes");

    let mut c = good.clone();
    c.data = DataSource::Files {
        train: "/nonexistent/a.idds".into(),
        test: "/nonexistent/b.idds".into(),
    };
    assert_eq!(field_of(&c), "data.files.train");

    let mut c = good.clone();
    c.optim.lr = f32::NAN;
    assert!(field_of(&c).starts_with("optim"));

    assert!(ExperimentConfig::from_toml("epochs = 1\nbogus = 2\n").is_err());
}

fn run_in(dir: &Path, mut cfg: ExperimentConfig) -> ExperimentConfig {
    cfg.out_dir = dir.to_path_buf();
    run_experiment(&cfg).unwrap();
    cfg
}

#[test]
fn runs_are_reproducible_from_their_effective_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(AdapterVariant::ParallelShared, true, LossKind::Mse);
    let (a, b, c) = (
        tmp.path().join("a"),
        tmp.path().join("b"),
        tmp.path().join("c"),
    );
    run_in(&a, cfg.clone());
    run_in(&b, cfg);
    let effective = ExperimentConfig::load(&a.join(EFFECTIVE_CONFIG_FILE)).unwrap();
    run_in(&c, effective);
    for f in [STUDENT_CKPT, TEACHER_CKPT, METRICS_FILE, SUMMARY_FILE] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f}");
        assert_eq!(read(a.join(f)), read(c.join(f)), "{f}");
    }
    let metrics = String::from_utf8(read(a.join(METRICS_FILE))).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 2 * 4);
    let student = checkpoint::load(a.join(STUDENT_CKPT)).unwrap();
    assert!(student.adapter_spec().is_some());
}

#[test]
fn baseline_run_writes_no_teacher() {
    let tmp = tempfile::tempdir().unwrap();
    run_in(
        tmp.path(),
        tiny(AdapterVariant::Sequential, false, LossKind::None),
    );
    assert!(tmp.path().join(STUDENT_CKPT).is_file());
    assert!(!tmp.path().join(TEACHER_CKPT).exists());
    let summary: serde_json::Value =
        serde_json::from_slice(&read(tmp.path().join(SUMMARY_FILE))).unwrap();
    assert!(summary.get("teacher").is_none());
    assert_eq!(summary["steps"], 8);
}

#[test]
fn file_datasets_and_backbone_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let base = tiny(AdapterVariant::Parallel, true, LossKind::Kl);
    let first = run_in(&tmp.path().join("first"), base.clone());
    let DataSource::Synthetic { spec, .. } = &first.data else {
        unreachable!()
    };
    let (train, test) = (tmp.path().join("train.idds"), tmp.path().join("test.idds"));
    save_dataset(&generate_synthetic(spec, Split::Train).unwrap(), &train).unwrap();
    save_dataset(&generate_synthetic(spec, Split::Test).unwrap(), &test).unwrap();

    let mut cfg = base.clone();
    cfg.data = DataSource::Files { train, test };
    assert_eq!(field_of(&cfg), "pretext.data");
    cfg.pretext.epochs = 0;
    run_in(&tmp.path().join("scratch"), cfg.clone());

    // A trained adapter checkpoint is not a valid backbone.
    cfg.pretext.student_checkpoint = Some(tmp.path().join("first").join(STUDENT_CKPT));
    cfg.out_dir = tmp.path().join("bad");
    assert!(matches!(run_experiment(&cfg), Err(Error::Usage(_))));
}

#[test]
fn sweep_writes_one_row_per_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let mut base = tiny(AdapterVariant::Parallel, true, LossKind::Kl);
    base.epochs = 1;
    base.pretext.epochs = 0;
    base.out_dir = tmp.path().join("grid");
    let cells = kl_grid(&base).unwrap();
    let summary = tmp.path().join("grid").join("sweep_summary.csv");
    let runs = run_sweep(&cells, 3, &summary).unwrap();
    assert_eq!(runs.len(), 16);
    let text = String::from_utf8(read(&summary)).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], SWEEP_HEADER);
    assert_eq!(lines.len(), 17);
    for (i, line) in lines[1..].iter().enumerate() {
        assert!(line.starts_with(&format!("{i},")), "{line}");
        assert_eq!(line.split(',').count(), SWEEP_HEADER.split(',').count());
    }
    let again = tmp.path().join("again.csv");
    run_sweep(&cells, 1, &again).unwrap();
    assert_eq!(read(&again), read(&summary));
}

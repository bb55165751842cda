//! Declarative experiment configuration and the end-to-end training driver.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::write_file;
use crate::data::{generate_synthetic, load_dataset, Dataset, Split, SyntheticSpec};
use crate::distill::{
    evaluate, DistillPlan, LossKind, LrSchedule, OptimConfig, TrainState, METRICS_HEADER,
};
use crate::error::{Error, Result};
use crate::model::{checkpoint, AdapterSpec, Model, ParamBreakdown, ViTConfig};
use crate::rng::{derive_seed, stream, stream_rng};

pub const STUDENT_CKPT: &str = "student.ckpt";
pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub model: ViTConfig,
    pub adapter: AdapterSpec,
}

/// Training and test data: generated, or read from IDDS files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum DataSource {
    Synthetic {
        spec: SyntheticSpec,
        /// Defaults to `spec.samples_per_class`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_samples_per_class: Option<usize>,
    },
    Files {
        train: PathBuf,
        test: PathBuf,
    },
}

fn default_pretext_epochs() -> usize {
    5
}
fn default_pretext_lr() -> f32 {
    1e-3
}
fn default_pretext_warmup() -> usize {
    1
}

/// Full-backbone training on a disjoint task before adapters are injected.
/// A supplied checkpoint replaces this stage for its model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretextConfig {
    #[serde(default = "default_pretext_epochs")]
    pub epochs: usize,
    #[serde(default = "default_pretext_lr")]
    pub lr: f32,
    #[serde(default = "default_pretext_warmup")]
    pub warmup_epochs: usize,
    /// Pretext data; for synthetic runs it defaults to the main spec's
    /// disjoint pretext task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<SyntheticSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub student_checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_checkpoint: Option<PathBuf>,
}

impl Default for PretextConfig {
    fn default() -> Self {
        Self {
            epochs: default_pretext_epochs(),
            lr: default_pretext_lr(),
            warmup_epochs: default_pretext_warmup(),
            data: None,
            student_checkpoint: None,
            teacher_checkpoint: None,
        }
    }
}

fn default_batch_size() -> usize {
    32
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Permits a teacher wider than the student.
    #[serde(default)]
    pub allow_larger_teacher: bool,
    pub data: DataSource,
    pub student: ModelSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<ModelSection>,
    pub plan: DistillPlan,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub pretext: PretextConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// The configuration with every default written out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        self.student.model.validate("student.model")?;
        self.student
            .adapter
            .validate(self.student.model.width, "student.adapter")?;
        if let Some(t) = &self.teacher {
            t.model.validate("teacher.model")?;
            t.adapter.validate(t.model.width, "teacher.adapter")?;
            if t.model.width > self.student.model.width && !self.allow_larger_teacher {
                return Err(Error::config(
                    "teacher.model.width",
                    format!(
                        "teacher width {} exceeds student width {}; set allow_larger_teacher = true to permit this",
                        t.model.width, self.student.model.width
                    ),
                ));
            }
            if t.model.num_classes != self.student.model.num_classes {
                return Err(Error::config(
                    "teacher.model.num_classes",
                    "must equal student.model.num_classes",
                ));
            }
            if (t.model.image_size, t.model.channels)
                != (self.student.model.image_size, self.student.model.channels)
            {
                return Err(Error::config(
                    "teacher.model.image_size",
                    "teacher and student must accept the same images",
                ));
            }
        } else if self.plan.loss_kind != LossKind::None {
            return Err(Error::config(
                "plan.loss_kind",
                "must be \"none\" when no teacher is configured",
            ));
        }
        self.plan.validate("plan")?;
        self.optim.validate("optim")?;
        let s = &self.student.model;
        match &self.data {
            DataSource::Synthetic {
                spec,
                test_samples_per_class,
            } => {
                spec.validate("data.synthetic.spec")?;
                if *test_samples_per_class == Some(0) {
                    return Err(Error::config(
                        "data.synthetic.test_samples_per_class",
                        "must be positive",
                    ));
                }
                if spec.num_classes != s.num_classes {
                    return Err(Error::config(
                        "data.synthetic.spec.num_classes",
                        "must equal student.model.num_classes",
                    ));
                }
                if (spec.image_size, spec.channels) != (s.image_size, s.channels) {
                    return Err(Error::config(
                        "data.synthetic.spec.image_size",
                        "must match the student's image size and channels",
                    ));
                }
            }
            DataSource::Files { train, test } => {
                for (field, p) in [("data.files.train", train), ("data.files.test", test)] {
                    if !p.is_file() {
                        return Err(Error::config(
                            field,
                            format!("{} does not exist", p.display()),
                        ));
                    }
                }
            }
        }
        let pt = &self.pretext;
        if pt.epochs > 0 && !(pt.lr > 0.0 && pt.lr.is_finite()) {
            return Err(Error::config("pretext.lr", "must be positive"));
        }
        if let Some(spec) = &pt.data {
            spec.validate("pretext.data")?;
            if (spec.image_size, spec.channels) != (s.image_size, s.channels) {
                return Err(Error::config(
                    "pretext.data.image_size",
                    "must match the student's image size and channels",
                ));
            }
        }
        for (field, p) in [
            ("pretext.student_checkpoint", &pt.student_checkpoint),
            ("pretext.teacher_checkpoint", &pt.teacher_checkpoint),
        ] {
            if let Some(p) = p {
                if !p.is_file() {
                    return Err(Error::config(
                        field,
                        format!("{} does not exist", p.display()),
                    ));
                }
            }
        }
        if pt.epochs > 0 && pt.data.is_none() && matches!(self.data, DataSource::Files { .. }) {
            let missing_student = pt.student_checkpoint.is_none();
            let missing_teacher = self.teacher.is_some() && pt.teacher_checkpoint.is_none();
            if missing_student || missing_teacher {
                return Err(Error::config(
                    "pretext.data",
                    "file-based runs need pretext data or backbone checkpoints (or pretext.epochs = 0)",
                ));
            }
        }
        Ok(())
    }

    fn pretext_spec(&self) -> Option<SyntheticSpec> {
        self.pretext.data.clone().or_else(|| match &self.data {
            DataSource::Synthetic { spec, .. } => Some(spec.pretext()),
            DataSource::Files { .. } => None,
        })
    }

    /// Training and test sets.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = match &self.data {
            DataSource::Synthetic {
                spec,
                test_samples_per_class,
            } => {
                let test_spec = SyntheticSpec {
                    samples_per_class: test_samples_per_class.unwrap_or(spec.samples_per_class),
                    ..spec.clone()
                };
                (
                    generate_synthetic(spec, Split::Train)?,
                    generate_synthetic(&test_spec, Split::Test)?,
                )
            }
            DataSource::Files { train, test } => {
                let size = Some(self.student.model.image_size);
                (
                    load_dataset(train, Split::Train, size)?,
                    load_dataset(test, Split::Test, size)?,
                )
            }
        };
        for ds in [&train, &test] {
            if ds.num_classes() != self.student.model.num_classes {
                return Err(Error::config(
                    "student.model.num_classes",
                    format!("dataset declares {} classes", ds.num_classes()),
                ));
            }
            if ds.image_dims().2 != self.student.model.channels {
                return Err(Error::config(
                    "student.model.channels",
                    format!("dataset images have {} channels", ds.image_dims().2),
                ));
            }
        }
        Ok((train, test))
    }
}

/// Accuracies and parameter counts of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub best_test_accuracy: f64,
    pub trainable: ParamBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub epochs: usize,
    pub steps: u64,
    pub loss_kind: LossKind,
    pub lambda: f32,
    pub temperature: f32,
    /// Mean total loss per epoch.
    pub epoch_mean_loss: Vec<f64>,
    pub student: ModelSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<ModelSummary>,
}

pub struct RunOutcome {
    pub summary: RunSummary,
    pub student: Model,
    pub teacher: Option<Model>,
}

fn pretrain(
    cfg: &ViTConfig,
    init_stream: u64,
    checkpoint_path: Option<&Path>,
    exp: &ExperimentConfig,
    batch_seed: u64,
) -> Result<Model> {
    if let Some(path) = checkpoint_path {
        let model = checkpoint::load(path)?;
        if model.adapter_spec().is_some() {
            return Err(Error::Usage(format!(
                "{}: backbone checkpoint already contains adapters",
                path.display()
            )));
        }
        let mut expected = cfg.clone();
        expected.num_classes = model.config().num_classes;
        if model.config() != &expected {
            return Err(Error::Usage(format!(
                "{}: backbone architecture does not match the config",
                path.display()
            )));
        }
        return Ok(model);
    }
    let pretext = exp.pretext_spec();
    let mut arch = cfg.clone();
    if let Some(spec) = &pretext {
        arch.num_classes = spec.num_classes;
    }
    let mut model = Model::new(arch, &mut stream_rng(exp.seed, init_stream))?;
    let pt = &exp.pretext;
    let Some(spec) = pretext.filter(|_| pt.epochs > 0) else {
        return Ok(model);
    };
    let data = generate_synthetic(&spec, Split::Train)?;
    model.set_all_trainable(true);
    let optim = OptimConfig {
        lr: pt.lr,
        warmup_epochs: pt.warmup_epochs,
        ..exp.optim.clone()
    };
    let steps = data.len().div_ceil(exp.batch_size) as u64;
    let schedule = LrSchedule::new(&optim, steps, pt.epochs as u64);
    let mut state = TrainState::pretext(model, &optim, schedule, batch_seed)?;
    for epoch in 0..pt.epochs {
        let reports = state.train_epoch(&data, exp.batch_size, epoch as u64)?;
        let mean = reports.iter().map(|r| r.loss.total as f64).sum::<f64>() / reports.len() as f64;
        log::debug!("pretext epoch {}: loss {mean:.4}", epoch + 1);
    }
    let (mut model, _) = state.into_models();
    model.set_all_trainable(false);
    Ok(model)
}

fn prepare(
    section: &ModelSection,
    init_stream: u64,
    head_stream: u64,
    adapter_stream: u64,
    checkpoint_path: Option<&Path>,
    exp: &ExperimentConfig,
    batch_seed: u64,
) -> Result<Model> {
    let mut model = pretrain(
        &section.model,
        init_stream,
        checkpoint_path,
        exp,
        batch_seed,
    )?;
    model.reset_head(
        section.model.num_classes,
        &mut stream_rng(exp.seed, head_stream),
    )?;
    model.inject_adapters(section.adapter, &mut stream_rng(exp.seed, adapter_stream))?;
    Ok(model)
}

/// Builds the models (pretext stage included) and the training state.
pub fn build_state(exp: &ExperimentConfig, steps_per_epoch: u64) -> Result<TrainState> {
    let student = prepare(
        &exp.student,
        stream::STUDENT_INIT,
        stream::STUDENT_HEAD,
        stream::STUDENT_ADAPTER,
        exp.pretext.student_checkpoint.as_deref(),
        exp,
        derive_seed(exp.seed, 1),
    )?;
    let teacher = exp
        .teacher
        .as_ref()
        .map(|t| {
            prepare(
                t,
                stream::TEACHER_INIT,
                stream::TEACHER_HEAD,
                stream::TEACHER_ADAPTER,
                exp.pretext.teacher_checkpoint.as_deref(),
                exp,
                derive_seed(exp.seed, 2),
            )
        })
        .transpose()?;
    let schedule = LrSchedule::new(&exp.optim, steps_per_epoch, exp.epochs as u64);
    TrainState::new(
        student,
        teacher,
        exp.plan,
        &exp.optim,
        schedule,
        exp.seed,
        exp.allow_larger_teacher,
    )
}

/// Runs one experiment and writes checkpoints, the metrics log, the summary
/// and the effective configuration to `exp.out_dir`.
pub fn run_experiment(exp: &ExperimentConfig) -> Result<RunOutcome> {
    exp.validate()?;
    let started = Instant::now();
    let (train, test) = exp.datasets()?;
    let out = exp.out_dir.as_path();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_file(&out.join(EFFECTIVE_CONFIG_FILE), exp.to_toml().as_bytes())?;

    let steps_per_epoch = train.len().div_ceil(exp.batch_size) as u64;
    let mut state = build_state(exp, steps_per_epoch)?;
    log::info!(
        "{}: {} train / {} test samples, {} epochs of {} steps",
        out.display(),
        train.len(),
        test.len(),
        exp.epochs,
        steps_per_epoch
    );

    let mut metrics = String::from(METRICS_HEADER);
    metrics.push('\n');
    let mut epoch_mean_loss = Vec::with_capacity(exp.epochs);
    let mut best_student = 0.0f64;
    let mut best_teacher = 0.0f64;
    let mut last = (0.0, 0.0);
    for epoch in 0..exp.epochs {
        let reports = state.train_epoch(&train, exp.batch_size, epoch as u64)?;
        for r in &reports {
            metrics.push_str(&r.csv_row());
            metrics.push('\n');
        }
        let mean = reports.iter().map(|r| r.loss.total as f64).sum::<f64>() / reports.len() as f64;
        epoch_mean_loss.push(mean);
        let acc_s = evaluate(state.student(), &test, exp.batch_size)?;
        let acc_t = state
            .teacher()
            .map(|t| evaluate(t, &test, exp.batch_size))
            .transpose()?
            .unwrap_or(0.0);
        best_student = best_student.max(acc_s);
        best_teacher = best_teacher.max(acc_t);
        last = (acc_s, acc_t);
        log::info!(
            "epoch {:>3}: loss {mean:.4}  test acc student {acc_s:.3}  teacher {acc_t:.3}",
            epoch + 1
        );
    }
    write_file(&out.join(METRICS_FILE), metrics.as_bytes())?;

    let steps = state.step_count();
    let (student, teacher) = state.into_models();
    checkpoint::save(&student, out.join(STUDENT_CKPT))?;
    if let Some(t) = &teacher {
        checkpoint::save(t, out.join(TEACHER_CKPT))?;
    }
    let student_summary = ModelSummary {
        train_accuracy: evaluate(&student, &train, exp.batch_size)?,
        test_accuracy: last.0,
        best_test_accuracy: best_student,
        trainable: student.trainable_param_count(),
    };
    let teacher_summary = teacher
        .as_ref()
        .map(|t| -> Result<ModelSummary> {
            Ok(ModelSummary {
                train_accuracy: evaluate(t, &train, exp.batch_size)?,
                test_accuracy: last.1,
                best_test_accuracy: best_teacher,
                trainable: t.trainable_param_count(),
            })
        })
        .transpose()?;
    let summary = RunSummary {
        seed: exp.seed,
        epochs: exp.epochs,
        steps,
        loss_kind: exp.plan.loss_kind,
        lambda: exp.plan.lambda,
        temperature: exp.plan.temperature,
        epoch_mean_loss,
        student: student_summary,
        teacher: teacher_summary,
    };
    let json =
        serde_json::to_string_pretty(&summary).map_err(|e| Error::Internal(e.to_string()))?;
    write_file(&out.join(SUMMARY_FILE), (json + "\n").as_bytes())?;
    log::info!(
        "{}: finished in {:.1}s",
        out.display(),
        started.elapsed().as_secs_f64()
    );
    Ok(RunOutcome {
        summary,
        student,
        teacher,
    })
}

//! Built-in experiment configurations at desk scale.

use std::path::PathBuf;

use crate::data::SyntheticSpec;
use crate::distill::{DistillPlan, LossKind, OptimConfig};
use crate::error::{Error, Result};
use crate::experiment::{DataSource, ExperimentConfig, ModelSection, PretextConfig};
use crate::model::{AdapterSpec, AdapterVariant, ViTConfig};

/// Names accepted by [`preset`].
pub const PRESET_NAMES: [&str; 9] = [
    "baseline-seq",
    "baseline-par",
    "baseline-ps",
    "idat-S-kl",
    "idat-P-kl",
    "idat-PS-kl",
    "idat-S-mse",
    "idat-P-mse",
    "idat-PS-mse",
];

pub fn student_arch() -> ViTConfig {
    ViTConfig {
        image_size: 32,
        patch_size: 8,
        channels: 3,
        depth: 4,
        width: 64,
        heads: 4,
        mlp_ratio: 4,
        num_classes: 10,
    }
}

pub fn teacher_arch() -> ViTConfig {
    ViTConfig {
        depth: 2,
        width: 32,
        heads: 2,
        ..student_arch()
    }
}

pub fn synthetic_task() -> SyntheticSpec {
    SyntheticSpec {
        num_classes: 10,
        samples_per_class: 100,
        image_size: 32,
        channels: 3,
        noise: 0.05,
        seed: 0,
    }
}

/// Shared base: 30 epochs, batch 32, 3 warmup epochs, synthetic 10-class task.
pub fn base(variant: AdapterVariant, teacher: bool, loss_kind: LossKind) -> ExperimentConfig {
    let adapter = AdapterSpec::new(variant);
    ExperimentConfig {
        seed: 0,
        epochs: 30,
        batch_size: 32,
        out_dir: PathBuf::from("runs/default"),
        allow_larger_teacher: false,
        data: DataSource::Synthetic {
            spec: synthetic_task(),
            test_samples_per_class: None,
        },
        student: ModelSection {
            model: student_arch(),
            adapter,
        },
        teacher: teacher.then(|| ModelSection {
            model: teacher_arch(),
            adapter,
        }),
        plan: DistillPlan::new(loss_kind),
        optim: OptimConfig {
            warmup_epochs: 3,
            ..OptimConfig::default()
        },
        pretext: PretextConfig::default(),
    }
}

/// A few-second configuration: 8×8 images, 4 classes of 8 samples, a
/// depth-2 width-16 student and a depth-1 width-8 teacher, 2 epochs.
pub fn tiny(variant: AdapterVariant, teacher: bool, loss_kind: LossKind) -> ExperimentConfig {
    let student = ViTConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        depth: 2,
        width: 16,
        heads: 2,
        mlp_ratio: 2,
        num_classes: 4,
    };
    let teacher_model = ViTConfig {
        depth: 1,
        width: 8,
        heads: 1,
        ..student.clone()
    };
    let adapter = AdapterSpec::new(variant);
    let spec = SyntheticSpec {
        num_classes: 4,
        samples_per_class: 8,
        image_size: 8,
        channels: 3,
        noise: 0.05,
        seed: 0,
    };
    ExperimentConfig {
        epochs: 2,
        batch_size: 8,
        data: DataSource::Synthetic {
            spec,
            test_samples_per_class: Some(4),
        },
        student: ModelSection {
            model: student,
            adapter,
        },
        teacher: teacher.then_some(ModelSection {
            model: teacher_model,
            adapter,
        }),
        optim: OptimConfig {
            warmup_epochs: 1,
            ..OptimConfig::default()
        },
        pretext: PretextConfig {
            epochs: 1,
            ..PretextConfig::default()
        },
        ..base(variant, teacher, loss_kind)
    }
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    use AdapterVariant::*;
    let cfg = match name {
        "baseline-seq" => base(Sequential, false, LossKind::None),
        "baseline-par" => base(Parallel, false, LossKind::None),
        "baseline-ps" => base(ParallelShared, false, LossKind::None),
        "idat-S-kl" => base(Sequential, true, LossKind::Kl),
        "idat-P-kl" => base(Parallel, true, LossKind::Kl),
        "idat-PS-kl" => base(ParallelShared, true, LossKind::Kl),
        "idat-S-mse" => base(Sequential, true, LossKind::Mse),
        "idat-P-mse" => base(Parallel, true, LossKind::Mse),
        "idat-PS-mse" => base(ParallelShared, true, LossKind::Mse),
        _ => {
            return Err(Error::Usage(format!(
                "unknown preset {name:?}; available: {}",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    Ok(ExperimentConfig {
        out_dir: PathBuf::from("runs").join(name),
        ..cfg
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_name_resolves_and_validates() {
        for name in PRESET_NAMES {
            let cfg = preset(name).unwrap();
            cfg.validate().unwrap();
            assert_eq!(cfg.teacher.is_some(), name.starts_with("idat-"));
        }
        assert!(preset("idat-seq-kl").is_err());
        assert!(preset("baseline-P").is_err());
        assert!(preset("idat-P-cos").is_err());
    }

    #[test]
    fn tiny_validates() {
        for v in AdapterVariant::ALL {
            tiny(v, true, LossKind::Kl).validate().unwrap();
            tiny(v, false, LossKind::None).validate().unwrap();
        }
    }

    #[test]
    fn toml_round_trip() {
        for name in PRESET_NAMES {
            let cfg = preset(name).unwrap();
            assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        }
    }
}

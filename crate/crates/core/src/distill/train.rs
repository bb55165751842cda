use serde::Serialize;

use super::loss::{loss_total, DistillPlan, LossBreakdown, LossKind};
use super::optim::{AdamW, LrSchedule, OptimConfig};
use crate::data::{make_batches, Batch, Dataset};
use crate::error::{Error, Result};
use crate::model::{Bound, Model};
use crate::tensor::{Tape, Tensor, Var};

/// Header of the per-step metrics log.
pub const METRICS_HEADER: &str = "step,lr,ce_s,ce_t,distill,total";

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepReport {
    pub step: u64,
    pub lr: f32,
    pub loss: LossBreakdown,
    pub grad_norm_student: f32,
    pub grad_norm_teacher: Option<f32>,
}

impl StepReport {
    /// One metrics line; absent components are left empty.
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f32>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.step,
            self.lr,
            self.loss.ce_s,
            opt(self.loss.ce_t),
            opt(self.loss.distill),
            self.loss.total
        )
    }
}

/// A model's parameter bindings on a tape and its logits.
type BoundOutput = (Bound, Var);

/// Jointly trained student and optional teacher.
#[derive(Clone, Debug)]
pub struct TrainState {
    student: Model,
    teacher: Option<Model>,
    plan: DistillPlan,
    student_opt: AdamW,
    teacher_opt: Option<AdamW>,
    schedule: LrSchedule,
    step: u64,
    seed: u64,
}

impl TrainState {
    /// Both models must already carry adapters. The teacher may not be wider
    /// than the student unless `allow_larger_teacher` is set.
    pub fn new(
        student: Model,
        teacher: Option<Model>,
        plan: DistillPlan,
        optim: &OptimConfig,
        schedule: LrSchedule,
        seed: u64,
        allow_larger_teacher: bool,
    ) -> Result<Self> {
        if student.adapter_spec().is_none() {
            return Err(Error::Usage(
                "student has no adapters; inject them before training".into(),
            ));
        }
        if let Some(t) = &teacher {
            if t.adapter_spec().is_none() {
                return Err(Error::Usage(
                    "teacher has no adapters; inject them before training".into(),
                ));
            }
            if t.config().width > student.config().width && !allow_larger_teacher {
                return Err(Error::config(
                    "teacher.width",
                    format!(
                        "teacher width {} exceeds student width {}; set allow_larger_teacher to permit this",
                        t.config().width,
                        student.config().width
                    ),
                ));
            }
        }
        Self::unchecked(student, teacher, plan, optim, schedule, seed)
    }

    /// A single fully trainable model with a plain cross-entropy objective,
    /// used for backbone pretraining.
    pub fn pretext(
        model: Model,
        optim: &OptimConfig,
        schedule: LrSchedule,
        seed: u64,
    ) -> Result<Self> {
        Self::unchecked(model, None, DistillPlan::baseline(), optim, schedule, seed)
    }

    fn unchecked(
        student: Model,
        teacher: Option<Model>,
        plan: DistillPlan,
        optim: &OptimConfig,
        schedule: LrSchedule,
        seed: u64,
    ) -> Result<Self> {
        plan.validate("plan")?;
        optim.validate("optim")?;
        if teacher.is_none() && plan.loss_kind != LossKind::None {
            return Err(Error::config(
                "plan.loss_kind",
                "must be none when there is no teacher",
            ));
        }
        if let Some(t) = &teacher {
            let (s, tc) = (student.config(), t.config());
            if s.num_classes != tc.num_classes {
                return Err(Error::config(
                    "teacher.num_classes",
                    format!(
                        "{} differs from the student's {}",
                        tc.num_classes, s.num_classes
                    ),
                ));
            }
            if (s.image_size, s.channels) != (tc.image_size, tc.channels) {
                return Err(Error::config(
                    "teacher.image_size",
                    "teacher and student must accept the same images",
                ));
            }
        }
        let student_opt = AdamW::new(&student, optim);
        let teacher_opt = teacher.as_ref().map(|t| AdamW::new(t, optim));
        Ok(Self {
            student,
            teacher,
            plan,
            student_opt,
            teacher_opt,
            schedule,
            step: 0,
            seed,
        })
    }

    pub fn student(&self) -> &Model {
        &self.student
    }

    pub fn teacher(&self) -> Option<&Model> {
        self.teacher.as_ref()
    }

    pub fn plan(&self) -> &DistillPlan {
        &self.plan
    }

    pub fn schedule(&self) -> &LrSchedule {
        &self.schedule
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn into_models(self) -> (Model, Option<Model>) {
        (self.student, self.teacher)
    }

    fn forward_pair(
        &self,
        tape: &mut Tape,
        images: &Tensor,
    ) -> Result<(BoundOutput, Option<BoundOutput>)> {
        let sb = self.student.bind(tape)?;
        let ys = self.student.forward(tape, &sb, images)?;
        let teacher = match &self.teacher {
            Some(t) => {
                let tb = t.bind(tape)?;
                let yt = t.forward(tape, &tb, images)?;
                Some((tb, yt))
            }
            None => None,
        };
        Ok(((sb, ys), teacher))
    }

    /// Student and teacher logits exactly as the training step computes them.
    pub fn joint_logits(&self, images: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        let mut tape = Tape::new();
        let ((_, ys), teacher) = self.forward_pair(&mut tape, images)?;
        let yt = teacher.map(|(_, yt)| tape.value(yt).clone());
        Ok((tape.value(ys).clone(), yt))
    }

    /// One forward of both models, one backward through the joint objective
    /// and one AdamW update per model.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepReport> {
        let lr = self.schedule.at(self.step);
        let mut tape = Tape::new();
        let ((sb, ys), teacher) = self.forward_pair(&mut tape, &batch.images)?;
        let yt = teacher.as_ref().map(|(_, yt)| *yt);
        let (loss, breakdown) = loss_total(&mut tape, ys, yt, &batch.labels, &self.plan)?;
        tape.backward(loss)?;

        let (sgrads, snorm) = collect_grads(&mut tape, &self.student, &sb);
        let tgrads = teacher.map(|(tb, _)| {
            collect_grads(
                &mut tape,
                self.teacher.as_ref().expect("teacher bound"),
                &tb,
            )
        });
        self.student_opt.step(&mut self.student, &sgrads, lr)?;
        let mut tnorm = None;
        if let (Some(t), Some(opt), Some((grads, norm))) =
            (self.teacher.as_mut(), self.teacher_opt.as_mut(), tgrads)
        {
            opt.step(t, &grads, lr)?;
            tnorm = Some(norm);
        }
        let report = StepReport {
            step: self.step,
            lr,
            loss: breakdown,
            grad_norm_student: snorm,
            grad_norm_teacher: tnorm,
        };
        self.step += 1;
        Ok(report)
    }

    /// Runs every batch of epoch `epoch` in the order given by [`make_batches`].
    pub fn train_epoch(
        &mut self,
        data: &Dataset,
        batch_size: usize,
        epoch: u64,
    ) -> Result<Vec<StepReport>> {
        make_batches(data.len(), batch_size, self.seed, epoch)?
            .iter()
            .map(|idx| {
                let batch = data.gather(idx)?;
                self.train_step(&batch)
            })
            .collect()
    }
}

fn collect_grads(tape: &mut Tape, model: &Model, bound: &Bound) -> (Vec<Option<Vec<f32>>>, f32) {
    let mut sq = 0.0f64;
    let grads = model
        .parameters()
        .iter()
        .zip(bound.vars())
        .map(|(p, &v)| {
            if !p.trainable {
                return None;
            }
            let g = tape
                .take_grad(v)
                .unwrap_or_else(|| vec![0.0; p.tensor.numel()]);
            sq += g.iter().map(|&x| x as f64 * x as f64).sum::<f64>();
            Some(g)
        })
        .collect();
    (grads, sq.sqrt() as f32)
}

/// Index of the largest entry of each row; ties resolve to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

/// Top-1 accuracy of `model` alone on `data`.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty dataset".into()));
    }
    if data.num_classes() != model.config().num_classes {
        return Err(Error::Usage(format!(
            "dataset has {} classes but the model predicts {}",
            data.num_classes(),
            model.config().num_classes
        )));
    }
    let mut correct = 0usize;
    for batch in data.sequential_batches(batch_size)? {
        let logits = model.logits(&batch.images)?;
        correct += argmax_rows(&logits)
            .iter()
            .zip(&batch.labels)
            .filter(|(p, &l)| **p == l as usize)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

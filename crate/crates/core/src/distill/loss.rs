use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Which logit-matching term joins the two cross-entropies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Kl,
    Mse,
    Mae,
    Cos,
    None,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Kl => "kl",
            LossKind::Mse => "mse",
            LossKind::Mae => "mae",
            LossKind::Cos => "cos",
            LossKind::None => "none",
        }
    }
}

/// Form of the KL term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlConvention {
    /// `Σ softmax(y_s) · log(softmax(y_s/T) / softmax(y_t/T))`
    #[default]
    Verbatim,
    /// `T² · KL(softmax(y_t/T) ‖ softmax(y_s/T))`
    Standard,
}

fn default_lambda() -> f32 {
    1.0
}

fn default_temperature() -> f32 {
    5.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillPlan {
    pub loss_kind: LossKind,
    #[serde(default = "default_lambda")]
    pub lambda: f32,
    #[serde(default = "default_temperature")]
    pub temperature: f32,
    #[serde(default)]
    pub kl_convention: KlConvention,
    /// Stops the distillation term's gradient from reaching the teacher.
    #[serde(default)]
    pub detach_teacher: bool,
}

impl Default for DistillPlan {
    fn default() -> Self {
        Self::new(LossKind::Kl)
    }
}

impl DistillPlan {
    pub fn new(loss_kind: LossKind) -> Self {
        Self {
            loss_kind,
            lambda: default_lambda(),
            temperature: default_temperature(),
            kl_convention: KlConvention::Verbatim,
            detach_teacher: false,
        }
    }

    pub fn baseline() -> Self {
        Self::new(LossKind::None)
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(
                format!("{prefix}.lambda"),
                "must be finite and nonnegative",
            ));
        }
        if self.loss_kind == LossKind::Kl
            && !(self.temperature > 0.0 && self.temperature.is_finite())
        {
            return Err(Error::config(
                format!("{prefix}.temperature"),
                "must be positive for kl",
            ));
        }
        Ok(())
    }
}

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Shape {
            op,
            lhs: tape.shape(a).to_vec(),
            rhs: tape.shape(b).to_vec(),
        });
    }
    Ok(())
}

fn rows(tape: &Tape, op: &'static str, x: Var) -> Result<(usize, usize)> {
    match tape.shape(x) {
        &[b, k] => Ok((b, k)),
        s => Err(Error::Shape {
            op,
            lhs: s.to_vec(),
            rhs: vec![0, 0],
        }),
    }
}

/// Mean over the batch of `−log softmax(logits)[label]`.
pub fn loss_ce(tape: &mut Tape, logits: Var, labels: &[u32]) -> Result<Var> {
    let (b, k) = rows(tape, "loss_ce", logits)?;
    if labels.len() != b {
        return Err(Error::Shape {
            op: "loss_ce",
            lhs: vec![b, k],
            rhs: vec![labels.len()],
        });
    }
    let mut onehot = vec![0.0f32; b * k];
    for (i, &l) in labels.iter().enumerate() {
        if l as usize >= k {
            return Err(Error::Data(format!(
                "label {l} at batch index {i} is out of range for {k} classes"
            )));
        }
        onehot[i * k + l as usize] = 1.0;
    }
    let onehot = tape.constant(Tensor::new(vec![b, k], onehot)?)?;
    let logp = tape.log_softmax(logits, 1)?;
    let picked = tape.mul(logp, onehot)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / b as f32)
}

/// Mean over all elements of `(y_s − y_t)²`.
pub fn loss_mse(tape: &mut Tape, ys: Var, yt: Var) -> Result<Var> {
    same_shape(tape, "loss_mse", ys, yt)?;
    let d = tape.sub(ys, yt)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

/// Mean over all elements of `|y_s − y_t|`.
pub fn loss_mae(tape: &mut Tape, ys: Var, yt: Var) -> Result<Var> {
    same_shape(tape, "loss_mae", ys, yt)?;
    let d = tape.sub(ys, yt)?;
    let a = tape.abs(d)?;
    tape.mean(a)
}

/// Mean over rows of `1 − cos(y_s, y_t)`.
pub fn loss_cos(tape: &mut Tape, ys: Var, yt: Var) -> Result<Var> {
    same_shape(tape, "loss_cos", ys, yt)?;
    let (_, k) = rows(tape, "loss_cos", ys)?;
    for (who, v) in [("student", ys), ("teacher", yt)] {
        if let Some(r) = tape
            .data(v)
            .chunks(k)
            .position(|row| row.iter().all(|&x| x == 0.0))
        {
            return Err(Error::Data(format!("{who} logit row {r} has zero norm")));
        }
    }
    let dot = tape.mul(ys, yt)?;
    let dot = tape.sum_axis(dot, 1)?;
    let ss = tape.mul(ys, ys)?;
    let ss = tape.sum_axis(ss, 1)?;
    let tt = tape.mul(yt, yt)?;
    let tt = tape.sum_axis(tt, 1)?;
    let norms = tape.mul(ss, tt)?;
    let norms = tape.sqrt(norms)?;
    let cos = tape.div(dot, norms)?;
    let m = tape.mean(cos)?;
    let neg = tape.neg(m)?;
    tape.add_scalar(neg, 1.0)
}

/// Temperature-softened KL between student and teacher logits, averaged over
/// the batch. Gradients reach both inputs.
pub fn loss_kl(
    tape: &mut Tape,
    ys: Var,
    yt: Var,
    temperature: f32,
    convention: KlConvention,
) -> Result<Var> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::config(
            "temperature",
            format!("must be positive, got {temperature}"),
        ));
    }
    same_shape(tape, "loss_kl", ys, yt)?;
    let (b, _) = rows(tape, "loss_kl", ys)?;
    let inv_t = 1.0 / temperature;
    let ys_t = tape.scale(ys, inv_t)?;
    let yt_t = tape.scale(yt, inv_t)?;
    let log_ps = tape.log_softmax(ys_t, 1)?;
    let log_pt = tape.log_softmax(yt_t, 1)?;
    let summed = match convention {
        KlConvention::Verbatim => {
            let weight = tape.softmax(ys, 1)?;
            let ratio = tape.sub(log_ps, log_pt)?;
            let terms = tape.mul(weight, ratio)?;
            tape.sum(terms)?
        }
        KlConvention::Standard => {
            let pt = tape.exp(log_pt)?;
            let ratio = tape.sub(log_pt, log_ps)?;
            let terms = tape.mul(pt, ratio)?;
            let s = tape.sum(terms)?;
            tape.scale(s, temperature * temperature)?
        }
    };
    tape.scale(summed, 1.0 / b as f32)
}

/// Loss values of one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_s: f32,
    pub ce_t: Option<f32>,
    pub distill: Option<f32>,
    pub total: f32,
}

/// `ce(y_s) + ce(y_t) + λ·distill(y_s, y_t)`.
///
/// Without a teacher the objective is `ce(y_s)` alone. The distillation term
/// is left out of the graph entirely when `loss_kind` is `none` or λ is 0;
/// it is still evaluated for reporting when λ is 0.
pub fn loss_total(
    tape: &mut Tape,
    ys: Var,
    yt: Option<Var>,
    labels: &[u32],
    plan: &DistillPlan,
) -> Result<(Var, LossBreakdown)> {
    plan.validate("plan")?;
    let ce_s = loss_ce(tape, ys, labels)?;
    let Some(yt) = yt else {
        if plan.loss_kind != LossKind::None {
            return Err(Error::config(
                "plan.loss_kind",
                "distillation requires a teacher",
            ));
        }
        let v = tape.data(ce_s)[0];
        return Ok((
            ce_s,
            LossBreakdown {
                ce_s: v,
                ce_t: None,
                distill: None,
                total: v,
            },
        ));
    };
    let ce_t = loss_ce(tape, yt, labels)?;
    let mut total = tape.add(ce_s, ce_t)?;
    let mut distill_value = None;
    if plan.loss_kind != LossKind::None {
        let target = if plan.detach_teacher {
            tape.detach(yt)?
        } else {
            yt
        };
        let d = match plan.loss_kind {
            LossKind::Kl => loss_kl(tape, ys, target, plan.temperature, plan.kl_convention)?,
            LossKind::Mse => loss_mse(tape, ys, target)?,
            LossKind::Mae => loss_mae(tape, ys, target)?,
            LossKind::Cos => loss_cos(tape, ys, target)?,
            LossKind::None => unreachable!(),
        };
        distill_value = Some(tape.data(d)[0]);
        if plan.lambda != 0.0 {
            let weighted = tape.scale(d, plan.lambda)?;
            total = tape.add(total, weighted)?;
        }
    }
    let breakdown = LossBreakdown {
        ce_s: tape.data(ce_s)[0],
        ce_t: Some(tape.data(ce_t)[0]),
        distill: distill_value,
        total: tape.data(total)[0],
    };
    Ok((total, breakdown))
}

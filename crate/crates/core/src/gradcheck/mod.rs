//! Central finite-difference checks of tape gradients.
//!
//! Each check projects an op's output onto a fixed random direction `w`, so
//! the scalar being differentiated is `Σ wᵢ·yᵢ`. The analytic side backprops
//! that projection on a recording tape; the numeric side evaluates the
//! forward pass on inference tapes and forms the projection in f64.
//!
//! Whole-model checks difference an independent f64 implementation of the
//! forward pass and losses instead, which removes f32 rounding from the
//! numeric side.

pub mod reference;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::distill::{
    loss_ce, loss_cos, loss_kl, loss_mae, loss_mse, loss_total, DistillPlan, KlConvention, LossKind,
};
use crate::error::{Error, Result};
use crate::model::{AdapterSpec, AdapterVariant, Model, ViTConfig};
use crate::rng::{stream_rng, StreamRng};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerance {
    pub rel: f64,
    pub abs: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            rel: 2e-3,
            abs: 1e-5,
        }
    }
}

impl Tolerance {
    pub fn accepts(&self, analytic: f64, numeric: f64) -> bool {
        let diff = (analytic - numeric).abs();
        diff <= self.abs || diff <= self.rel * analytic.abs().max(numeric.abs())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub case: String,
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckReport {
    pub cases: usize,
    pub elements: usize,
    pub max_abs_err: f64,
    /// Largest relative error among elements outside the absolute floor.
    pub max_rel_err: f64,
    pub mismatches: Vec<Mismatch>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.cases > 0 && self.mismatches.is_empty()
    }

    pub fn merge(&mut self, other: CheckReport) {
        self.cases += other.cases;
        self.elements += other.elements;
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.mismatches.extend(other.mismatches);
    }

    fn record(
        &mut self,
        case: &str,
        input: usize,
        analytic: &[f32],
        numeric: &[f64],
        tol: Tolerance,
    ) {
        for (index, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            let a = a as f64;
            self.elements += 1;
            let diff = (a - n).abs();
            self.max_abs_err = self.max_abs_err.max(diff);
            if diff > tol.abs {
                self.max_rel_err = self.max_rel_err.max(diff / a.abs().max(n.abs()));
            }
            if !tol.accepts(a, n) {
                self.mismatches.push(Mismatch {
                    case: case.to_string(),
                    input,
                    index,
                    analytic: a,
                    numeric: n,
                });
            }
        }
    }
}

/// `∂f/∂xᵢ` for every element of `x` by the five-point central stencil
/// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`.
pub fn central_difference(
    x: &Tensor,
    h: f32,
    mut f: impl FnMut(&Tensor) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        let mut at = |offset: f32| -> Result<f64> {
            probe.data_mut()[i] = orig + offset;
            f(&probe)
        };
        let (p2, p1, m1, m2) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
        probe.data_mut()[i] = orig;
        out.push((-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h as f64));
    }
    Ok(out)
}

/// Five-point central differences of an f64 function of a flat vector.
pub fn central_difference_f64(
    x: &[f64],
    h: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        let mut at = |offset: f64| -> Result<f64> {
            probe[i] = orig + offset;
            f(&probe)
        };
        let (p2, p1, m1, m2) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
        probe[i] = orig;
        out.push((-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h));
    }
    Ok(out)
}

pub type OpFn = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

fn project(tape: &Tape, y: Var, w: &[f32]) -> f64 {
    tape.data(y)
        .iter()
        .zip(w)
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum()
}

/// Checks `op` with respect to every input.
pub fn check_op(
    case: &str,
    inputs: &[Tensor],
    h: f32,
    tol: Tolerance,
    seed: u64,
    op: &OpFn,
) -> Result<CheckReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<_>>()?;
    let y = op(&mut tape, &vars)?;
    let w = normal_tensor(tape.shape(y), &mut stream_rng(seed, 0x5eed))?;
    let wv = tape.constant(w.clone())?;
    let prod = tape.mul(y, wv)?;
    let loss = tape.sum(prod)?;
    tape.backward(loss)?;

    let mut report = CheckReport {
        cases: 1,
        ..CheckReport::default()
    };
    for (i, x) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[i])
            .map(<[f32]>::to_vec)
            .unwrap_or_else(|| vec![0.0; x.numel()]);
        let numeric = central_difference(x, h, |probe| {
            let mut t = Tape::inference();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, orig)| t.constant(if j == i { probe.clone() } else { orig.clone() }))
                .collect::<Result<_>>()?;
            let y = op(&mut t, &vs)?;
            Ok(project(&t, y, w.data()))
        })?;
        report.record(case, i, &analytic, &numeric, tol);
    }
    Ok(report)
}

fn normal_tensor(shape: &[usize], rng: &mut StreamRng) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| StandardNormal.sample(rng)).collect(),
    )
}

fn uniform_tensor(shape: &[usize], lo: f32, hi: f32, rng: &mut StreamRng) -> Result<Tensor> {
    let d = Uniform::new(lo, hi).map_err(|e| Error::Internal(e.to_string()))?;
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| d.sample(rng)).collect())
}

/// Values with magnitude in `[0.5, 1.5)` and random sign, away from the kink
/// of `|x|` and the pole of `1/x`.
fn signed_away_from_zero(shape: &[usize], rng: &mut StreamRng) -> Result<Tensor> {
    let mut t = uniform_tensor(shape, 0.5, 1.5, rng)?;
    for v in t.data_mut() {
        if rng.random::<bool>() {
            *v = -*v;
        }
    }
    Ok(t)
}

fn small_labels(b: usize, k: usize) -> Vec<u32> {
    (0..b).map(|i| ((i * 7 + 3) % k) as u32).collect()
}

fn rows(t: &Tensor) -> reference::Mat {
    let k = t.shape().last().copied().unwrap_or(1).max(1);
    t.data()
        .chunks(k)
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect()
}

/// Checks a scalar loss op against finite differences of its f64 reference.
fn check_loss(
    case: &str,
    inputs: &[Tensor],
    h: f64,
    tol: Tolerance,
    op: &OpFn,
    reference: fn(&[reference::Mat]) -> f64,
) -> Result<CheckReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<_>>()?;
    let y = op(&mut tape, &vars)?;
    tape.backward(y)?;
    let mats: Vec<reference::Mat> = inputs.iter().map(rows).collect();
    let mut report = CheckReport {
        cases: 1,
        ..CheckReport::default()
    };
    for (i, x) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[i])
            .map(<[f32]>::to_vec)
            .unwrap_or_else(|| vec![0.0; x.numel()]);
        let flat: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let k = mats[i][0].len();
        let numeric = central_difference_f64(&flat, h, |probe| {
            let mut m = mats.clone();
            m[i] = probe.chunks(k).map(<[f64]>::to_vec).collect();
            Ok(reference(&m))
        })?;
        report.record(case, i, &analytic, &numeric, tol);
    }
    Ok(report)
}

/// Step for losses differenced on their f64 reference.
pub const REFERENCE_STEP: f64 = 1e-3;

struct OpCase {
    name: &'static str,
    /// Polynomial of degree ≤ 4 in its inputs, for which the five-point
    /// stencil is exact at any step; a wide step then keeps f32 rounding out
    /// of the difference quotient.
    polynomial: bool,
    /// f64 re-implementation of a scalar loss over `[B×K]` inputs, differenced
    /// in place of the f32 op.
    reference: Option<fn(&[reference::Mat]) -> f64>,
    inputs: fn(&mut StreamRng) -> Result<Vec<Tensor>>,
    op: Box<OpFn>,
}

fn dim(rng: &mut StreamRng) -> usize {
    rng.random_range(1..=4)
}

fn op_cases() -> Vec<OpCase> {
    fn case(
        name: &'static str,
        inputs: fn(&mut StreamRng) -> Result<Vec<Tensor>>,
        op: Box<OpFn>,
    ) -> OpCase {
        let polynomial = POLYNOMIAL_OPS.contains(&name);
        OpCase {
            name,
            polynomial,
            reference: None,
            inputs,
            op,
        }
    }
    fn loss(
        name: &'static str,
        inputs: fn(&mut StreamRng) -> Result<Vec<Tensor>>,
        reference: fn(&[reference::Mat]) -> f64,
        op: Box<OpFn>,
    ) -> OpCase {
        OpCase {
            name,
            polynomial: false,
            reference: Some(reference),
            inputs,
            op,
        }
    }
    fn two_same(r: &mut StreamRng) -> Result<Vec<Tensor>> {
        let s = [dim(r), dim(r), dim(r)];
        Ok(vec![normal_tensor(&s, r)?, normal_tensor(&s, r)?])
    }
    fn one(r: &mut StreamRng) -> Result<Vec<Tensor>> {
        let s = [dim(r), dim(r) + 1];
        Ok(vec![normal_tensor(&s, r)?])
    }
    fn positive(r: &mut StreamRng) -> Result<Vec<Tensor>> {
        let s = [dim(r), dim(r)];
        Ok(vec![uniform_tensor(&s, 0.5, 2.0, r)?])
    }
    fn logits(r: &mut StreamRng) -> Result<Vec<Tensor>> {
        let s = [dim(r) + 1, dim(r) + 1];
        Ok(vec![normal_tensor(&s, r)?, normal_tensor(&s, r)?])
    }
    vec![
        case(
            "matmul",
            |r| {
                let (m, k, n) = (dim(r), dim(r), dim(r));
                Ok(vec![normal_tensor(&[m, k], r)?, normal_tensor(&[k, n], r)?])
            },
            Box::new(|t, v| t.matmul(v[0], v[1])),
        ),
        case(
            "bmm",
            |r| {
                let (b, m, k, n) = (dim(r), dim(r), dim(r), dim(r));
                Ok(vec![
                    normal_tensor(&[b, m, k], r)?,
                    normal_tensor(&[b, k, n], r)?,
                ])
            },
            Box::new(|t, v| t.bmm(v[0], v[1])),
        ),
        case("add", two_same, Box::new(|t, v| t.add(v[0], v[1]))),
        case("sub", two_same, Box::new(|t, v| t.sub(v[0], v[1]))),
        case("mul", two_same, Box::new(|t, v| t.mul(v[0], v[1]))),
        case(
            "div",
            |r| {
                let s = [dim(r), dim(r)];
                Ok(vec![normal_tensor(&s, r)?, signed_away_from_zero(&s, r)?])
            },
            Box::new(|t, v| t.div(v[0], v[1])),
        ),
        case(
            "add_bias_broadcast",
            |r| {
                let (a, b, c) = (dim(r), dim(r), dim(r));
                Ok(vec![normal_tensor(&[a, b, c], r)?, normal_tensor(&[c], r)?])
            },
            Box::new(|t, v| t.add(v[0], v[1])),
        ),
        case(
            "mul_scalar_broadcast",
            |r| {
                let s = [dim(r), dim(r)];
                Ok(vec![normal_tensor(&s, r)?, normal_tensor(&[1], r)?])
            },
            Box::new(|t, v| t.mul(v[0], v[1])),
        ),
        case("scale", one, Box::new(|t, v| t.scale(v[0], -1.7))),
        case("add_scalar", one, Box::new(|t, v| t.add_scalar(v[0], 0.3))),
        case("neg", one, Box::new(|t, v| t.neg(v[0]))),
        case("log", positive, Box::new(|t, v| t.log(v[0]))),
        case("exp", one, Box::new(|t, v| t.exp(v[0]))),
        case("sqrt", positive, Box::new(|t, v| t.sqrt(v[0]))),
        case(
            "abs",
            |r| {
                let s = [dim(r), dim(r)];
                Ok(vec![signed_away_from_zero(&s, r)?])
            },
            Box::new(|t, v| t.abs(v[0])),
        ),
        case("gelu", one, Box::new(|t, v| t.gelu(v[0]))),
        case("sum", one, Box::new(|t, v| t.sum(v[0]))),
        case("mean", one, Box::new(|t, v| t.mean(v[0]))),
        case("sum_axis0", two_same, Box::new(|t, v| t.sum_axis(v[0], 0))),
        case("sum_axis2", two_same, Box::new(|t, v| t.sum_axis(v[1], 2))),
        case("softmax_last", one, Box::new(|t, v| t.softmax(v[0], 1))),
        case(
            "softmax_first",
            two_same,
            Box::new(|t, v| t.softmax(v[0], 0)),
        ),
        case("log_softmax", one, Box::new(|t, v| t.log_softmax(v[0], 1))),
        case(
            "layer_norm",
            |r| {
                let (b, d) = (dim(r), dim(r) + 2);
                Ok(vec![
                    normal_tensor(&[b, d], r)?,
                    normal_tensor(&[d], r)?,
                    normal_tensor(&[d], r)?,
                ])
            },
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-6)),
        ),
        case(
            "reshape",
            two_same,
            Box::new(|t, v| {
                let n = t.value(v[0]).numel();
                t.reshape(v[0], &[n])
            }),
        ),
        case(
            "permute",
            two_same,
            Box::new(|t, v| t.permute(v[0], &[2, 0, 1])),
        ),
        case("transpose", two_same, Box::new(|t, v| t.transpose(v[1]))),
        case(
            "concat",
            |r| {
                let (a, c) = (dim(r), dim(r));
                Ok(vec![
                    normal_tensor(&[a, dim(r), c], r)?,
                    normal_tensor(&[a, dim(r), c], r)?,
                ])
            },
            Box::new(|t, v| t.concat(&[v[0], v[1]], 1)),
        ),
        case(
            "narrow",
            |r| {
                let s = [dim(r), dim(r) + 2];
                Ok(vec![normal_tensor(&s, r)?])
            },
            Box::new(|t, v| t.narrow(v[0], 1, 1, 2)),
        ),
        case(
            "repeat_leading",
            one,
            Box::new(|t, v| t.repeat_leading(v[0], 3)),
        ),
        loss(
            "loss_ce",
            logits,
            |m| reference::ce(&m[0], &small_labels(m[0].len(), m[0][0].len())),
            Box::new(|t, v| {
                let s = t.shape(v[0]).to_vec();
                loss_ce(t, v[0], &small_labels(s[0], s[1]))
            }),
        ),
        loss(
            "loss_mse",
            logits,
            |m| reference::mse(&m[0], &m[1]),
            Box::new(|t, v| loss_mse(t, v[0], v[1])),
        ),
        loss(
            "loss_mae",
            |r| {
                let s = [dim(r) + 1, dim(r) + 1];
                let a = normal_tensor(&s, r)?;
                let gap = signed_away_from_zero(&s, r)?;
                let b = Tensor::new(
                    s.to_vec(),
                    a.data()
                        .iter()
                        .zip(gap.data())
                        .map(|(x, g)| x + g)
                        .collect(),
                )?;
                Ok(vec![a, b])
            },
            |m| reference::mae(&m[0], &m[1]),
            Box::new(|t, v| loss_mae(t, v[0], v[1])),
        ),
        loss(
            "loss_cos",
            logits,
            |m| reference::cos(&m[0], &m[1]),
            Box::new(|t, v| loss_cos(t, v[0], v[1])),
        ),
        loss(
            "loss_kl_verbatim_t5",
            logits,
            |m| reference::kl(&m[0], &m[1], 5.0, KlConvention::Verbatim),
            Box::new(|t, v| loss_kl(t, v[0], v[1], 5.0, KlConvention::Verbatim)),
        ),
        loss(
            "loss_kl_verbatim_t1",
            logits,
            |m| reference::kl(&m[0], &m[1], 1.0, KlConvention::Verbatim),
            Box::new(|t, v| loss_kl(t, v[0], v[1], 1.0, KlConvention::Verbatim)),
        ),
        loss(
            "loss_kl_standard_t5",
            logits,
            |m| reference::kl(&m[0], &m[1], 5.0, KlConvention::Standard),
            Box::new(|t, v| loss_kl(t, v[0], v[1], 5.0, KlConvention::Standard)),
        ),
        case(
            "shared_input_paths",
            one,
            Box::new(|t, v| {
                let a = t.mul(v[0], v[0])?;
                let b = t.gelu(v[0])?;
                t.add(a, b)
            }),
        ),
    ]
}

const POLYNOMIAL_OPS: [&str; 20] = [
    "matmul",
    "bmm",
    "add",
    "sub",
    "mul",
    "add_bias_broadcast",
    "mul_scalar_broadcast",
    "scale",
    "add_scalar",
    "neg",
    "sum",
    "mean",
    "sum_axis0",
    "sum_axis2",
    "reshape",
    "permute",
    "transpose",
    "concat",
    "narrow",
    "repeat_leading",
];

/// Step used for polynomial ops.
pub const POLYNOMIAL_STEP: f32 = 1.0;

/// Names of every op exercised by [`op_suite`].
pub fn op_names() -> Vec<&'static str> {
    op_cases().iter().map(|c| c.name).collect()
}

/// Every op checked on `seeds_per_op` independently drawn input sets, with
/// step `h` ([`POLYNOMIAL_STEP`] for polynomial ops; losses are differenced
/// on their f64 reference with [`REFERENCE_STEP`]).
pub fn op_suite(seeds_per_op: u64, base_seed: u64, h: f32, tol: Tolerance) -> Result<CheckReport> {
    let mut report = CheckReport::default();
    for (ci, c) in op_cases().iter().enumerate() {
        for s in 0..seeds_per_op {
            let seed = base_seed.wrapping_add(ci as u64 * 1000 + s);
            let inputs = (c.inputs)(&mut stream_rng(seed, 0x1ce))?;
            let case = format!("{}#{s}", c.name);
            let r = match c.reference {
                Some(f) => check_loss(&case, &inputs, REFERENCE_STEP, tol, c.op.as_ref(), f)?,
                None if c.polynomial => {
                    check_op(&case, &inputs, POLYNOMIAL_STEP, tol, seed, c.op.as_ref())?
                }
                None => check_op(&case, &inputs, h, tol, seed, c.op.as_ref())?,
            };
            report.merge(r);
        }
    }
    Ok(report)
}

fn toy_models(variant: AdapterVariant, seed: u64) -> Result<(Model, Model, Tensor, Vec<u32>)> {
    let student_cfg = ViTConfig {
        image_size: 4,
        patch_size: 2,
        channels: 2,
        depth: 1,
        width: 8,
        heads: 2,
        mlp_ratio: 2,
        num_classes: 3,
    };
    let teacher_cfg = ViTConfig {
        width: 4,
        heads: 1,
        ..student_cfg.clone()
    };
    let mut rng = stream_rng(seed, 0x70e);
    let mut student = Model::new(student_cfg, &mut rng)?;
    let mut teacher = Model::new(teacher_cfg, &mut rng)?;
    for m in [&mut student, &mut teacher] {
        m.inject_adapters(
            AdapterSpec {
                variant,
                hidden_dim: 2,
                scaling: 0.5,
            },
            &mut rng,
        )?;
        // Nonzero up-projections so every adapter weight receives gradient,
        // and token embeddings large enough that a finite step stays local.
        for p in m
            .parameters_mut()
            .iter_mut()
            .filter(|p| p.is_adapter() || p.name.ends_with("_token") || p.name == "pos_embed")
        {
            let noise = normal_tensor(p.tensor.shape(), &mut rng)?;
            for (v, n) in p.tensor.data_mut().iter_mut().zip(noise.data()) {
                *v += 0.5 * n;
            }
        }
    }
    let images = uniform_tensor(&[3, 4, 4, 2], 0.0, 1.0, &mut rng)?;
    Ok((student, teacher, images, vec![0, 2, 1]))
}

fn reference_objective(
    student: (&Model, &reference::Params),
    teacher: (&Model, &reference::Params),
    images: &Tensor,
    labels: &[u32],
    plan: &DistillPlan,
) -> Result<f64> {
    let ys = reference::logits(
        student.0.config(),
        student.0.adapter_spec(),
        student.1,
        images,
    )?;
    let yt = reference::logits(
        teacher.0.config(),
        teacher.0.adapter_spec(),
        teacher.1,
        images,
    )?;
    Ok(reference::total(&ys, &yt, labels, plan))
}

/// The full joint objective on a depth-1 student/teacher pair, differentiated
/// with respect to every trainable parameter of both models (or every
/// parameter when `all_params` is set).
pub fn joint_objective_check(
    variant: AdapterVariant,
    plan: DistillPlan,
    all_params: bool,
    seed: u64,
    h: f64,
    tol: Tolerance,
) -> Result<CheckReport> {
    let (mut student, mut teacher, images, labels) = toy_models(variant, seed)?;
    if all_params {
        student.set_all_trainable(true);
        teacher.set_all_trainable(true);
    }
    let mut tape = Tape::new();
    let sb = student.bind(&mut tape)?;
    let ys = student.forward(&mut tape, &sb, &images)?;
    let tb = teacher.bind(&mut tape)?;
    let yt = teacher.forward(&mut tape, &tb, &images)?;
    let (loss, _) = loss_total(&mut tape, ys, Some(yt), &labels, &plan)?;
    tape.backward(loss)?;

    let case = format!(
        "joint/{}/{}{}",
        variant.short_name(),
        plan.loss_kind.name(),
        if all_params { "/all" } else { "" }
    );
    let mut report = CheckReport {
        cases: 1,
        ..CheckReport::default()
    };
    for which in 0..2 {
        let (model, bound) = if which == 0 {
            (&student, &sb)
        } else {
            (&teacher, &tb)
        };
        for (pi, p) in model.parameters().iter().enumerate() {
            if !p.trainable {
                continue;
            }
            let analytic = tape
                .grad(bound.vars()[pi])
                .map(<[f32]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.tensor.numel()]);
            let (mut sp, mut tp) = (
                reference::params_of(&student),
                reference::params_of(&teacher),
            );
            let x = if which == 0 {
                sp[&p.name].clone()
            } else {
                tp[&p.name].clone()
            };
            let numeric = central_difference_f64(&x, h, |probe| {
                let target = if which == 0 { &mut sp } else { &mut tp };
                target.insert(p.name.clone(), probe.to_vec());
                reference_objective((&student, &sp), (&teacher, &tp), &images, &labels, &plan)
            })?;
            report.record(
                &format!("{case}:{}", p.name),
                which * 1000 + pi,
                &analytic,
                &numeric,
                tol,
            );
        }
    }
    Ok(report)
}

/// Joint-objective checks over all adapter variants and distillation losses.
pub fn joint_suite(seed: u64, h: f64, tol: Tolerance) -> Result<CheckReport> {
    let mut report = CheckReport::default();
    let variants = [
        AdapterVariant::Sequential,
        AdapterVariant::Parallel,
        AdapterVariant::ParallelShared,
    ];
    for (vi, &variant) in variants.iter().enumerate() {
        for (li, kind) in [LossKind::Kl, LossKind::Mse, LossKind::Mae, LossKind::Cos]
            .into_iter()
            .enumerate()
        {
            let s = seed.wrapping_add((vi * 10 + li) as u64);
            report.merge(joint_objective_check(
                variant,
                DistillPlan::new(kind),
                false,
                s,
                h,
                tol,
            )?);
        }
        report.merge(joint_objective_check(
            variant,
            DistillPlan::new(LossKind::Kl),
            true,
            seed.wrapping_add(100 + vi as u64),
            h,
            tol,
        )?);
    }
    Ok(report)
}

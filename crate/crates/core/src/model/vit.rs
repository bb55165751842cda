use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::config::{AdapterSpec, AdapterVariant, ViTConfig};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

const LN_EPS: f32 = 1e-6;

/// A named weight tensor with its freezing flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn is_adapter(&self) -> bool {
        is_adapter_name(&self.name)
    }

    pub fn is_head(&self) -> bool {
        is_head_name(&self.name)
    }
}

pub(crate) fn is_adapter_name(name: &str) -> bool {
    name.contains(".adapter.")
}

pub(crate) fn is_head_name(name: &str) -> bool {
    name.starts_with("head.")
}

/// Trainable element counts split by role.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub adapters: usize,
    pub head: usize,
    /// Trainable parameters outside adapters and head (nonzero only before freezing).
    pub backbone: usize,
    pub total: usize,
}

impl ParamBreakdown {
    /// Closed-form counts for a frozen backbone with `adapter` injected and a
    /// trainable head.
    pub fn closed_form(config: &ViTConfig, adapter: Option<&AdapterSpec>) -> Self {
        let adapters = adapter.map_or(0, |a| config.depth * a.params_per_block(config.width));
        let head = config.width * config.num_classes + config.num_classes;
        Self {
            adapters,
            head,
            backbone: 0,
            total: adapters + head,
        }
    }
}

/// Vision Transformer classifier with optional adapters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ViTConfig,
    adapter: Option<AdapterSpec>,
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

/// Parameters of a model registered on one tape, aligned with
/// [`Model::parameters`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn uniform(shape: &[usize], bound: f32, rng: &mut impl Rng) -> Result<Tensor> {
    let dist = Uniform::new_inclusive(-bound, bound).map_err(|e| Error::Internal(e.to_string()))?;
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

fn normal(shape: &[usize], std: f32, rng: &mut impl Rng) -> Result<Tensor> {
    let dist = Normal::new(0.0f32, std).map_err(|e| Error::Internal(e.to_string()))?;
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

fn xavier(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
    uniform(&[fan_in, fan_out], bound, rng)
}

/// Splits `[B×H×W×C]` images into `[B·N × P·P·C]` patch rows. Patches are
/// ordered row-major over the grid; each row is `(py, px, c)` row-major.
pub fn patchify(images: &Tensor, config: &ViTConfig) -> Result<Tensor> {
    let s = images.shape();
    let expected = [config.image_size, config.image_size, config.channels];
    if s.len() != 4 || s[1..] != expected {
        let mut want = vec![0];
        want.extend_from_slice(&expected);
        return Err(Error::Shape {
            op: "patch_embed",
            lhs: s.to_vec(),
            rhs: want,
        });
    }
    let (batch, side, ch, p) = (s[0], config.image_size, config.channels, config.patch_size);
    let grid = side / p;
    let data = images.data();
    let mut out = Vec::with_capacity(data.len());
    for b in 0..batch {
        for gy in 0..grid {
            for gx in 0..grid {
                for py in 0..p {
                    let y = gy * p + py;
                    let start = ((b * side + y) * side + gx * p) * ch;
                    out.extend_from_slice(&data[start..start + p * ch]);
                }
            }
        }
    }
    Tensor::new(vec![batch * grid * grid, config.patch_dim()], out)
}

impl Model {
    /// Builds a randomly initialized adapter-free model with every parameter
    /// trainable.
    pub fn new(config: ViTConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate("")?;
        let d = config.width;
        let hidden = config.mlp_hidden();
        let mut model = Self {
            config: config.clone(),
            adapter: None,
            params: Vec::new(),
            index: HashMap::new(),
        };
        let ones = |n: usize| Tensor::full(&[n], 1.0);
        let zeros = |n: usize| Tensor::zeros(&[n]);

        model.push(
            "patch_embed.weight",
            uniform(
                &[config.patch_dim(), d],
                1.0 / (config.patch_dim() as f32).sqrt(),
                rng,
            )?,
        );
        model.push("patch_embed.bias", zeros(d)?);
        model.push("cls_token", normal(&[1, d], 0.02, rng)?);
        model.push("pos_embed", normal(&[config.num_tokens(), d], 0.02, rng)?);
        for i in 0..config.depth {
            let p = |s: &str| format!("block.{i}.{s}");
            model.push(&p("norm1.gamma"), ones(d)?);
            model.push(&p("norm1.beta"), zeros(d)?);
            for proj in ["q", "k", "v", "proj"] {
                model.push(&p(&format!("attn.{proj}.weight")), xavier(d, d, rng)?);
                model.push(&p(&format!("attn.{proj}.bias")), zeros(d)?);
            }
            model.push(&p("norm2.gamma"), ones(d)?);
            model.push(&p("norm2.beta"), zeros(d)?);
            model.push(&p("mlp.fc1.weight"), xavier(d, hidden, rng)?);
            model.push(&p("mlp.fc1.bias"), zeros(hidden)?);
            model.push(&p("mlp.fc2.weight"), xavier(hidden, d, rng)?);
            model.push(&p("mlp.fc2.bias"), zeros(d)?);
        }
        model.push("norm.gamma", ones(d)?);
        model.push("norm.beta", zeros(d)?);
        model.push(
            "head.weight",
            uniform(&[d, config.num_classes], 1.0 / (d as f32).sqrt(), rng)?,
        );
        model.push("head.bias", zeros(config.num_classes)?);
        Ok(model)
    }

    /// Same parameter layout as [`Model::new`] plus adapters, with arbitrary
    /// values that are about to be overwritten (checkpoint loading).
    pub(crate) fn skeleton(config: ViTConfig, adapter: Option<AdapterSpec>) -> Result<Self> {
        let mut rng = crate::rng::stream_rng(0, 0);
        let mut model = Self::new(config, &mut rng)?;
        if let Some(spec) = adapter {
            model.inject_adapters(spec, &mut rng)?;
        }
        Ok(model)
    }

    fn push(&mut self, name: &str, tensor: Tensor) {
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            tensor,
            trainable: true,
        });
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn adapter_spec(&self) -> Option<&AdapterSpec> {
        self.adapter.as_ref()
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.params.iter_mut().for_each(|p| p.trainable = trainable);
    }

    /// Marks only adapter and head parameters trainable.
    pub fn freeze_backbone(&mut self) {
        for p in &mut self.params {
            p.trainable = p.is_adapter() || p.is_head();
        }
    }

    /// Replaces the classification head with a freshly initialized one for
    /// `num_classes` outputs.
    pub fn reset_head(&mut self, num_classes: usize, rng: &mut impl Rng) -> Result<()> {
        if num_classes == 0 {
            return Err(Error::config("num_classes", "must be positive"));
        }
        let d = self.config.width;
        self.config.num_classes = num_classes;
        let w = uniform(&[d, num_classes], 1.0 / (d as f32).sqrt(), rng)?;
        let b = Tensor::zeros(&[num_classes])?;
        for (name, t) in [("head.weight", w), ("head.bias", b)] {
            let p = self
                .parameter_mut(name)
                .ok_or_else(|| Error::Internal(format!("missing {name}")))?;
            p.tensor = t;
        }
        Ok(())
    }

    /// Adds one bottleneck adapter per block and freezes the backbone.
    ///
    /// `w_down` is drawn from U(−1/√d, 1/√d); `w_up` and both biases start at
    /// zero, so the injected model computes the same function as before.
    pub fn inject_adapters(&mut self, spec: AdapterSpec, rng: &mut impl Rng) -> Result<()> {
        if self.adapter.is_some() {
            return Err(Error::Usage(
                "adapters are already injected into this model".into(),
            ));
        }
        spec.validate(self.config.width, "adapter")?;
        let (d, h) = (self.config.width, spec.hidden_dim);
        for i in 0..self.config.depth {
            self.push(
                &format!("block.{i}.adapter.w_down"),
                uniform(&[d, h], 1.0 / (d as f32).sqrt(), rng)?,
            );
            self.push(&format!("block.{i}.adapter.b_down"), Tensor::zeros(&[h])?);
            self.push(&format!("block.{i}.adapter.w_up"), Tensor::zeros(&[h, d])?);
            self.push(&format!("block.{i}.adapter.b_up"), Tensor::zeros(&[d])?);
        }
        self.adapter = Some(spec);
        self.freeze_backbone();
        Ok(())
    }

    /// Trainable element counts, split into adapters/head/other.
    pub fn trainable_param_count(&self) -> ParamBreakdown {
        let mut out = ParamBreakdown::default();
        for p in self.params.iter().filter(|p| p.trainable) {
            let n = p.tensor.numel();
            if p.is_adapter() {
                out.adapters += n;
            } else if p.is_head() {
                out.head += n;
            } else {
                out.backbone += n;
            }
            out.total += n;
        }
        out
    }

    /// Registers every parameter on `tape`; trainable ones track gradients.
    pub fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone().with_requires_grad(p.trainable)))
            .collect::<Result<_>>()?;
        Ok(Bound { vars })
    }

    fn var(&self, bound: &Bound, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| bound.vars[i])
            .ok_or_else(|| Error::Internal(format!("parameter {name} missing")))
    }

    fn linear(&self, tape: &mut Tape, bound: &Bound, x2d: Var, prefix: &str) -> Result<Var> {
        let w = self.var(bound, &format!("{prefix}.weight"))?;
        let b = self.var(bound, &format!("{prefix}.bias"))?;
        let y = tape.matmul(x2d, w)?;
        tape.add(y, b)
    }

    fn norm(&self, tape: &mut Tape, bound: &Bound, x: Var, prefix: &str) -> Result<Var> {
        let g = self.var(bound, &format!("{prefix}.gamma"))?;
        let b = self.var(bound, &format!("{prefix}.beta"))?;
        tape.layer_norm(x, g, b, LN_EPS)
    }

    /// Token embeddings `[B × (N+1) × d]`: projected patches with the class
    /// token prepended and positional embeddings added.
    pub fn patch_embed(&self, tape: &mut Tape, bound: &Bound, images: &Tensor) -> Result<Var> {
        let patches = patchify(images, &self.config)?;
        let batch = images.shape()[0];
        let (n, d) = (self.config.num_patches(), self.config.width);
        let patches = tape.constant(patches)?;
        let emb = self.linear(tape, bound, patches, "patch_embed")?;
        let emb = tape.reshape(emb, &[batch, n, d])?;
        let cls = self.var(bound, "cls_token")?;
        let cls = tape.repeat_leading(cls, batch)?;
        let tokens = tape.concat(&[cls, emb], 1)?;
        let pos = self.var(bound, "pos_embed")?;
        tape.add(tokens, pos)
    }

    fn attention(&self, tape: &mut Tape, bound: &Bound, x: Var, block: usize) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (batch, tokens, d) = (s[0], s[1], s[2]);
        let heads = self.config.heads;
        let hd = d / heads;
        let x2d = tape.reshape(x, &[batch * tokens, d])?;
        let mut split = |name: &str| -> Result<Var> {
            let y = self.linear(tape, bound, x2d, &format!("block.{block}.attn.{name}"))?;
            let y = tape.reshape(y, &[batch, tokens, heads, hd])?;
            let y = tape.permute(y, &[0, 2, 1, 3])?;
            tape.reshape(y, &[batch * heads, tokens, hd])
        };
        let q = split("q")?;
        let k = split("k")?;
        let v = split("v")?;
        let kt = tape.transpose(k)?;
        let scores = tape.bmm(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (hd as f32).sqrt())?;
        let attn = tape.softmax(scores, 2)?;
        let o = tape.bmm(attn, v)?;
        let o = tape.reshape(o, &[batch, heads, tokens, hd])?;
        let o = tape.permute(o, &[0, 2, 1, 3])?;
        let o = tape.reshape(o, &[batch * tokens, d])?;
        let o = self.linear(tape, bound, o, &format!("block.{block}.attn.proj"))?;
        tape.reshape(o, &[batch, tokens, d])
    }

    fn mlp(&self, tape: &mut Tape, bound: &Bound, x: Var, block: usize) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let x2d = tape.reshape(x, &[s[0] * s[1], s[2]])?;
        let h = self.linear(tape, bound, x2d, &format!("block.{block}.mlp.fc1"))?;
        let h = tape.gelu(h)?;
        let y = self.linear(tape, bound, h, &format!("block.{block}.mlp.fc2"))?;
        tape.reshape(y, &s)
    }

    /// `W_up(σ(W_down(x)))` applied tokenwise.
    fn adapter(&self, tape: &mut Tape, bound: &Bound, x: Var, block: usize) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let p = |n: &str| format!("block.{block}.adapter.{n}");
        let x2d = tape.reshape(x, &[s[0] * s[1], s[2]])?;
        let h = tape.matmul(x2d, self.var(bound, &p("w_down"))?)?;
        let h = tape.add(h, self.var(bound, &p("b_down"))?)?;
        let h = tape.gelu(h)?;
        let y = tape.matmul(h, self.var(bound, &p("w_up"))?)?;
        let y = tape.add(y, self.var(bound, &p("b_up"))?)?;
        tape.reshape(y, &s)
    }

    fn scaled_adapter(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        block: usize,
        s: f32,
    ) -> Result<Var> {
        let a = self.adapter(tape, bound, x, block)?;
        tape.scale(a, s)
    }

    /// One pre-norm transformer block on `[B × T × d]` tokens.
    pub fn block_forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        block: usize,
    ) -> Result<Var> {
        if block >= self.config.depth {
            return Err(Error::Usage(format!(
                "block {block} out of range for depth {}",
                self.config.depth
            )));
        }
        let h = self.norm(tape, bound, x, &format!("block.{block}.norm1"))?;
        let attn = self.attention(tape, bound, h, block)?;
        let mut y = tape.add(x, attn)?;
        if let Some(AdapterSpec {
            variant: AdapterVariant::ParallelShared,
            scaling,
            ..
        }) = self.adapter
        {
            let branch = self.scaled_adapter(tape, bound, h, block, scaling)?;
            y = tape.add(y, branch)?;
        }
        let h2 = self.norm(tape, bound, y, &format!("block.{block}.norm2"))?;
        let m = self.mlp(tape, bound, h2, block)?;
        match self.adapter {
            None => tape.add(y, m),
            Some(AdapterSpec {
                variant: AdapterVariant::Sequential,
                ..
            }) => {
                let a = self.adapter(tape, bound, m, block)?;
                let adapted = tape.add(a, m)?;
                tape.add(y, adapted)
            }
            Some(AdapterSpec {
                variant: AdapterVariant::Parallel | AdapterVariant::ParallelShared,
                scaling,
                ..
            }) => {
                let z = tape.add(y, m)?;
                let branch = self.scaled_adapter(tape, bound, h2, block, scaling)?;
                tape.add(z, branch)
            }
        }
    }

    /// Logits `[B × num_classes]` for `[B×H×W×C]` images.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, images: &Tensor) -> Result<Var> {
        let batch = images.shape().first().copied().unwrap_or(0);
        let mut x = self.patch_embed(tape, bound, images)?;
        for block in 0..self.config.depth {
            x = self.block_forward(tape, bound, x, block)?;
        }
        let x = self.norm(tape, bound, x, "norm")?;
        let cls = tape.narrow(x, 1, 0, 1)?;
        let cls = tape.reshape(cls, &[batch, self.config.width])?;
        self.linear(tape, bound, cls, "head")
    }

    /// Forward pass on a non-recording tape.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let bound = self.bind(&mut tape)?;
        let out = self.forward(&mut tape, &bound, images)?;
        Ok(tape.value(out).clone())
    }
}

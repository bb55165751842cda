//! Straight-line f64 re-implementation of the model forward pass and the
//! losses, written with plain loops and no tape. Used as the function under
//! finite differences and as a forward oracle.

use std::collections::HashMap;

use crate::distill::{DistillPlan, KlConvention, LossKind};
use crate::error::{Error, Result};
use crate::model::{AdapterSpec, AdapterVariant, Model, ViTConfig};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-6;

pub type Params = HashMap<String, Vec<f64>>;

pub fn params_of(model: &Model) -> Params {
    model
        .parameters()
        .iter()
        .map(|p| {
            (
                p.name.clone(),
                p.tensor.data().iter().map(|&v| v as f64).collect(),
            )
        })
        .collect()
}

/// Row-major matrix as nested rows.
pub type Mat = Vec<Vec<f64>>;

fn get<'a>(p: &'a Params, name: &str) -> Result<&'a [f64]> {
    p.get(name)
        .map(Vec::as_slice)
        .ok_or_else(|| Error::Internal(format!("reference: missing {name}")))
}

/// `x · W + b` with `W` stored `[in × out]` row-major.
fn linear(x: &Mat, w: &[f64], b: Option<&[f64]>, out: usize) -> Mat {
    x.iter()
        .map(|row| {
            (0..out)
                .map(|j| {
                    let s: f64 = row
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| v * w[i * out + j])
                        .sum();
                    s + b.map_or(0.0, |b| b[j])
                })
                .collect()
        })
        .collect()
}

fn layer_norm(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let r = 1.0 / (var + LN_EPS).sqrt();
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) * r * g[i] + b[i])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

fn scaled(a: &Mat, s: f64) -> Mat {
    a.iter()
        .map(|r| r.iter().map(|x| x * s).collect())
        .collect()
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn attention(x: &Mat, p: &Params, cfg: &ViTConfig, block: usize) -> Result<Mat> {
    let d = cfg.width;
    let hd = d / cfg.heads;
    let lin = |name: &str| -> Result<Mat> {
        let pre = format!("block.{block}.attn.{name}");
        Ok(linear(
            x,
            get(p, &format!("{pre}.weight"))?,
            Some(get(p, &format!("{pre}.bias"))?),
            d,
        ))
    };
    let (q, k, v) = (lin("q")?, lin("k")?, lin("v")?);
    let t = x.len();
    let mut o = vec![vec![0.0; d]; t];
    for h in 0..cfg.heads {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..t {
            let scores: Vec<f64> = (0..t)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let probs: Vec<f64> = log_softmax(&scores).into_iter().map(f64::exp).collect();
            for c in cols.clone() {
                o[i][c] = (0..t).map(|j| probs[j] * v[j][c]).sum();
            }
        }
    }
    let pre = format!("block.{block}.attn.proj");
    Ok(linear(
        &o,
        get(p, &format!("{pre}.weight"))?,
        Some(get(p, &format!("{pre}.bias"))?),
        d,
    ))
}

fn mlp(x: &Mat, p: &Params, cfg: &ViTConfig, block: usize) -> Result<Mat> {
    let pre = format!("block.{block}.mlp");
    let h = linear(
        x,
        get(p, &format!("{pre}.fc1.weight"))?,
        Some(get(p, &format!("{pre}.fc1.bias"))?),
        cfg.mlp_hidden(),
    );
    let h: Mat = h
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    Ok(linear(
        &h,
        get(p, &format!("{pre}.fc2.weight"))?,
        Some(get(p, &format!("{pre}.fc2.bias"))?),
        cfg.width,
    ))
}

fn adapter(x: &Mat, p: &Params, spec: &AdapterSpec, d: usize, block: usize) -> Result<Mat> {
    let pre = format!("block.{block}.adapter");
    let h = linear(
        x,
        get(p, &format!("{pre}.w_down"))?,
        Some(get(p, &format!("{pre}.b_down"))?),
        spec.hidden_dim,
    );
    let h: Mat = h
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    Ok(linear(
        &h,
        get(p, &format!("{pre}.w_up"))?,
        Some(get(p, &format!("{pre}.b_up"))?),
        d,
    ))
}

fn norm(x: &Mat, p: &Params, prefix: &str) -> Result<Mat> {
    Ok(layer_norm(
        x,
        get(p, &format!("{prefix}.gamma"))?,
        get(p, &format!("{prefix}.beta"))?,
    ))
}

fn block(
    x: &Mat,
    p: &Params,
    cfg: &ViTConfig,
    spec: Option<&AdapterSpec>,
    i: usize,
) -> Result<Mat> {
    let h = norm(x, p, &format!("block.{i}.norm1"))?;
    let mut y = add(x, &attention(&h, p, cfg, i)?);
    if let Some(
        s @ AdapterSpec {
            variant: AdapterVariant::ParallelShared,
            ..
        },
    ) = spec
    {
        y = add(
            &y,
            &scaled(&adapter(&h, p, s, cfg.width, i)?, s.scaling as f64),
        );
    }
    let h2 = norm(&y, p, &format!("block.{i}.norm2"))?;
    let m = mlp(&h2, p, cfg, i)?;
    Ok(match spec {
        None => add(&y, &m),
        Some(s) if s.variant == AdapterVariant::Sequential => {
            add(&y, &add(&adapter(&m, p, s, cfg.width, i)?, &m))
        }
        Some(s) => add(
            &add(&y, &m),
            &scaled(&adapter(&h2, p, s, cfg.width, i)?, s.scaling as f64),
        ),
    })
}

/// Logits `[B][K]` for `[B×H×W×C]` images.
pub fn logits(
    cfg: &ViTConfig,
    spec: Option<&AdapterSpec>,
    p: &Params,
    images: &Tensor,
) -> Result<Mat> {
    let (side, ch, ps, d) = (cfg.image_size, cfg.channels, cfg.patch_size, cfg.width);
    let grid = side / ps;
    let per_image = side * side * ch;
    let batch = images.numel() / per_image;
    let (pe_w, pe_b) = (get(p, "patch_embed.weight")?, get(p, "patch_embed.bias")?);
    let (cls, pos) = (get(p, "cls_token")?, get(p, "pos_embed")?);
    let mut out = Vec::with_capacity(batch);
    for b in 0..batch {
        let img = &images.data()[b * per_image..(b + 1) * per_image];
        let mut patches = Vec::with_capacity(grid * grid);
        for gy in 0..grid {
            for gx in 0..grid {
                let mut v = Vec::with_capacity(ps * ps * ch);
                for py in 0..ps {
                    for px in 0..ps {
                        for c in 0..ch {
                            v.push(img[((gy * ps + py) * side + gx * ps + px) * ch + c] as f64);
                        }
                    }
                }
                patches.push(v);
            }
        }
        let emb = linear(&patches, pe_w, Some(pe_b), d);
        let mut x: Mat = std::iter::once(cls.to_vec()).chain(emb).collect();
        for (t, row) in x.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += pos[t * d + j];
            }
        }
        for i in 0..cfg.depth {
            x = block(&x, p, cfg, spec, i)?;
        }
        let x = norm(&x, p, "norm")?;
        let head = linear(
            &x[..1].to_vec(),
            get(p, "head.weight")?,
            Some(get(p, "head.bias")?),
            cfg.num_classes,
        );
        out.push(head.into_iter().next().expect("one row"));
    }
    Ok(out)
}

pub fn ce(y: &Mat, labels: &[u32]) -> f64 {
    y.iter()
        .zip(labels)
        .map(|(r, &l)| -log_softmax(r)[l as usize])
        .sum::<f64>()
        / y.len() as f64
}

pub fn kl(ys: &Mat, yt: &Mat, t: f64, convention: KlConvention) -> f64 {
    let soft = |r: &[f64]| log_softmax(&r.iter().map(|v| v / t).collect::<Vec<_>>());
    let per: f64 = ys
        .iter()
        .zip(yt)
        .map(|(s, tt)| {
            let (ls, lt) = (soft(s), soft(tt));
            match convention {
                KlConvention::Verbatim => {
                    let w = log_softmax(s);
                    (0..s.len())
                        .map(|k| w[k].exp() * (ls[k] - lt[k]))
                        .sum::<f64>()
                }
                KlConvention::Standard => {
                    t * t
                        * (0..s.len())
                            .map(|k| lt[k].exp() * (lt[k] - ls[k]))
                            .sum::<f64>()
                }
            }
        })
        .sum();
    per / ys.len() as f64
}

fn elementwise_mean(ys: &Mat, yt: &Mat, f: impl Fn(f64) -> f64) -> f64 {
    let n: usize = ys.iter().map(Vec::len).sum();
    ys.iter()
        .zip(yt)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| f(x - y)))
        .sum::<f64>()
        / n as f64
}

pub fn mse(ys: &Mat, yt: &Mat) -> f64 {
    elementwise_mean(ys, yt, |d| d * d)
}

pub fn mae(ys: &Mat, yt: &Mat) -> f64 {
    elementwise_mean(ys, yt, f64::abs)
}

pub fn cos(ys: &Mat, yt: &Mat) -> f64 {
    let per: f64 = ys
        .iter()
        .zip(yt)
        .map(|(a, b)| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            1.0 - dot / (na * nb)
        })
        .sum();
    per / ys.len() as f64
}

/// `ce(y_s) + ce(y_t) + λ·distill(y_s, y_t)`.
pub fn total(ys: &Mat, yt: &Mat, labels: &[u32], plan: &DistillPlan) -> f64 {
    let base = ce(ys, labels) + ce(yt, labels);
    let d = match plan.loss_kind {
        LossKind::None => return base,
        LossKind::Kl => kl(ys, yt, plan.temperature as f64, plan.kl_convention),
        LossKind::Mse => mse(ys, yt),
        LossKind::Mae => mae(ys, yt),
        LossKind::Cos => cos(ys, yt),
    };
    base + plan.lambda as f64 * d
}

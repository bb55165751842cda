//! Adapter weight-distribution reports: histograms, dispersion statistics
//! and pairwise comparison between models.

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::Model;

pub const DEFAULT_BINS: usize = 101;
pub const DEFAULT_TAU: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Histogram {
    /// `counts.len() + 1` strictly increasing edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Uniform-bin histogram. Bins are `[lo, hi)` except the last, which also
/// holds `hi`. Without a range the data's `[min, max]` is used; if all
/// values are equal the result is one bin `[v − 0.5, v + 0.5]`.
pub fn weight_histogram(
    values: &[f32],
    bins: usize,
    range: Option<(f64, f64)>,
) -> Result<Histogram> {
    if values.is_empty() {
        return Err(Error::Usage("cannot build a histogram of no values".into()));
    }
    if bins == 0 {
        return Err(Error::Usage("bins must be at least 1".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Usage(
            "histogram input contains non-finite values".into(),
        ));
    }
    let (lo, hi, bins) = match range {
        Some((lo, hi)) => {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(Error::Usage(format!(
                    "invalid histogram range [{lo}, {hi}]"
                )));
            }
            (lo, hi, bins)
        }
        None => {
            let (min, max) = values
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                    (a.min(v as f64), b.max(v as f64))
                });
            if min == max {
                (min - 0.5, max + 0.5, 1)
            } else {
                (min, max, bins)
            }
        }
    };
    let width = (hi - lo) / bins as f64;
    let mut edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    edges[bins] = hi;
    let mut counts = vec![0u64; bins];
    for &v in values {
        let v = v as f64;
        if v < lo || v > hi {
            return Err(Error::Usage(format!(
                "value {v} lies outside the histogram range [{lo}, {hi}]"
            )));
        }
        let mut i = (((v - lo) / width) as usize).min(bins - 1);
        // Settle rounding at bin boundaries against the stored edges.
        while i > 0 && v < edges[i] {
            i -= 1;
        }
        while i + 1 < bins && v >= edges[i + 1] {
            i += 1;
        }
        counts[i] += 1;
    }
    Ok(Histogram { edges, counts })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DispersionStats {
    pub n: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// Fisher excess kurtosis; `None` when `std` is zero.
    pub excess_kurtosis: Option<f64>,
    /// Fraction of values with `|w| < tau`.
    pub near_zero_fraction: f64,
    pub tau: f64,
}

pub fn dispersion_stats(values: &[f32], tau: f64) -> Result<DispersionStats> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Usage(format!(
            "dispersion statistics need at least 2 values, got {n}"
        )));
    }
    let nf = n as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / nf;
    let (m2, m4) = values.iter().fold((0.0, 0.0), |(m2, m4), &v| {
        let d = v as f64 - mean;
        let d2 = d * d;
        (m2 + d2, m4 + d2 * d2)
    });
    let (m2, m4) = (m2 / nf, m4 / nf);
    let std = m2.sqrt();
    let excess_kurtosis = (m2 > 0.0).then(|| m4 / (m2 * m2) - 3.0);
    let near = values.iter().filter(|&&v| (v as f64).abs() < tau).count();
    Ok(DispersionStats {
        n,
        mean,
        std,
        excess_kurtosis,
        near_zero_fraction: near as f64 / nf,
        tau,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixKind {
    WDown,
    WUp,
}

impl MatrixKind {
    pub const ALL: [MatrixKind; 2] = [MatrixKind::WDown, MatrixKind::WUp];

    pub fn name(self) -> &'static str {
        match self {
            MatrixKind::WDown => "w_down",
            MatrixKind::WUp => "w_up",
        }
    }
}

impl fmt::Display for MatrixKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Adapter weight matrices of `model` in layer order. Biases are skipped.
pub fn adapter_matrices(model: &Model) -> Result<Vec<(usize, MatrixKind, &[f32])>> {
    if model.adapter_spec().is_none() {
        return Err(Error::Usage("no adapter parameters found".into()));
    }
    let mut out = Vec::new();
    for layer in 0..model.config().depth {
        for kind in MatrixKind::ALL {
            let name = format!("block.{layer}.adapter.{kind}");
            let p = model
                .parameter(&name)
                .ok_or_else(|| Error::Usage(format!("adapter parameter {name} not found")))?;
            out.push((layer, kind, p.tensor.data()));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatrixReport {
    pub layer: usize,
    pub matrix: MatrixKind,
    pub histogram: Histogram,
    pub stats: DispersionStats,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WeightReport {
    pub label: String,
    pub depth: usize,
    pub entries: Vec<MatrixReport>,
}

/// Symmetric histogram range `[−m, m]` for one matrix kind.
pub type RangeFor = dyn Fn(MatrixKind) -> Option<(f64, f64)>;

impl WeightReport {
    /// Builds a report; `range` picks each matrix kind's histogram range
    /// (`None` means the matrix's own min/max).
    pub fn from_model(
        label: &str,
        model: &Model,
        bins: usize,
        tau: f64,
        range: &RangeFor,
    ) -> Result<Self> {
        let entries = adapter_matrices(model)?
            .into_iter()
            .map(|(layer, matrix, values)| {
                Ok(MatrixReport {
                    layer,
                    matrix,
                    histogram: weight_histogram(values, bins, range(matrix))?,
                    stats: dispersion_stats(values, tau)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            label: label.to_string(),
            depth: model.config().depth,
            entries,
        })
    }

    pub fn entry(&self, layer: usize, matrix: MatrixKind) -> Option<&MatrixReport> {
        self.entries
            .iter()
            .find(|e| e.layer == layer && e.matrix == matrix)
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("layer,matrix,bin_lo,bin_hi,count\n");
        for e in &self.entries {
            for (i, c) in e.histogram.counts.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    e.layer,
                    e.matrix,
                    e.histogram.edges[i],
                    e.histogram.edges[i + 1],
                    c
                ));
            }
        }
        out
    }

    pub fn stats_json(&self) -> String {
        #[derive(Serialize)]
        struct Row<'a> {
            layer: usize,
            matrix: MatrixKind,
            #[serde(flatten)]
            stats: &'a DispersionStats,
        }
        #[derive(Serialize)]
        struct Doc<'a> {
            label: &'a str,
            matrices: Vec<Row<'a>>,
        }
        let doc = Doc {
            label: &self.label,
            matrices: self
                .entries
                .iter()
                .map(|e| Row {
                    layer: e.layer,
                    matrix: e.matrix,
                    stats: &e.stats,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("report serializes")
    }

    /// Writes `<label>__weights.csv` and `<label>__stats.txt` into `dir`.
    pub fn export(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(format!("{}__weights.csv", self.label));
        let stats = dir.join(format!("{}__stats.txt", self.label));
        write_file(&csv, self.csv().as_bytes())?;
        write_file(&stats, (self.stats_json() + "\n").as_bytes())?;
        Ok((csv, stats))
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Reports for several models sharing one histogram range per matrix kind:
/// `[−m, m]` with `m` the largest `|w|` of that kind across all models.
pub fn build_reports(
    models: &[(&str, &Model)],
    bins: usize,
    tau: f64,
) -> Result<Vec<WeightReport>> {
    let mut bound = [0.0f64; 2];
    for (_, m) in models {
        for (_, kind, values) in adapter_matrices(m)? {
            let slot = &mut bound[kind as usize];
            *slot = values
                .iter()
                .fold(*slot, |acc, &v| acc.max((v as f64).abs()));
        }
    }
    let range = move |kind: MatrixKind| {
        let m = bound[kind as usize];
        (m > 0.0).then_some((-m, m))
    };
    models
        .iter()
        .map(|(label, m)| WeightReport::from_model(label, m, bins, tau, &range))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MoreDispersed {
    A,
    B,
    Neutral,
}

impl MoreDispersed {
    pub fn flipped(self) -> Self {
        match self {
            MoreDispersed::A => MoreDispersed::B,
            MoreDispersed::B => MoreDispersed::A,
            MoreDispersed::Neutral => MoreDispersed::Neutral,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonEntry {
    pub layer_a: usize,
    pub layer_b: usize,
    pub matrix: MatrixKind,
    /// `std_b / std_a`.
    pub std_ratio: f64,
    /// `kurtosis_b − kurtosis_a`, when both are defined.
    pub kurtosis_diff: Option<f64>,
    pub more_dispersed: MoreDispersed,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub label_a: String,
    pub label_b: String,
    pub entries: Vec<ComparisonEntry>,
}

impl Comparison {
    pub fn csv(&self) -> String {
        let mut out =
            String::from("layer_a,layer_b,matrix,std_ratio,kurtosis_diff,more_dispersed\n");
        for e in &self.entries {
            let who = match e.more_dispersed {
                MoreDispersed::A => self.label_a.as_str(),
                MoreDispersed::B => self.label_b.as_str(),
                MoreDispersed::Neutral => "neutral",
            };
            let kd = e.kurtosis_diff.map(|k| k.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.layer_a, e.layer_b, e.matrix, e.std_ratio, kd, who
            ));
        }
        out
    }
}

/// Layer pairs for two depths. Equal depths pair layer-by-layer; otherwise
/// every layer of the deeper model is matched to the shallower layer at the
/// same relative depth.
pub fn default_pairing(depth_a: usize, depth_b: usize) -> Vec<(usize, usize)> {
    if depth_a >= depth_b {
        (0..depth_a).map(|i| (i, i * depth_b / depth_a)).collect()
    } else {
        (0..depth_b).map(|j| (j * depth_a / depth_b, j)).collect()
    }
}

fn sign_with_tol(x: f64, scale: f64) -> i32 {
    let tol = 1e-9 * scale.max(1e-300);
    if x > tol {
        1
    } else if x < -tol {
        -1
    } else {
        0
    }
}

fn compare_entry(a: &MatrixReport, b: &MatrixReport) -> ComparisonEntry {
    let (sa, sb) = (a.stats.std, b.stats.std);
    let std_ratio = if sa == 0.0 {
        if sb == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        sb / sa
    };
    let kurtosis_diff = match (a.stats.excess_kurtosis, b.stats.excess_kurtosis) {
        (Some(ka), Some(kb)) => Some(kb - ka),
        _ => None,
    };
    // Higher spread and lower kurtosis both count toward "more dispersed".
    let mut score = sign_with_tol(sb - sa, sa.max(sb));
    if let (Some(d), Some(ka), Some(kb)) = (
        kurtosis_diff,
        a.stats.excess_kurtosis,
        b.stats.excess_kurtosis,
    ) {
        score -= sign_with_tol(d, ka.abs().max(kb.abs()).max(1.0));
    }
    let more_dispersed = match score.signum() {
        1 => MoreDispersed::B,
        -1 => MoreDispersed::A,
        _ => MoreDispersed::Neutral,
    };
    ComparisonEntry {
        layer_a: a.layer,
        layer_b: b.layer,
        matrix: a.matrix,
        std_ratio,
        kurtosis_diff,
        more_dispersed,
    }
}

/// Compares two reports over `pairs` of `(layer_a, layer_b)`.
pub fn compare_reports_paired(
    a: &WeightReport,
    b: &WeightReport,
    pairs: &[(usize, usize)],
) -> Result<Comparison> {
    if pairs.is_empty() {
        return Err(Error::Usage("no layer pairs to compare".into()));
    }
    let mut entries = Vec::with_capacity(pairs.len() * 2);
    for &(la, lb) in pairs {
        for kind in MatrixKind::ALL {
            let ea = a.entry(la, kind).ok_or_else(|| {
                Error::Usage(format!("{}: no {kind} entry for layer {la}", a.label))
            })?;
            let eb = b.entry(lb, kind).ok_or_else(|| {
                Error::Usage(format!("{}: no {kind} entry for layer {lb}", b.label))
            })?;
            entries.push(compare_entry(ea, eb));
        }
    }
    Ok(Comparison {
        label_a: a.label.clone(),
        label_b: b.label.clone(),
        entries,
    })
}

/// Compares two reports using [`default_pairing`].
pub fn compare_reports(a: &WeightReport, b: &WeightReport) -> Result<Comparison> {
    let layers = |r: &WeightReport| r.entries.iter().map(|e| e.layer + 1).max().unwrap_or(0);
    let (da, db) = (layers(a), layers(b));
    if da == 0 || db == 0 {
        return Err(Error::Usage("cannot compare an empty report".into()));
    }
    compare_reports_paired(a, b, &default_pairing(da, db))
}

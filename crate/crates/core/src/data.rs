//! Datasets: synthetic generation, the IDDS file format, and batching.
//!
//! IDDS layout (little-endian): `"IDDS"`, then u32 fields
//! `version, N, H, W, C, K`, then `N` u32 labels, then `N·H·W·C` f32 pixels
//! in `[N×H×W×C]` row-major order.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::rng::{stream, stream_rng};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"IDDS";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 6 * 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<u32>,
    num_classes: usize,
    split: Split,
}

impl Dataset {
    /// Validates shapes, the `[0, 1]` pixel range and label range.
    pub fn new(images: Tensor, labels: Vec<u32>, num_classes: usize, split: Split) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 {
            return Err(Error::Data(format!("images must be [N×H×W×C], got {s:?}")));
        }
        if s[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                s[0],
                labels.len()
            )));
        }
        if num_classes == 0 {
            return Err(Error::Data("num_classes must be positive".into()));
        }
        if let Some((i, &l)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= num_classes)
        {
            return Err(FormatError::LabelOutOfRange {
                index: i,
                label: l,
                num_classes: num_classes as u32,
            }
            .into());
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// `(H, W, C)`
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    fn image_len(&self) -> usize {
        let (h, w, c) = self.image_dims();
        h * w * c
    }

    /// Gathers the given rows into a batch.
    pub fn gather(&self, indices: &[usize]) -> Result<Batch> {
        let per = self.image_len();
        let (h, w, c) = self.image_dims();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Usage(format!(
                    "index {i} out of range for dataset of {}",
                    self.len()
                )));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        Ok(Batch {
            images: Tensor::new(vec![indices.len(), h, w, c], data)?,
            labels,
        })
    }

    /// The whole dataset as consecutive chunks of at most `size` rows, in order.
    pub fn sequential_batches(&self, size: usize) -> Result<Vec<Batch>> {
        let size = size.max(1);
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(size).map(|c| self.gather(c)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<u32>,
}

fn default_channels() -> usize {
    3
}

/// Recipe for a separable synthetic classification task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub noise: f32,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        for (name, v) in [
            ("num_classes", self.num_classes),
            ("samples_per_class", self.samples_per_class),
            ("image_size", self.image_size),
            ("channels", self.channels),
        ] {
            if v == 0 {
                return Err(Error::config(
                    format!("{prefix}.{name}"),
                    "must be positive",
                ));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config(
                format!("{prefix}.noise"),
                "must be finite and nonnegative",
            ));
        }
        Ok(())
    }

    /// The disjoint pretext task: same shape, prototypes drawn from `seed + 1`.
    pub fn pretext(&self) -> SyntheticSpec {
        SyntheticSpec {
            seed: self.seed.wrapping_add(1),
            ..self.clone()
        }
    }
}

/// One prototype image per class, uniform in `[0, 1)`.
pub fn prototypes(spec: &SyntheticSpec) -> Vec<Vec<f32>> {
    let mut rng = stream_rng(spec.seed, stream::PROTOTYPES);
    let n = spec.image_size * spec.image_size * spec.channels;
    (0..spec.num_classes)
        .map(|_| (0..n).map(|_| rng.random::<f32>()).collect())
        .collect()
}

/// Samples `prototype + N(0, σ²)` clamped to `[0, 1]`, class-major order.
///
/// Every split shares the prototypes of `spec.seed`; the noise stream depends
/// on the split.
pub fn generate_synthetic(spec: &SyntheticSpec, split: Split) -> Result<Dataset> {
    spec.validate("synthetic")?;
    let protos = prototypes(spec);
    let noise_stream = match split {
        Split::Train => stream::TRAIN_NOISE,
        Split::Val => stream::VAL_NOISE,
        Split::Test => stream::TEST_NOISE,
    };
    let mut rng = stream_rng(spec.seed, noise_stream);
    let per = protos[0].len();
    let total = spec.num_classes * spec.samples_per_class;
    let mut data = Vec::with_capacity(total * per);
    let mut labels = Vec::with_capacity(total);
    for (k, proto) in protos.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            for &p in proto {
                let z: f32 = StandardNormal.sample(&mut rng);
                data.push((p + spec.noise * z).clamp(0.0, 1.0));
            }
            labels.push(k as u32);
        }
    }
    let s = spec.image_size;
    Dataset::new(
        Tensor::new(vec![total, s, s, spec.channels], data)?,
        labels,
        spec.num_classes,
        split,
    )
}

/// Bilinear resize of `[H×W×C]` to `[out_h×out_w×C]`, half-pixel centers
/// (align-corners false), edges clamped.
pub fn resize_bilinear(
    src: &[f32],
    h: usize,
    w: usize,
    c: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f32> {
    if (h, w) == (out_h, out_w) {
        return src.to_vec();
    }
    let coord = |dst: usize, in_len: usize, out_len: usize| -> (usize, usize, f32) {
        let scale = in_len as f32 / out_len as f32;
        let x = ((dst as f32 + 0.5) * scale - 0.5).max(0.0);
        let x0 = (x.floor() as usize).min(in_len - 1);
        let x1 = (x0 + 1).min(in_len - 1);
        (x0, x1, x - x0 as f32)
    };
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, w, out_w);
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * fx;
                let bottom = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * fx;
                out.push(top + (bottom - top) * fy);
            }
        }
    }
    out
}

pub fn encode(ds: &Dataset) -> Vec<u8> {
    let (h, w, c) = ds.image_dims();
    let mut out = Vec::with_capacity(HEADER_LEN + ds.len() * 4 + ds.images.numel() * 4);
    out.extend_from_slice(&MAGIC);
    for v in [
        VERSION,
        ds.len() as u32,
        h as u32,
        w as u32,
        c as u32,
        ds.num_classes as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &l in &ds.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    for v in ds.images.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses IDDS bytes. `resize_to` rescales every image to a square of that
/// side.
pub fn decode(bytes: &[u8], split: Split, resize_to: Option<usize>) -> Result<Dataset> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && bytes[..4] != MAGIC {
            return Err(bad_magic(bytes).into());
        }
        return Err(FormatError::Truncated {
            what: "header".into(),
        }
        .into());
    }
    if bytes[..4] != MAGIC {
        return Err(bad_magic(bytes).into());
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let (version, n, h, w, c, k) = (field(0), field(1), field(2), field(3), field(4), field(5));
    if version != VERSION {
        return Err(FormatError::VersionMismatch {
            found: version,
            supported: VERSION,
        }
        .into());
    }
    for (name, v) in [("N", n), ("H", h), ("W", w), ("C", c), ("K", k)] {
        if v == 0 {
            return Err(FormatError::MalformedHeader(format!("{name} must be positive")).into());
        }
    }
    let (n, h, w, c) = (n as usize, h as usize, w as usize, c as usize);
    let pixels = n
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| FormatError::MalformedHeader("image size overflows".into()))?;
    let expected = pixels
        .checked_add(n)
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(HEADER_LEN))
        .ok_or_else(|| FormatError::MalformedHeader("payload size overflows".into()))?;
    if bytes.len() < expected {
        return Err(FormatError::Truncated {
            what: format!("payload ({} of {expected} bytes)", bytes.len()),
        }
        .into());
    }
    if bytes.len() > expected {
        return Err(FormatError::TrailingBytes(bytes.len() - expected).into());
    }
    let body = &bytes[HEADER_LEN..];
    let labels: Vec<u32> = body[..4 * n]
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
        return Err(FormatError::LabelOutOfRange {
            index,
            label,
            num_classes: k,
        }
        .into());
    }
    let mut data: Vec<f32> = body[4 * n..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Data(format!(
            "pixel {i} is {} (outside [0, 1])",
            data[i]
        )));
    }
    let (mut oh, mut ow) = (h, w);
    if let Some(side) = resize_to {
        if side == 0 {
            return Err(Error::Usage("resize target must be positive".into()));
        }
        let per = h * w * c;
        data = data
            .chunks_exact(per)
            .flat_map(|img| resize_bilinear(img, h, w, c, side, side))
            .collect();
        (oh, ow) = (side, side);
    }
    Dataset::new(
        Tensor::new(vec![n, oh, ow, c], data)?,
        labels,
        k as usize,
        split,
    )
}

fn bad_magic(bytes: &[u8]) -> FormatError {
    let mut found = [0u8; 4];
    found.copy_from_slice(&bytes[..4]);
    FormatError::BadMagic {
        expected: MAGIC,
        found,
    }
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(ds)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(
    path: impl AsRef<Path>,
    split: Split,
    resize_to: Option<usize>,
) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, split, resize_to)
}

/// Row indices for one epoch: a permutation drawn from the `(seed, epoch)`
/// stream, cut into batches of `batch_size` with the last partial batch kept.
pub fn make_batches(
    len: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Usage("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = stream_rng(seed, stream::BATCH_BASE.wrapping_add(epoch));
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Accuracy of nearest-prototype classification by squared distance.
pub fn nearest_prototype_accuracy(ds: &Dataset, protos: &[Vec<f32>]) -> f64 {
    let per = ds.image_len();
    let correct = (0..ds.len())
        .filter(|&i| {
            let img = &ds.images.data()[i * per..(i + 1) * per];
            let best = protos
                .iter()
                .enumerate()
                .map(|(k, p)| {
                    (
                        k,
                        img.iter()
                            .zip(p)
                            .map(|(a, b)| ((a - b) as f64).powi(2))
                            .sum::<f64>(),
                    )
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(k, _)| k);
            best == Some(ds.labels[i] as usize)
        })
        .count();
    correct as f64 / ds.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(noise: f32) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 3,
            samples_per_class: 4,
            image_size: 4,
            channels: 2,
            noise,
            seed: 11,
        }
    }

    #[test]
    fn zero_noise_samples_equal_prototypes() {
        let s = spec(0.0);
        let ds = generate_synthetic(&s, Split::Train).unwrap();
        let protos = prototypes(&s);
        let per = 4 * 4 * 2;
        for i in 0..ds.len() {
            let img = &ds.images().data()[i * per..(i + 1) * per];
            assert_eq!(img, protos[ds.labels()[i] as usize].as_slice());
        }
    }

    #[test]
    fn generation_is_deterministic_and_splits_differ() {
        let s = spec(0.1);
        assert_eq!(
            generate_synthetic(&s, Split::Train).unwrap(),
            generate_synthetic(&s, Split::Train).unwrap()
        );
        assert_ne!(
            generate_synthetic(&s, Split::Train)
                .unwrap()
                .images()
                .data(),
            generate_synthetic(&s, Split::Test).unwrap().images().data()
        );
        assert_ne!(prototypes(&s), prototypes(&s.pretext()));
    }

    #[test]
    fn nearest_prototype_separates_noisy_classes() {
        let s = SyntheticSpec {
            num_classes: 10,
            samples_per_class: 20,
            image_size: 32,
            channels: 3,
            noise: 0.05,
            seed: 0,
        };
        let ds = generate_synthetic(&s, Split::Test).unwrap();
        assert_eq!(nearest_prototype_accuracy(&ds, &prototypes(&s)), 1.0);
    }

    #[test]
    fn roundtrip_through_bytes() {
        let ds = generate_synthetic(&spec(0.2), Split::Train).unwrap();
        let back = decode(&encode(&ds), Split::Train, None).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn label_out_of_range_names_index() {
        let ds = generate_synthetic(&spec(0.2), Split::Train).unwrap();
        let mut bytes = encode(&ds);
        // label index 5 := K (3)
        bytes[HEADER_LEN + 5 * 4..HEADER_LEN + 6 * 4].copy_from_slice(&3u32.to_le_bytes());
        let err = decode(&bytes, Split::Train, None).unwrap_err();
        assert!(matches!(
            err,
            Error::Format(FormatError::LabelOutOfRange {
                index: 5,
                label: 3,
                num_classes: 3
            })
        ));
        assert!(err.to_string().contains("index 5"));
    }

    #[test]
    fn distinct_errors_for_distinct_corruptions() {
        let bytes = encode(&generate_synthetic(&spec(0.2), Split::Train).unwrap());
        let mut m = bytes.clone();
        m[1] = b'X';
        assert!(matches!(
            decode(&m, Split::Train, None),
            Err(Error::Format(FormatError::BadMagic { .. }))
        ));
        assert!(matches!(
            decode(&bytes[..bytes.len() - 3], Split::Train, None),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
        let mut m = bytes.clone();
        m[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(
            decode(&m, Split::Train, None),
            Err(Error::Format(FormatError::MalformedHeader(_)))
        ));
    }

    #[test]
    fn resize_constant_image_stays_constant() {
        let img = vec![0.375f32; 5 * 7 * 2];
        for (oh, ow) in [(3, 3), (10, 14), (1, 1), (32, 32)] {
            assert!(resize_bilinear(&img, 5, 7, 2, oh, ow)
                .iter()
                .all(|&v| v == 0.375));
        }
    }

    #[test]
    fn resize_upsamples_linear_ramp() {
        // 2 pixels [0, 1] to 4: half-pixel centers give [0, .25, .75, 1]
        let out = resize_bilinear(&[0.0, 1.0], 1, 2, 1, 1, 4);
        assert_eq!(out, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn load_resizes_to_config() {
        let ds = generate_synthetic(&spec(0.0), Split::Train).unwrap();
        let back = decode(&encode(&ds), Split::Train, Some(8)).unwrap();
        assert_eq!(back.image_dims(), (8, 8, 2));
    }

    #[test]
    fn batches_partition_dataset() {
        let b = make_batches(10, 10, 3, 0).unwrap();
        assert_eq!(b.len(), 1);
        let mut all = b[0].clone();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        let b = make_batches(70, 32, 3, 2).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![32, 32, 6]);
        assert_eq!(b, make_batches(70, 32, 3, 2).unwrap());
        assert_ne!(b, make_batches(70, 32, 3, 3).unwrap());
        assert!(make_batches(5, 0, 0, 0).is_err());
    }
}

//! Binary checkpoint codec.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "IDAT" | version: u32 | record count: u32 | records...
//! record = name_len: u32 | name: UTF-8 | rank: u32 | dims: u32 × rank
//!          | trainable: u8 | data: f32 × product(dims)
//! ```
//!
//! The first record, `meta.config`, stores the architecture as eleven f32
//! values so a checkpoint alone is enough to rebuild the model:
//! image_size, patch_size, channels, depth, width, heads, mlp_ratio,
//! num_classes, adapter variant code (0 = none), adapter hidden_dim, scaling.

use std::path::Path;

use super::config::{AdapterSpec, AdapterVariant, ViTConfig};
use super::vit::Model;
use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"IDAT";
pub const VERSION: u32 = 1;
pub const META_NAME: &str = "meta.config";

/// One decoded record.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<u32>,
    pub trainable: bool,
    pub data: Vec<f32>,
}

fn meta_record(model: &Model) -> Record {
    let c = model.config();
    let (code, hidden, scaling) = match model.adapter_spec() {
        Some(a) => (a.variant.code(), a.hidden_dim, a.scaling),
        None => (0, 0, 0.0),
    };
    let data = vec![
        c.image_size as f32,
        c.patch_size as f32,
        c.channels as f32,
        c.depth as f32,
        c.width as f32,
        c.heads as f32,
        c.mlp_ratio as f32,
        c.num_classes as f32,
        code as f32,
        hidden as f32,
        scaling,
    ];
    Record {
        name: META_NAME.into(),
        dims: vec![data.len() as u32],
        trainable: false,
        data,
    }
}

fn write_record(out: &mut Vec<u8>, r: &Record) {
    out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
    out.extend_from_slice(r.name.as_bytes());
    out.extend_from_slice(&(r.dims.len() as u32).to_le_bytes());
    for d in &r.dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.push(r.trainable as u8);
    for v in &r.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_records(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        write_record(&mut out, r);
    }
    out
}

pub fn encode(model: &Model) -> Vec<u8> {
    let mut records = vec![meta_record(model)];
    records.extend(model.parameters().iter().map(|p| Record {
        name: p.name.clone(),
        dims: p.tensor.shape().iter().map(|&d| d as u32).collect(),
        trainable: p.trainable,
        data: p.tensor.data().to_vec(),
    }));
    encode_records(&records)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(FormatError::Truncated {
                what: what.to_string(),
            });
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, FormatError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Decodes the raw record list after checking magic and version.
pub fn decode_records(bytes: &[u8]) -> Result<Vec<Record>, FormatError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        let mut found = [0u8; 4];
        found.copy_from_slice(magic);
        return Err(FormatError::BadMagic {
            expected: MAGIC,
            found,
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(FormatError::VersionMismatch {
            found: version,
            supported: VERSION,
        });
    }
    let count = r.u32("record count")? as usize;
    let mut records = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| FormatError::MalformedRecord(format!("record {i}: name is not UTF-8")))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(FormatError::MalformedRecord(format!(
                "{name}: rank {rank} outside 1..=8"
            )));
        }
        let dims = (0..rank)
            .map(|_| r.u32("dims"))
            .collect::<Result<Vec<_>, _>>()?;
        let trainable = match r.take(1, "trainable flag")?[0] {
            0 => false,
            1 => true,
            f => {
                return Err(FormatError::MalformedRecord(format!(
                    "{name}: trainable flag {f}"
                )))
            }
        };
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .filter(|&n| n > 0)
            .ok_or_else(|| {
                FormatError::MalformedRecord(format!("{name}: invalid dims {dims:?}"))
            })?;
        let bytes_needed = numel
            .checked_mul(4)
            .ok_or_else(|| FormatError::MalformedRecord(format!("{name}: size overflow")))?;
        if bytes_needed > r.remaining() {
            return Err(FormatError::Truncated {
                what: format!("data of {name}"),
            });
        }
        let data = r
            .take(bytes_needed, "data")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        records.push(Record {
            name,
            dims,
            trainable,
            data,
        });
    }
    if r.remaining() != 0 {
        return Err(FormatError::TrailingBytes(r.remaining()));
    }
    Ok(records)
}

fn config_from_meta(meta: &Record) -> Result<(ViTConfig, Option<AdapterSpec>), FormatError> {
    let bad = |m: &str| FormatError::MalformedRecord(format!("{META_NAME}: {m}"));
    if meta.data.len() != 11 {
        return Err(bad("expected 11 values"));
    }
    let int = |i: usize| -> Result<usize, FormatError> {
        let v = meta.data[i];
        if v.fract() != 0.0 || !(0.0..=16_777_216.0).contains(&v) {
            return Err(bad(&format!("field {i} is not a non-negative integer")));
        }
        Ok(v as usize)
    };
    let config = ViTConfig {
        image_size: int(0)?,
        patch_size: int(1)?,
        channels: int(2)?,
        depth: int(3)?,
        width: int(4)?,
        heads: int(5)?,
        mlp_ratio: int(6)?,
        num_classes: int(7)?,
    };
    let adapter = match int(8)? {
        0 => None,
        code => {
            let variant = AdapterVariant::from_code(code as u32)
                .ok_or_else(|| bad("unknown adapter variant"))?;
            Some(AdapterSpec {
                variant,
                hidden_dim: int(9)?,
                scaling: meta.data[10],
            })
        }
    };
    Ok((config, adapter))
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    let records = decode_records(bytes)?;
    let Some((meta, rest)) = records.split_first().filter(|(m, _)| m.name == META_NAME) else {
        return Err(
            FormatError::MalformedRecord(format!("first record must be {META_NAME}")).into(),
        );
    };
    let (config, adapter) = config_from_meta(meta)?;
    config
        .validate("checkpoint")
        .map_err(|e| FormatError::MalformedRecord(e.to_string()))?;
    let mut model = Model::skeleton(config, adapter)
        .map_err(|e| FormatError::MalformedRecord(e.to_string()))?;
    if rest.len() != model.parameters().len() {
        return Err(FormatError::MalformedRecord(format!(
            "expected {} parameter records, found {}",
            model.parameters().len(),
            rest.len()
        ))
        .into());
    }
    let mut seen = std::collections::HashSet::new();
    for rec in rest {
        if !seen.insert(rec.name.as_str()) {
            return Err(
                FormatError::MalformedRecord(format!("duplicate parameter {}", rec.name)).into(),
            );
        }
        let p = model.parameter_mut(&rec.name).ok_or_else(|| {
            FormatError::MalformedRecord(format!("unexpected parameter {}", rec.name))
        })?;
        let dims: Vec<usize> = rec.dims.iter().map(|&d| d as usize).collect();
        if dims != p.tensor.shape() {
            return Err(FormatError::MalformedRecord(format!(
                "{}: shape {:?} does not match architecture {:?}",
                rec.name,
                dims,
                p.tensor.shape()
            ))
            .into());
        }
        p.tensor = Tensor::new(dims, rec.data.clone())?;
        p.trainable = rec.trainable;
    }
    Ok(model)
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn model() -> Model {
        let cfg = ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 2,
            depth: 2,
            width: 8,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 3,
        };
        let mut m = Model::new(cfg, &mut stream_rng(1, 1)).unwrap();
        m.inject_adapters(
            AdapterSpec::new(AdapterVariant::ParallelShared),
            &mut stream_rng(1, 2),
        )
        .unwrap();
        m
    }

    #[test]
    fn roundtrip_is_exact() {
        let m = model();
        let bytes = encode(&m);
        assert_eq!(&bytes[..4], b"IDAT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(
            u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize,
            m.parameters().len() + 1
        );
        let back = decode(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn first_record_layout_is_bit_exact() {
        let bytes = encode(&model());
        // name length 11, "meta.config", rank 1, dim 11, trainable 0
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 11);
        assert_eq!(&bytes[16..27], b"meta.config");
        assert_eq!(u32::from_le_bytes(bytes[27..31].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[31..35].try_into().unwrap()), 11);
        assert_eq!(bytes[35], 0);
        assert_eq!(f32::from_le_bytes(bytes[36..40].try_into().unwrap()), 8.0);
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = encode(&model());
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            decode(&bytes),
            Err(Error::Format(FormatError::VersionMismatch {
                found: 2,
                supported: 1
            }))
        ));
    }

    #[test]
    fn corrupt_inputs_error_without_panicking() {
        let bytes = encode(&model());
        assert!(matches!(
            decode(&bytes[..bytes.len() - 1]),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            decode(&extra),
            Err(Error::Format(FormatError::TrailingBytes(1)))
        ));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(
            decode(&magic),
            Err(Error::Format(FormatError::BadMagic { .. }))
        ));
        for i in 0..64 {
            let mut m = bytes.clone();
            m[i] ^= 0xA5;
            let _ = decode(&m);
        }
    }
}

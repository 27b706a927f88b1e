//! `BDMN` model checkpoints.
//!
//! Layout: magic `BDMN`, `u32` format version, `u32` header length, UTF-8 JSON
//! header, then every parameter tensor as little-endian `f32` in manifest
//! order.

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::model::{build, ModelConfig, ModelParams};
use crate::nn::Parameterized;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BDMN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the payload.
    pub offset: usize,
}

/// Training context stored beside the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub normalization: Option<NormStats>,
    #[serde(default)]
    pub horizon: usize,
    #[serde(default)]
    pub splits: Option<(f64, f64, f64)>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    tensors: Vec<TensorEntry>,
    meta: CheckpointMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub meta: CheckpointMeta,
}

pub fn write_checkpoint(ck: &Checkpoint, mut out: impl Write) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    let mut offset = 0;
    ck.params.visit_params("", &mut |name, t| {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
        for &v in t.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    });
    let header = serde_json::to_vec(&Header {
        model: ck.config.clone(),
        tensors,
        meta: ck.meta.clone(),
    })?;
    let mut buf = Vec::with_capacity(12 + header.len() + payload.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&payload);
    out.write_all(&buf)
        .map_err(|e| Error::io("<checkpoint stream>", e))
}

/// Rebuilds the model from its config and fills every tensor from the payload.
/// Names and shapes must match the architecture exactly.
pub fn read_checkpoint(mut input: impl Read) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<checkpoint stream>", e))?;
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a BDMN checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported BDMN version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = 12 + header_len;
    if bytes.len() < body {
        return Err(Error::Format("truncated BDMN header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[12..body])?;
    let payload: Vec<f64> = bytes[body..]
        .chunks(4)
        .map(|c| {
            c.try_into()
                .map(|b| f32::from_le_bytes(b) as f64)
                .map_err(|_| {
                    Error::Format("BDMN payload is not a whole number of f32 values".into())
                })
        })
        .collect::<Result<_>>()?;

    let mut params = build(&header.model)?;
    let expected = params.named_params().len();
    if header.tensors.len() != expected {
        return Err(Error::Format(format!(
            "manifest lists {} tensors, architecture has {expected}",
            header.tensors.len()
        )));
    }
    let mut names = Vec::new();
    params.visit_params("", &mut |name, t| names.push((name, t.shape().to_vec())));
    for ((name, shape), entry) in names.iter().zip(&header.tensors) {
        if *name != entry.name || *shape != entry.shape {
            return Err(Error::Format(format!(
                "manifest entry {} {:?} does not match {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
    }
    let mut idx = 0;
    let mut short = false;
    params.visit_params_mut(&mut |t| {
        let e = &header.tensors[idx];
        match payload.get(e.offset..e.offset + t.numel()) {
            Some(src) => t.data_mut().copy_from_slice(src),
            None => short = true,
        }
        idx += 1;
    });
    let used: usize = header
        .tensors
        .iter()
        .map(|e| e.shape.iter().product::<usize>())
        .sum();
    if short || used != payload.len() {
        return Err(Error::Format(format!(
            "BDMN payload holds {} values, manifest needs {used}",
            payload.len()
        )));
    }
    Ok(Checkpoint {
        config: header.model,
        params,
        meta: header.meta,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(ck, std::io::BufWriter::new(file))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderVariant, TsEncoder};

    fn cfg() -> ModelConfig {
        ModelConfig {
            encoder_variant: EncoderVariant::Bidepth,
            ts_encoder: TsEncoder::Convlstm,
            depth: 2,
            window: 3,
            c_in: 1,
            c_h: 2,
            c_out: 1,
            height: 4,
            width: 4,
            kernel: 3,
            qkv_kernel: None,
            c_hid: Some(3),
            attn_scale: false,
            seed: 5,
        }
    }

    #[test]
    fn round_trip_within_f32_precision() {
        let ck = Checkpoint {
            config: cfg(),
            params: build(&cfg()).unwrap(),
            meta: CheckpointMeta {
                normalization: Some(NormStats {
                    mean: 1.0,
                    std: 2.0,
                }),
                horizon: 1,
                ..Default::default()
            },
        };
        let mut buf = Vec::new();
        write_checkpoint(&ck, &mut buf).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.config, ck.config);
        assert_eq!(back.meta, ck.meta);
        for ((_, a), (_, b)) in back
            .params
            .named_params()
            .iter()
            .zip(ck.params.named_params())
        {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-6 * y.abs().max(1e-30));
            }
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let ck = Checkpoint {
            config: cfg(),
            params: build(&cfg()).unwrap(),
            meta: CheckpointMeta::default(),
        };
        let mut buf = Vec::new();
        write_checkpoint(&ck, &mut buf).unwrap();
        let mut truncated = buf.clone();
        truncated.truncate(buf.len() - 4);
        assert!(matches!(
            read_checkpoint(truncated.as_slice()),
            Err(Error::Format(_))
        ));
        let mut magic = buf.clone();
        magic[3] = b'X';
        assert!(matches!(
            read_checkpoint(magic.as_slice()),
            Err(Error::Format(_))
        ));
    }
}

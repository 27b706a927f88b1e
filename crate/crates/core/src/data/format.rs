//! `BDST` dataset container.
//!
//! Layout: magic `BDST`, `u32` format version, `u32` metadata length, UTF-8
//! JSON metadata, then the frames as little-endian `f32` in row-major order.

use super::{NormStats, STDataset, TIMESTAMP_FORMAT};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const DATASET_MAGIC: &[u8; 4] = b"BDST";
pub const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    shape: Vec<usize>,
    interval_minutes: u32,
    timestamps: Vec<String>,
    normalization: Option<NormStats>,
}

pub fn write_dataset(ds: &STDataset, mut out: impl Write) -> Result<()> {
    let meta = Metadata {
        shape: ds.frames.shape().to_vec(),
        interval_minutes: ds.interval_minutes,
        timestamps: ds
            .timestamps
            .iter()
            .map(|t| t.format(TIMESTAMP_FORMAT).to_string())
            .collect(),
        normalization: ds.norm,
    };
    let json = serde_json::to_vec(&meta)?;
    let mut buf = Vec::with_capacity(12 + json.len() + 4 * ds.frames.numel());
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for &v in ds.frames.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&buf)
        .map_err(|e| Error::io("<dataset stream>", e))
}

pub fn read_dataset(mut input: impl Read) -> Result<STDataset> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<dataset stream>", e))?;
    if bytes.len() < 12 || &bytes[..4] != DATASET_MAGIC {
        return Err(Error::Format("not a BDST dataset (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported BDST version {version}")));
    }
    let meta_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let meta_end = 12 + meta_len;
    if bytes.len() < meta_end {
        return Err(Error::Format("truncated BDST metadata".into()));
    }
    let meta: Metadata = serde_json::from_slice(&bytes[12..meta_end])?;
    let numel: usize = meta.shape.iter().product();
    let payload = &bytes[meta_end..];
    if payload.len() != 4 * numel {
        return Err(Error::Format(format!(
            "BDST payload has {} bytes, shape {:?} needs {}",
            payload.len(),
            meta.shape,
            4 * numel
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let timestamps = meta
        .timestamps
        .iter()
        .map(|s| {
            NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT)
                .map_err(|e| Error::Format(format!("bad timestamp {s:?}: {e}")))
        })
        .collect::<Result<_>>()?;
    let mut ds = STDataset::new(
        Tensor::new(meta.shape, data)?,
        timestamps,
        meta.interval_minutes,
    )?;
    ds.norm = meta.normalization;
    Ok(ds)
}

pub fn write_dataset_file(ds: &STDataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset(ds, std::io::BufWriter::new(file))
}

pub fn read_dataset_file(path: &Path) -> Result<STDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;
    use proptest::prelude::*;

    fn dataset(values: Vec<f32>, frames: usize) -> STDataset {
        let start = NaiveDate::from_ymd_opt(2023, 1, 1)
            .unwrap()
            .and_hms_opt(0, 0, 0)
            .unwrap();
        let per = values.len() / frames;
        let ts = (0..frames)
            .map(|i| start + chrono::Duration::minutes(15 * i as i64))
            .collect();
        let t = Tensor::new(
            vec![frames, 1, 1, per],
            values.into_iter().map(f64::from).collect(),
        )
        .unwrap();
        STDataset::new(t, ts, 15).unwrap()
    }

    proptest! {
        #[test]
        fn roundtrip_preserves_f32_values(values in proptest::collection::vec(-1e6f32..1e6, 6), mean in -5.0f64..5.0) {
            let mut ds = dataset(values, 3);
            ds.norm = Some(NormStats { mean, std: 2.0 });
            let mut buf = Vec::new();
            write_dataset(&ds, &mut buf).unwrap();
            let back = read_dataset(buf.as_slice()).unwrap();
            prop_assert_eq!(back, ds);
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let ds = dataset(vec![1.0, 2.0], 2);
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_dataset(bad.as_slice()),
            Err(Error::Format(_))
        ));
        buf.pop();
        assert!(matches!(
            read_dataset(buf.as_slice()),
            Err(Error::Format(_))
        ));
    }
}

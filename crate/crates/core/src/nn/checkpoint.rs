//! Versioned binary checkpoint container.
//!
//! Layout (little-endian): magic `LFCK`, format version, dtype code, kind
//! string, seed, config JSON, named arrays, then a SHA-256 digest of all
//! preceding bytes. Loading verifies magic, version, dtype, kind and digest;
//! shape mismatches against an existing model name the offending component.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::num::{Dtype, Scalar};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"LFCK";

/// In-memory checkpoint payload.
#[derive(Debug, Clone)]
pub struct CheckpointData<F: Scalar> {
    pub kind: String,
    pub seed: u64,
    pub config_json: String,
    pub arrays: BTreeMap<String, ArrayD<F>>,
}

impl<F: Scalar> CheckpointData<F> {
    pub fn new(kind: impl Into<String>, seed: u64, config_json: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            seed,
            config_json: config_json.into(),
            arrays: BTreeMap::new(),
        }
    }

    /// SHA-256 of the embedded config JSON, hex-encoded.
    pub fn config_sha256(&self) -> String {
        hex_digest(self.config_json.as_bytes())
    }

    pub fn parse_config<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_str(&self.config_json)?)
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().map(|b| format!("{b:02x}")).collect()
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

pub fn save_checkpoint<F: Scalar>(path: impl AsRef<Path>, data: &CheckpointData<F>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
    buf.push(F::DTYPE.code());
    put_str(&mut buf, &data.kind);
    buf.extend_from_slice(&data.seed.to_le_bytes());
    put_str(&mut buf, &data.config_json);
    buf.extend_from_slice(&(data.arrays.len() as u32).to_le_bytes());
    for (name, arr) in &data.arrays {
        put_str(&mut buf, name);
        buf.push(arr.ndim() as u8);
        for &d in arr.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in arr.iter() {
            v.write_le(&mut buf);
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let s = self.take(n)?;
        String::from_utf8(s.to_vec()).map_err(|_| Error::Checkpoint("non-UTF8 string".into()))
    }
}

pub fn load_checkpoint<F: Scalar>(path: impl AsRef<Path>, expected_kind: &str) -> Result<CheckpointData<F>> {
    let path = path.as_ref();
    let buf = fs::read(path)?;
    if buf.len() < 4 + 4 + 1 + 32 {
        return Err(Error::Checkpoint(format!("{} is too short to be a checkpoint", path.display())));
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    let actual = Sha256::digest(body);
    if actual.as_slice() != digest {
        return Err(Error::Checkpoint(format!(
            "{} failed integrity check (corrupted or tampered)",
            path.display()
        )));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint file", path.display())));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint format version {version} unsupported; this build reads version {CHECKPOINT_FORMAT_VERSION}"
        )));
    }
    let dtype = Dtype::from_code(r.take(1)?[0])
        .ok_or_else(|| Error::Checkpoint("unknown dtype code".into()))?;
    if dtype != F::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint stores {dtype:?} but {:?} was requested",
            F::DTYPE
        )));
    }
    let kind = r.str()?;
    if kind != expected_kind {
        return Err(Error::Checkpoint(format!(
            "checkpoint kind '{kind}' does not match expected '{expected_kind}'"
        )));
    }
    let seed = r.u64()?;
    let config_json = r.str()?;
    let n_arrays = r.u32()? as usize;
    let mut arrays = BTreeMap::new();
    for _ in 0..n_arrays {
        let name = r.str()?;
        let ndim = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = r.take(len * F::DTYPE.width())?;
        let values: Vec<F> = raw
            .chunks_exact(F::DTYPE.width())
            .map(|c| F::read_le(c))
            .collect();
        arrays.insert(name, ArrayD::from_shape_vec(IxDyn(&shape), values).unwrap());
    }
    Ok(CheckpointData {
        kind,
        seed,
        config_json,
        arrays,
    })
}

/// Copies checkpoint arrays into an existing model via its visitor, erroring
/// with the offending name on missing entries or shape mismatches.
pub fn load_arrays_into<F: Scalar>(
    arrays: &BTreeMap<String, ArrayD<F>>,
    mut visit: impl FnMut(&mut dyn crate::nn::layers::ParamVisitor<F>),
) -> Result<()> {
    let mut failure: Option<Error> = None;
    let mut loader = |name: &str, _kind: crate::nn::layers::ParamKind, value: &mut ArrayD<F>| {
        if failure.is_some() {
            return;
        }
        match arrays.get(name) {
            None => {
                failure = Some(Error::Checkpoint(format!("checkpoint is missing array '{name}'")));
            }
            Some(a) if a.shape() != value.shape() => {
                failure = Some(Error::shape(
                    format!("checkpoint array '{name}'"),
                    format!("{:?}", value.shape()),
                    format!("{:?}", a.shape()),
                ));
            }
            Some(a) => value.assign(a),
        }
    };
    visit(&mut loader);
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Copies a model's trainable parameters into owned optimizer slots.
pub fn build_param_slots<F: Scalar>(
    mut visit: impl FnMut(&mut dyn crate::nn::layers::ParamVisitor<F>),
) -> Vec<(String, ArrayD<F>)> {
    let mut out = Vec::new();
    let mut collector = |name: &str, kind: crate::nn::layers::ParamKind, value: &mut ArrayD<F>| {
        if kind == crate::nn::layers::ParamKind::Trainable {
            out.push((name.to_string(), value.clone()));
        }
    };
    visit(&mut collector);
    out
}

/// Writes optimizer slots back into the model's trainable parameters.
pub fn write_param_slots<F: Scalar>(
    slots: Vec<(String, ArrayD<F>)>,
    mut visit: impl FnMut(&mut dyn crate::nn::layers::ParamVisitor<F>),
) {
    let map: BTreeMap<String, ArrayD<F>> = slots.into_iter().collect();
    let mut writer = |name: &str, kind: crate::nn::layers::ParamKind, value: &mut ArrayD<F>| {
        if kind == crate::nn::layers::ParamKind::Trainable {
            if let Some(new) = map.get(name) {
                value.assign(new);
            }
        }
    };
    visit(&mut writer);
}

/// Collects a model's arrays through its visitor.
pub fn collect_arrays<F: Scalar>(
    mut visit: impl FnMut(&mut dyn crate::nn::layers::ParamVisitor<F>),
) -> BTreeMap<String, ArrayD<F>> {
    let mut out = BTreeMap::new();
    let mut collector = |name: &str, _kind: crate::nn::layers::ParamKind, value: &mut ArrayD<F>| {
        out.insert(name.to_string(), value.clone());
    };
    visit(&mut collector);
    out
}

/// SHA-256 over a set of named arrays; used to fingerprint frozen weights.
pub fn arrays_sha256<F: Scalar>(arrays: &BTreeMap<String, ArrayD<F>>) -> String {
    let mut h = Sha256::new();
    for (name, arr) in arrays {
        h.update(name.as_bytes());
        for &d in arr.shape() {
            h.update((d as u64).to_le_bytes());
        }
        let mut bytes = Vec::with_capacity(arr.len() * F::DTYPE.width());
        for &v in arr.iter() {
            v.write_le(&mut bytes);
        }
        h.update(&bytes);
    }
    let d = h.finalize();
    d.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample() -> CheckpointData<f32> {
        let mut d = CheckpointData::new("test-model", 42, r#"{"width":4}"#);
        d.arrays.insert(
            "layer.w".into(),
            ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, -2.0, 3.5, 0.0, 4.25, -7.125]).unwrap(),
        );
        d.arrays
            .insert("layer.b".into(), ArrayD::from_elem(IxDyn(&[3]), 0.5f32));
        d
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.lfck");
        let d = sample();
        save_checkpoint(&p, &d).unwrap();
        let r: CheckpointData<f32> = load_checkpoint(&p, "test-model").unwrap();
        assert_eq!(r.seed, 42);
        assert_eq!(r.config_json, d.config_json);
        assert_eq!(r.arrays, d.arrays);
        assert_eq!(r.config_sha256(), d.config_sha256());
    }

    #[test]
    fn tampered_file_fails_integrity() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.lfck");
        save_checkpoint(&p, &sample()).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        fs::write(&p, bytes).unwrap();
        let err = load_checkpoint::<f32>(&p, "test-model");
        assert!(matches!(err, Err(Error::Checkpoint(m)) if m.contains("integrity")));
    }

    #[test]
    fn kind_and_dtype_are_enforced() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.lfck");
        save_checkpoint(&p, &sample()).unwrap();
        assert!(load_checkpoint::<f32>(&p, "other-model").is_err());
        assert!(load_checkpoint::<f64>(&p, "test-model").is_err());
    }

    #[test]
    fn mismatched_shape_names_the_component() {
        let d = sample();
        let mut wrong = ArrayD::<f32>::zeros(IxDyn(&[2, 4]));
        let err = load_arrays_into(&d.arrays, |v| {
            v.visit("layer.w", crate::nn::layers::ParamKind::Trainable, &mut wrong);
        });
        match err {
            Err(Error::ShapeMismatch { context, .. }) => assert!(context.contains("layer.w")),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }
}

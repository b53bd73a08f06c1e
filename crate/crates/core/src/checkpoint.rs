//! Versioned binary checkpoints: model configuration, named parameter
//! tensors, and optimizer state, all little-endian and byte-reproducible.
//!
//! Layout (version 1):
//!
//! ```text
//! magic            6 bytes  "ATSEG1"
//! version          u32
//! base_channels    u32
//! depth            u32
//! in_channels      u32
//! image_h, image_w u32, u32
//! dropout_rate     f32
//! pooled_size      u32
//! train_seed       u64
//! epoch            u32
//! val_dice         f32
//! n_params         u32
//! per param:       u16 name len, name bytes, u8 ndim, u32 dims..., f32 data...
//! opt step         u64
//! per param:       f32 m..., f32 v...   (lengths follow the param shapes)
//! ```

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use crate::segnet::{SegModel, UNetConfig};
use crate::tensor::Tensor;
use crate::training::AdamState;

pub const MAGIC: &[u8; 6] = b"ATSEG1";
pub const VERSION: u32 = 1;

#[derive(Debug)]
pub enum CheckpointError {
    Io(std::io::Error),
    BadMagic { found: Vec<u8> },
    Version { found: u32 },
    Truncated { offset: usize, needed: usize },
    TrailingData { offset: usize },
    Malformed(String),
    UnknownTensor(String),
    DuplicateTensor(String),
    MissingTensor(String),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint i/o error: {e}"),
            CheckpointError::BadMagic { found } => {
                write!(f, "bad checkpoint magic {found:?}, expected {MAGIC:?}")
            }
            CheckpointError::Version { found } => {
                write!(f, "unsupported checkpoint version {found}, expected {VERSION}")
            }
            CheckpointError::Truncated { offset, needed } => {
                write!(f, "checkpoint truncated at byte {offset}: {needed} more bytes needed")
            }
            CheckpointError::TrailingData { offset } => {
                write!(f, "unexpected trailing data after byte {offset}")
            }
            CheckpointError::Malformed(m) => write!(f, "malformed checkpoint: {m}"),
            CheckpointError::UnknownTensor(n) => write!(f, "unknown tensor name {n:?}"),
            CheckpointError::DuplicateTensor(n) => write!(f, "tensor name {n:?} listed twice"),
            CheckpointError::MissingTensor(n) => write!(f, "tensor name {n:?} missing"),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

/// Serialized training state: everything needed to resume or evaluate
/// deterministically.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: UNetConfig,
    pub pooled_size: usize,
    pub train_seed: u64,
    pub epoch: u32,
    pub val_dice: f32,
    /// Named parameters in the model's canonical order.
    pub params: Vec<(String, Tensor)>,
    pub opt_step: u64,
    pub opt_m: Vec<Vec<f32>>,
    pub opt_v: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn from_model(
        model: &SegModel,
        adam: &AdamState,
        train_seed: u64,
        epoch: u32,
        val_dice: f32,
    ) -> Self {
        Checkpoint {
            config: model.config.clone(),
            pooled_size: model.pooled_size,
            train_seed,
            epoch,
            val_dice,
            params: model
                .named_params()
                .into_iter()
                .map(|(name, t)| (name, t.clone()))
                .collect(),
            opt_step: adam.step,
            opt_m: adam.m.clone(),
            opt_v: adam.v.clone(),
        }
    }

    /// Reconstructs the model and optimizer state, assigning parameters by
    /// name. Every model parameter must be present exactly once.
    pub fn to_model(&self) -> Result<(SegModel, AdamState), CheckpointError> {
        let mut model = SegModel::init_with_pooled(self.config.clone(), self.pooled_size, 0)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let expected: Vec<String> = model.named_params().iter().map(|(n, _)| n.clone()).collect();

        let mut seen = HashSet::new();
        for (name, _) in &self.params {
            if !expected.iter().any(|e| e == name) {
                return Err(CheckpointError::UnknownTensor(name.clone()));
            }
            if !seen.insert(name.clone()) {
                return Err(CheckpointError::DuplicateTensor(name.clone()));
            }
        }
        for name in &expected {
            if !seen.contains(name) {
                return Err(CheckpointError::MissingTensor(name.clone()));
            }
        }

        {
            let mut params = model.params_mut();
            for (slot, name) in expected.iter().enumerate() {
                let (_, stored) =
                    self.params.iter().find(|(n, _)| n == name).expect("presence checked");
                if stored.shape() != params[slot].shape() {
                    return Err(CheckpointError::Malformed(format!(
                        "tensor {name:?} has shape {:?}, model expects {:?}",
                        stored.shape(),
                        params[slot].shape()
                    )));
                }
                *params[slot] = stored.clone();
            }
        }

        if self.opt_m.len() != expected.len() || self.opt_v.len() != expected.len() {
            return Err(CheckpointError::Malformed(format!(
                "optimizer state holds {} tensors, model has {}",
                self.opt_m.len(),
                expected.len()
            )));
        }
        for (slot, (name, t)) in self.params.iter().enumerate() {
            if self.opt_m[slot].len() != t.numel() || self.opt_v[slot].len() != t.numel() {
                return Err(CheckpointError::Malformed(format!(
                    "optimizer state length mismatch for {name:?}"
                )));
            }
        }
        let adam = AdamState { step: self.opt_step, m: self.opt_m.clone(), v: self.opt_v.clone() };
        Ok((model, adam))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        push_u32(&mut out, VERSION);
        push_u32(&mut out, self.config.base_channels as u32);
        push_u32(&mut out, self.config.depth as u32);
        push_u32(&mut out, self.config.in_channels as u32);
        push_u32(&mut out, self.config.image_h as u32);
        push_u32(&mut out, self.config.image_w as u32);
        push_f32(&mut out, self.config.dropout_rate);
        push_u32(&mut out, self.pooled_size as u32);
        out.extend_from_slice(&self.train_seed.to_le_bytes());
        push_u32(&mut out, self.epoch);
        push_f32(&mut out, self.val_dice);
        push_u32(&mut out, self.params.len() as u32);
        for (name, t) in &self.params {
            let bytes = name.as_bytes();
            out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
            out.extend_from_slice(bytes);
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                push_u32(&mut out, d as u32);
            }
            for &v in t.data() {
                push_f32(&mut out, v);
            }
        }
        out.extend_from_slice(&self.opt_step.to_le_bytes());
        for (m, v) in self.opt_m.iter().zip(self.opt_v.iter()) {
            for &x in m {
                push_f32(&mut out, x);
            }
            for &x in v {
                push_f32(&mut out, x);
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(6)?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic { found: magic.to_vec() });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let config = UNetConfig {
            base_channels: r.u32()? as usize,
            depth: r.u32()? as usize,
            in_channels: r.u32()? as usize,
            image_h: r.u32()? as usize,
            image_w: r.u32()? as usize,
            dropout_rate: r.f32()?,
        };
        let pooled_size = r.u32()? as usize;
        let train_seed = r.u64()?;
        let epoch = r.u32()?;
        let val_dice = r.f32()?;
        let n_params = r.u32()? as usize;
        if n_params > 10_000 {
            return Err(CheckpointError::Malformed(format!("implausible parameter count {n_params}")));
        }
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| CheckpointError::Malformed("tensor name is not utf-8".into()))?;
            let ndim = r.u8()? as usize;
            if ndim > 8 {
                return Err(CheckpointError::Malformed(format!("implausible rank {ndim}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(r.f32()?);
            }
            let t = Tensor::new(shape, data)
                .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            params.push((name, t));
        }
        let opt_step = r.u64()?;
        let mut opt_m = Vec::with_capacity(n_params);
        let mut opt_v = Vec::with_capacity(n_params);
        for (_, t) in &params {
            let mut m = Vec::with_capacity(t.numel());
            for _ in 0..t.numel() {
                m.push(r.f32()?);
            }
            let mut v = Vec::with_capacity(t.numel());
            for _ in 0..t.numel() {
                v.push(r.f32()?);
            }
            opt_m.push(m);
            opt_v.push(v);
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingData { offset: r.pos });
        }
        Ok(Checkpoint {
            config,
            pooled_size,
            train_seed,
            epoch,
            val_dice,
            params,
            opt_step,
            opt_m,
            opt_v,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(&self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f32(out: &mut Vec<u8>, v: f32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated {
                offset: self.bytes.len(),
                needed: self.pos + n - self.bytes.len(),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("length checked")))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("length checked")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("length checked")))
    }

    fn f32(&mut self) -> Result<f32, CheckpointError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("length checked")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::UNetConfig;

    fn sample_checkpoint() -> Checkpoint {
        let cfg = UNetConfig {
            base_channels: 4,
            depth: 2,
            image_h: 16,
            image_w: 16,
            ..Default::default()
        };
        let model = SegModel::init(cfg, 42).unwrap();
        let adam = AdamState::new(model.named_params().iter().map(|(_, t)| *t));
        Checkpoint::from_model(&model, &adam, 42, 3, 0.77)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ckpt = sample_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ckpt.save(&path).unwrap();
        let first = std::fs::read(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        loaded.save(&path).unwrap();
        let second = std::fs::read(&path).unwrap();
        assert_eq!(first, second);
        assert_eq!(loaded, ckpt);
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let mut bytes = sample_checkpoint().encode();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bytes), Err(CheckpointError::BadMagic { .. })));
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let mut bytes = sample_checkpoint().encode();
        bytes[6..10].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::decode(&bytes),
            Err(CheckpointError::Version { found: 99 })
        ));
    }

    #[test]
    fn truncation_and_trailing_bytes_are_rejected() {
        let bytes = sample_checkpoint().encode();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(Checkpoint::decode(cut), Err(CheckpointError::Truncated { .. })));

        let mut extended = bytes.clone();
        extended.push(0);
        assert!(matches!(
            Checkpoint::decode(&extended),
            Err(CheckpointError::TrailingData { .. })
        ));
    }

    #[test]
    fn every_parameter_name_listed_exactly_once() {
        let ckpt = sample_checkpoint();
        let (model, _) = ckpt.to_model().unwrap();
        let expected: Vec<String> =
            model.named_params().into_iter().map(|(n, _)| n).collect();
        let stored: Vec<String> = ckpt.params.iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(expected, stored);
    }

    #[test]
    fn unknown_duplicate_and_missing_names_error() {
        let mut unknown = sample_checkpoint();
        unknown.params[0].0 = "enc9.conv1.weight".into();
        assert!(matches!(unknown.to_model(), Err(CheckpointError::UnknownTensor(_))));

        let mut dup = sample_checkpoint();
        dup.params[1].0 = dup.params[0].0.clone();
        let err = dup.to_model().unwrap_err();
        assert!(
            matches!(err, CheckpointError::DuplicateTensor(_) | CheckpointError::UnknownTensor(_)),
            "{err}"
        );

        let mut missing = sample_checkpoint();
        missing.params.pop();
        missing.opt_m.pop();
        missing.opt_v.pop();
        assert!(matches!(missing.to_model(), Err(CheckpointError::MissingTensor(_))));
    }

    #[test]
    fn round_trip_reconstructs_model_bitwise() {
        let ckpt = sample_checkpoint();
        let bytes = ckpt.encode();
        let decoded = Checkpoint::decode(&bytes).unwrap();
        let (model, adam) = decoded.to_model().unwrap();
        let again = Checkpoint::from_model(&model, &adam, ckpt.train_seed, ckpt.epoch, ckpt.val_dice);
        assert_eq!(again.encode(), bytes);
    }
}

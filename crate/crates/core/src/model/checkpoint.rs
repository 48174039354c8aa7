//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian `u32`, values little-endian `f64`):
//!
//! ```text
//! magic "MICROATT" | version
//! input channels, height, width | stem_pool | attention (u8) | num_classes
//! block count | per block: cin, c1, c2, c3, stride
//! tensor count | per tensor: rank, dims..., values...
//! SHA-256 of everything above (32 bytes)
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{BlockSpec, InputShape, Model, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MICROATT";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// How a stored checkpoint maps onto the requested architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoadMode {
    /// Stored and requested specs must be identical.
    Exact,
    /// Stored spec is the plain form of the requested attention network;
    /// attention kernels are created at zero.
    Upgrade,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

pub(crate) fn encode(model: &Model) -> Vec<u8> {
    let spec = model.spec();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut buf, spec.input.channels);
    put_u32(&mut buf, spec.input.height);
    put_u32(&mut buf, spec.input.width);
    put_u32(&mut buf, spec.stem_pool);
    buf.push(spec.attention as u8);
    put_u32(&mut buf, spec.num_classes);
    put_u32(&mut buf, spec.blocks.len());
    for b in &spec.blocks {
        for v in [b.cin, b.c1, b.c2, b.c3, b.stride] {
            put_u32(&mut buf, v);
        }
    }
    let params = model.params();
    put_u32(&mut buf, params.len());
    for (_, t) in params {
        put_u32(&mut buf, t.shape().len());
        for &d in t.shape() {
            put_u32(&mut buf, d);
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::CorruptCheckpoint(format!("truncated at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + DIGEST_LEN || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::CorruptCheckpoint("missing checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::CorruptCheckpoint("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 12 };
    let input = InputShape { channels: r.u32()?, height: r.u32()?, width: r.u32()? };
    let stem_pool = r.u32()?;
    let attention = match r.take(1)?[0] {
        0 => false,
        1 => true,
        other => return Err(Error::CorruptCheckpoint(format!("bad attention flag {other}"))),
    };
    let num_classes = r.u32()?;
    let n_blocks = r.u32()?;
    let mut blocks = Vec::with_capacity(n_blocks.min(1024));
    for _ in 0..n_blocks {
        blocks.push(BlockSpec { cin: r.u32()?, c1: r.u32()?, c2: r.u32()?, c3: r.u32()?, stride: r.u32()? });
    }
    let spec = NetworkSpec { input, stem_pool, blocks, num_classes, attention };
    spec.validate().map_err(|e| Error::CorruptCheckpoint(format!("stored spec is invalid: {e}")))?;

    let n_tensors = r.u32()?;
    let mut tensors = Vec::with_capacity(n_tensors.min(4096));
    for _ in 0..n_tensors {
        let rank = r.u32()?;
        if rank == 0 || rank > crate::tensor::MAX_RANK {
            return Err(Error::CorruptCheckpoint(format!("tensor rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        if len * 8 > body.len() - r.pos {
            return Err(Error::CorruptCheckpoint(format!("tensor of shape {shape:?} overruns the file")));
        }
        let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        tensors.push(Tensor::new(&shape, data).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?);
    }
    if r.pos != body.len() {
        return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Model::from_parts(spec, tensors)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, encode(model))?;
    Ok(())
}

/// Loads a checkpoint for `spec`. In [`LoadMode::Upgrade`] the file must hold
/// the plain form of `spec`; the returned model then computes exactly the
/// same function as the stored one.
pub fn load_checkpoint(path: &Path, spec: &NetworkSpec, mode: LoadMode) -> Result<Model> {
    let stored = decode(&fs::read(path)?)?;
    match mode {
        LoadMode::Exact => {
            if stored.spec() != spec {
                return Err(Error::SpecMismatch(format!(
                    "stored {:?} differs from requested {:?}",
                    stored.spec(),
                    spec
                )));
            }
            Ok(stored)
        }
        LoadMode::Upgrade => {
            if !spec.attention {
                return Err(Error::SpecMismatch("upgrade target must have attention units".into()));
            }
            if stored.spec().attention {
                return Err(Error::SpecMismatch("upgrade source already has attention units".into()));
            }
            if stored.spec().with_attention() != *spec {
                return Err(Error::SpecMismatch(format!(
                    "stored plain network {:?} does not match requested {:?}",
                    stored.spec(),
                    spec
                )));
            }
            Model::upgraded_from(&stored)
        }
    }
}

impl Model {
    pub fn to_bytes(&self) -> Vec<u8> {
        encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
        decode(bytes)
    }
}

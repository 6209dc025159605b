//! Checkpoint files.
//!
//! All integers little-endian:
//!
//! ```text
//! magic       8 bytes  "DSCKPT01"
//! kind        u8       0 disentangle, 1 autoencoder, 2 classifier
//! step        u64      optimizer steps taken when saved
//! model_len   u32      + JSON of the model configuration
//! echo_len    u32      + resolved run configuration text
//! n_tensors   u32
//! n_tensors × {
//!   name_len  u32      + UTF-8 name
//!   ndim      u32      + ndim × u32 extents
//!   data      f32 × product(extents)
//! }
//! digest      32 bytes SHA-256 of everything above
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::params::{Groups, Parameters};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DSCKPT01";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Disentangle,
    Autoencoder,
    Classifier,
}

impl ModelKind {
    pub fn groups(self) -> Groups {
        match self {
            ModelKind::Disentangle => Groups::DISENTANGLE,
            ModelKind::Autoencoder => Groups::AUTOENCODER,
            ModelKind::Classifier => Groups::CLASSIFIER,
        }
    }

    fn code(self) -> u8 {
        match self {
            ModelKind::Disentangle => 0,
            ModelKind::Autoencoder => 1,
            ModelKind::Classifier => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => ModelKind::Disentangle,
            1 => ModelKind::Autoencoder,
            2 => ModelKind::Classifier,
            _ => return Err(Error::Checkpoint(format!("unknown model kind {c}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Disentangle => "disentangle",
            ModelKind::Autoencoder => "autoencoder",
            ModelKind::Classifier => "classifier",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub step: u64,
    pub model: ModelConfig,
    /// Resolved configuration of the run that wrote the file.
    pub echo: String,
    pub params: Parameters<f32>,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len());
    buf.extend_from_slice(s.as_bytes());
}

/// Serializes a checkpoint; the file is written next to `path` and renamed
/// into place so a crash never leaves a half-written checkpoint.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    ckpt.params.validate_against(&ckpt.model, ckpt.kind.groups())?;
    let model = serde_json::to_string(&ckpt.model).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut buf = Vec::with_capacity(ckpt.params.num_scalars() * 4 + 4096);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.push(ckpt.kind.code());
    buf.extend_from_slice(&ckpt.step.to_le_bytes());
    put_str(&mut buf, &model);
    put_str(&mut buf, &ckpt.echo);
    put_u32(&mut buf, ckpt.params.len());
    for (name, t) in ckpt.params.iter() {
        put_str(&mut buf, name);
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
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

/// Reads and verifies a checkpoint, including that every tensor matches the
/// shapes its stored configuration implies.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < CHECKPOINT_MAGIC.len() + 32 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint(format!("{}: checksum mismatch", path.display())));
    }
    let mut c = Cursor { buf: body, pos: 8 };
    let kind = ModelKind::from_code(c.take(1)?[0])?;
    let step = u64::from_le_bytes(c.take(8)?.try_into().unwrap());
    let model: ModelConfig =
        serde_json::from_str(&c.string()?).map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
    model.validate()?;
    let echo = c.string()?;
    let n = c.u32()?;
    let mut params = Parameters::new();
    for _ in 0..n {
        let name = c.string()?;
        let ndim = c.u32()?;
        let shape = (0..ndim).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = c.take(len.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        params.insert(name, Tensor::from_vec(&shape, data)?);
    }
    if c.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    params.validate_against(&model, kind.groups())?;
    Ok(Checkpoint {
        kind,
        step,
        model,
        echo,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let model = ModelConfig::tiny(3);
        Checkpoint {
            kind: ModelKind::Disentangle,
            step: 17,
            params: Parameters::init(&model, Groups::DISENTANGLE, 4).unwrap(),
            model,
            echo: "lr = 0.0001\n".into(),
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample();
        save_checkpoint(&path, &ck).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ck);
        assert!(!path.with_extension("tmp").exists());
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &sample()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
        std::fs::write(&path, &bytes[..100]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn refuses_mismatched_parameters() {
        let mut ck = sample();
        ck.kind = ModelKind::Classifier;
        let dir = tempfile::tempdir().unwrap();
        assert!(save_checkpoint(&dir.path().join("x"), &ck).is_err());
    }
}

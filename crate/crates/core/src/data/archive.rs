//! Single-file container for a generated dataset.
//!
//! All integers little-endian:
//!
//! ```text
//! magic        8 bytes  "DSYNARC1"
//! spec_len     u32      length of the UTF-8 generator echo that follows
//! spec         bytes
//! num_classes  u32
//! n_items      u32
//! T, H, W, C   4 × u32
//! n_items × {
//!   label      i32      -1 when unlabeled
//!   id_len     u32
//!   id         bytes    UTF-8 source id
//!   has_mask   u8       0 or 1
//!   clip       T·H·W·C × f32
//!   mask       T·H·W × u8  (only when has_mask == 1)
//! }
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{AnnotatedClip, ClipTensor, Dataset, InMemoryDataset, MaskVolume};
use crate::error::{Error, Result};

pub const ARCHIVE_MAGIC: &[u8; 8] = b"DSYNARC1";

/// Writes every item of `ds` together with a free-form generator echo.
pub fn write_archive(path: &Path, spec_echo: &str, ds: &dyn Dataset) -> Result<()> {
    let io = |e| Error::io(path, e);
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
        let [t, h, wd, c] = ds.clip_dims();
        let mut header = Vec::new();
        header.extend_from_slice(ARCHIVE_MAGIC);
        header.extend_from_slice(&(spec_echo.len() as u32).to_le_bytes());
        header.extend_from_slice(spec_echo.as_bytes());
        header.extend_from_slice(&(ds.num_classes().unwrap_or(0) as u32).to_le_bytes());
        header.extend_from_slice(&(ds.len() as u32).to_le_bytes());
        for d in [t, h, wd, c] {
            header.extend_from_slice(&(d as u32).to_le_bytes());
        }
        w.write_all(&header).map_err(io)?;
        for i in 0..ds.len() {
            let item = ds.get(i)?;
            let mut rec = Vec::with_capacity(item.clip.values().len() * 4 + t * h * wd + 64);
            let label = item.label.map(|l| l as i32).unwrap_or(-1);
            rec.extend_from_slice(&label.to_le_bytes());
            rec.extend_from_slice(&(item.source_id.len() as u32).to_le_bytes());
            rec.extend_from_slice(item.source_id.as_bytes());
            rec.push(item.mask.is_some() as u8);
            for v in item.clip.values() {
                rec.extend_from_slice(&v.to_le_bytes());
            }
            if let Some(m) = &item.mask {
                rec.extend_from_slice(m.values());
            }
            w.write_all(&rec).map_err(io)?;
        }
        w.flush().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(io)
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Archive(format!("truncated archive: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.bytes(n)?).map_err(|e| Error::Archive(format!("bad UTF-8: {e}")))
    }
}

/// Reads an archive back into memory; returns the generator echo too.
pub fn read_archive(path: &Path) -> Result<(InMemoryDataset, String)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        inner: BufReader::new(file),
    };
    if r.bytes(8)? != ARCHIVE_MAGIC {
        return Err(Error::Archive(format!("{} is not a dataset archive", path.display())));
    }
    let echo = r.string()?;
    let num_classes = r.u32()? as usize;
    let n_items = r.u32()? as usize;
    let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|d| d as usize);
    let clip_len: usize = dims.iter().product();
    let mask_len = dims[0] * dims[1] * dims[2];
    let mut items = Vec::with_capacity(n_items);
    for _ in 0..n_items {
        let label = r.i32()?;
        let id = r.string()?;
        let has_mask = r.bytes(1)?[0] == 1;
        let raw = r.bytes(clip_len * 4)?;
        let values = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let clip = ClipTensor::new(dims, values)?;
        let mask = if has_mask {
            Some(MaskVolume::new([dims[0], dims[1], dims[2]], r.bytes(mask_len)?)?)
        } else {
            None
        };
        let label = (label >= 0).then_some(label as usize);
        items.push(AnnotatedClip::new(clip, mask, label, id)?);
    }
    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Archive("trailing bytes after last item".into()));
    }
    let ds = InMemoryDataset::new(items, (num_classes > 0).then_some(num_classes))?;
    Ok((ds, echo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SynthDataset, SynthSpec};

    #[test]
    fn archive_round_trip_is_exact() {
        let spec = SynthSpec {
            frame_size: 16,
            frames: 4,
            ..SynthSpec::default()
        };
        let ds = SynthDataset::new(spec, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.dsyn");
        write_archive(&path, "frame_size = 16", &ds).unwrap();
        let (back, echo) = read_archive(&path).unwrap();
        assert_eq!(echo, "frame_size = 16");
        assert_eq!(back.len(), 16);
        assert_eq!(back.num_classes(), Some(8));
        for i in 0..ds.len() {
            assert_eq!(back.get(i).unwrap(), ds.get(i).unwrap());
        }
    }

    #[test]
    fn rejects_foreign_and_truncated_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x");
        std::fs::write(&path, b"NOTANARCHIVE").unwrap();
        assert!(matches!(read_archive(&path), Err(Error::Archive(_))));
        let mut bytes = ARCHIVE_MAGIC.to_vec();
        bytes.extend_from_slice(&0u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_archive(&path), Err(Error::Archive(_))));
    }
}

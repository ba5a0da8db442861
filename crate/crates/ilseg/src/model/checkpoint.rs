//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! bytes 0..8    magic "ILSEGCKP"
//! bytes 8..12   format version (u32, currently 1)
//! bytes 12..16  header length H (u32)
//! bytes 16..16+H JSON header: CheckpointMeta
//! next 4        block count (u32)
//! per block:
//!   u32 name length, then the UTF-8 block name
//!   u32 rank, then rank x u64 extents
//!   extents product x 4 bytes of f32 parameter data
//! ```
//!
//! Block names follow the parameter naming of the network:
//! `enc{L}.conv{1,2}.{weight,bias}`, `enc{L}.norm{1,2}.{gamma,beta}`,
//! the same for `dec{L}`, and `head.{weight,bias}`. Parameters are stored as
//! 32-bit floats; the in-memory model computes in f64, so save -> load ->
//! save reproduces identical bytes.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use sha2::Digest;

use crate::error::{Error, Result};
use crate::labelspace::LabelSpace;
use crate::model::{ArchConfig, SegmentationModel};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ILSEGCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Structured checkpoint header.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    /// Stage index this model was trained through.
    pub stage: usize,
    pub label_space: LabelSpace,
    pub arch: ArchConfig,
    /// Hash of the stage configuration that produced this checkpoint.
    pub config_hash: String,
    /// Hash of the parent checkpoint file, absent for stage 0.
    pub parent_hash: Option<String>,
    pub epochs_trained: usize,
    pub seed: u64,
}

/// Serializes the model to `path` atomically (temp file + rename).
pub fn save_checkpoint(path: &Path, model: &SegmentationModel, meta: &CheckpointMeta) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let header = serde_json::to_vec(meta).map_err(|e| Error::Serde(e.to_string()))?;
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);

    let blocks = model.named_param_blocks();
    buf.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, shape, data) in &blocks {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &s in shape {
            buf.extend_from_slice(&(s as u64).to_le_bytes());
        }
        for &v in data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CheckpointFormat {
                path: self.path.to_path_buf(),
                reason: format!(
                    "truncated: needed {} bytes at offset {}, file has {}",
                    n,
                    self.pos,
                    self.bytes.len()
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads only the structured header of a checkpoint.
pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointFormat {
            path: path.to_path_buf(),
            reason: "bad magic".into(),
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointFormat {
            path: path.to_path_buf(),
            reason: format!("version {version} unsupported (expected {CHECKPOINT_VERSION})"),
        });
    }
    let header_len = r.u32()? as usize;
    serde_json::from_slice(r.take(header_len)?).map_err(|e| Error::CheckpointFormat {
        path: path.to_path_buf(),
        reason: format!("bad header: {e}"),
    })
}

/// Loads a checkpoint, rebuilding the model and filling every parameter
/// block by name.
pub fn load_checkpoint(path: &Path) -> Result<(SegmentationModel, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointFormat {
            path: path.to_path_buf(),
            reason: "bad magic".into(),
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointFormat {
            path: path.to_path_buf(),
            reason: format!("version {version} unsupported (expected {CHECKPOINT_VERSION})"),
        });
    }
    let header_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::CheckpointFormat {
            path: path.to_path_buf(),
            reason: format!("bad header: {e}"),
        })?;

    let n_blocks = r.u32()? as usize;
    let mut blocks: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for _ in 0..n_blocks {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| {
            Error::CheckpointFormat {
                path: path.to_path_buf(),
                reason: format!("bad block name: {e}"),
            }
        })?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = r.take(len * 4)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        blocks.insert(name, (shape, data));
    }

    let channels = meta.label_space.channels_at(meta.stage);
    let mut model = SegmentationModel::new(meta.arch.clone(), channels)?;
    model.load_param_blocks(&blocks)?;
    Ok((model, meta))
}

/// SHA-256 of a file's bytes, hex-encoded.
pub fn sha256_hex_of_file(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = sha2::Sha256::new();
    let mut buf = [0u8; 8192];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex_string(&hasher.finalize()))
}

/// SHA-256 of a byte slice, hex-encoded.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = sha2::Sha256::new();
    hasher.update(bytes);
    hex_string(&hasher.finalize())
}

fn hex_string(digest: &[u8]) -> String {
    let mut out = String::with_capacity(digest.len() * 2);
    for b in digest {
        use std::fmt::Write as _;
        let _ = write!(out, "{b:02x}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(space: &LabelSpace) -> CheckpointMeta {
        CheckpointMeta {
            format_version: CHECKPOINT_VERSION,
            stage: 0,
            label_space: space.clone(),
            arch: ArchConfig::default(),
            config_hash: "cfg".into(),
            parent_hash: None,
            epochs_trained: 1,
            seed: 0,
        }
    }

    #[test]
    fn checkpoint_round_trips_byte_identically() {
        let dir = tempfile::tempdir().unwrap();
        let space = LabelSpace::new(vec![vec![1]]).unwrap();
        let model = SegmentationModel::new(ArchConfig::default(), vec![0, 1]).unwrap();
        let p1 = dir.path().join("a.ckpt");
        save_checkpoint(&p1, &model, &meta(&space)).unwrap();
        let (loaded, m) = load_checkpoint(&p1).unwrap();
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&p2, &loaded, &m).unwrap();
        assert_eq!(
            std::fs::read(&p1).unwrap(),
            std::fs::read(&p2).unwrap(),
            "save -> load -> save must reproduce identical bytes"
        );
    }

    #[test]
    fn loaded_model_predicts_identically_to_f32_quantized_source() {
        let dir = tempfile::tempdir().unwrap();
        let space = LabelSpace::new(vec![vec![1, 2]]).unwrap();
        let model = SegmentationModel::new(ArchConfig::default(), vec![0, 1, 2]).unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &model, &CheckpointMeta {
            stage: 0,
            label_space: space,
            ..meta(&LabelSpace::new(vec![vec![1, 2]]).unwrap())
        }).unwrap();
        let (loaded, _) = load_checkpoint(&path).unwrap();
        // Quantize the source in place and compare forward passes.
        let mut quantized = model;
        quantized.update_params(&mut |_, p| {
            for v in p.iter_mut() {
                *v = *v as f32 as f64;
            }
        });
        let x = ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(&[8, 8]), |_| 0.37);
        assert_eq!(
            quantized.predict(&x).unwrap().values(),
            loaded.predict(&x).unwrap().values()
        );
    }

    #[test]
    fn corrupt_magic_and_truncation_are_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let space = LabelSpace::new(vec![vec![1]]).unwrap();
        let model = SegmentationModel::new(ArchConfig::default(), vec![0, 1]).unwrap();
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&path, &model, &meta(&space)).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        let bad_magic = dir.path().join("bad_magic.ckpt");
        std::fs::write(&bad_magic, &bytes).unwrap();
        match load_checkpoint(&bad_magic).unwrap_err() {
            Error::CheckpointFormat { reason, .. } => assert!(reason.contains("magic")),
            other => panic!("unexpected {other:?}"),
        }

        let bytes = std::fs::read(&path).unwrap();
        let truncated = dir.path().join("trunc.ckpt");
        std::fs::write(&truncated, &bytes[..bytes.len() - 10]).unwrap();
        match load_checkpoint(&truncated).unwrap_err() {
            Error::CheckpointFormat { reason, .. } => assert!(reason.contains("truncated")),
            other => panic!("unexpected {other:?}"),
        }
    }
}

//! Binary named-tensor checkpoints.
//!
//! Layout: the magic `E2TIMT01`, then one record per entry: name length
//! (u32 LE) + UTF-8 name, rank (u32 LE), extents (u32 LE each), a dtype tag
//! byte (0 = f32, 1 = f64, 2 = raw bytes), and the little-endian payload.
//! Records run to end of file in arena insertion order, so identical
//! training runs produce byte-identical files. Model metadata (kind, dims,
//! placement, backbone checkpoint references) rides along as a JSON blob in
//! the reserved tag-2 entry `__meta__`, always first.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbones::ModelDims;
use crate::bridge::{AdapterVariant, Placement};
use crate::error::{Error, Result};
use crate::params::ParamArena;
use crate::tensor::{Dtype, Element, Tensor};

pub const MAGIC: &[u8; 8] = b"E2TIMT01";
const META_ENTRY: &str = "__meta__";
const META_TAG: u8 = 2;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub schema: String,
    pub kind: String,
    pub dims: ModelDims,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement: Option<Placement>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<AdapterVariant>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter_layers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bottleneck_r: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ocr_ckpt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mt_ckpt: Option<String>,
}

impl CheckpointMeta {
    pub fn new(kind: &str, dims: ModelDims, seed: u64) -> Self {
        Self {
            schema: "e2timt-ckpt/1".to_string(),
            kind: kind.to_string(),
            dims,
            seed,
            placement: None,
            variant: None,
            adapter_layers: None,
            bottleneck_r: None,
            ocr_ckpt: None,
            mt_ckpt: None,
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("extent fits u32").to_le_bytes());
}

/// Serialize the arena entries whose names match any of `prefixes`
/// (insertion order), preceded by the metadata entry.
pub fn save_checkpoint<T: Element>(
    path: &Path,
    arena: &ParamArena<T>,
    prefixes: &[&str],
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);

    let meta_json = serde_json::to_vec(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    put_u32(&mut buf, META_ENTRY.len());
    buf.extend_from_slice(META_ENTRY.as_bytes());
    put_u32(&mut buf, 1);
    put_u32(&mut buf, meta_json.len());
    buf.push(META_TAG);
    buf.extend_from_slice(&meta_json);

    for (_, entry) in arena.iter() {
        if !prefixes.iter().any(|p| entry.name.starts_with(p)) {
            continue;
        }
        put_u32(&mut buf, entry.name.len());
        buf.extend_from_slice(entry.name.as_bytes());
        put_u32(&mut buf, entry.tensor.shape().len());
        for &extent in entry.tensor.shape() {
            put_u32(&mut buf, extent);
        }
        buf.push(T::DTYPE.tag());
        for v in entry.tensor.values() {
            v.write_le(&mut buf);
        }
    }

    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug)]
pub struct LoadedCheckpoint<T: Element> {
    pub meta: CheckpointMeta,
    pub entries: Vec<(String, Tensor<T>)>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn fail(&self, msg: &str) -> Error {
        Error::Checkpoint(format!("{}: {msg}", self.path.display()))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.fail("truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Read a checkpoint back. The element type must match the stored dtype
/// tag; an unknown magic or tag is rejected.
pub fn load_checkpoint<T: Element>(path: &Path) -> Result<LoadedCheckpoint<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if cur.take(8)? != MAGIC {
        return Err(cur.fail("unknown magic (not an E2TIMT01 checkpoint)"));
    }
    let mut meta: Option<CheckpointMeta> = None;
    let mut entries = Vec::new();
    while !cur.done() {
        let name_len = cur.u32()?;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| cur.fail("entry name is not UTF-8"))?
            .to_string();
        let rank = cur.u32()?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()?);
        }
        let tag = cur.take(1)?[0];
        let numel: usize = shape.iter().product();
        if tag == META_TAG {
            let payload = cur.take(numel)?;
            if name == META_ENTRY {
                meta = Some(
                    serde_json::from_slice(payload)
                        .map_err(|e| cur.fail(&format!("bad metadata: {e}")))?,
                );
            }
            continue;
        }
        let dtype = Dtype::from_tag(tag).ok_or_else(|| cur.fail(&format!("unknown dtype tag {tag}")))?;
        if dtype != T::DTYPE {
            return Err(cur.fail(&format!(
                "entry {name} holds {dtype:?}, expected {:?}",
                T::DTYPE
            )));
        }
        let payload = cur.take(numel * T::BYTES)?;
        let values: Vec<T> = payload
            .chunks_exact(T::BYTES)
            .map(|c| T::read_le(c))
            .collect();
        entries.push((name, Tensor::new(shape, values)?));
    }
    let meta = meta.ok_or_else(|| Error::Checkpoint(format!("{}: missing metadata entry", path.display())))?;
    Ok(LoadedCheckpoint { meta, entries })
}

/// Copy loaded values into the arena by name. Every entry must name an
/// existing parameter of identical shape.
pub fn apply_entries<T: Element>(
    arena: &mut ParamArena<T>,
    entries: &[(String, Tensor<T>)],
) -> Result<()> {
    for (name, tensor) in entries {
        let pid = arena
            .lookup(name)
            .ok_or_else(|| Error::Checkpoint(format!("parameter {name} not present in this model")))?;
        if arena.tensor(pid).shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: stored shape {:?} does not match model shape {:?}",
                tensor.shape(),
                arena.tensor(pid).shape()
            )));
        }
        arena.tensor_mut(pid).values_mut().copy_from_slice(tensor.values());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn dims() -> ModelDims {
        ModelDims {
            d: 8,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
        }
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("model.ckpt");
        let mut arena = ParamArena::<f32>::new();
        let mut rng = RngStream::new(4, "ckpt");
        for name in ["ocr.a", "ocr.b", "adapter.w"] {
            let vals: Vec<f32> = (0..6).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
            arena.insert(name, Tensor::new(vec![2, 3], vals).unwrap());
        }
        let meta = CheckpointMeta::new("ocr", dims(), 4);
        save_checkpoint(&path, &arena, &["ocr.", "adapter."], &meta).unwrap();

        let loaded = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(loaded.meta, meta);
        assert_eq!(loaded.entries.len(), 3);
        for (name, tensor) in &loaded.entries {
            let pid = arena.lookup(name).unwrap();
            assert_eq!(arena.tensor(pid).values(), tensor.values());
        }

        // Saving the loaded state reproduces the file byte for byte.
        let path2 = tmp.path().join("model2.ckpt");
        let mut arena2 = ParamArena::<f32>::new();
        for name in ["ocr.a", "ocr.b", "adapter.w"] {
            arena2.insert(name, Tensor::zeros(vec![2, 3]));
        }
        apply_entries(&mut arena2, &loaded.entries).unwrap();
        save_checkpoint(&path2, &arena2, &["ocr.", "adapter."], &meta).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn unknown_magic_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTACKPT rest").unwrap();
        let err = load_checkpoint::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("f32.ckpt");
        let mut arena = ParamArena::<f32>::new();
        arena.insert("ocr.w", Tensor::zeros(vec![2]));
        save_checkpoint(&path, &arena, &["ocr."], &CheckpointMeta::new("ocr", dims(), 0)).unwrap();
        let err = load_checkpoint::<f64>(&path).unwrap_err();
        assert!(err.to_string().contains("expected"), "{err}");
    }

    #[test]
    fn filtering_by_prefix() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("adapter.ckpt");
        let mut arena = ParamArena::<f32>::new();
        arena.insert("ocr.w", Tensor::zeros(vec![2]));
        arena.insert("adapter.w", Tensor::zeros(vec![2]));
        let mut meta = CheckpointMeta::new("bridge", dims(), 1);
        meta.placement = Some(Placement::Emb);
        meta.ocr_ckpt = Some("ocr.ckpt".into());
        save_checkpoint(&path, &arena, &["adapter."], &meta).unwrap();
        let loaded = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(loaded.entries.len(), 1);
        assert_eq!(loaded.entries[0].0, "adapter.w");
        assert_eq!(loaded.meta.placement, Some(Placement::Emb));
        assert_eq!(loaded.meta.ocr_ckpt.as_deref(), Some("ocr.ckpt"));
    }

    #[test]
    fn apply_rejects_unknown_and_mismatched() {
        let mut arena = ParamArena::<f32>::new();
        arena.insert("ocr.w", Tensor::zeros(vec![2]));
        let missing = vec![("nope.w".to_string(), Tensor::<f32>::zeros(vec![2]))];
        assert!(apply_entries(&mut arena, &missing).is_err());
        let wrong_shape = vec![("ocr.w".to_string(), Tensor::<f32>::zeros(vec![3]))];
        assert!(apply_entries(&mut arena, &wrong_shape).is_err());
    }
}

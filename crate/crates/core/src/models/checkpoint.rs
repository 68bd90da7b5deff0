//! Checkpoint container.
//!
//! ```text
//! "UTCK"  u32 version  u32 len  <len bytes of JSON header>
//! u32 n_entries
//! per entry: u32 name_len  name  u8 kind  u8 trainable  u32 rank  rank × u32 dims
//!            product(dims) × f32
//! ```
//! All integers and floats are little-endian. The JSON header echoes the
//! architecture config and the active adapters. An adapter checkpoint holds
//! only the `ssf.` / `ia3.` / `oft.` entries.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{Architecture, Model, ModelError, Param, ParamKind, Result};
use crate::peft::Adapters;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UTCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    arch: Architecture,
    adapters: Adapters,
    adapter_only: bool,
}

fn kind_code(k: ParamKind) -> u8 {
    match k {
        ParamKind::Weight => 0,
        ParamKind::Buffer => 1,
        ParamKind::Adapter => 2,
    }
}

fn write(model: &Model, path: &Path, adapter_only: bool) -> Result<()> {
    let header = Header { arch: *model.arch(), adapters: *model.adapters(), adapter_only };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let entries: Vec<_> = model.params().iter().filter(|(_, p)| !adapter_only || p.kind == ParamKind::Adapter).collect();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, p) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(kind_code(p.kind));
        buf.push(p.trainable as u8);
        buf.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    write(model, path, false)
}

/// Writes only the adapter parameters.
pub fn save_adapters(model: &Model, path: &Path) -> Result<()> {
    write(model, path, true)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> ModelError {
        ModelError::Checkpoint { path: self.path.display().to_string(), msg: msg.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| self.err("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

fn read(path: &Path) -> Result<(Header, IndexMap<String, Param>)> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(r.err("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let hlen = r.u32()?;
    let header: Header = serde_json::from_slice(r.take(hlen)?).map_err(|e| r.err(format!("header: {e}")))?;
    let n = r.u32()?;
    let mut params = IndexMap::new();
    for _ in 0..n {
        let nlen = r.u32()?;
        let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| r.err("name is not UTF-8"))?;
        let kind = match r.u8()? {
            0 => ParamKind::Weight,
            1 => ParamKind::Buffer,
            2 => ParamKind::Adapter,
            k => return Err(r.err(format!("unknown kind {k}"))),
        };
        let trainable = r.u8()? != 0;
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let len: usize = dims.iter().product();
        let data = r.take(4 * len)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let value = Tensor::new(&dims, data).map_err(|e| r.err(format!("{name}: {e}")))?;
        if params.insert(name.clone(), Param { value, kind, trainable }).is_some() {
            return Err(r.err(format!("duplicate entry {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes"));
    }
    Ok((header, params))
}

/// Reads a full checkpoint. Every entry must match the shape a fresh model
/// of the echoed architecture would have.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let (header, params) = read(path)?;
    let bad = |msg: String| ModelError::Checkpoint { path: path.display().to_string(), msg };
    if header.adapter_only {
        return Err(bad("adapter-only checkpoint; load a base checkpoint and attach it".into()));
    }
    let fresh = Model::new(header.arch, 0)?;
    for (name, p) in fresh.params() {
        match params.get(name) {
            Some(q) if q.value.shape() == p.value.shape() && q.kind == p.kind => {}
            _ => return Err(bad(format!("entry {name} missing or mismatched"))),
        }
    }
    for (name, p) in &params {
        if !fresh.params().contains_key(name) && p.kind != ParamKind::Adapter {
            return Err(bad(format!("unexpected entry {name}")));
        }
    }
    Ok(Model { arch: header.arch, params, adapters: header.adapters })
}

impl Model {
    /// Attaches adapters from an adapter checkpoint to this base model.
    pub fn load_adapters(&mut self, path: &Path) -> Result<()> {
        let (header, params) = read(path)?;
        let bad = |msg: &str| ModelError::Checkpoint { path: path.display().to_string(), msg: msg.into() };
        if !header.adapter_only {
            return Err(bad("not an adapter checkpoint"));
        }
        if header.arch != self.arch {
            return Err(bad("architecture differs from the base model"));
        }
        if !self.adapters.is_empty() {
            return Err(bad("model already carries adapters"));
        }
        for (name, p) in params {
            if p.kind != ParamKind::Adapter || !Model::is_adapter(&name) {
                return Err(bad("non-adapter entry in adapter checkpoint"));
            }
            self.insert_param(name, p)?;
        }
        self.adapters = header.adapters;
        Ok(())
    }
}

//! Binary checkpoint container.
//!
//! Layout: an 8-byte magic (`UODCKPT\0`), a `u32` little-endian format
//! version, a `u64` little-endian JSON header length, the JSON header, then a
//! contiguous blob section of little-endian `f64`s. The header records every
//! tensor (name, role, domain tag, shape, offset into the blob section) plus
//! optimizer step counts and an arbitrary JSON `meta` document for model
//! configuration, domain registry snapshots, epoch counters, and RNG state.
//!
//! Values are stored and restored bit-exactly, so training resumed from a
//! checkpoint continues on the identical trajectory.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::adam::{Adam, Moments};
use super::{ParamSet, ParamTag};
use crate::error::{Result, UodError};

const MAGIC: &[u8; 8] = b"UODCKPT\0";
const VERSION: u32 = 1;

/// What a stored tensor is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryRole {
    /// Trainable parameter.
    Param,
    /// Non-trainable buffer (e.g. batch-norm running statistics).
    Buffer,
    /// Adam first-moment estimate.
    OptM,
    /// Adam second-moment estimate.
    OptV,
}

/// One tensor in the blob section.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub role: EntryRole,
    pub tag: ParamTag,
    pub shape: Vec<usize>,
    /// Offset into the blob section, in `f64` units.
    pub offset: u64,
    pub len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    entries: Vec<Entry>,
    /// Per-parameter Adam step counts, keyed by parameter name.
    opt_t: BTreeMap<String, u64>,
    meta: serde_json::Value,
}

/// A checkpoint loaded into memory.
#[derive(Debug)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
    pub opt_t: BTreeMap<String, u64>,
    pub meta: serde_json::Value,
    data: Vec<f64>,
}

/// Write `set` (params + buffers), optionally optimizer moments, and a meta
/// document to `path`.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    set: &ParamSet,
    opt: Option<&Adam>,
    meta: serde_json::Value,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut blobs: Vec<&[f64]> = Vec::new();
    let mut offset = 0u64;
    let mut opt_t = BTreeMap::new();

    // Params and buffers are borrowed for the duration of the write; collect
    // the guards so the slices stay alive.
    let guards: Vec<_> = set
        .params()
        .iter()
        .map(|p| (EntryRole::Param, p.borrow()))
        .chain(set.buffers().iter().map(|b| (EntryRole::Buffer, b.borrow())))
        .collect();
    for (role, p) in &guards {
        let slice = p.value.as_slice().expect("standard layout");
        entries.push(Entry {
            name: p.name.clone(),
            role: *role,
            tag: p.tag,
            shape: p.value.shape().to_vec(),
            offset,
            len: slice.len() as u64,
        });
        offset += slice.len() as u64;
        blobs.push(slice);
    }
    if let Some(opt) = opt {
        // Sort by name so the file bytes are deterministic.
        let mut names: Vec<&String> = opt.state().keys().collect();
        names.sort();
        for name in names {
            let moments = &opt.state()[name];
            for (role, vec) in [(EntryRole::OptM, &moments.m), (EntryRole::OptV, &moments.v)] {
                entries.push(Entry {
                    name: name.clone(),
                    role,
                    tag: ParamTag::Shared,
                    shape: vec![vec.len()],
                    offset,
                    len: vec.len() as u64,
                });
                offset += vec.len() as u64;
                blobs.push(vec);
            }
            opt_t.insert(name.clone(), moments.t);
        }
    }

    let header = Header { entries, opt_t, meta };
    let json = serde_json::to_vec(&header)
        .map_err(|e| UodError::checkpoint(format!("header encode: {e}")))?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for blob in blobs {
        for v in blob {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a checkpoint fully into memory.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(&path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(UodError::checkpoint("bad magic: not a checkpoint file"));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(UodError::checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let mut long = [0u8; 8];
    r.read_exact(&mut long)?;
    let json_len = u64::from_le_bytes(long) as usize;
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)
        .map_err(|e| UodError::checkpoint(format!("header decode: {e}")))?;

    let total: u64 = header.entries.iter().map(|e| e.len).sum();
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != total as usize * 8 {
        return Err(UodError::checkpoint(format!(
            "blob section holds {} bytes, header expects {}",
            bytes.len(),
            total * 8
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Checkpoint { entries: header.entries, opt_t: header.opt_t, meta: header.meta, data })
}

impl Checkpoint {
    /// The stored tensor `(entry, values)` for `name` with `role`, if present.
    pub fn tensor(&self, name: &str, role: EntryRole) -> Option<(&Entry, &[f64])> {
        let e = self.entries.iter().find(|e| e.name == name && e.role == role)?;
        let (a, b) = (e.offset as usize, (e.offset + e.len) as usize);
        Some((e, &self.data[a..b]))
    }

    /// Reconstruct the stored tensor for `name`/`role` as an array.
    pub fn array(&self, name: &str, role: EntryRole) -> Option<ArrayD<f64>> {
        let (e, slice) = self.tensor(name, role)?;
        ArrayD::from_shape_vec(IxDyn(&e.shape), slice.to_vec()).ok()
    }

    /// Load every stored param and buffer value into `set` by name,
    /// shape-checked. Every param and buffer in `set` must be present.
    pub fn load_into(&self, set: &ParamSet) -> Result<()> {
        for (role, shared) in set
            .params()
            .iter()
            .map(|p| (EntryRole::Param, p))
            .chain(set.buffers().iter().map(|b| (EntryRole::Buffer, b)))
        {
            let name = shared.borrow().name.clone();
            let value = self.array(&name, role).ok_or_else(|| {
                UodError::checkpoint(format!("checkpoint is missing tensor `{name}`"))
            })?;
            set.load_value(&name, value)?;
        }
        Ok(())
    }

    /// Reconstruct the Adam per-parameter state stored in this checkpoint,
    /// ready for [`Adam::load_state`].
    pub fn adam_state(&self) -> std::collections::HashMap<String, Moments> {
        let mut state = std::collections::HashMap::new();
        for (name, &t) in &self.opt_t {
            let m = self.tensor(name, EntryRole::OptM).map(|(_, s)| s.to_vec());
            let v = self.tensor(name, EntryRole::OptV).map(|(_, s)| s.to_vec());
            if let (Some(m), Some(v)) = (m, v) {
                state.insert(name.clone(), Moments { m, v, t });
            }
        }
        state
    }
}

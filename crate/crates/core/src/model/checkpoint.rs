//! Checkpoint files.
//!
//! ```text
//! "RCPK" | u16 version = 1 | u32 header_len | JSON header | tensor records
//! ```
//!
//! Integers are little-endian. The header lists every tensor as
//! `{name, shape, offset}` where `offset` counts bytes from the start of the
//! record region; each record is a complete tensor file (see
//! [`crate::stream::encode_tensor`]).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HeadSpec, MlpSpec, ParamPair};
use crate::error::{Error, Result};
use crate::numkern::Tensor;
use crate::stream::{decode_tensor_at, encode_tensor, DType};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RCPK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u16,
    encoder: MlpSpec,
    head: HeadSpec,
    momentum: f64,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Parameters plus free-form run metadata (step, config hash, …).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub pair: ParamPair,
    pub meta: serde_json::Value,
}

fn named(prefix: &str, params: &[Tensor]) -> Vec<(String, Tensor)> {
    params
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let kind = if i % 2 == 0 { "weight" } else { "bias" };
            (format!("{prefix}.{}.{kind}", i / 2), t.clone())
        })
        .collect()
}

pub fn encode_checkpoint(pair: &ParamPair, meta: &serde_json::Value) -> Vec<u8> {
    let mut tensors = named("student", pair.student());
    tensors.extend(named("head", pair.head()));
    tensors.extend(named("teacher", pair.teacher()));

    let mut records = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: records.len() as u64,
        });
        records.extend(encode_tensor(t, DType::F64));
    }
    let header = Header {
        format: "driftlab-checkpoint".into(),
        version: CHECKPOINT_VERSION,
        encoder: pair.encoder_spec().clone(),
        head: pair.head_spec().clone(),
        momentum: pair.momentum(),
        meta: meta.clone(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(10 + json.len() + records.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&records);
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 10 {
        return Err(Error::Checkpoint("file shorter than the fixed preamble".into()));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic, expected \"RCPK\"".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let hlen = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let Some(hbytes) = bytes.get(10..10 + hlen) else {
        return Err(Error::Checkpoint("truncated header".into()));
    };
    let header: Header = serde_json::from_slice(hbytes).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    if header.version != version {
        return Err(Error::Checkpoint("header version disagrees with preamble".into()));
    }
    let base = 10 + hlen;
    let region = &bytes[base..];
    let mut student = Vec::new();
    let mut head = Vec::new();
    let mut teacher = Vec::new();
    for entry in &header.tensors {
        let start = entry.offset as usize;
        let slice = region
            .get(start..)
            .ok_or_else(|| Error::Checkpoint(format!("offset of {} out of range", entry.name)))?;
        let (t, _) = decode_tensor_at(slice, (base + start) as u64)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", entry.name)))?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{}: shape disagrees with manifest",
                entry.name
            )));
        }
        match entry.name.split('.').next() {
            Some("student") => student.push(t),
            Some("head") => head.push(t),
            Some("teacher") => teacher.push(t),
            _ => return Err(Error::Checkpoint(format!("unknown tensor {}", entry.name))),
        }
    }
    let pair = ParamPair::from_all(header.encoder, header.head, student, head, teacher, header.momentum)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(Checkpoint {
        pair,
        meta: header.meta,
    })
}

/// Writes via a temporary sibling and a rename, so readers never observe a
/// partial file.
pub fn save_checkpoint(path: impl AsRef<Path>, pair: &ParamPair, meta: &serde_json::Value) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_checkpoint(pair, meta)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

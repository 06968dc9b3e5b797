//! MVOL volume files and their JSON sidecars.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "MVOL" 0x01 0x00            magic, version, pad
//! u32 C, u32 X, u32 Y, u32 Z
//! f32 spacing_x, spacing_y, spacing_z
//! f32 × C·Z·Y·X               ordered (c, z, y, x), x fastest
//! ```
//!
//! Samples are stored as `f32`; writing narrows the in-memory `f64` values,
//! so any volume read from an MVOL file round-trips bit-exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::volume::{BoundingBox, Volume};
use crate::error::{bail, Error, Result};

pub const MAGIC: &[u8; 4] = b"MVOL";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 6 + 4 * 4 + 3 * 4;

/// Encode a volume to MVOL bytes.
pub fn encode_mvol(v: &Volume) -> Result<Vec<u8>> {
    let dims = v.dims();
    let as_u32 = |n: usize, what: &str| {
        u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} exceeds u32")))
    };
    let mut out = Vec::with_capacity(HEADER_LEN + v.data().len() * 4);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(0);
    out.extend_from_slice(&as_u32(v.channels(), "channel count")?.to_le_bytes());
    for (d, name) in dims.iter().zip(["X", "Y", "Z"]) {
        out.extend_from_slice(&as_u32(*d, name)?.to_le_bytes());
    }
    for s in v.spacing() {
        out.extend_from_slice(&(s as f32).to_le_bytes());
    }
    for &x in v.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(out)
}

/// Decode MVOL bytes.
pub fn decode_mvol(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < HEADER_LEN {
        bail!(Format, "truncated header: {} bytes", bytes.len());
    }
    if &bytes[..4] != MAGIC {
        bail!(Format, "bad magic {:?}", &bytes[..4]);
    }
    if bytes[4] != VERSION {
        bail!(Format, "unsupported MVOL version {}", bytes[4]);
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let c = u32_at(6);
    let dims = [u32_at(10), u32_at(14), u32_at(18)];
    let spacing = [f32_at(22) as f64, f32_at(26) as f64, f32_at(30) as f64];
    if c == 0 || dims.contains(&0) {
        bail!(Format, "empty volume: C={c}, dims {:?}", dims);
    }
    let count = c
        .checked_mul(dims[0])
        .and_then(|n| n.checked_mul(dims[1]))
        .and_then(|n| n.checked_mul(dims[2]))
        .and_then(|n| n.checked_mul(4).map(|_| n))
        .ok_or_else(|| Error::Format(format!("dimension overflow: C={c}, dims {:?}", dims)))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != count * 4 {
        bail!(
            Format,
            "payload holds {} bytes, header promises {}",
            payload.len(),
            count * 4
        );
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    Volume::new(c, dims, spacing, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_mvol(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_mvol(v)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_mvol(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mvol(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub mod role {
    pub const IMAGE: &str = "image";
    pub const MASK: &str = "mask";
    pub const ANOMALY_MAP: &str = "anomaly_map";
    pub const SEQUENCE_ERRORS: &str = "sequence_errors";
    pub const SUBTRACTION: &str = "subtraction";
    pub const DCE: &str = "dce";
}

/// JSON metadata stored next to an MVOL file (same basename, `.json`).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    #[serde(default)]
    pub sequences: Vec<String>,
    #[serde(default)]
    pub boxes: Vec<BoundingBox>,
    pub role: String,
    /// Role-specific fields, e.g. `model_checkpoint` and `config` for
    /// anomaly maps.
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl Sidecar {
    pub fn new(role: &str, sequences: &[&str]) -> Self {
        Self {
            sequences: sequences.iter().map(|s| s.to_string()).collect(),
            boxes: Vec::new(),
            role: role.to_string(),
            extra: Default::default(),
        }
    }
}

pub fn sidecar_path(volume_path: impl AsRef<Path>) -> PathBuf {
    volume_path.as_ref().with_extension("json")
}

pub fn write_sidecar(volume_path: impl AsRef<Path>, sc: &Sidecar) -> Result<()> {
    let path = sidecar_path(volume_path);
    let text = serde_json::to_string_pretty(sc).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_sidecar(volume_path: impl AsRef<Path>) -> Result<Sidecar> {
    let path = sidecar_path(volume_path);
    read_sidecar_file(&path)
}

pub fn read_sidecar_file(path: impl AsRef<Path>) -> Result<Sidecar> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

//! Checkpoint and optimiser-state files.
//!
//! Checkpoint layout, little-endian:
//!
//! ```text
//! "MAE3D01"                   magic
//! u32 n, n bytes              MaeConfig as JSON
//! u64 count                   total parameter count
//! f64 × count                 parameters in canonical order (see model)
//! ```
//!
//! The optimiser state file uses magic "MAEOPT1", then u64 epoch, u64 step,
//! u64 count, then the first and second moments as f64 × count each.

use std::fs;
use std::path::Path;

use super::config::MaeConfig;
use super::model::MaeModel;
use crate::error::{bail, Error, Result};
use crate::ndnum::AdamState;
use crate::patchgrid::PatchSpec;

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"MAE3D01";
pub const OPTIMIZER_MAGIC: &[u8; 7] = b"MAEOPT1";

pub fn encode_checkpoint(model: &MaeModel) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(model.config()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let params = model.flat_params();
    let mut out = Vec::with_capacity(7 + 4 + json.len() + 8 + params.len() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            bail!(Checkpoint, "truncated file at byte {}", self.at);
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| Error::Checkpoint(format!("count {n} overflows")))?;
        Ok(self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.at != self.bytes.len() {
            bail!(Checkpoint, "{} trailing bytes", self.bytes.len() - self.at);
        }
        Ok(())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<MaeModel> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(7)? != CHECKPOINT_MAGIC {
        bail!(Checkpoint, "not a checkpoint (bad magic)");
    }
    let n = r.u32()? as usize;
    let config: MaeConfig =
        serde_json::from_slice(r.take(n)?).map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("stored config is invalid: {e}")))?;
    let count = r.u64()? as usize;
    let mut model = MaeModel::new(config, 0)?;
    if count != model.parameter_count() {
        bail!(
            Checkpoint,
            "file holds {count} parameters, its config implies {}",
            model.parameter_count()
        );
    }
    let params = r.f64s(count)?;
    r.finish()?;
    model.set_flat_params(&params)?;
    Ok(model)
}

pub fn save_checkpoint(model: &MaeModel, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<MaeModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Load and require the stored patch geometry to equal `spec`.
pub fn load_checkpoint_for(path: &Path, spec: &PatchSpec) -> Result<MaeModel> {
    let m = load_checkpoint(path)?;
    if m.spec() != spec {
        bail!(
            Checkpoint,
            "checkpoint patch spec {:?} does not match requested {:?}",
            m.spec(),
            spec
        );
    }
    Ok(m)
}

pub fn save_optimizer(opt: &AdamState, next_epoch: usize, path: &Path) -> Result<()> {
    let count: usize = opt.m.iter().map(Vec::len).sum();
    let mut out = Vec::with_capacity(7 + 24 + 16 * count);
    out.extend_from_slice(OPTIMIZER_MAGIC);
    out.extend_from_slice(&(next_epoch as u64).to_le_bytes());
    out.extend_from_slice(&opt.step.to_le_bytes());
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for buf in [&opt.m, &opt.v] {
        for x in buf.iter().flatten() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Restore moments saved by [`save_optimizer`] into `opt`, whose buffer
/// layout must match; returns the epoch to resume from.
pub fn load_optimizer(opt: &mut AdamState, path: &Path) -> Result<usize> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, at: 0 };
    if r.take(7)? != OPTIMIZER_MAGIC {
        bail!(Checkpoint, "{}: not an optimizer state file", path.display());
    }
    let epoch = r.u64()? as usize;
    let step = r.u64()?;
    let count = r.u64()? as usize;
    let expect: usize = opt.m.iter().map(Vec::len).sum();
    if count != expect {
        bail!(Checkpoint, "optimizer state for {count} values, model has {expect}");
    }
    let m = r.f64s(count)?;
    let v = r.f64s(count)?;
    r.finish()?;
    let mut o = 0;
    for (bm, bv) in opt.m.iter_mut().zip(opt.v.iter_mut()) {
        let n = bm.len();
        bm.copy_from_slice(&m[o..o + n]);
        bv.copy_from_slice(&v[o..o + n]);
        o += n;
    }
    opt.step = step;
    Ok(epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patchgrid::{sample_mask, TokenGrid};

    #[test]
    fn round_trip_is_bit_exact() {
        let m = MaeModel::new(MaeConfig::desk(), 3).unwrap();
        let back = decode_checkpoint(&encode_checkpoint(&m).unwrap()).unwrap();
        assert_eq!(back.flat_params(), m.flat_params());
        assert_eq!(back.config(), m.config());
        let spec = m.spec().clone();
        let grid = TokenGrid {
            tokens: (0..spec.token_count() * spec.token_dim())
                .map(|i| (i as f64 * 0.37).sin())
                .collect(),
            grid_shape: spec.grid_shape(),
            token_dim: spec.token_dim(),
        };
        let plan = sample_mask(spec.token_count(), 0.75, 5).unwrap();
        assert_eq!(m.forward(&grid, &plan).unwrap(), back.forward(&grid, &plan).unwrap());
    }

    #[test]
    fn size_is_header_plus_params() {
        let m = MaeModel::new(MaeConfig::desk(), 3).unwrap();
        let json = serde_json::to_vec(m.config()).unwrap();
        let bytes = encode_checkpoint(&m).unwrap();
        assert_eq!(bytes.len(), 7 + 4 + json.len() + 8 + 8 * m.parameter_count());
    }

    #[test]
    fn spec_mismatch_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let m = MaeModel::new(MaeConfig::desk(), 3).unwrap();
        save_checkpoint(&m, &p).unwrap();
        let mut other = MaeConfig::desk().spec;
        other.vit_patch = [3, 3, 2];
        assert!(matches!(load_checkpoint_for(&p, &other), Err(Error::Checkpoint(_))));
        let mut bytes = encode_checkpoint(&m).unwrap();
        bytes.pop();
        assert!(decode_checkpoint(&bytes).is_err());
        bytes[0] = b'X';
        assert!(decode_checkpoint(&bytes).is_err());
    }

    #[test]
    fn optimizer_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("opt.bin");
        let m = MaeModel::new(MaeConfig::desk(), 3).unwrap();
        let mut opt = AdamState::mae_default(m.params());
        opt.step = 17;
        opt.m[0][0] = 0.5;
        opt.v[1][0] = 0.25;
        save_optimizer(&opt, 9, &p).unwrap();
        let mut back = AdamState::mae_default(m.params());
        assert_eq!(load_optimizer(&mut back, &p).unwrap(), 9);
        assert_eq!(back, opt);
    }
}

//! Versioned little-endian checkpoint:
//!
//! ```text
//! magic[8] version:u32 n_w:u32 n_lstm:u32 lstm[n_lstm]:u32 n_dense:u32 dense[n_dense]:u32
//! i_min:f64 i_max:f64 mean[4]:f64 std[4]:f64 n_params:u64 params[n_params]:f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{Architecture, Layout, PolicyModel, Preprocess};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DCPOLICY";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &PolicyModel, mut w: W) -> std::io::Result<()> {
    let arch = model.arch();
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(arch.n_w as u32).to_le_bytes())?;
    for sizes in [&arch.lstm, &arch.dense] {
        w.write_all(&(sizes.len() as u32).to_le_bytes())?;
        for &s in sizes {
            w.write_all(&(s as u32).to_le_bytes())?;
        }
    }
    let pre = model.preprocess();
    for v in [arch.i_min, arch.i_max].iter().chain(&pre.mean).chain(&pre.std) {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&(model.num_params() as u64).to_le_bytes())?;
    for v in model.params() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn sizes(&mut self) -> Result<Vec<usize>> {
        let n = self.u32()? as usize;
        if n > 64 {
            return Err(Error::Checkpoint(format!("implausible layer count {n}")));
        }
        (0..n).map(|_| self.u32().map(|v| v as usize)).collect()
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<PolicyModel> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a policy checkpoint".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n_w = c.u32()? as usize;
    let lstm = c.sizes()?;
    let dense = c.sizes()?;
    let i_min = c.f64()?;
    let i_max = c.f64()?;
    let mut pre = Preprocess::default();
    for v in pre.mean.iter_mut().chain(pre.std.iter_mut()) {
        *v = c.f64()?;
    }
    let arch = Architecture { n_w, lstm, dense, i_min, i_max };
    arch.validate()?;
    let n = c.u64()? as usize;
    let expected = Layout::new(&arch).total;
    if n != expected {
        return Err(Error::Checkpoint(format!(
            "parameter count {n} does not match architecture ({expected})"
        )));
    }
    let params = (0..n).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    PolicyModel::from_parts(arch, pre, params)
}

pub fn save_checkpoint(model: &PolicyModel, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(model, std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyModel> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(f))
}

/// Loads a checkpoint and refuses it unless its architecture equals `arch`.
pub fn load_checkpoint_expecting(path: &Path, arch: &Architecture) -> Result<PolicyModel> {
    let model = load_checkpoint(path)?;
    if model.arch() != arch {
        return Err(Error::Checkpoint(format!(
            "architecture mismatch: file has {:?}, expected {:?}",
            model.arch(),
            arch
        )));
    }
    Ok(model)
}

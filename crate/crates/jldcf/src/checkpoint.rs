//! Checkpoint container: one binary file holding all named parameter
//! arrays. Layout, all little-endian:
//!
//!   magic "JLDC" | version u32 | entry count u64
//!   per entry: name length u64 | name bytes (utf-8) | rank u64
//!              | extents u64 x rank | data f64 x numel
//!
//! A JSON manifest of the run configuration is written next to it by the
//! harness.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::CheckpointError;
use crate::net::JlDcfNet;

const MAGIC: &[u8; 4] = b"JLDC";
const VERSION: u32 = 1;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |e| CheckpointError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Write every parameter of `net` in deterministic visitor order.
pub fn save(path: &Path, net: &JlDcfNet) -> Result<(), CheckpointError> {
    let mut entries: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
    net.visit_params(&mut |name, t| entries.push((name, t.shape.clone(), &t.data)));

    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, shape, data) in entries {
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(shape.len() as u64).to_le_bytes());
        for extent in &shape {
            buf.extend_from_slice(&(*extent as u64).to_le_bytes());
        }
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(io_err(path))?;
    file.write_all(&buf).map_err(io_err(path))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Corrupt(format!(
                "needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Load parameters into `net`, which must have been built from the same
/// configuration: every model parameter must be present with a matching
/// shape, and the file may not contain unknown parameters.
pub fn load_into(path: &Path, net: &mut JlDcfNet) -> Result<(), CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(io_err(path))?
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
    };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let count = r.u64()? as usize;
    let mut loaded: std::collections::BTreeMap<String, (Vec<usize>, Vec<f64>)> =
        std::collections::BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u64()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| CheckpointError::Corrupt(format!("bad parameter name: {e}")))?;
        let rank = r.u64()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        loaded.insert(name, (shape, data));
    }

    let mut failure: Option<CheckpointError> = None;
    net.visit_params_mut(&mut |name, t| {
        if failure.is_some() {
            return;
        }
        match loaded.remove(&name) {
            None => failure = Some(CheckpointError::MissingParam(name)),
            Some((shape, data)) => {
                if shape != t.shape {
                    failure = Some(CheckpointError::ShapeMismatch {
                        name,
                        found: shape,
                        expected: t.shape.clone(),
                    });
                } else {
                    t.data = data;
                    t.grad = None;
                }
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(name) = loaded.keys().next() {
        return Err(CheckpointError::Corrupt(format!(
            "file contains parameter `{name}` unknown to this configuration"
        )));
    }
    Ok(())
}

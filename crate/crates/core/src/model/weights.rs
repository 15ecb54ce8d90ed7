//! Flat binary weight container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DDTR" | version u32 | entry count u32
//! per entry: name length u32 | name bytes | rank u32 | extents u64 × rank | element offset u64
//! raw f64 data, entries back to back
//! ```

use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DDTR";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a weight file: bad magic bytes")]
    BadMagic,
    #[error("unsupported weight format version {0}")]
    Version(u32),
    #[error("corrupt weight file: {0}")]
    Corrupt(String),
    #[error("parameter {index}: expected `{expected}`, file has `{found}`")]
    NameMismatch { index: usize, expected: String, found: String },
    #[error("parameter `{name}`: expected shape {expected:?}, file has {found:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("file has {found} parameters, model expects {expected}")]
    CountMismatch { expected: usize, found: usize },
}

/// One manifest record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

pub fn write_weights<T: Scalar, W: Write>(store: &ParamStore<T>, mut out: W) -> Result<(), WeightsError> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(store.len() as u32).to_le_bytes())?;
    let mut offset = 0u64;
    for e in store.entries() {
        out.write_all(&(e.name.len() as u32).to_le_bytes())?;
        out.write_all(e.name.as_bytes())?;
        out.write_all(&(e.tensor.rank() as u32).to_le_bytes())?;
        for &d in e.tensor.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        out.write_all(&offset.to_le_bytes())?;
        offset += e.tensor.numel() as u64;
    }
    for e in store.entries() {
        for v in e.tensor.data() {
            out.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightsError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| WeightsError::Corrupt(format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, WeightsError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, WeightsError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses a container into its manifest and flat data.
pub fn parse_weights(bytes: &[u8]) -> Result<(Vec<ManifestEntry>, Vec<f64>), WeightsError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4).map_err(|_| WeightsError::BadMagic)? != MAGIC {
        return Err(WeightsError::BadMagic);
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(WeightsError::Version(version));
    }
    let count = c.u32()? as usize;
    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    let mut total = 0u64;
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| WeightsError::Corrupt(format!("non-UTF-8 parameter name at byte {}", c.pos)))?
            .to_string();
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let offset = c.u64()?;
        if offset != total {
            return Err(WeightsError::Corrupt(format!("`{name}` has offset {offset}, expected {total}")));
        }
        total += shape.iter().product::<usize>() as u64;
        manifest.push(ManifestEntry { name, shape, offset });
    }
    let rest = &bytes[c.pos..];
    if rest.len() as u64 != total * 8 {
        return Err(WeightsError::Corrupt(format!(
            "data section is {} bytes, manifest needs {}",
            rest.len(),
            total * 8
        )));
    }
    let data = rest.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
    Ok((manifest, data))
}

/// Overwrites every tensor of `store` from a container, checking names and shapes.
pub fn read_weights<T: Scalar, R: Read>(store: &mut ParamStore<T>, mut input: R) -> Result<(), WeightsError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let (manifest, data) = parse_weights(&bytes)?;
    if manifest.len() != store.len() {
        return Err(WeightsError::CountMismatch { expected: store.len(), found: manifest.len() });
    }
    for (i, (m, e)) in manifest.iter().zip(store.entries()).enumerate() {
        if m.name != e.name {
            return Err(WeightsError::NameMismatch { index: i, expected: e.name.clone(), found: m.name.clone() });
        }
        if m.shape != e.tensor.shape() {
            return Err(WeightsError::ShapeMismatch {
                name: m.name.clone(),
                expected: e.tensor.shape().to_vec(),
                found: m.shape.clone(),
            });
        }
    }
    for (m, e) in manifest.iter().zip(store.entries_mut()) {
        let start = m.offset as usize;
        let n = e.tensor.numel();
        let values = data[start..start + n].iter().map(|&v| T::lit(v)).collect();
        e.tensor = Tensor::new(m.shape.clone(), values).expect("shape checked");
    }
    Ok(())
}

pub fn save<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<(), WeightsError> {
    let f = std::fs::File::create(path)?;
    write_weights(store, io::BufWriter::new(f))
}

pub fn load<T: Scalar>(store: &mut ParamStore<T>, path: &Path) -> Result<(), WeightsError> {
    let f = std::fs::File::open(path)?;
    read_weights(store, io::BufReader::new(f))
}

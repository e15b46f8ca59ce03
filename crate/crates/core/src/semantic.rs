//! Frozen per-entity semantic vectors in the NGSE binary format.
//!
//! Layout: `b"NGSE"`, u32 LE version (1), u64 LE row count, u32 LE dim, then
//! `count × dim` little-endian f32 values, row-major.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const NGSE_MAGIC: &[u8; 4] = b"NGSE";
pub const NGSE_VERSION: u32 = 1;
const HEADER: usize = 4 + 4 + 8 + 4;

/// Read-only matrix of semantic rows, one per entity.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticStore<T> {
    rows: Array2<T>,
    /// Where the vectors came from (file stem when loaded from disk).
    pub encoder: String,
}

impl<T: Scalar> SemanticStore<T> {
    pub fn new(rows: Array2<T>, encoder: impl Into<String>) -> Self {
        SemanticStore { rows, encoder: encoder.into() }
    }

    pub fn rows(&self) -> ArrayView2<'_, T> {
        self.rows.view()
    }

    pub fn count(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn bytes(&self) -> u64 {
        (self.rows.len() * std::mem::size_of::<T>()) as u64
    }
}

/// Parses an NGSE blob.
pub fn parse_ngse<T: Scalar>(bytes: &[u8], name: &str) -> Result<SemanticStore<T>> {
    if bytes.len() < HEADER {
        return Err(Error::TruncatedFile(name.to_string()));
    }
    if &bytes[..4] != NGSE_MAGIC {
        return Err(Error::BadMagic(name.to_string()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != NGSE_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let payload = &bytes[HEADER..];
    let need = count.checked_mul(dim).and_then(|n| n.checked_mul(4)).ok_or_else(|| Error::TruncatedFile(name.to_string()))?;
    if payload.len() < need {
        return Err(Error::TruncatedFile(name.to_string()));
    }
    let data: Vec<T> = payload[..need]
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    let rows = Array2::from_shape_vec((count, dim), data).expect("sized payload");
    Ok(SemanticStore::new(rows, name))
}

/// Loads a store and checks it has one row per entity.
pub fn load_semantic_store<T: Scalar>(path: impl AsRef<Path>, n_entities: usize) -> Result<SemanticStore<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let store = parse_ngse(&bytes, &name)?;
    if store.count() != n_entities {
        return Err(Error::CountMismatch { expected: n_entities, found: store.count() });
    }
    Ok(store)
}

pub fn encode_ngse(rows: ArrayView2<'_, f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + rows.len() * 4);
    out.extend_from_slice(NGSE_MAGIC);
    out.extend_from_slice(&NGSE_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(rows.ncols() as u32).to_le_bytes());
    for v in rows.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_semantic_store(path: impl AsRef<Path>, rows: ArrayView2<'_, f32>) -> Result<()> {
    fs::write(path, encode_ngse(rows))?;
    Ok(())
}

/// Converts a headerless row-major little-endian f32 file into NGSE.
/// Returns the row count.
pub fn import_raw_f32(input: impl AsRef<Path>, dim: usize, output: impl AsRef<Path>) -> Result<usize> {
    let input = input.as_ref();
    if dim == 0 {
        return Err(Error::config("dim", "must be positive"));
    }
    let bytes = fs::read(input).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(input.to_path_buf()),
        _ => Error::Io(e),
    })?;
    if bytes.len() % (4 * dim) != 0 {
        return Err(Error::TruncatedFile(input.display().to_string()));
    }
    let vals: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let count = vals.len() / dim;
    let rows = Array2::from_shape_vec((count, dim), vals).expect("divisible");
    write_semantic_store(output, rows.view())?;
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn header_arithmetic() {
        let rows = Array2::<f32>::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f32);
        let blob = encode_ngse(rows.view());
        assert_eq!(blob.len(), 20 + 48);
        let s: SemanticStore<f32> = parse_ngse(&blob, "x").unwrap();
        assert_eq!((s.count(), s.dim()), (3, 4));
        assert_eq!(s.rows(), rows.view());
    }

    #[test]
    fn rejects_bad_input() {
        let blob = encode_ngse(array![[1.0f32, 2.0]].view());
        let mut bad = blob.clone();
        bad[0] = b'X';
        assert!(matches!(parse_ngse::<f64>(&bad, "x"), Err(Error::BadMagic(_))));
        assert!(matches!(parse_ngse::<f64>(&blob[..blob.len() - 1], "x"), Err(Error::TruncatedFile(_))));
        assert!(matches!(parse_ngse::<f64>(&blob[..10], "x"), Err(Error::TruncatedFile(_))));
    }

    #[test]
    fn count_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.ngse");
        write_semantic_store(&p, array![[1.0f32], [2.0]].view()).unwrap();
        assert!(matches!(load_semantic_store::<f32>(&p, 3), Err(Error::CountMismatch { expected: 3, found: 2 })));
        assert_eq!(load_semantic_store::<f32>(&p, 2).unwrap().encoder, "s");
    }
}

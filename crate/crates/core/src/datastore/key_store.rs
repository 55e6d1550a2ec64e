//! Persisted key vectors: a chunked binary matrix of 32-bit floats.
//!
//! Layout (little-endian): magic "KSKY", u32 version, u32 d, u8 dtype tag,
//! u64 count, u32 chunk_rows, zero padding to byte 32, then row-major f32
//! rows. `chunk_rows` is the unit readers stream by; the byte layout itself
//! is contiguous, so the file is memory-mappable.

use std::fs::File;
use std::io::{BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::vector::VectorMatrix;
use crate::Matrix;

pub const KEY_STORE_MAGIC: &[u8; 4] = b"KSKY";
pub const KEY_STORE_VERSION: u32 = 1;
/// Only f32 keys are defined today.
pub const DTYPE_F32: u8 = 1;
const HEADER_BYTES: u64 = 32;
pub const DEFAULT_CHUNK_ROWS: u32 = 8192;

/// Writer with random row access: `create` sizes the file up front and rows
/// may land in any order, so batched producers can write out of sequence
/// while the bytes stay canonical.
pub struct KeyStoreWriter {
    file: File,
    d: u32,
    count: u64,
}

impl KeyStoreWriter {
    pub fn create(
        path: impl AsRef<Path>,
        d: u32,
        count: u64,
        chunk_rows: u32,
    ) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid_argument("key dimensionality must be >= 1"));
        }
        if chunk_rows == 0 {
            return Err(Error::invalid_argument("chunk_rows must be >= 1"));
        }
        let file = File::create(path)?;
        let mut w = ByteWriter::new(&file);
        w.write_magic(KEY_STORE_MAGIC)?;
        w.write_u32(KEY_STORE_VERSION)?;
        w.write_u32(d)?;
        w.write_u8(DTYPE_F32)?;
        w.write_u64(count)?;
        w.write_u32(chunk_rows)?;
        w.pad_to(HEADER_BYTES)?;
        file.set_len(HEADER_BYTES + count * d as u64 * 4)?;
        Ok(KeyStoreWriter { file, d, count })
    }

    /// Write `rows` starting at row index `first_row`.
    pub fn write_rows_at(&mut self, first_row: u64, rows: &Matrix) -> Result<()> {
        if rows.dim() != self.d as usize {
            return Err(Error::invalid_argument(format!(
                "row dim {} does not match store dim {}",
                rows.dim(),
                self.d
            )));
        }
        if first_row + rows.rows() as u64 > self.count {
            return Err(Error::invalid_argument(format!(
                "rows {}..{} exceed declared count {}",
                first_row,
                first_row + rows.rows() as u64,
                self.count
            )));
        }
        self.file
            .seek(SeekFrom::Start(HEADER_BYTES + first_row * self.d as u64 * 4))?;
        let mut buf = Vec::with_capacity(rows.as_slice().len() * 4);
        for v in rows.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.file.write_all(&buf)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.file.flush()?;
        self.file.sync_all()?;
        Ok(())
    }
}

pub struct KeyStoreReader {
    path: PathBuf,
    file: BufReader<File>,
    d: u32,
    count: u64,
    chunk_rows: u32,
}

impl KeyStoreReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path)?;
        let mut r = ByteReader::new(BufReader::new(file));
        r.expect_magic(KEY_STORE_MAGIC)?;
        let at = r.offset();
        let version = r.read_u32()?;
        if version != KEY_STORE_VERSION {
            return Err(Error::format(at, format!("unsupported key store version {version}")));
        }
        let d = r.read_u32()?;
        let dtype = r.read_u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::format(at, format!("unsupported dtype tag {dtype}")));
        }
        let count = r.read_u64()?;
        let chunk_rows = r.read_u32()?;
        if d == 0 || chunk_rows == 0 {
            return Err(Error::format(at, "degenerate key store header"));
        }
        let expected = HEADER_BYTES + count * d as u64 * 4;
        let actual = std::fs::metadata(&path)?.len();
        if actual != expected {
            return Err(Error::format(
                actual.min(expected),
                format!("key store is {actual} bytes, expected {expected}"),
            ));
        }
        let file = BufReader::new(File::open(&path)?);
        Ok(KeyStoreReader { path, file, d, count, chunk_rows })
    }

    #[inline]
    pub fn path(&self) -> &Path {
        &self.path
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.d as usize
    }

    #[inline]
    pub fn rows(&self) -> u64 {
        self.count
    }

    #[inline]
    pub fn chunk_rows(&self) -> u32 {
        self.chunk_rows
    }

    pub fn num_chunks(&self) -> u64 {
        self.count.div_ceil(self.chunk_rows as u64)
    }

    /// Row range covered by chunk `i`.
    pub fn chunk_range(&self, i: u64) -> (u64, u64) {
        let start = i * self.chunk_rows as u64;
        let end = (start + self.chunk_rows as u64).min(self.count);
        (start, end)
    }

    pub fn read_chunk(&mut self, i: u64) -> Result<Matrix> {
        let (start, end) = self.chunk_range(i);
        self.read_rows(start, (end - start) as usize)
    }

    pub fn read_rows(&mut self, first_row: u64, n: usize) -> Result<Matrix> {
        if first_row + n as u64 > self.count {
            return Err(Error::invalid_argument(format!(
                "rows {}..{} beyond count {}",
                first_row,
                first_row + n as u64,
                self.count
            )));
        }
        self.file
            .seek(SeekFrom::Start(HEADER_BYTES + first_row * self.d as u64 * 4))?;
        let mut buf = vec![0u8; n * self.d as usize * 4];
        self.file.read_exact(&mut buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::format(HEADER_BYTES + first_row * self.d as u64 * 4, "truncated key data")
            } else {
                Error::Io(e)
            }
        })?;
        let data: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let m = VectorMatrix::new(n, self.d as usize, data)?;
        m.validate_finite()?;
        Ok(m)
    }

    pub fn read_row(&mut self, i: u64) -> Result<Vec<f32>> {
        Ok(self.read_rows(i, 1)?.as_slice().to_vec())
    }

    /// Gather the rows at `sorted_row_ids` (ascending) in one streaming pass.
    pub fn gather_rows(&mut self, sorted_row_ids: &[u64]) -> Result<Matrix> {
        let mut out = VectorMatrix::with_dim(self.d as usize);
        let mut cursor = 0usize;
        for chunk in 0..self.num_chunks() {
            if cursor >= sorted_row_ids.len() {
                break;
            }
            let (start, end) = self.chunk_range(chunk);
            if sorted_row_ids[cursor] >= end {
                continue;
            }
            let m = self.read_chunk(chunk)?;
            while cursor < sorted_row_ids.len() && sorted_row_ids[cursor] < end {
                out.push_row(m.row((sorted_row_ids[cursor] - start) as usize));
                cursor += 1;
            }
        }
        if cursor != sorted_row_ids.len() {
            return Err(Error::invalid_argument("gather indices beyond row count"));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_read_round_trip_with_partial_chunk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k.ksky");
        let mut w = KeyStoreWriter::create(&p, 3, 5, 2).unwrap();
        let rows = VectorMatrix::new(
            5,
            3,
            (0..15).map(|i| i as f32).collect(),
        )
        .unwrap();
        // Write out of order; bytes must come out canonical.
        w.write_rows_at(2, &VectorMatrix::new(3, 3, rows.as_slice()[6..].to_vec()).unwrap())
            .unwrap();
        w.write_rows_at(0, &VectorMatrix::new(2, 3, rows.as_slice()[..6].to_vec()).unwrap())
            .unwrap();
        w.finish().unwrap();

        let mut r = KeyStoreReader::open(&p).unwrap();
        assert_eq!(r.rows(), 5);
        assert_eq!(r.dim(), 3);
        assert_eq!(r.num_chunks(), 3);
        assert_eq!(r.read_chunk(0).unwrap().as_slice(), &rows.as_slice()[..6]);
        assert_eq!(r.read_chunk(2).unwrap().rows(), 1);
        assert_eq!(r.read_row(4).unwrap(), vec![12.0, 13.0, 14.0]);
        let g = r.gather_rows(&[0, 3, 4]).unwrap();
        assert_eq!(g.rows(), 3);
        assert_eq!(g.row(1), &[9.0, 10.0, 11.0]);
    }

    #[test]
    fn size_mismatch_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k.ksky");
        let w = KeyStoreWriter::create(&p, 4, 10, 4).unwrap();
        w.finish().unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(KeyStoreReader::open(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn non_finite_rows_are_rejected_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k.ksky");
        let mut w = KeyStoreWriter::create(&p, 2, 1, 8).unwrap();
        w.write_rows_at(0, &VectorMatrix::new(1, 2, vec![1.0, f32::NAN]).unwrap())
            .unwrap();
        w.finish().unwrap();
        let mut r = KeyStoreReader::open(&p).unwrap();
        assert!(r.read_chunk(0).is_err());
    }
}

//! Little-endian binary reader/writer with offset tracking.
//!
//! Every persisted artifact in this crate is a sequence of fixed-width
//! little-endian fields. The reader reports the byte offset of the first
//! problem it sees so corrupt files are diagnosable.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub struct ByteWriter<W: Write> {
    w: W,
    offset: u64,
}

impl<W: Write> ByteWriter<W> {
    pub fn new(w: W) -> Self {
        ByteWriter { w, offset: 0 }
    }

    #[inline]
    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn write_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        self.w.write_all(bytes)?;
        self.offset += bytes.len() as u64;
        Ok(())
    }

    pub fn write_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        self.write_bytes(magic)
    }

    pub fn write_u8(&mut self, v: u8) -> Result<()> {
        self.write_bytes(&[v])
    }

    pub fn write_u32(&mut self, v: u32) -> Result<()> {
        self.write_bytes(&v.to_le_bytes())
    }

    pub fn write_u64(&mut self, v: u64) -> Result<()> {
        self.write_bytes(&v.to_le_bytes())
    }

    pub fn write_f32_slice(&mut self, vs: &[f32]) -> Result<()> {
        let mut buf = Vec::with_capacity(vs.len() * 4);
        for v in vs {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.write_bytes(&buf)
    }

    pub fn write_u32_slice(&mut self, vs: &[u32]) -> Result<()> {
        let mut buf = Vec::with_capacity(vs.len() * 4);
        for v in vs {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.write_bytes(&buf)
    }

    pub fn write_u64_slice(&mut self, vs: &[u64]) -> Result<()> {
        let mut buf = Vec::with_capacity(vs.len() * 8);
        for v in vs {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.write_bytes(&buf)
    }

    /// Zero-fill up to the next multiple of `align` bytes.
    pub fn pad_to(&mut self, align: u64) -> Result<()> {
        let rem = self.offset % align;
        if rem != 0 {
            let zeros = vec![0u8; (align - rem) as usize];
            self.write_bytes(&zeros)?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

pub struct ByteReader<R: Read> {
    r: R,
    offset: u64,
}

impl<R: Read> ByteReader<R> {
    pub fn new(r: R) -> Self {
        ByteReader { r, offset: 0 }
    }

    #[inline]
    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn read_bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.read_into(&mut buf)?;
        Ok(buf)
    }

    pub fn read_into(&mut self, buf: &mut [u8]) -> Result<()> {
        let at = self.offset;
        self.r.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::format(at, "unexpected end of file")
            } else {
                Error::Io(e)
            }
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    pub fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let at = self.offset;
        let got = self.read_bytes(4)?;
        if got != magic {
            return Err(Error::format(
                at,
                format!(
                    "bad magic: expected {:?}, found {:?}",
                    String::from_utf8_lossy(magic),
                    String::from_utf8_lossy(&got)
                ),
            ));
        }
        Ok(())
    }

    pub fn read_u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.read_into(&mut b)?;
        Ok(b[0])
    }

    pub fn read_u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_into(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn read_u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_into(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn read_f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.read_bytes(n * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn read_u32_vec(&mut self, n: usize) -> Result<Vec<u32>> {
        let bytes = self.read_bytes(n * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn read_u64_vec(&mut self, n: usize) -> Result<Vec<u64>> {
        let bytes = self.read_bytes(n * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }

    /// Consume padding up to the next multiple of `align` bytes.
    pub fn skip_pad(&mut self, align: u64) -> Result<()> {
        let rem = self.offset % align;
        if rem != 0 {
            self.read_bytes((align - rem) as usize)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_padding() {
        let mut buf = Vec::new();
        {
            let mut w = ByteWriter::new(&mut buf);
            w.write_magic(b"TEST").unwrap();
            w.write_u32(7).unwrap();
            w.write_u8(3).unwrap();
            w.pad_to(8).unwrap();
            w.write_u64(99).unwrap();
            w.write_f32_slice(&[1.5, -2.0]).unwrap();
            w.pad_to(8).unwrap();
        }
        assert_eq!(buf.len() % 8, 0);
        let mut r = ByteReader::new(&buf[..]);
        r.expect_magic(b"TEST").unwrap();
        assert_eq!(r.read_u32().unwrap(), 7);
        assert_eq!(r.read_u8().unwrap(), 3);
        r.skip_pad(8).unwrap();
        assert_eq!(r.read_u64().unwrap(), 99);
        assert_eq!(r.read_f32_vec(2).unwrap(), vec![1.5, -2.0]);
    }

    #[test]
    fn truncation_reports_offset() {
        let buf = vec![1u8, 2, 3];
        let mut r = ByteReader::new(&buf[..]);
        let err = r.read_u64().unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, 0),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn bad_magic_reports_offset() {
        let buf = b"NOPExxxx".to_vec();
        let mut r = ByteReader::new(&buf[..]);
        let err = r.expect_magic(b"KSIX").unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, 0),
            other => panic!("unexpected error {other:?}"),
        }
    }
}

//! Little-endian binary containers for dense `f64` matrices.
//!
//! A container is a magic string followed by blocks. A matrix block is
//! `rows: u64, cols: u64, rows·cols × f64` (row-major); a string block is
//! `len: u32` followed by UTF-8 bytes.

use crate::error::{Error, Result};

#[derive(Default)]
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8]) -> Self {
        Self { buf: magic.to_vec() }
    }

    pub fn string(&mut self, s: &str) -> &mut Self {
        self.buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
        self.buf.extend_from_slice(s.as_bytes());
        self
    }

    pub fn matrix(&mut self, rows: usize, cols: usize, values: &[f64]) -> &mut Self {
        debug_assert_eq!(rows * cols, values.len());
        self.buf.extend_from_slice(&(rows as u64).to_le_bytes());
        self.buf.extend_from_slice(&(cols as u64).to_le_bytes());
        for v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        self
    }

    pub fn finish(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.buf)
    }
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], magic: &[u8]) -> Result<Self> {
        if !bytes.starts_with(magic) {
            return Err(Error::Format(format!(
                "bad magic, expected {}",
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(Self {
            bytes,
            pos: magic.len(),
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated container at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn string(&mut self) -> Result<String> {
        let len = u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn matrix(&mut self) -> Result<(usize, usize, Vec<f64>)> {
        let rows = u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format("matrix size overflow".into()))?;
        let raw = self.take(n)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((rows, cols, values))
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

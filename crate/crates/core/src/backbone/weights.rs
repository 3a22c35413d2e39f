//! `MAMEW1` weights container.
//!
//! ```text
//! magic        6 bytes  "MAMEW1"
//! stage_count  u32
//! per stage:
//!   conv_count u32
//!   per conv:
//!     out_channels, in_channels, kernel_h, kernel_w   4 × u32
//!     weights  out·in·kh·kw × f32   ([out][in][ky][kx])
//!     bias     out × f32
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use crate::backbone::Backbone;
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 6] = b"MAMEW1";

impl Backbone {
    pub fn weights_to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&(self.stages.len() as u32).to_le_bytes());
        for stage in &self.stages {
            out.extend_from_slice(&(stage.convs.len() as u32).to_le_bytes());
            for conv in &stage.convs {
                for dim in [conv.out_channels, conv.in_channels, conv.kernel, conv.kernel] {
                    out.extend_from_slice(&(dim as u32).to_le_bytes());
                }
                for &w in conv.weights.iter().chain(&conv.bias) {
                    out.extend_from_slice(&(w as f32).to_le_bytes());
                }
            }
        }
        out
    }

    pub fn export_weights(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.weights_to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Replaces the filter weights with those stored in `bytes`. Every shape
    /// must match the configuration.
    pub fn with_weights_bytes(mut self, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(6)? != WEIGHTS_MAGIC {
            return Err(Error::WeightsFormat("bad magic, expected MAMEW1".into()));
        }
        let stage_count = r.u32()? as usize;
        if stage_count != self.stages.len() {
            return Err(Error::WeightsShape {
                stage: "<network>".into(),
                expected: vec![self.stages.len() as u32],
                found: vec![stage_count as u32],
            });
        }
        let names: Vec<String> = self.config.stages.iter().map(|s| s.name.clone()).collect();
        for (stage, name) in self.stages.iter_mut().zip(names) {
            let conv_count = r.u32()? as usize;
            if conv_count != stage.convs.len() {
                return Err(Error::WeightsShape {
                    stage: name,
                    expected: vec![stage.convs.len() as u32],
                    found: vec![conv_count as u32],
                });
            }
            for conv in &mut stage.convs {
                let found = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
                let expected = [
                    conv.out_channels as u32,
                    conv.in_channels as u32,
                    conv.kernel as u32,
                    conv.kernel as u32,
                ];
                if found != expected {
                    return Err(Error::WeightsShape {
                        stage: name.clone(),
                        expected: expected.to_vec(),
                        found: found.to_vec(),
                    });
                }
                for w in conv.weights.iter_mut().chain(conv.bias.iter_mut()) {
                    *w = r.f32()? as f64;
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::WeightsFormat(format!(
                "{} trailing bytes after last stage",
                bytes.len() - r.pos
            )));
        }
        Ok(self)
    }

    pub fn load_weights(self, path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.with_weights_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::WeightsFormat(format!(
                "truncated: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

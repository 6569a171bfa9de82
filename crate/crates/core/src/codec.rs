//! Shared pieces of the binary checkpoint formats: a text header of
//! newline-terminated fields followed by little-endian `f64` payloads.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor2;

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &str) -> Self {
        let mut w = Self { buf: Vec::new() };
        w.line(magic);
        w
    }

    pub fn line(&mut self, field: impl std::fmt::Display) {
        self.buf.extend_from_slice(field.to_string().as_bytes());
        self.buf.push(b'\n');
    }

    pub fn values<T: Scalar>(&mut self, values: &[T]) {
        for v in values {
            self.buf.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }

    pub fn tensor<T: Scalar>(&mut self, t: &Tensor2<T>) {
        self.values(t.data());
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], magic: &str) -> Result<Self> {
        let mut r = Self { bytes, pos: 0 };
        let found = r.line()?;
        if found != magic {
            return Err(Error::Checkpoint(format!("expected magic {magic:?}, found {found:?}")));
        }
        Ok(r)
    }

    pub fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))
    }

    pub fn number(&mut self, what: &str) -> Result<usize> {
        let s = self.line()?;
        s.parse()
            .map_err(|_| Error::Checkpoint(format!("bad {what} field {s:?}")))
    }

    pub fn values<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let need = n
            .checked_mul(8)
            .ok_or_else(|| Error::Checkpoint("payload size overflows".into()))?;
        if self.bytes.len() - self.pos < need {
            return Err(Error::Checkpoint("truncated payload".into()));
        }
        let out = self.bytes[self.pos..self.pos + need]
            .chunks_exact(8)
            .map(|c| {
                let v = f64::from_le_bytes(c.try_into().expect("8 bytes"));
                T::from_f64(v).unwrap_or_else(T::nan)
            })
            .collect();
        self.pos += need;
        Ok(out)
    }

    pub fn tensor<T: Scalar>(&mut self, rows: usize, cols: usize) -> Result<Tensor2<T>> {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Checkpoint("tensor size overflows".into()))?;
        let data = self.values(n)?;
        Tensor2::from_vec(rows, cols, data)
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

//! Little-endian binary helpers shared by checkpoints and codec files.

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}")]
    Magic { expected: String },
    #[error("unsupported format version {found} (this build reads version {supported})")]
    Version { found: u32, supported: u32 },
    #[error("file ends early while reading {0}")]
    Truncated(&'static str),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Default)]
pub struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    /// `u64` length followed by the bytes.
    pub fn blob(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.bytes(b);
    }

    pub fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.bytes(&x.to_le_bytes());
        }
    }

    /// `u32` count, then per entry: `u32` name length, name, `u32` rank,
    /// `u64` dims, raw `f32` values.
    pub fn tensor_table<'a>(&mut self, entries: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) {
        let entries: Vec<_> = entries.into_iter().collect();
        self.u32(entries.len() as u32);
        for (name, t) in entries {
            self.u32(name.len() as u32);
            self.bytes(name.as_bytes());
            self.u32(t.shape().len() as u32);
            for &d in t.shape() {
                self.u64(d as u64);
            }
            self.f32s(t.data());
        }
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(FormatError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn magic(&mut self, expected: &[u8]) -> Result<(), FormatError> {
        let got = self.take(expected.len(), "magic").map_err(|_| FormatError::Magic {
            expected: String::from_utf8_lossy(expected).into(),
        })?;
        if got != expected {
            return Err(FormatError::Magic { expected: String::from_utf8_lossy(expected).into() });
        }
        Ok(())
    }

    pub fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self, what: &'static str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    pub fn blob(&mut self, what: &'static str) -> Result<&'a [u8], FormatError> {
        let n = self.u64(what)? as usize;
        self.take(n, what)
    }

    pub fn f32s(&mut self, n: usize, what: &'static str) -> Result<Vec<f32>, FormatError> {
        let raw = self.take(n.checked_mul(4).ok_or(FormatError::Truncated(what))?, what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    pub fn tensor_table(&mut self) -> Result<Vec<(String, Tensor<f32>)>, FormatError> {
        let n = self.u32("tensor count")?;
        let mut out = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let len = self.u32("tensor name")? as usize;
            let name = String::from_utf8(self.take(len, "tensor name")?.to_vec())
                .map_err(|_| FormatError::Invalid("tensor name is not UTF-8".into()))?;
            let rank = self.u32("tensor rank")? as usize;
            let dims = (0..rank).map(|_| self.u64("tensor dims").map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(FormatError::Truncated("tensor data"))?;
            let data = self.f32s(numel, "tensor data")?;
            out.push((name, Tensor::new(dims, data).expect("length matches dims")));
        }
        Ok(out)
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_table_round_trips() {
        let a = Tensor::from_fn([2, 3], |i| i as f32 * 0.25 - 1.0);
        let b = Tensor::from_fn([4], |i| (i as f32).sin());
        let mut w = Writer::default();
        w.tensor_table([("a", &a), ("bee", &b)]);
        let mut r = Reader::new(&w.buf);
        let got = r.tensor_table().unwrap();
        assert!(r.is_done());
        assert_eq!(got, vec![("a".to_string(), a), ("bee".to_string(), b)]);
    }

    #[test]
    fn truncation_is_reported() {
        let mut w = Writer::default();
        w.tensor_table([("a", &Tensor::<f32>::zeros([8]))]);
        let cut = &w.buf[..w.buf.len() - 3];
        assert!(matches!(Reader::new(cut).tensor_table(), Err(FormatError::Truncated(_))));
    }
}

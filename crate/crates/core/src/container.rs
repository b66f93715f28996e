//! Little-endian binary container shared by the knowledge-base snapshot,
//! the LM checkpoint and the editor checkpoint: 4-byte magic, `u32`
//! version, then a payload of `u32` integers, `f32` values and
//! length-prefixed UTF-8 strings.

use std::path::Path;

use medrek_autodiff::{ParamSet, Tensor};

use crate::error::{Error, Result};

pub const VERSION: u32 = 1;

#[derive(Debug, Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4]) -> Self {
        let mut w = Self { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(VERSION);
        w
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn usize(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("value fits in u32"));
    }

    pub fn f32(&mut self, v: f64) {
        self.buf.extend_from_slice(&(v as f32).to_le_bytes());
    }

    pub fn f32s(&mut self, vs: &[f64]) {
        vs.iter().for_each(|&v| self.f32(v));
    }

    pub fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }

    /// Every tensor as rank, extents, then values.
    pub fn params(&mut self, set: &ParamSet) {
        self.usize(set.len());
        for (name, t) in set.iter() {
            self.str(name);
            self.usize(t.rank());
            t.shape().iter().for_each(|&d| self.usize(d));
            self.f32s(t.data());
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn save(self, path: &Path) -> Result<()> {
        std::fs::write(path, self.buf).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug)]
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks magic and version. Files shorter than the header are
    /// reported as truncated.
    pub fn open(buf: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        if buf.len() < 8 {
            return Err(Error::Truncated);
        }
        let found: [u8; 4] = buf[..4].try_into().unwrap();
        if &found != magic {
            return Err(Error::BadMagic {
                expected: *magic,
                found,
            });
        }
        let mut r = Self { buf, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        if end > self.buf.len() {
            return Err(Error::Truncated);
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or(Error::Truncated)?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.usize()?;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|e| Error::Corrupt(e.to_string()))
    }

    /// Reads tensors written by [`Writer::params`] into `set`, which must
    /// have the same names and shapes in the same order.
    pub fn params_into(&mut self, set: &mut ParamSet) -> Result<()> {
        let n = self.usize()?;
        if n != set.len() {
            return Err(Error::Corrupt(format!("expected {} tensors, found {n}", set.len())));
        }
        for id in set.ids().collect::<Vec<_>>() {
            let name = self.str()?;
            if name != set.name(id) {
                return Err(Error::Corrupt(format!("expected tensor `{}`, found `{name}`", set.name(id))));
            }
            let rank = self.usize()?;
            let shape = (0..rank).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
            if shape != set.get(id).shape() {
                return Err(Error::Corrupt(format!("tensor `{name}` has shape {shape:?}")));
            }
            let numel = shape.iter().product();
            let data = self.f32s(numel)?;
            let t = set.get_mut(id);
            *t = Tensor::new(&shape, data)?.with_grad();
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_errors_are_distinct() {
        assert!(matches!(Reader::open(&[], b"MRKB"), Err(Error::Truncated)));
        let mut w = Writer::new(b"MRKB").finish();
        assert!(matches!(Reader::open(&w, b"MRLM"), Err(Error::BadMagic { .. })));
        w[4] ^= 0xff;
        assert!(matches!(Reader::open(&w, b"MRKB"), Err(Error::UnsupportedVersion(_))));
    }

    #[test]
    fn values_round_trip() {
        let mut w = Writer::new(b"TEST");
        w.u32(7);
        w.str("héllo");
        w.f32s(&[1.5, -0.25]);
        let buf = w.finish();
        let mut r = Reader::open(&buf, b"TEST").unwrap();
        assert_eq!(r.u32().unwrap(), 7);
        assert_eq!(r.str().unwrap(), "héllo");
        assert_eq!(r.f32s(2).unwrap(), vec![1.5, -0.25]);
        r.finish().unwrap();
        assert!(matches!(r.u32(), Err(Error::Truncated)));
    }
}

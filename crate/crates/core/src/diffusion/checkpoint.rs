//! Backend checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "TFORGECK"
//! version    u8       1
//! kind       u8       0 = analytic, 1 = toy, 2 = external
//! count      u32      number of tensors
//! table      count x { name_len u16, name utf-8, ndim u8, dims ndim x u32 }
//! blob       f32 values of every tensor, concatenated in table order
//! ```

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TFORGECK";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Self {
        Self { name: name.into(), dims, data }
    }

    pub fn scalar(name: impl Into<String>, v: f64) -> Self {
        Self::new(name, vec![1], vec![v])
    }
}

pub fn encode_tensors(kind: u8, tensors: &[Tensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.push(kind);
    out.extend_from_slice(&u32::try_from(tensors.len()).map_err(|_| Error::invalid("too many tensors"))?.to_le_bytes());
    for t in tensors {
        let n: usize = t.dims.iter().product();
        if n != t.data.len() {
            return Err(Error::ShapeMismatch { expected: format!("{:?} ({n} values)", t.dims), got: t.data.len().to_string() });
        }
        let name = t.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::invalid("tensor name too long"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(u8::try_from(t.dims.len()).map_err(|_| Error::invalid("too many dimensions"))?);
        for &d in &t.dims {
            out.extend_from_slice(&u32::try_from(d).map_err(|_| Error::invalid("dimension too large"))?.to_le_bytes());
        }
    }
    for t in tensors {
        for &v in &t.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("checkpoint", "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<(u8, Vec<Tensor>)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = c.u8()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let kind = c.u8()?;
    let count = c.u32()? as usize;
    let mut table = Vec::new();
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::format("checkpoint", "tensor name is not utf-8"))?
            .to_string();
        let ndim = c.u8()? as usize;
        let dims = (0..ndim).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        table.push((name, dims));
    }
    let mut tensors = Vec::with_capacity(count);
    for (name, dims) in table {
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::format("checkpoint", "tensor size overflows"))?;
        let raw = c.take(n.checked_mul(4).ok_or_else(|| Error::format("checkpoint", "tensor size overflows"))?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64).collect();
        tensors.push(Tensor { name, dims, data });
    }
    if c.pos != bytes.len() {
        return Err(Error::format("checkpoint", "trailing bytes"));
    }
    Ok((kind, tensors))
}

/// Lookup helper over a decoded tensor list.
pub(crate) struct TensorMap(pub Vec<Tensor>);

impl TensorMap {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.0
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::format("checkpoint", format!("missing tensor '{name}'")))
    }

    pub fn values(&self, name: &str, len: usize) -> Result<&[f64]> {
        let t = self.get(name)?;
        if t.data.len() != len {
            return Err(Error::format("checkpoint", format!("tensor '{name}' has {} values, expected {len}", t.data.len())));
        }
        Ok(&t.data)
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        Ok(self.values(name, 1)?[0])
    }

    pub fn has(&self, name: &str) -> bool {
        self.0.iter().any(|t| t.name == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_as_documented() {
        let t = [Tensor::new("ab", vec![2], vec![1.0, -2.5])];
        let b = encode_tensors(1, &t).unwrap();
        let mut expected = b"TFORGECK".to_vec();
        expected.extend_from_slice(&[1, 1, 1, 0, 0, 0, 2, 0, b'a', b'b', 1, 2, 0, 0, 0]);
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(b, expected);
        assert_eq!(decode_tensors(&b).unwrap(), (1, t.to_vec()));
    }

    #[test]
    fn corrupt_input_rejected() {
        let b = encode_tensors(0, &[Tensor::scalar("x", 1.0)]).unwrap();
        assert!(decode_tensors(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode_tensors(&bad).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(decode_tensors(&extra).is_err());
        let mut ver = b;
        ver[8] = 9;
        assert!(decode_tensors(&ver).is_err());
    }
}

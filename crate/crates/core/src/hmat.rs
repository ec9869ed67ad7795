//! HMAT binary array files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "HMAT" | u32 version = 1 | u32 dtype (0 = f32, 1 = f64, 2 = u8) | u32 rank
//!        | rank × u64 extents | row-major payload
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{check_dims, DType, Tensor, MAX_RANK};

pub const MAGIC: &[u8; 4] = b"HMAT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum HmatData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl HmatData {
    fn code(&self) -> u32 {
        match self {
            HmatData::F32(_) => 0,
            HmatData::F64(_) => 1,
            HmatData::U8(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            HmatData::F32(v) => v.len(),
            HmatData::F64(v) => v.len(),
            HmatData::U8(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HmatArray {
    pub dims: Vec<usize>,
    pub data: HmatData,
}

impl HmatArray {
    pub fn from_tensor(t: &Tensor) -> Self {
        let data = match t.dtype() {
            DType::F32 => HmatData::F32(t.data().iter().map(|&v| v as f32).collect()),
            DType::F64 => HmatData::F64(t.data().to_vec()),
        };
        HmatArray {
            dims: t.dims().to_vec(),
            data,
        }
    }

    pub fn into_tensor(self) -> Result<Tensor> {
        match self.data {
            HmatData::F32(v) => Tensor::new(
                &self.dims,
                v.into_iter().map(f64::from).collect(),
                DType::F32,
            ),
            HmatData::F64(v) => Tensor::new(&self.dims, v, DType::F64),
            HmatData::U8(_) => Err(Error::format(8, "u8 payload is not a float tensor")),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.dims.len() + 8 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.data.code().to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            HmatData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            HmatData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            HmatData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::format(0, "bad magic, expected HMAT"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let code = r.u32("dtype")?;
        let width = match code {
            0 => 4,
            1 => 8,
            2 => 1,
            _ => return Err(Error::format(8, format!("unknown dtype code {code}"))),
        };
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::format(12, format!("rank {rank} outside 1..={MAX_RANK}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let at = r.pos as u64;
            let d = r.u64("extent")?;
            let d = usize::try_from(d).map_err(|_| Error::format(at, "extent overflows usize"))?;
            dims.push(d);
        }
        let n = check_dims(&dims).map_err(|e| Error::format(16, e.to_string()))?;
        let payload_at = r.pos as u64;
        let payload_len = n
            .checked_mul(width)
            .ok_or_else(|| Error::format(payload_at, "payload size overflows"))?;
        let payload = r.take(payload_len, "payload")?;
        if r.pos != bytes.len() {
            return Err(Error::format(
                r.pos as u64,
                format!("{} trailing bytes", bytes.len() - r.pos),
            ));
        }
        let data = match code {
            0 => HmatData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            1 => HmatData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            _ => HmatData::U8(payload.to_vec()),
        };
        Ok(HmatArray { dims, data })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.bytes.len() as u64,
                format!("truncated while reading {what}"),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn write(path: &Path, array: &HmatArray) -> Result<()> {
    fs::write(path, array.encode())?;
    Ok(())
}

pub fn read(path: &Path) -> Result<HmatArray> {
    HmatArray::decode(&fs::read(path)?)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write(path, &HmatArray::from_tensor(t))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    read(path)?.into_tensor()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_bytes() {
        let a = HmatArray {
            dims: vec![2],
            data: HmatData::U8(vec![7, 9]),
        };
        let expected: Vec<u8> = [
            &b"HMAT"[..],
            &[1, 0, 0, 0],
            &[2, 0, 0, 0],
            &[1, 0, 0, 0],
            &[2, 0, 0, 0, 0, 0, 0, 0],
            &[7, 9],
        ]
        .concat();
        assert_eq!(a.encode(), expected);
        assert_eq!(HmatArray::decode(&expected).unwrap(), a);
    }

    #[test]
    fn truncation_reports_offset() {
        let t = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let bytes = HmatArray::from_tensor(&t).encode();
        for cut in [0, 3, 10, 20, bytes.len() - 1] {
            match HmatArray::decode(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert_eq!(offset, cut as u64),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn rejects_bad_header() {
        let t = Tensor::from_vec(&[1], vec![1.0]);
        let mut bytes = HmatArray::from_tensor(&t).encode();
        bytes[0] = b'X';
        assert!(matches!(HmatArray::decode(&bytes), Err(Error::Format { offset: 0, .. })));
        let mut bytes = HmatArray::from_tensor(&t).encode();
        bytes[8] = 9;
        assert!(matches!(HmatArray::decode(&bytes), Err(Error::Format { offset: 8, .. })));
        let mut bytes = HmatArray::from_tensor(&t).encode();
        bytes.push(0);
        assert!(matches!(HmatArray::decode(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn f32_tensor_round_trip() {
        let t = Tensor::new(&[3], vec![0.1, -2.5, 1e10], DType::F32).unwrap();
        let back = HmatArray::decode(&HmatArray::from_tensor(&t).encode())
            .unwrap()
            .into_tensor()
            .unwrap();
        assert_eq!(back, t);
    }
}

//! Binary checkpoint: `TKLB`, version, schedule, named f64 arrays, CRC32.
//!
//! All integers and floats are little-endian. Layout:
//! magic(4) version(u32) t_max(u64) offset(f64) n_alpha(u64) alpha_bar(f64 * n)
//! n_arrays(u32) { name_len(u32) name dtype(u8 = 0) rank(u32) dims(u64 * rank) data(f64 * prod) }
//! crc32(u32) over every preceding byte.

use std::path::Path;

use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TKLB";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub schedule: DiffusionSchedule,
    pub arrays: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).ok().filter(|&n| n <= self.buf.len()).ok_or_else(|| Error::Format(format!("implausible length {v}")))
    }
}

impl Checkpoint {
    pub fn new(schedule: DiffusionSchedule, arrays: Vec<(String, Tensor)>) -> Self {
        Checkpoint { schedule, arrays }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(self.schedule.t_max() as u64).to_le_bytes());
        b.extend_from_slice(&self.schedule.offset().to_le_bytes());
        let ab = self.schedule.alpha_bars();
        b.extend_from_slice(&(ab.len() as u64).to_le_bytes());
        for v in ab {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.push(DTYPE_F64);
            b.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&b);
        b.extend_from_slice(&crc.to_le_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a TKLB checkpoint".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::Format(format!("checkpoint CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let t_max = r.len()?;
        let offset = r.f64()?;
        let n = r.len()?;
        let alpha_bar = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let schedule = DiffusionSchedule::from_parts(t_max, offset, alpha_bar)?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let nl = r.u32()? as usize;
            let name = String::from_utf8(r.take(nl)?.to_vec()).map_err(|_| Error::Format("array name is not UTF-8".into()))?;
            if r.u8()? != DTYPE_F64 {
                return Err(Error::Format(format!("array {name}: unsupported dtype")));
            }
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).filter(|&n| n <= body.len() / 8);
            let numel = numel.ok_or_else(|| Error::Format(format!("array {name}: implausible shape")))?;
            let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            arrays.push((name, Tensor::new(dims, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes after arrays".into()));
        }
        Ok(Checkpoint { schedule, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn sample() -> Checkpoint {
        let r = RngStream::new(4);
        Checkpoint::new(
            DiffusionSchedule::cosine(16).unwrap(),
            vec![
                ("a".into(), r.child(0).normal(&[3, 5])),
                ("scalar".into(), Tensor::scalar(f64::MIN_POSITIVE)),
                ("v".into(), Tensor::vector(vec![-0.0, 1e300, 3.5])),
            ],
        )
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.get("v").unwrap().data()[0].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back, c);
    }

    #[test]
    fn corruption_detected() {
        let bytes = sample().to_bytes();
        for i in [0, 5, 40, bytes.len() / 2, bytes.len() - 1] {
            let mut b = bytes.clone();
            b[i] ^= 0x10;
            assert!(Checkpoint::from_bytes(&b).is_err(), "flip at {i}");
        }
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}

//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "SWNCKPT\0" | version u16 | dtype width u8
//! meta_len u64 | meta JSON (sharing plan, members, allocation, ...)
//! bank_count u32   { bank_id u32 | N u32 | shape 4 x u32 | N * numel values }
//! coeff_count u32  { coeff_id u32 | slot_id u32 | len u32 | len values }
//! array_count u32  { name_len u32 | name utf-8 | ndim u32 | dims u32... | values }
//! ```

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{DenseArray, Precision, Scalar};
use crate::weightgen::{BankId, CoeffId, SlotId};

const MAGIC: &[u8; 8] = b"SWNCKPT\0";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: serde_json::Value,
    pub banks: BTreeMap<BankId, Vec<DenseArray<T>>>,
    pub coefficients: BTreeMap<CoeffId, (SlotId, DenseArray<T>)>,
    /// Unshared arrays (biases, heads) by name.
    pub arrays: BTreeMap<String, DenseArray<T>>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_values<T: Scalar>(out: &mut Vec<u8>, a: &DenseArray<T>) {
    for &v in a.values() {
        v.write_le(out);
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::PRECISION.byte_width() as u8);
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);

        put_u32(&mut out, self.banks.len());
        for (id, templates) in &self.banks {
            let first = templates
                .first()
                .ok_or_else(|| Error::Checkpoint(format!("bank {id} has no templates")))?;
            if first.shape().len() != 4 || templates.iter().any(|t| t.shape() != first.shape()) {
                return Err(Error::Checkpoint(format!("bank {id} templates must share one 4-d shape")));
            }
            put_u32(&mut out, id.0 as usize);
            put_u32(&mut out, templates.len());
            for &d in first.shape() {
                put_u32(&mut out, d);
            }
            for t in templates {
                put_values(&mut out, t);
            }
        }

        put_u32(&mut out, self.coefficients.len());
        for (id, (slot, alpha)) in &self.coefficients {
            put_u32(&mut out, id.0 as usize);
            put_u32(&mut out, slot.0 as usize);
            put_u32(&mut out, alpha.len());
            put_values(&mut out, alpha);
        }

        put_u32(&mut out, self.arrays.len());
        for (name, a) in &self.arrays {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, a.shape().len());
            for &d in a.shape() {
                put_u32(&mut out, d);
            }
            put_values(&mut out, a);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let width = r.take(1)?[0];
        if Precision::from_byte_width(width) != Some(T::PRECISION) {
            return Err(Error::Checkpoint(format!(
                "stored element width {width} does not match requested {:?}",
                T::PRECISION
            )));
        }
        let meta_len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
        let meta = serde_json::from_slice(r.take(meta_len)?)?;

        let mut banks = BTreeMap::new();
        for _ in 0..r.u32()? {
            let id = BankId(r.u32()? as u32);
            let n = r.u32()?;
            let shape = (0..4).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let templates = (0..n).map(|_| r.array::<T>(shape.clone())).collect::<Result<Vec<_>>>()?;
            banks.insert(id, templates);
        }

        let mut coefficients = BTreeMap::new();
        for _ in 0..r.u32()? {
            let id = CoeffId(r.u32()? as u32);
            let slot = SlotId(r.u32()? as u32);
            let len = r.u32()?;
            coefficients.insert(id, (slot, r.array::<T>(vec![len])?));
        }

        let mut arrays = BTreeMap::new();
        for _ in 0..r.u32()? {
            let len = r.u32()?;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint(format!("array name at byte {} is not utf-8", r.pos - len)))?;
            let ndim = r.u32()?;
            let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            arrays.insert(name, r.array::<T>(shape)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            meta,
            banks,
            coefficients,
            arrays,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let bytes = self.encode()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Element precision recorded in a checkpoint header.
pub fn checkpoint_precision(bytes: &[u8]) -> Result<Precision> {
    if bytes.len() < 11 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    Precision::from_byte_width(bytes[10]).ok_or_else(|| Error::Checkpoint(format!("unknown element width {}", bytes[10])))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {}: need {n} more bytes", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn array<T: Scalar>(&mut self, shape: Vec<usize>) -> Result<DenseArray<T>> {
        let numel: usize = shape.iter().product();
        let w = T::PRECISION.byte_width();
        let raw = self.take(numel.checked_mul(w).ok_or_else(|| Error::Checkpoint("array too large".into()))?)?;
        let values = raw.chunks_exact(w).map(T::read_le).collect();
        DenseArray::new(shape, values).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f32> {
        let t = |seed: f32| DenseArray::from_fn(&[2, 3, 1, 1], |i| seed * (i as f32 + 0.1).sin());
        Checkpoint {
            meta: serde_json::json!({"plan": {"clusters": [[0, 1]]}}),
            banks: BTreeMap::from([(BankId(0), vec![t(1.0), t(-2.5)]), (BankId(4), vec![t(f32::MIN_POSITIVE)])]),
            coefficients: BTreeMap::from([(CoeffId(3), (SlotId(0), DenseArray::from_fn(&[2], |i| 0.5 + i as f32)))]),
            arrays: BTreeMap::from([("head.0.bias".to_string(), DenseArray::from_fn(&[3], |i| -(i as f32)))]),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.encode().unwrap();
        let back = Checkpoint::<f32>::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode().unwrap(), bytes);
        assert_eq!(checkpoint_precision(&bytes).unwrap(), Precision::F32);
    }

    #[test]
    fn wrong_precision_and_truncation_are_errors() {
        let bytes = sample().encode().unwrap();
        assert!(matches!(Checkpoint::<f64>::decode(&bytes), Err(Error::Checkpoint(_))));
        assert!(matches!(Checkpoint::<f32>::decode(&bytes[..bytes.len() - 1]), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::<f32>::decode(&bad), Err(Error::Checkpoint(_))));
    }
}

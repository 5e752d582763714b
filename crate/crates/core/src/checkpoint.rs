//! Flat binary checkpoint of named tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MGK1"
//! repeated until end of file:
//!     u32 name length, name bytes (UTF-8)
//!     u32 rank, rank × u64 dims
//!     product(dims) × f64 values
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::MaskedNetwork;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MGK1";

pub fn encode(entries: &[(String, Tensor<f64>)]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::format(
                    "checkpoint",
                    format!("truncated while reading {what} at byte {}", self.pos),
                )
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f64>)>> {
    if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
        return Err(Error::format("checkpoint", "bad magic (expected MGK1)"));
    }
    let mut r = Reader { bytes, pos: 4 };
    let mut entries = Vec::new();
    while r.pos < bytes.len() {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::format("checkpoint", "entry name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64("shape")? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&c| c.checked_mul(8).is_some_and(|b| b <= bytes.len() - r.pos))
            .ok_or_else(|| {
                Error::format(
                    "checkpoint",
                    format!("{name}: shape {shape:?} exceeds file size"),
                )
            })?;
        let raw = r.take(count * 8, "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| Error::format("checkpoint", format!("{name}: {e}")))?;
        entries.push((name, t));
    }
    Ok(entries)
}

pub fn save<S: Scalar>(net: &MaskedNetwork<S>, path: &Path) -> Result<()> {
    fs::write(path, encode(&net.to_entries())).map_err(|e| Error::io(path, e))
}

pub fn load<S: Scalar>(path: &Path) -> Result<MaskedNetwork<S>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    MaskedNetwork::from_entries(decode(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor<f64>)> {
        vec![
            ("a".into(), Tensor::from_f64(vec![2], &[1.5, -2.0]).unwrap()),
            (
                "bb".into(),
                Tensor::from_f64(vec![1, 2, 1], &[3.0, 4.0]).unwrap(),
            ),
        ]
    }

    #[test]
    fn round_trips_entries() {
        let bytes = encode(&sample());
        assert_eq!(&bytes[..4], b"MGK1");
        assert_eq!(decode(&bytes).unwrap(), sample());
    }

    #[test]
    fn truncation_and_bad_magic_are_format_errors() {
        let bytes = encode(&sample());
        for cut in [3, 5, 10, bytes.len() - 1] {
            assert!(
                matches!(decode(&bytes[..cut]), Err(Error::Format { .. })),
                "cut {cut}"
            );
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format { .. })));
    }

    #[test]
    fn absurd_shape_is_rejected_without_allocating() {
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(b'x');
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Format { .. })));
    }
}

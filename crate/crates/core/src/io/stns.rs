//! STNS1 binary tensor files.
//!
//! Layout: the five ASCII bytes `STNS1`, one `u8` rank (1..=4), `rank`
//! little-endian `u32` extents, then the values as little-endian `f64` in
//! row-major order. Nothing follows the last value.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"STNS1";

fn fmt_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        offset,
        reason: reason.into(),
    }
}

/// Serializes a finite tensor.
pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    if let Some(loc) = t.first_non_finite() {
        return Err(Error::NonFinite {
            name: "tensor to write".into(),
            location: Some(loc),
        });
    }
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + 8 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Validation(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(fmt_err(0, "bad magic, expected STNS1"));
    }
    let mut pos = MAGIC.len();
    let rank = *bytes.get(pos).ok_or_else(|| fmt_err(pos, "truncated: missing rank"))? as usize;
    if !(1..=4).contains(&rank) {
        return Err(fmt_err(pos, format!("rank {rank} outside 1..=4")));
    }
    pos += 1;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let b = bytes
            .get(pos..pos + 4)
            .ok_or_else(|| fmt_err(pos, "truncated: missing extent"))?;
        let d = u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
        if d == 0 {
            return Err(fmt_err(pos, "zero extent"));
        }
        shape.push(d);
        pos += 4;
    }
    let n: usize = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| fmt_err(MAGIC.len() + 1, "element count overflows"))?;
    let need = n
        .checked_mul(8)
        .and_then(|b| b.checked_add(pos))
        .ok_or_else(|| fmt_err(pos, "payload size overflows"))?;
    if bytes.len() < need {
        let whole = pos + (bytes.len() - pos) / 8 * 8;
        return Err(fmt_err(whole, format!("truncated payload: expected {n} values")));
    }
    if bytes.len() > need {
        return Err(fmt_err(need, "trailing bytes after payload"));
    }
    let data = bytes[pos..need]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(&shape, data)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(t)?;
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_tensor(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    #[test]
    fn round_trip_is_bitwise() {
        let mut r = Xoshiro256PlusPlus::seed_from_u64(0);
        let t = Tensor::randn(&[3, 4, 5], &mut r);
        let back = decode_tensor(&encode_tensor(&t).unwrap()).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn header_bytes() {
        let t = Tensor::new(&[2], vec![1.0, -0.5]).unwrap();
        let b = encode_tensor(&t).unwrap();
        assert_eq!(&b[..10], &[b'S', b'T', b'N', b'S', b'1', 1, 2, 0, 0, 0]);
        assert_eq!(&b[10..18], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 26);
    }

    #[test]
    fn empty_extent_is_rejected() {
        assert!(matches!(Tensor::new(&[0], vec![]), Err(Error::Validation(_))));
    }

    #[test]
    fn non_finite_is_not_written() {
        let t = Tensor::new(&[2], vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(encode_tensor(&t), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn format_errors_carry_offsets() {
        let off = |b: &[u8]| match decode_tensor(b) {
            Err(Error::Format { offset, .. }) => offset,
            other => panic!("{other:?}"),
        };
        assert_eq!(off(b"XXXX"), 0);
        assert_eq!(off(b"STNS1"), 5);
        assert_eq!(off(b"STNS1\x07"), 5);
        assert_eq!(off(b"STNS1\x01\x02\x00"), 6);
        assert_eq!(off(b"STNS1\x01\x00\x00\x00\x00"), 6);
        let good = encode_tensor(&Tensor::new(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(off(&good[..good.len() - 3]), 18);
        let mut long = good.clone();
        long.push(0);
        assert_eq!(off(&long), 26);
    }
}

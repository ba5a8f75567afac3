//! `VFT1` portable tensor container.
//!
//! Layout: `b"VFT1"`, `u32` rank, `rank × u32` dims, then `f32` payload.
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"VFT1";

pub fn encode_tensor(shape: &[usize], data: &[f32], out: &mut Vec<u8>) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(Error::dim(
            "encode_tensor",
            format!("shape {shape:?} vs {} values", data.len()),
        ));
    }
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Format(format!(
            "truncated tensor: need {n} bytes, {} left",
            buf.len()
        )));
    }
    let (head, tail) = buf.split_at(n);
    *buf = tail;
    Ok(head)
}

pub(crate) fn read_u32(buf: &mut &[u8]) -> Result<u32> {
    let b = take(buf, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

pub(crate) fn read_bytes<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    take(buf, n)
}

/// Decodes one tensor from the front of `buf`, advancing it.
pub fn decode_tensor(buf: &mut &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    let magic = take(buf, 4)?;
    if magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let rank = read_u32(buf)? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(buf)? as usize);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
    let payload = take(buf, count.checked_mul(4).ok_or_else(|| Error::Format("tensor size overflows".into()))?)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((shape, data))
}

pub fn write_tensor_file(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    let mut buf = Vec::new();
    encode_tensor(shape, data, &mut buf)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = bytes.as_slice();
    let out = decode_tensor(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensor",
            cursor.len()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_little_endian() {
        let mut buf = Vec::new();
        encode_tensor(&[2], &[1.0, -2.0], &mut buf).unwrap();
        let mut want = b"VFT1".to_vec();
        want.extend_from_slice(&[1, 0, 0, 0, 2, 0, 0, 0]);
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut buf = Vec::new();
        encode_tensor(&[3], &[1.0, 2.0, 3.0], &mut buf).unwrap();
        let mut cut = &buf[..buf.len() - 1];
        assert!(matches!(decode_tensor(&mut cut), Err(Error::Format(_))));
        buf[0] = b'X';
        assert!(matches!(decode_tensor(&mut buf.as_slice()), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(dims in prop::collection::vec(1usize..5, 0..4), seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| f32::from_bits(seed.wrapping_add(i as u32 * 2654435761))).collect();
            let mut buf = Vec::new();
            encode_tensor(&dims, &data, &mut buf).unwrap();
            let mut cur = buf.as_slice();
            let (shape, back) = decode_tensor(&mut cur).unwrap();
            prop_assert!(cur.is_empty());
            prop_assert_eq!(shape, dims);
            let a: Vec<u32> = data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}

//! `STNS1` binary tensor files: the 5-byte magic `STNS1`, a `u8` rank, `rank`
//! little-endian `u32` extents, then the `f32` little-endian payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 5] = b"STNS1";

pub fn write<T: Scalar, W: Write>(tensor: &Tensor<T>, mut out: W) -> Result<()> {
    let rank = u8::try_from(tensor.rank())
        .map_err(|_| TensorError::Format(format!("rank {} exceeds 255", tensor.rank())))?;
    let mut buf = Vec::with_capacity(6 + 4 * tensor.rank() + 4 * tensor.len());
    buf.extend_from_slice(MAGIC);
    buf.push(rank);
    for &extent in tensor.shape() {
        let e = u32::try_from(extent)
            .map_err(|_| TensorError::Format(format!("extent {extent} exceeds u32")))?;
        buf.extend_from_slice(&e.to_le_bytes());
    }
    for &v in tensor.data() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read<T: Scalar, R: Read>(mut input: R) -> Result<Tensor<T>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    if bytes.len() < 6 || &bytes[..5] != MAGIC {
        return Err(TensorError::Format("missing STNS1 magic".into()));
    }
    let rank = bytes[5] as usize;
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(TensorError::Format("truncated shape header".into()));
    }
    let shape: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let n: usize = shape.iter().product();
    let payload = &bytes[header..];
    if payload.len() != 4 * n {
        return Err(TensorError::Format(format!(
            "payload has {} bytes, shape {shape:?} needs {}",
            payload.len(),
            4 * n
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| T::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(&shape, data).map_err(|e| TensorError::Format(e.to_string()))
}

pub fn save<T: Scalar>(tensor: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write(tensor, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::<f32>::new(&[2, 1], vec![1.0, -0.5]).unwrap();
        let mut buf = Vec::new();
        write(&t, &mut buf).unwrap();
        let mut expected = b"STNS1".to_vec();
        expected.push(2);
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-0.5f32).to_le_bytes());
        assert_eq!(buf, expected);
        assert_eq!(decode::<f32>(&buf).unwrap(), t);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(decode::<f32>(b"STNS2\x01\x01\x00\x00\x00").is_err());
        let t = Tensor::<f32>::zeros(&[3]).unwrap();
        let mut buf = Vec::new();
        write(&t, &mut buf).unwrap();
        buf.pop();
        assert!(decode::<f32>(&buf).is_err());
    }
}

//! TNSR: `b"TNSR"`, u32 LE rank, rank × u32 LE dims, row-major f32 LE payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const TNSR_MAGIC: &[u8; 4] = b"TNSR";

pub fn write_tnsr_to<W: Write>(mut w: W, t: &Tensor) -> std::io::Result<()> {
    w.write_all(TNSR_MAGIC)?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

pub fn write_tnsr(path: &Path, t: &Tensor) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_tnsr_to(BufWriter::new(file), t).map_err(|e| Error::io(path, e))
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Parses one TNSR stream; `origin` only labels errors.
pub fn read_tnsr_from<R: Read>(mut r: R, origin: &Path) -> Result<Tensor> {
    let truncated = |e: std::io::Error| Error::format(origin, format!("truncated TNSR stream: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != TNSR_MAGIC {
        return Err(Error::format(origin, format!("bad magic {magic:?}, expected TNSR")));
    }
    let rank = read_u32(&mut r).map_err(truncated)? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::format(origin, format!("unsupported rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(&mut r).map_err(truncated)? as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n > 0 && n < (1 << 30))
        .ok_or_else(|| Error::format(origin, format!("invalid dims {shape:?}")))?;
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(truncated)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(origin, e))? != 0 {
        return Err(Error::format(origin, "trailing bytes after TNSR payload"));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::format(origin, e.to_string()))
}

pub fn read_tnsr(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tnsr_from(BufReader::new(file), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn encode(t: &Tensor) -> Vec<u8> {
        let mut buf = Vec::new();
        write_tnsr_to(&mut buf, t).unwrap();
        buf
    }

    #[test]
    fn layout_is_exact() {
        let t = Tensor::new([2, 1], vec![1.0, -2.5]).unwrap();
        let mut expected = b"TNSR".to_vec();
        expected.extend(2u32.to_le_bytes());
        expected.extend(2u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-2.5f32).to_le_bytes());
        assert_eq!(encode(&t), expected);
    }

    #[test]
    fn corrupted_magic_is_format_error() {
        let mut bytes = encode(&Tensor::scalar(1.0));
        bytes[0] = b'X';
        let err = read_tnsr_from(bytes.as_slice(), Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let bytes = encode(&Tensor::zeros([4, 4]).unwrap());
        let err = read_tnsr_from(&bytes[..bytes.len() - 3], Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(dims in prop::collection::vec(1usize..5, 1..4), bits in prop::collection::vec(any::<u32>(), 64)) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| f32::from_bits(bits[i % bits.len()])).collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = read_tnsr_from(encode(&t).as_slice(), Path::new("mem")).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let a: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}

//! `MMN1` named-tensor container: magic, u32 count, then per tensor a u32 name
//! length, UTF-8 name, u8 rank, u32 dims and little-endian f64 data.

use super::Tensor;
use alloc::string::String;
use alloc::vec::Vec;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MMN1";

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("truncated checkpoint at byte {0}")]
    Truncated(usize),
    #[error("tensor name is not UTF-8")]
    BadName,
    #[error("{0} trailing bytes after last tensor")]
    TrailingBytes(usize),
    #[error("tensor too large to encode")]
    TooLarge,
}

pub fn encode_checkpoint(tensors: &[(String, Tensor)]) -> Result<Vec<u8>, CheckpointError> {
    let u32_of = |n: usize| u32::try_from(n).map_err(|_| CheckpointError::TooLarge);
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&u32_of(tensors.len())?.to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&u32_of(name.len())?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(u8::try_from(t.rank()).map_err(|_| CheckpointError::TooLarge)?);
        for &d in &t.shape {
            out.extend_from_slice(&u32_of(d)?.to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
    }
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = core::str::from_utf8(r.take(len)?).map_err(|_| CheckpointError::BadName)?;
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or(CheckpointError::TooLarge)?;
        let raw = r.take(numel)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let tensor = Tensor::new(&shape, data).expect("length derived from shape");
        out.push((String::from(name), tensor));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            ("w".into(), Tensor::new(&[2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap()),
            ("s".into(), Tensor::scalar(0.25)),
        ]
    }

    #[test]
    fn round_trip() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        for ((n1, t1), (n2, t2)) in sample().iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape, t2.shape);
            let b1: Vec<u64> = t1.data.iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs() {
        let mut bytes = encode_checkpoint(&sample()).unwrap();
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 1]),
            Err(CheckpointError::Truncated(_))
        ));
        bytes.push(0);
        assert_eq!(decode_checkpoint(&bytes), Err(CheckpointError::TrailingBytes(1)));
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint(&bytes), Err(CheckpointError::BadMagic(_))));
    }
}

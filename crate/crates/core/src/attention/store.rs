//! Weight file: little-endian binary so runs can be reproduced across
//! processes.
//!
//! ```text
//! magic      4 bytes  "SRGW"
//! version    u32      1
//! seed       u64
//! count      u32      number of tensors
//! per tensor u32 rows, u32 cols, rows*cols f32 (row-major)
//! ```

use nalgebra::DMatrix;

use super::weights::{Parameters, RngSeed};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SRGW";
const VERSION: u32 = 1;

pub fn encode_weights(seed: RngSeed, params: &mut dyn Parameters) -> Vec<u8> {
    let mut tensors = Vec::new();
    params.visit(&mut |m| tensors.push(m.clone()));
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&seed.0.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in &tensors {
        out.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
        for r in 0..t.nrows() {
            for c in 0..t.ncols() {
                out.extend_from_slice(&(t[(r, c)] as f32).to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::parse(self.pos, "truncated weight file"))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Overwrites every tensor of `params` from `bytes`; shapes must agree.
/// Returns the seed recorded in the header.
pub fn decode_weights(bytes: &[u8], params: &mut dyn Parameters) -> Result<RngSeed> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::parse(0, "not a weight file (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::parse(4, format!("unsupported weight file version {version}")));
    }
    let seed = RngSeed(u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")));
    let count_at = r.pos;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.pos;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let data = r.take(rows * cols * 4)?;
        let vals: Vec<f64> = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        tensors.push((at, DMatrix::from_row_slice(rows, cols, &vals)));
    }
    if r.pos != bytes.len() {
        return Err(Error::parse(r.pos, "trailing bytes after last tensor"));
    }
    let mut expected = 0;
    params.visit(&mut |_| expected += 1);
    if expected != count {
        return Err(Error::parse(count_at, format!("file has {count} tensors, model expects {expected}")));
    }
    let mut it = tensors.into_iter();
    let mut err = None;
    params.visit(&mut |m| {
        let (at, t) = it.next().expect("count checked");
        if err.is_none() {
            if t.shape() != m.shape() {
                err = Some(Error::parse(at, format!("tensor shape {:?}, model expects {:?}", t.shape(), m.shape())));
            } else {
                *m = t;
            }
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::weights::{AttentionWeights, WeightInit};

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut w = AttentionWeights::random(&mut WeightInit::new(RngSeed(9)), 8, 2).unwrap();
        let bytes = encode_weights(RngSeed(9), &mut w);
        let mut blank = AttentionWeights::new(DMatrix::zeros(8, 8), DMatrix::zeros(8, 8), DMatrix::zeros(8, 8), 2, None).unwrap();
        let seed = decode_weights(&bytes, &mut blank).unwrap();
        assert_eq!(seed, RngSeed(9));
        assert_eq!(blank, w);
    }

    #[test]
    fn rejects_bad_files() {
        let mut w = AttentionWeights::random(&mut WeightInit::new(RngSeed(1)), 4, 1).unwrap();
        let bytes = encode_weights(RngSeed(1), &mut w);
        assert!(decode_weights(&bytes[..bytes.len() - 1], &mut w.clone()).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_weights(&bad, &mut w.clone()), Err(Error::Parse { offset: 0, .. })));
        let mut other = AttentionWeights::random(&mut WeightInit::new(RngSeed(1)), 8, 1).unwrap();
        assert!(decode_weights(&bytes, &mut other).is_err());
    }
}

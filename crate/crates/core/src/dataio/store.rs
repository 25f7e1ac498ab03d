//! Binary feature store.
//!
//! Layout, little-endian:
//!
//! ```text
//! magic   b"RFQ1"      4 bytes
//! version u32 = 1
//! dim     u32
//! count   u64
//! data    count * dim f64, row-major
//! ```

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

pub const STORE_MAGIC: [u8; 4] = *b"RFQ1";
pub const STORE_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {found:?}, expected \"RFQ1\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported feature store version {0}")]
    UnsupportedVersion(u32),
    #[error("vector {index} has length {found}, store dim is {expected}")]
    DimMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("truncated feature store: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("feature store has {0} trailing bytes")]
    TrailingBytes(u64),
}

pub fn encode_feature_store(vectors: &[Vec<f64>], dim: usize) -> Result<Vec<u8>, StoreError> {
    if let Some((index, v)) = vectors.iter().enumerate().find(|(_, v)| v.len() != dim) {
        return Err(StoreError::DimMismatch {
            index,
            expected: dim,
            found: v.len(),
        });
    }
    let dim32 = u32::try_from(dim).map_err(|_| StoreError::DimMismatch {
        index: 0,
        expected: u32::MAX as usize,
        found: dim,
    })?;
    let mut out = Vec::with_capacity(HEADER_LEN + vectors.len() * dim * 8);
    out.extend_from_slice(&STORE_MAGIC);
    out.extend_from_slice(&STORE_VERSION.to_le_bytes());
    out.extend_from_slice(&dim32.to_le_bytes());
    out.extend_from_slice(&(vectors.len() as u64).to_le_bytes());
    for v in vectors {
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_feature_store(bytes: &[u8]) -> Result<(usize, Vec<Vec<f64>>), StoreError> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && bytes[..4] != STORE_MAGIC {
            return Err(StoreError::BadMagic {
                found: bytes[..4].try_into().unwrap(),
            });
        }
        return Err(StoreError::Truncated {
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != STORE_MAGIC {
        return Err(StoreError::BadMagic { found: magic });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != STORE_VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let expected = (count as u128) * (dim as u128) * 8 + HEADER_LEN as u128;
    let found = bytes.len() as u128;
    if found < expected {
        return Err(StoreError::Truncated {
            expected: expected.min(u64::MAX as u128) as u64,
            found: found as u64,
        });
    }
    if found > expected {
        return Err(StoreError::TrailingBytes((found - expected) as u64));
    }
    let body = &bytes[HEADER_LEN..];
    let vectors = (0..count as usize)
        .map(|r| {
            (0..dim)
                .map(|c| {
                    let off = (r * dim + c) * 8;
                    f64::from_le_bytes(body[off..off + 8].try_into().unwrap())
                })
                .collect()
        })
        .collect();
    Ok((dim, vectors))
}

pub fn write_feature_store(vectors: &[Vec<f64>], dim: usize, path: impl AsRef<Path>) -> Result<(), StoreError> {
    let bytes = encode_feature_store(vectors, dim)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_feature_store(path: impl AsRef<Path>) -> Result<(usize, Vec<Vec<f64>>), StoreError> {
    decode_feature_store(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip_three_vectors() {
        let vs = vec![
            vec![1.0, -2.5, 3.25, 0.0],
            vec![f64::MIN_POSITIVE, -0.0, 1e300, 7.0],
            vec![0.1, 0.2, 0.3, 0.4],
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.rfq");
        write_feature_store(&vs, 4, &p).unwrap();
        let (dim, back) = read_feature_store(&p).unwrap();
        assert_eq!(dim, 4);
        let bits = |v: &Vec<Vec<f64>>| v.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&vs));
    }

    #[test]
    fn empty_store_is_valid() {
        let bytes = encode_feature_store(&[], 16).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN);
        let (dim, back) = decode_feature_store(&bytes).unwrap();
        assert_eq!((dim, back.len()), (16, 0));
    }

    #[test]
    fn distinct_errors() {
        let mut bytes = encode_feature_store(&[vec![1.0, 2.0]], 2).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_feature_store(&bad), Err(StoreError::BadMagic { .. })));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            decode_feature_store(&bad),
            Err(StoreError::UnsupportedVersion(9))
        ));

        assert!(matches!(
            decode_feature_store(&bytes[..bytes.len() - 3]),
            Err(StoreError::Truncated { .. })
        ));
        assert!(matches!(
            decode_feature_store(&bytes[..7]),
            Err(StoreError::Truncated { .. })
        ));

        bytes.push(0);
        assert!(matches!(
            decode_feature_store(&bytes),
            Err(StoreError::TrailingBytes(1))
        ));

        assert!(matches!(
            encode_feature_store(&[vec![1.0, 2.0], vec![1.0]], 2),
            Err(StoreError::DimMismatch { index: 1, .. })
        ));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(dim in 1usize..6, rows in prop::collection::vec(prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO | prop::num::f64::SUBNORMAL, 5), 0..8)) {
            let vs: Vec<Vec<f64>> = rows.into_iter().map(|r| r.into_iter().take(dim).collect()).collect();
            let bytes = encode_feature_store(&vs, dim).unwrap();
            let (d, back) = decode_feature_store(&bytes).unwrap();
            prop_assert_eq!(d, dim);
            for (a, b) in vs.iter().flatten().zip(back.iter().flatten()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}

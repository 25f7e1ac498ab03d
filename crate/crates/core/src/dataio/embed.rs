//! Deterministic bag-of-tokens text embedder.
//!
//! Stands in for a frozen sentence encoder when generating synthetic data:
//! every whitespace token is hashed to a pseudo-random ±1 vector, the token
//! vectors are summed and the sum is L2-normalized. Identical texts map to
//! identical vectors, and shared tokens raise cosine similarity.

use super::DataError;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn accumulate_token(token: &str, acc: &mut [f64]) {
    let mut state = fnv1a(token.as_bytes());
    for chunk in acc.chunks_mut(64) {
        let bits = splitmix64(&mut state);
        for (k, v) in chunk.iter_mut().enumerate() {
            *v += if (bits >> k) & 1 == 1 { 1.0 } else { -1.0 };
        }
    }
}

pub fn deterministic_embed(text: &str, dim: usize) -> Result<Vec<f64>, DataError> {
    let mut acc = vec![0.0; dim];
    let mut tokens = 0usize;
    for token in text.split_whitespace() {
        accumulate_token(token, &mut acc);
        tokens += 1;
    }
    if tokens == 0 || dim == 0 {
        return Err(DataError::EmptyText);
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        // token vectors cancelled exactly; fall back to the first token alone
        acc.iter_mut().for_each(|v| *v = 0.0);
        accumulate_token(text.split_whitespace().next().unwrap(), &mut acc);
        let n = (dim as f64).sqrt();
        acc.iter_mut().for_each(|v| *v /= n);
        return Ok(acc);
    }
    acc.iter_mut().for_each(|v| *v /= norm);
    Ok(acc)
}

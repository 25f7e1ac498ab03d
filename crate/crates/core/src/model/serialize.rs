//! Model file format.
//!
//! ```text
//! "RFQM" | u32 version | u64 config_len | config JSON
//! u64 n_params | n_params × (u32 name_len | name | u32 ndim | ndim × u64 | f64 data)
//! ```
//!
//! All integers and floats are little-endian. Parameters appear in
//! registration order, so encoding is a pure function of the state.

use std::collections::BTreeSet;
use std::path::Path;

use super::{ModelConfig, ModelError, ModelState};

pub const MODEL_MAGIC: [u8; 4] = *b"RFQM";
pub const MODEL_VERSION: u32 = 1;

pub fn encode_model(state: &ModelState) -> Vec<u8> {
    let config = serde_json::to_vec(&state.config).expect("config serializes");
    let mut out = Vec::with_capacity(64 + config.len() + state.registry.num_scalars() * 8);
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(state.registry.len() as u64).to_le_bytes());
    for (_, name, value) in state.registry.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(value.shape().len() as u32).to_le_bytes());
        for &d in value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for x in value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], ModelError> {
        if self.bytes.len() - self.pos < n {
            return Err(ModelError::Truncated { what });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &'static str) -> Result<usize, ModelError> {
        let n = self.u64(what)?;
        usize::try_from(n).map_err(|_| ModelError::Truncated { what })
    }
}

/// Rebuilds the architecture from the embedded config, then overwrites every
/// parameter with the stored values.
pub fn decode_model(bytes: &[u8]) -> Result<ModelState, ModelError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MODEL_MAGIC {
        return Err(ModelError::BadMagic { found: magic });
    }
    let version = r.u32("version")?;
    if version != MODEL_VERSION {
        return Err(ModelError::UnsupportedVersion {
            found: version,
            expected: MODEL_VERSION,
        });
    }
    let config_len = r.len("config length")?;
    let config: ModelConfig =
        serde_json::from_slice(r.take(config_len, "config")?).map_err(|e| ModelError::BadConfig(e.to_string()))?;
    // refuse configs whose parameters cannot fit in the rest of the file
    // before allocating them
    let remaining = bytes.len() - r.pos;
    match config.parameter_count().and_then(|n| n.checked_mul(8)) {
        Some(need) if need <= remaining => {}
        _ => return Err(ModelError::Truncated { what: "parameter data" }),
    }
    let mut state = ModelState::new(config)?;

    let n_params = r.len("parameter count")?;
    let mut seen = BTreeSet::new();
    for _ in 0..n_params {
        let name_len = r.u32("parameter name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "parameter name")?)
            .map_err(|_| ModelError::BadConfig("parameter name is not UTF-8".into()))?
            .to_string();
        let id = state
            .registry
            .id(&name)
            .ok_or_else(|| ModelError::UnknownParam(name.clone()))?;
        if !seen.insert(id) {
            return Err(ModelError::DuplicateParam(name));
        }
        let ndim = r.u32("parameter rank")? as usize;
        let expected = state.registry.value(id).shape().to_vec();
        // bound the rank before allocating; any mismatch is a shape error anyway
        if ndim > 8 {
            return Err(ModelError::ParamShape {
                name,
                expected,
                found: vec![0; ndim.min(16)],
            });
        }
        let found = (0..ndim)
            .map(|_| r.len("parameter shape"))
            .collect::<Result<Vec<_>, _>>()?;
        if found != expected {
            return Err(ModelError::ParamShape { name, expected, found });
        }
        let value = state.registry.value_mut(id);
        let raw = r.take(value.len() * 8, "parameter data")?;
        for (dst, chunk) in value.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        if !value.is_finite() {
            return Err(ModelError::NonFiniteParam(name));
        }
    }
    if let Some(missing) = state.registry.ids().find(|id| !seen.contains(id)) {
        return Err(ModelError::MissingParam(state.registry.name(missing).to_string()));
    }
    if r.pos != bytes.len() {
        return Err(ModelError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(state)
}

pub fn save_model(state: &ModelState, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    std::fs::write(path, encode_model(state)).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelState, ModelError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_model(&bytes)
}

/// [`load_model`], failing with the differing field names when the file's
/// config is not `expected`.
pub fn load_model_with_config(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<ModelState, ModelError> {
    let state = load_model(path)?;
    let fields = expected.diff(&state.config);
    if !fields.is_empty() {
        return Err(ModelError::ConfigMismatch(fields));
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_v: 4,
            d_s: 3,
            d_h: 5,
            tau: 0.65,
            seed: 3,
            ..ModelConfig::default()
        }
    }

    fn perturbed() -> ModelState {
        let mut s = ModelState::new(cfg()).unwrap();
        let mut rng = Rng::new(1);
        let ids: Vec<_> = s.registry.ids().collect();
        for id in ids {
            s.registry
                .value_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.normal() * 1e-3);
        }
        s
    }

    #[test]
    fn round_trip_bit_exact() {
        let s = perturbed();
        let bytes = encode_model(&s);
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(encode_model(&back), bytes);
    }

    #[test]
    fn every_truncation_is_a_typed_error() {
        let bytes = encode_model(&perturbed());
        for cut in (0..bytes.len()).step_by(7) {
            assert!(decode_model(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_model(&extra), Err(ModelError::TrailingBytes(1))));
    }

    #[test]
    fn header_errors() {
        let mut bytes = encode_model(&perturbed());
        bytes[4] = 9;
        assert!(matches!(
            decode_model(&bytes),
            Err(ModelError::UnsupportedVersion { found: 9, .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(decode_model(&bytes), Err(ModelError::BadMagic { .. })));
    }

    #[test]
    fn tampered_dims_rejected() {
        let bytes = encode_model(&perturbed());
        let at = bytes.windows(7).position(|w| w == b"\"d_v\":4").unwrap();
        let mut tampered = bytes.clone();
        tampered[at + 6] = b'5';
        assert!(matches!(decode_model(&tampered), Err(ModelError::ParamShape { .. })));
        // a huge width must not be allocated
        let mut huge = bytes[..at + 6].to_vec();
        huge.extend_from_slice(b"4000000000");
        huge.extend_from_slice(&bytes[at + 7..]);
        let len_at = 8;
        let new_len = u64::from_le_bytes(bytes[len_at..len_at + 8].try_into().unwrap()) + 9;
        huge[len_at..len_at + 8].copy_from_slice(&new_len.to_le_bytes());
        assert!(matches!(decode_model(&huge), Err(ModelError::Truncated { .. })));
    }

    #[test]
    fn config_mismatch_names_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rfqm");
        save_model(&perturbed(), &path).unwrap();
        let other = ModelConfig {
            d_h: 6,
            dropout: 0.2,
            ..cfg()
        };
        match load_model_with_config(&path, &other) {
            Err(ModelError::ConfigMismatch(f)) => assert_eq!(f, vec!["d_h", "dropout"]),
            other => panic!("unexpected {other:?}"),
        }
        assert!(load_model_with_config(&path, &cfg()).is_ok());
    }
}

//! On-disk dataset format, loading, splitting and synthetic generation.

mod dataset;
mod embed;
mod store;
mod synth;

use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub use dataset::{
    load_dataset, random_split, write_dataset, Dataset, Dims, Sample, Split, ALIGN_STORE, MANIFEST_FILE, PROMPT_STORE,
    RENORM_BAND, UNIT_NORM_TOL, VISUAL_STORE,
};
pub use embed::deterministic_embed;
pub use store::{
    decode_feature_store, encode_feature_store, read_feature_store, write_feature_store, StoreError, STORE_MAGIC,
    STORE_VERSION,
};
pub use synth::{generate_synthetic, generate_synthetic_with_truth, SynthSpec, SynthTruth};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Store { path: PathBuf, source: StoreError },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("sample `{id}` references row {row}, but the feature stores hold {available} rows")]
    MissingRow { id: String, row: u64, available: usize },
    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),
    #[error("sample `{id}`: {field} has dim {found}, dataset declares {expected}")]
    DimMismatch {
        id: String,
        field: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("sample `{id}`: non-finite {field}")]
    NonFinite { id: String, field: &'static str },
    #[error("sample `{id}`: prompt embedding norm {norm} is not unit")]
    PromptNorm { id: String, norm: f64 },
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("invalid synthetic spec: {0}")]
    InvalidSynthSpec(String),
    #[error("{0}")]
    Invalid(String),
}

//! Reference-aware quality scoring for generated videos over cached
//! embeddings.
//!
//! A query sample is compared against training samples whose prompts are
//! similar. Each of two branches (visual appearance, prompt alignment)
//! aggregates query-minus-reference feature differences weighted by prompt
//! similarity, gates them into the query's own feature, and a small head maps
//! both branches to a positive score. Training uses a correlation loss plus a
//! pairwise ranking hinge.
//!
//! ```no_run
//! use refscore::{dataio, model::ModelConfig, training::{self, TrainConfig}};
//!
//! let data = dataio::generate_synthetic(&dataio::SynthSpec::default()).unwrap();
//! let data = dataio::random_split(&data, 0.8, 7).unwrap();
//! let cfg = ModelConfig { d_v: 64, d_s: 64, ..ModelConfig::default() };
//! let (model, report) = training::train(&data, &cfg, &TrainConfig { lr: 1e-3, ..Default::default() }).unwrap();
//! println!("final loss {}", report.final_epoch().train_loss.total);
//! # let _ = model;
//! ```

// `!(a < b)` is used on purpose where NaN must fail the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod branch;
pub mod dataio;
pub mod metrics;
pub mod model;
pub mod numkit;
pub mod retrieval;
pub mod training;

pub use branch::{Aggregation, FeatureMode};
pub use dataio::{Dataset, Dims, Sample, Split};
pub use metrics::EvalResult;
pub use model::{ModelConfig, ModelState};
pub use retrieval::{ReferenceGraph, ReferencePool, Strategy};
pub use training::{TrainConfig, TrainReport};

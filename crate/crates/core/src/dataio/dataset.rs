use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::store::{read_feature_store, write_feature_store};
use super::DataError;
use crate::numkit::Rng;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const PROMPT_STORE: &str = "prompt.rfq";
pub const VISUAL_STORE: &str = "visual.rfq";
pub const ALIGN_STORE: &str = "align.rfq";

/// Tolerance on the prompt-embedding norm before it counts as non-unit.
pub const UNIT_NORM_TOL: f64 = 1e-6;
/// Band of norms that are renormalized (with a warning) instead of rejected.
pub const RENORM_BAND: (f64, f64) = (0.99, 1.01);

/// One video-prompt record reduced to its cached features.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub prompt: String,
    pub prompt_emb: Vec<f64>,
    pub visual: Vec<f64>,
    pub align: Vec<f64>,
    pub mos: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Feature widths: prompt embedding, visual feature, alignment feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub prompt: usize,
    pub visual: usize,
    pub align: usize,
}

/// Validated, immutable collection of samples with a train/test labelling.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dims: Dims,
    samples: Vec<Sample>,
    splits: Vec<Split>,
    index: HashMap<String, usize>,
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl Dataset {
    /// Validates every sample. Prompt embeddings slightly off unit norm are
    /// renormalized; anything further off is rejected.
    pub fn new(dims: Dims, mut samples: Vec<Sample>, splits: Vec<Split>) -> Result<Self, DataError> {
        if splits.len() != samples.len() {
            return Err(DataError::Invalid(format!(
                "{} samples but {} split labels",
                samples.len(),
                splits.len()
            )));
        }
        let mut index = HashMap::with_capacity(samples.len());
        for (i, s) in samples.iter_mut().enumerate() {
            if index.insert(s.id.clone(), i).is_some() {
                return Err(DataError::DuplicateId(s.id.clone()));
            }
            for (field, v, want) in [
                ("prompt_emb", &s.prompt_emb, dims.prompt),
                ("visual", &s.visual, dims.visual),
                ("align", &s.align, dims.align),
            ] {
                if v.len() != want {
                    return Err(DataError::DimMismatch {
                        id: s.id.clone(),
                        field,
                        expected: want,
                        found: v.len(),
                    });
                }
                if !v.iter().all(|x| x.is_finite()) {
                    return Err(DataError::NonFinite {
                        id: s.id.clone(),
                        field,
                    });
                }
            }
            if let Some(m) = s.mos {
                if !m.is_finite() {
                    return Err(DataError::NonFinite {
                        id: s.id.clone(),
                        field: "mos",
                    });
                }
            }
            let norm = l2(&s.prompt_emb);
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                if norm >= RENORM_BAND.0 && norm <= RENORM_BAND.1 {
                    log::warn!("sample {}: prompt embedding norm {norm}, renormalizing", s.id);
                    s.prompt_emb.iter_mut().for_each(|x| *x /= norm);
                } else {
                    return Err(DataError::PromptNorm { id: s.id.clone(), norm });
                }
            }
        }
        Ok(Self {
            dims,
            samples,
            splits,
            index,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    pub fn split(&self, i: usize) -> Split {
        self.splits[i]
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.index_of(id).map(|i| &self.samples[i])
    }

    /// Indices of samples in `split`, in dataset order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.splits.iter().filter(|&&s| s == split).count()
    }

    /// Same samples under a new labelling.
    pub fn with_splits(&self, splits: Vec<Split>) -> Result<Self, DataError> {
        if splits.len() != self.samples.len() {
            return Err(DataError::Invalid(format!(
                "{} samples but {} split labels",
                self.samples.len(),
                splits.len()
            )));
        }
        Ok(Self { splits, ..self.clone() })
    }
}

/// Seeded random partition with `round(train_frac * n)` training samples.
pub fn random_split(dataset: &Dataset, train_frac: f64, seed: u64) -> Result<Dataset, DataError> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(DataError::Invalid(format!(
            "train_frac must be in (0, 1), got {train_frac}"
        )));
    }
    let n = dataset.len();
    let n_train = (train_frac * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    let mut splits = vec![Split::Test; n];
    for &i in &order[..n_train.min(n)] {
        splits[i] = Split::Train;
    }
    dataset.with_splits(splits)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    id: String,
    prompt: String,
    mos: Option<f64>,
    row: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

fn sibling(manifest: &Path, name: &str) -> PathBuf {
    manifest.parent().unwrap_or_else(|| Path::new(".")).join(name)
}

fn read_store(path: PathBuf) -> Result<(usize, Vec<Vec<f64>>), DataError> {
    read_feature_store(&path).map_err(|source| DataError::Store { path, source })
}

/// Loads `manifest.jsonl` and the three feature stores next to it.
///
/// Samples without a `split` field are labelled [`Split::Train`].
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let manifest_path = manifest_path.as_ref();
    let file = fs::File::open(manifest_path).map_err(|source| DataError::Io {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    let (dp, prompts) = read_store(sibling(manifest_path, PROMPT_STORE))?;
    let (dv, visuals) = read_store(sibling(manifest_path, VISUAL_STORE))?;
    let (ds, aligns) = read_store(sibling(manifest_path, ALIGN_STORE))?;
    let rows = prompts.len().min(visuals.len()).min(aligns.len());

    let mut samples = Vec::new();
    let mut splits = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: manifest_path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestLine = serde_json::from_str(&line).map_err(|e| DataError::Manifest {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        let row = entry.row as usize;
        if row >= rows {
            return Err(DataError::MissingRow {
                id: entry.id,
                row: entry.row,
                available: rows,
            });
        }
        samples.push(Sample {
            id: entry.id,
            prompt: entry.prompt,
            prompt_emb: prompts[row].clone(),
            visual: visuals[row].clone(),
            align: aligns[row].clone(),
            mos: entry.mos,
        });
        splits.push(entry.split.unwrap_or(Split::Train));
    }
    Dataset::new(
        Dims {
            prompt: dp,
            visual: dv,
            align: ds,
        },
        samples,
        splits,
    )
}

/// Writes `manifest.jsonl` plus feature stores into `dir`; row `i` is sample `i`.
pub fn write_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<PathBuf, DataError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let dims = dataset.dims();
    let col = |f: fn(&Sample) -> &Vec<f64>| dataset.samples().iter().map(|s| f(s).clone()).collect::<Vec<_>>();
    for (name, vectors, dim) in [
        (PROMPT_STORE, col(|s| &s.prompt_emb), dims.prompt),
        (VISUAL_STORE, col(|s| &s.visual), dims.visual),
        (ALIGN_STORE, col(|s| &s.align), dims.align),
    ] {
        let path = dir.join(name);
        write_feature_store(&vectors, dim, &path).map_err(|source| DataError::Store { path, source })?;
    }
    let manifest = dir.join(MANIFEST_FILE);
    let io_err = |source| DataError::Io {
        path: manifest.clone(),
        source,
    };
    let mut out = BufWriter::new(fs::File::create(&manifest).map_err(io_err)?);
    for (i, s) in dataset.samples().iter().enumerate() {
        let line = ManifestLine {
            id: s.id.clone(),
            prompt: s.prompt.clone(),
            mos: s.mos,
            row: i as u64,
            split: Some(dataset.split(i)),
        };
        let json = serde_json::to_string(&line).expect("manifest line serializes");
        writeln!(out, "{json}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)?;
    Ok(manifest)
}

//! Run configuration: one JSON document holding `ModelConfig` and
//! `TrainConfig` fields side by side. Precedence is flags > file > defaults.
//! `seed` is shared and sets both seeds.

use std::path::{Path, PathBuf};

use clap::Args;
use refscore::{Dims, ModelConfig, TrainConfig};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::CliError;

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON file with model and training fields (flags override it)
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Training epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Peak learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// AdamW decoupled weight decay
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Weight of the ranking loss
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Fraction of steps spent in linear warmup
    #[arg(long)]
    pub warmup_frac: Option<f64>,
    /// Repeated random splits (protocol runs)
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Train fraction of each protocol split
    #[arg(long)]
    pub train_frac: Option<f64>,
    /// Seed for parameter init and for the training stream
    #[arg(long)]
    pub seed: Option<u64>,
    /// Prompt-similarity threshold for references
    #[arg(long)]
    pub tau: Option<f64>,
    /// Retrieval strategy: prompt, feature, random or batch
    #[arg(long)]
    pub strategy: Option<String>,
    /// Keep at most this many references (highest similarity first)
    #[arg(long)]
    pub max_refs: Option<usize>,
    /// References drawn by the random strategy
    #[arg(long)]
    pub random_k: Option<usize>,
    /// Reference aggregation: graph or avg
    #[arg(long)]
    pub aggregation: Option<String>,
    /// Reference feature: diff or self
    #[arg(long)]
    pub feature_mode: Option<String>,
    /// Hidden width of the fusion head
    #[arg(long)]
    pub d_h: Option<usize>,
    /// Dropout rate in the fusion head
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Remove the visual branch
    #[arg(long)]
    pub no_visual_branch: bool,
    /// Remove the alignment branch
    #[arg(long)]
    pub no_align_branch: bool,
    /// Feed the visual branch no references
    #[arg(long)]
    pub no_visual_refs: bool,
    /// Feed the alignment branch no references
    #[arg(long)]
    pub no_align_refs: bool,
}

fn field_names<T: Default + Serialize>() -> Vec<String> {
    match serde_json::to_value(T::default()) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

fn parse_as<T: DeserializeOwned>(map: Map<String, Value>, what: &str) -> Result<T, CliError> {
    serde_json::from_value(Value::Object(map)).map_err(|e| CliError::usage(format!("{what} config: {e}")))
}

pub fn read_config_file(path: &Path) -> Result<Map<String, Value>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(CliError::usage(format!(
            "{}: config must be a JSON object",
            path.display()
        ))),
        Err(e) => Err(CliError::usage(format!("{}: {e}", path.display()))),
    }
}

impl ConfigArgs {
    fn flag_values(&self) -> Vec<(&'static str, Value)> {
        let mut out = Vec::new();
        let mut put = |k: &'static str, v: Option<Value>| {
            if let Some(v) = v {
                out.push((k, v));
            }
        };
        put("epochs", self.epochs.map(Value::from));
        put("batch_size", self.batch_size.map(Value::from));
        put("lr", self.lr.map(Value::from));
        put("weight_decay", self.weight_decay.map(Value::from));
        put("gamma", self.gamma.map(Value::from));
        put("warmup_frac", self.warmup_frac.map(Value::from));
        put("repeats", self.repeats.map(Value::from));
        put("train_frac", self.train_frac.map(Value::from));
        put("seed", self.seed.map(Value::from));
        put("tau", self.tau.map(Value::from));
        put("strategy", self.strategy.clone().map(Value::from));
        put("max_refs", self.max_refs.map(Value::from));
        put("random_k", self.random_k.map(Value::from));
        put("aggregation", self.aggregation.clone().map(Value::from));
        put("feature_mode", self.feature_mode.clone().map(Value::from));
        put("d_h", self.d_h.map(Value::from));
        put("dropout", self.dropout.map(Value::from));
        put("visual_branch", self.no_visual_branch.then_some(Value::Bool(false)));
        put("align_branch", self.no_align_branch.then_some(Value::Bool(false)));
        put("visual_refs", self.no_visual_refs.then_some(Value::Bool(false)));
        put("align_refs", self.no_align_refs.then_some(Value::Bool(false)));
        out
    }

    /// Resolves both configs. Feature widths not given explicitly come from
    /// `dims`.
    pub fn resolve(&self, dims: Dims) -> Result<(ModelConfig, TrainConfig), CliError> {
        let model_keys = field_names::<ModelConfig>();
        let train_keys = field_names::<TrainConfig>();
        let mut model = Map::new();
        let mut train = Map::new();
        let mut layered: Vec<(String, Value)> = Vec::new();
        if let Some(path) = &self.config {
            layered.extend(read_config_file(path)?);
        }
        layered.extend(self.flag_values().into_iter().map(|(k, v)| (k.to_string(), v)));
        for (key, value) in layered {
            let in_model = model_keys.contains(&key);
            let in_train = train_keys.contains(&key);
            if !in_model && !in_train {
                return Err(CliError::usage(format!("unknown config field `{key}`")));
            }
            if in_model {
                model.insert(key.clone(), value.clone());
            }
            if in_train {
                train.insert(key, value);
            }
        }
        model.entry("d_v").or_insert(dims.visual.into());
        model.entry("d_s").or_insert(dims.align.into());
        let model: ModelConfig = parse_as(model, "model")?;
        let train: TrainConfig = parse_as(train, "training")?;
        model.validate()?;
        train.validate()?;
        Ok((model, train))
    }
}

//! Errors at the binary edge, each mapped to an exit code and printed as
//! one JSON line on stderr.

use std::fmt;

use refscore::dataio::DataError;
use refscore::metrics::{EvalError, MetricError};
use refscore::model::ModelError;
use refscore::retrieval::RetrievalError;
use refscore::training::TrainError;
use serde_json::json;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Data,
    Numeric,
}

impl Kind {
    pub fn code(self) -> u8 {
        match self {
            Kind::Usage => 1,
            Kind::Data => 2,
            Kind::Numeric => 3,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Kind::Usage => "usage",
            Kind::Data => "data",
            Kind::Numeric => "numeric",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: Kind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(Kind::Usage, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(Kind::Data, message)
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self::new(Kind::Numeric, message)
    }

    pub fn to_json_line(&self) -> String {
        json!({
            "error": self.kind.name(),
            "code": self.kind.code(),
            "message": self.message.replace('\n', " "),
        })
        .to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind.name(), self.message)
    }
}

fn retrieval_kind(e: &RetrievalError) -> Kind {
    match e {
        RetrievalError::InvalidTau(_) | RetrievalError::InvalidK | RetrievalError::UnknownId(_) => Kind::Usage,
        RetrievalError::ZeroVector | RetrievalError::DimMismatch(..) => Kind::Data,
    }
}

fn model_kind(e: &ModelError) -> Kind {
    match e {
        ModelError::InvalidConfig(_) | ModelError::ConfigMismatch(_) => Kind::Usage,
        ModelError::Retrieval(r) => retrieval_kind(r),
        _ => Kind::Data,
    }
}

fn eval_kind(e: &EvalError) -> Kind {
    match e {
        EvalError::Model(m) => model_kind(m),
        EvalError::Degenerate { .. } => Kind::Numeric,
        EvalError::EmptySplit | EvalError::MissingMos(_) => Kind::Data,
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        let kind = match e {
            DataError::InvalidSynthSpec(_) => Kind::Usage,
            _ => Kind::Data,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<RetrievalError> for CliError {
    fn from(e: RetrievalError) -> Self {
        Self::new(retrieval_kind(&e), e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        Self::new(model_kind(&e), e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        Self::new(eval_kind(&e), e.to_string())
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        Self::numeric(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let kind = if e.is_numeric() {
            Kind::Numeric
        } else {
            match &e {
                TrainError::Invalid(_) => Kind::Usage,
                TrainError::Model(m) => model_kind(m),
                TrainError::Eval(v) => eval_kind(v),
                _ => Kind::Data,
            }
        };
        Self::new(kind, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::data(e.to_string())
    }
}

use std::fmt;
use std::path::Path;

use trajgraph::autodiff::TensorError;
use trajgraph::eval::EvalError;
use trajgraph::graph::GraphError;
use trajgraph::ingest::IngestError;
use trajgraph::model::ModelError;
use trajgraph::pipeline::PipelineError;
use trajgraph::synth::SynthError;
use trajgraph::train::TrainError;

#[derive(Debug)]
pub enum Kind {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub const USAGE: u8 = 1;
    pub const DATA: u8 = 2;
    pub const NUMERIC: u8 = 3;

    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Usage,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Data,
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Numeric,
            message: message.into(),
        }
    }

    pub fn code(&self) -> u8 {
        match self.kind {
            Kind::Usage => Self::USAGE,
            Kind::Data => Self::DATA,
            Kind::Numeric => Self::NUMERIC,
        }
    }

    /// Prefixes the message with the file it concerns.
    pub fn at(mut self, path: &Path) -> Self {
        self.message = format!("{}: {}", path.display(), self.message);
        self
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::data(e.to_string())
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        Self::numeric(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(t) => t.into(),
            other => Self::data(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Constant(_) | EvalError::ZeroMass(_) => Self::numeric(e.to_string()),
            other => Self::data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config { .. } => Self::usage(e.to_string()),
            TrainError::NonFinite { .. } | TrainError::Tensor(_) => Self::numeric(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Graph { ref source, .. } if matches!(source, ModelError::Tensor(_)) => {
                Self::numeric(e.to_string())
            }
            other => Self::data(other.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Request(_) => Self::usage(e.to_string()),
            other => Self::data(other.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Graph(e) => e.into(),
            PipelineError::Model(e) => e.into(),
            PipelineError::Train(e) => e.into(),
            PipelineError::Eval(e) => e.into(),
            PipelineError::Tensor(e) => e.into(),
            PipelineError::Loss(e) => Self::numeric(e.to_string()),
            other => Self::data(other.to_string()),
        }
    }
}

//! Process exit codes and the mapping from library errors onto them.

use std::fmt;

use lmx_core::checkpoint::CheckpointError;
use lmx_core::debugger::DebugError;
use lmx_core::element::ElementError;
use lmx_core::embed::EmbedError;
use lmx_core::eval::EvalError;
use lmx_core::explain::ExplainError;
use lmx_core::kg::KgError;
use lmx_core::llm::LlmError;
use lmx_core::pipeline::PipelineError;
use lmx_core::reasoner::ReasonerError;
use lmx_core::synthetic::SyntheticError;

pub const INTERNAL: u8 = 1;
/// Bad flag, bad config, missing input file.
pub const USAGE: u8 = 2;
/// Input present but malformed or inconsistent.
pub const DATA: u8 = 3;
/// Checkpoint corrupt or incompatible, numerical failure.
pub const MODEL: u8 = 4;
/// Network, HTTP, protocol or replay miss.
pub const TRANSPORT: u8 = 5;
/// Some items failed; their outputs are flagged or omitted.
pub const PARTIAL: u8 = 6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(USAGE, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(DATA, message)
    }

    pub fn model(message: impl Into<String>) -> Self {
        Self::new(MODEL, message)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<KgError> for Failure {
    fn from(e: KgError) -> Self {
        let code = match e {
            KgError::Io { .. } => USAGE,
            _ => DATA,
        };
        Self::new(code, e.to_string())
    }
}

impl From<LlmError> for Failure {
    fn from(e: LlmError) -> Self {
        let code = match e {
            LlmError::Config(_) | LlmError::Request(_) => USAGE,
            LlmError::Cassette { .. } => DATA,
            LlmError::Transport { .. } | LlmError::Rejected { .. } | LlmError::Protocol(_) | LlmError::ReplayMiss(_) => {
                TRANSPORT
            }
        };
        Self::new(code, e.to_string())
    }
}

impl From<EmbedError> for Failure {
    fn from(e: EmbedError) -> Self {
        match e {
            EmbedError::Transport(inner) => inner.into(),
            EmbedError::Config(_) => Self::usage(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<ElementError> for Failure {
    fn from(e: ElementError) -> Self {
        match e {
            ElementError::Embed(inner) => inner.into(),
            ElementError::Dimension(..) => Self::model(e.to_string()),
            ElementError::Argument(_) => Self::data(e.to_string()),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Kg(inner) => inner.into(),
            PipelineError::Embed(inner) => inner.into(),
            PipelineError::Element(inner) => inner.into(),
            PipelineError::Argument(_) => Self::data(e.to_string()),
        }
    }
}

impl From<ReasonerError> for Failure {
    fn from(e: ReasonerError) -> Self {
        match e {
            ReasonerError::Pipeline(inner) => inner.into(),
            ReasonerError::Config(_) | ReasonerError::Io { .. } => Self::usage(e.to_string()),
            ReasonerError::Argument(_) | ReasonerError::Data(_) => Self::data(e.to_string()),
            ReasonerError::NonFinite { .. } | ReasonerError::Gat(_) => Self::model(e.to_string()),
        }
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        let code = match e {
            CheckpointError::Io(_) => USAGE,
            CheckpointError::Corrupt(_) => MODEL,
        };
        Self::new(code, format!("checkpoint: {e}"))
    }
}

impl From<ExplainError> for Failure {
    fn from(e: ExplainError) -> Self {
        match e {
            ExplainError::Generation { source, .. } => {
                let inner = Failure::from(source);
                Self::new(inner.code, format!("generation: {}", inner.message))
            }
            ExplainError::EmptyStage1 => Self::new(TRANSPORT, e.to_string()),
            ExplainError::Render(_) => Self::new(INTERNAL, e.to_string()),
            ExplainError::Argument(_) => Self::data(e.to_string()),
        }
    }
}

impl From<DebugError> for Failure {
    fn from(e: DebugError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<SyntheticError> for Failure {
    fn from(e: SyntheticError) -> Self {
        let code = match e {
            SyntheticError::Argument(_) => USAGE,
            SyntheticError::Verification { .. } | SyntheticError::Io { .. } => INTERNAL,
        };
        Self::new(code, e.to_string())
    }
}

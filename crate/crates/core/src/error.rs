use crate::gateway::{ChatExchange, GatewayError};
use crate::prompt::PromptError;
use crate::sandbox::SandboxError;

/// Hard failures that abort a pipeline stage.
#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
}

impl PipelineError {
    /// Provider exhaustion (retries or call budget) rather than a local fault.
    pub fn is_provider_exhaustion(&self) -> bool {
        matches!(
            self,
            PipelineError::Gateway(GatewayError::Provider { .. } | GatewayError::Budget { .. })
        )
    }
}

/// A hard failure plus every exchange completed before it.
#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct Aborted {
    #[source]
    pub error: PipelineError,
    pub exchanges: Vec<ChatExchange>,
}

impl Aborted {
    pub fn new(error: impl Into<PipelineError>, exchanges: Vec<ChatExchange>) -> Self {
        Self {
            error: error.into(),
            exchanges,
        }
    }
}

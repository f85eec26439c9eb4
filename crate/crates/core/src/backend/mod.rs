//! Chat-completion backends.
//!
//! Every model call in the runtime goes through [`ChatBackend::complete`].
//! A call carries a [`CallKey`] (item id, call tag, turn) so that the
//! scripted backend can answer it offline and the metering wrapper can keep
//! per-item call counters.

mod meter;
mod openai;
mod parse;
mod scripted;

use std::collections::BTreeMap;
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use meter::{MeteredBackend, RecordedCall, RecordingBackend};
pub use openai::{OpenAiBackend, OpenAiConfig};
pub use parse::{parse_structured_block, JsonKind, ParseError};
pub use scripted::{ANY_ITEM, ScriptEntry, ScriptFile, ScriptedBackend};

/// Call tags used across the runtime. Scripts key their entries on these.
pub mod tags {
    pub const DIRECT: &str = "direct";
    pub const AGENT: &str = "agent";
    pub const AGENT_RETRY: &str = "agent_retry";
    pub const REFERENCE_PROFILER: &str = "reference_profiler";
    pub const DOMAIN_KNOWLEDGE: &str = "domain_knowledge";
    pub const REFLECTOR: &str = "reflector";
    pub const CLUSTER: &str = "cluster";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

/// An image attached to a message, with a short caption used in traces.
#[derive(Debug, Clone)]
pub struct Attachment {
    pub caption: String,
    pub image: Arc<RgbImage>,
}

impl Attachment {
    pub fn new(caption: impl Into<String>, image: Arc<RgbImage>) -> Self {
        Attachment {
            caption: caption.into(),
            image,
        }
    }

    /// sha256 over dimensions and raw pixels; stable across encoders.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.image.width().to_le_bytes());
        h.update(self.image.height().to_le_bytes());
        h.update(self.image.as_raw());
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone)]
pub struct ChatMessage {
    pub role: Role,
    pub text: String,
    pub images: Vec<Attachment>,
}

impl ChatMessage {
    pub fn system(text: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            text: text.into(),
            images: Vec::new(),
        }
    }

    pub fn user(text: impl Into<String>, images: Vec<Attachment>) -> Self {
        ChatMessage {
            role: Role::User,
            text: text.into(),
            images,
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            text: text.into(),
            images: Vec::new(),
        }
    }

    pub fn tool(text: impl Into<String>, images: Vec<Attachment>) -> Self {
        ChatMessage {
            role: Role::Tool,
            text: text.into(),
            images,
        }
    }
}

/// Identifies a call for scripting and metering.
///
/// `item` is the item id for per-item calls and the domain code for
/// reflector calls; `turn` is the agent turn, the reflection batch number,
/// or 0 where it has no meaning.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CallKey {
    pub item: String,
    pub tag: String,
    pub turn: u32,
}

impl CallKey {
    pub fn new(item: impl Into<String>, tag: &str, turn: u32) -> Self {
        CallKey {
            item: item.into(),
            tag: tag.to_string(),
            turn,
        }
    }
}

impl std::fmt::Display for CallKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}", self.item, self.tag, self.turn)
    }
}

#[derive(Debug, Clone)]
pub struct CompletionRequest<'a> {
    pub key: CallKey,
    pub messages: &'a [ChatMessage],
    pub want_logprobs: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendCapabilities {
    pub name: String,
    #[serde(default)]
    pub supports_first_token_logprobs: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_token_logprobs: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("endpoint returned an unexpected response: {0}")]
    Schema(String),
    #[error("call budget of {cap} exceeded for {item}")]
    BudgetExceeded { item: String, cap: u32 },
    #[error("no scripted completion for {0}")]
    MissingScript(CallKey),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

pub trait ChatBackend: Send + Sync {
    fn capabilities(&self) -> &BackendCapabilities;

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<CompletionResult, BackendError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for Arc<B> {
    fn capabilities(&self) -> &BackendCapabilities {
        (**self).capabilities()
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<CompletionResult, BackendError> {
        (**self).complete(request)
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for Box<B> {
    fn capabilities(&self) -> &BackendCapabilities {
        (**self).capabilities()
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<CompletionResult, BackendError> {
        (**self).complete(request)
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for &B {
    fn capabilities(&self) -> &BackendCapabilities {
        (**self).capabilities()
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<CompletionResult, BackendError> {
        (**self).complete(request)
    }
}

/// Checks the shape rules every backend shares: at least one message, the
/// first one is the system prompt, images only on user or tool messages.
pub fn validate_messages(messages: &[ChatMessage]) -> Result<(), BackendError> {
    let first = messages
        .first()
        .ok_or_else(|| BackendError::InvalidRequest("empty message list".into()))?;
    if first.role != Role::System {
        return Err(BackendError::InvalidRequest(
            "first message must be the system prompt".into(),
        ));
    }
    for (i, m) in messages.iter().enumerate() {
        if !m.images.is_empty() && !matches!(m.role, Role::User | Role::Tool) {
            return Err(BackendError::InvalidRequest(format!(
                "message {i} carries images but has role {:?}",
                m.role
            )));
        }
    }
    Ok(())
}

/// Convenience wrapper used by scorers: builds the request and calls.
pub fn call(
    backend: &dyn ChatBackend,
    key: CallKey,
    messages: &[ChatMessage],
    want_logprobs: bool,
) -> Result<CompletionResult, BackendError> {
    backend.complete(&CompletionRequest {
        key,
        messages,
        want_logprobs,
    })
}

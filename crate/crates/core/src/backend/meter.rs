use std::collections::BTreeMap;
use std::sync::Mutex;

use super::{
    BackendCapabilities, BackendError, CallKey, ChatBackend, ChatMessage, CompletionRequest,
    CompletionResult,
};

/// Counts calls per item id and optionally enforces a hard cap.
///
/// A call is counted when it is forwarded to the inner backend, whether or
/// not the inner call succeeds. Calls over the cap are rejected before they
/// reach the inner backend and are not counted.
pub struct MeteredBackend<B> {
    inner: B,
    cap: Option<u32>,
    counts: Mutex<BTreeMap<String, u32>>,
}

impl<B: ChatBackend> MeteredBackend<B> {
    pub fn new(inner: B, cap: Option<u32>) -> Self {
        MeteredBackend {
            inner,
            cap,
            counts: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn count(&self, item: &str) -> u32 {
        self.counts
            .lock()
            .unwrap()
            .get(item)
            .copied()
            .unwrap_or(0)
    }

    pub fn counts(&self) -> BTreeMap<String, u32> {
        self.counts.lock().unwrap().clone()
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: ChatBackend> ChatBackend for MeteredBackend<B> {
    fn capabilities(&self) -> &BackendCapabilities {
        self.inner.capabilities()
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<CompletionResult, BackendError> {
        {
            let mut counts = self.counts.lock().unwrap();
            let n = counts.entry(request.key.item.clone()).or_insert(0);
            if let Some(cap) = self.cap {
                if *n >= cap {
                    return Err(BackendError::BudgetExceeded {
                        item: request.key.item.clone(),
                        cap,
                    });
                }
            }
            *n += 1;
        }
        self.inner.complete(request)
    }
}

#[derive(Debug, Clone)]
pub struct RecordedCall {
    pub key: CallKey,
    pub messages: Vec<ChatMessage>,
    pub want_logprobs: bool,
}

/// Keeps a copy of every request; used by tests that scan prompts.
pub struct RecordingBackend<B> {
    inner: B,
    calls: Mutex<Vec<RecordedCall>>,
}

impl<B: ChatBackend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        RecordingBackend {
            inner,
            calls: Mutex::new(Vec::new()),
        }
    }

    /// Recorded calls sorted by key, so concurrent runs compare equal.
    pub fn calls(&self) -> Vec<RecordedCall> {
        let mut v = self.calls.lock().unwrap().clone();
        v.sort_by(|a, b| a.key.cmp(&b.key));
        v
    }
}

impl<B: ChatBackend> ChatBackend for RecordingBackend<B> {
    fn capabilities(&self) -> &BackendCapabilities {
        self.inner.capabilities()
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<CompletionResult, BackendError> {
        self.calls.lock().unwrap().push(RecordedCall {
            key: request.key.clone(),
            messages: request.messages.to_vec(),
            want_logprobs: request.want_logprobs,
        });
        self.inner.complete(request)
    }
}

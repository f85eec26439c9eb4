use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    validate_messages, BackendCapabilities, BackendError, CallKey, ChatBackend, CompletionRequest,
    CompletionResult, Usage,
};

/// Wildcard item id in a script entry; matches any item for the same tag
/// and turn when no exact entry exists.
pub const ANY_ITEM: &str = "*";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub item: String,
    pub tag: String,
    #[serde(default)]
    pub turn: u32,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
}

/// On-disk script format.
///
/// ```json
/// {"version": "1",
///  "backend": {"name": "toy", "supports_first_token_logprobs": false},
///  "entries": [{"item": "d1-0", "tag": "direct", "turn": 0, "text": "..."}]}
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptFile {
    pub version: String,
    pub backend: BackendCapabilities,
    #[serde(default)]
    pub entries: Vec<ScriptEntry>,
}

/// Deterministic backend answering from a fixed table.
///
/// Lookups never mutate state, so the backend is safe to share between
/// worker threads and answers identically however often it is asked.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    caps: BackendCapabilities,
    table: HashMap<CallKey, CompletionResult>,
}

impl ScriptedBackend {
    pub fn new(caps: BackendCapabilities) -> Self {
        ScriptedBackend {
            caps,
            table: HashMap::new(),
        }
    }

    pub fn from_script(script: ScriptFile) -> Self {
        let mut b = ScriptedBackend::new(script.backend);
        for e in script.entries {
            b.insert_entry(e);
        }
        b
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            BackendError::InvalidRequest(format!("cannot read script {}: {e}", path.display()))
        })?;
        let script: ScriptFile = serde_json::from_str(&text).map_err(|e| {
            BackendError::InvalidRequest(format!("malformed script {}: {e}", path.display()))
        })?;
        Ok(Self::from_script(script))
    }

    pub fn insert_entry(&mut self, e: ScriptEntry) {
        self.table.insert(
            CallKey {
                item: e.item,
                tag: e.tag,
                turn: e.turn,
            },
            CompletionResult {
                text: e.text,
                first_token_logprobs: e.logprobs,
                usage: e.usage,
            },
        );
    }

    pub fn insert(&mut self, item: &str, tag: &str, turn: u32, text: impl Into<String>) {
        self.insert_entry(ScriptEntry {
            item: item.to_string(),
            tag: tag.to_string(),
            turn,
            text: text.into(),
            logprobs: None,
            usage: None,
        });
    }

    pub fn insert_logprobs(
        &mut self,
        item: &str,
        tag: &str,
        turn: u32,
        text: impl Into<String>,
        logprobs: BTreeMap<String, f64>,
    ) {
        self.insert_entry(ScriptEntry {
            item: item.to_string(),
            tag: tag.to_string(),
            turn,
            text: text.into(),
            logprobs: Some(logprobs),
            usage: None,
        });
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    fn lookup(&self, key: &CallKey) -> Option<&CompletionResult> {
        self.table.get(key).or_else(|| {
            self.table.get(&CallKey {
                item: ANY_ITEM.to_string(),
                tag: key.tag.clone(),
                turn: key.turn,
            })
        })
    }
}

impl ChatBackend for ScriptedBackend {
    fn capabilities(&self) -> &BackendCapabilities {
        &self.caps
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<CompletionResult, BackendError> {
        validate_messages(request.messages)?;
        let mut out = self
            .lookup(&request.key)
            .cloned()
            .ok_or_else(|| BackendError::MissingScript(request.key.clone()))?;
        if !(request.want_logprobs && self.caps.supports_first_token_logprobs) {
            out.first_token_logprobs = None;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{call, tags, ChatMessage};

    fn msgs() -> Vec<ChatMessage> {
        vec![ChatMessage::system("sys"), ChatMessage::user("q", vec![])]
    }

    fn backend(logprobs: bool) -> ScriptedBackend {
        let mut b = ScriptedBackend::new(BackendCapabilities {
            name: "toy".into(),
            supports_first_token_logprobs: logprobs,
        });
        b.insert("a", tags::DIRECT, 0, "canned text");
        b.insert(ANY_ITEM, tags::AGENT, 1, "wild");
        b.insert_logprobs(
            "b",
            tags::DIRECT,
            0,
            "Yes",
            BTreeMap::from([("Yes".to_string(), -0.1), ("No".to_string(), -2.4)]),
        );
        b
    }

    #[test]
    fn known_key_returns_canned_text() {
        let b = backend(false);
        let r = call(&b, CallKey::new("a", tags::DIRECT, 0), &msgs(), false).unwrap();
        assert_eq!(r.text, "canned text");
        let r2 = call(&b, CallKey::new("a", tags::DIRECT, 0), &msgs(), false).unwrap();
        assert_eq!(r, r2);
    }

    #[test]
    fn wildcard_and_missing() {
        let b = backend(false);
        let r = call(&b, CallKey::new("zzz", tags::AGENT, 1), &msgs(), false).unwrap();
        assert_eq!(r.text, "wild");
        let err = call(&b, CallKey::new("zzz", tags::AGENT, 2), &msgs(), false).unwrap_err();
        assert!(matches!(err, BackendError::MissingScript(_)));
    }

    #[test]
    fn logprobs_only_with_capability_and_request() {
        let key = CallKey::new("b", tags::DIRECT, 0);
        let without = backend(false);
        assert!(call(&without, key.clone(), &msgs(), true)
            .unwrap()
            .first_token_logprobs
            .is_none());
        let with = backend(true);
        assert!(call(&with, key.clone(), &msgs(), true)
            .unwrap()
            .first_token_logprobs
            .is_some());
        assert!(call(&with, key, &msgs(), false)
            .unwrap()
            .first_token_logprobs
            .is_none());
    }

    #[test]
    fn script_file_round_trip() {
        let script = ScriptFile {
            version: "1".into(),
            backend: BackendCapabilities {
                name: "toy".into(),
                supports_first_token_logprobs: false,
            },
            entries: vec![ScriptEntry {
                item: "x".into(),
                tag: tags::DIRECT.into(),
                turn: 0,
                text: "t".into(),
                logprobs: None,
                usage: None,
            }],
        };
        let json = serde_json::to_string(&script).unwrap();
        let back: ScriptFile = serde_json::from_str(&json).unwrap();
        assert_eq!(back, script);
        assert_eq!(ScriptedBackend::from_script(back).len(), 1);
    }
}

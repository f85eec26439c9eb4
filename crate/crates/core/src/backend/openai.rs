use std::collections::BTreeMap;
use std::io::Cursor;
use std::time::Duration;

use base64::Engine;
use image::{imageops::FilterType, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    validate_messages, BackendCapabilities, BackendError, ChatBackend, ChatMessage,
    CompletionRequest, CompletionResult, Role, Usage,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpenAiConfig {
    /// Base URL; `/chat/completions` is appended.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub auth_env: Option<String>,
    pub supports_first_token_logprobs: bool,
    pub max_image_edge: u32,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub timeout_s: u64,
    pub top_logprobs: u32,
    pub max_tokens: Option<u32>,
}

impl Default for OpenAiConfig {
    fn default() -> Self {
        OpenAiConfig {
            endpoint: "http://localhost:8000/v1".into(),
            model: String::new(),
            auth_env: None,
            supports_first_token_logprobs: false,
            max_image_edge: 1024,
            max_retries: 3,
            backoff_ms: 500,
            timeout_s: 120,
            top_logprobs: 20,
            max_tokens: None,
        }
    }
}

/// Blocking client for OpenAI-compatible `/chat/completions` endpoints.
pub struct OpenAiBackend {
    cfg: OpenAiConfig,
    caps: BackendCapabilities,
    token: Option<String>,
    agent: ureq::Agent,
}

impl OpenAiBackend {
    /// Builds the client. The bearer token is read from the environment
    /// variable named in the config, never from the config itself.
    pub fn new(cfg: OpenAiConfig) -> Result<Self, BackendError> {
        let token = match &cfg.auth_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                BackendError::InvalidRequest(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(cfg.timeout_s)))
            .build()
            .into();
        let caps = BackendCapabilities {
            name: cfg.model.clone(),
            supports_first_token_logprobs: cfg.supports_first_token_logprobs,
        };
        Ok(OpenAiBackend {
            cfg,
            caps,
            token,
            agent,
        })
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.cfg.endpoint.trim_end_matches('/'))
    }

    fn attempt(&self, body: &Value, want_logprobs: bool) -> Result<CompletionResult, Attempt> {
        let mut req = self.agent.post(&self.url());
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| Attempt::Retry(BackendError::Transport(e.to_string())))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Attempt::Retry(BackendError::Transport(e.to_string())))?;
        if status == 429 || status >= 500 {
            return Err(Attempt::Retry(BackendError::Transport(format!(
                "HTTP {status}: {}",
                truncate(&text, 200)
            ))));
        }
        if !(200..300).contains(&status) {
            return Err(Attempt::Fatal(BackendError::Schema(format!(
                "HTTP {status}: {}",
                truncate(&text, 200)
            ))));
        }
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| Attempt::Fatal(BackendError::Schema(format!("invalid JSON body: {e}"))))?;
        parse_response(&v, want_logprobs && self.caps.supports_first_token_logprobs)
            .map_err(Attempt::Fatal)
    }
}

enum Attempt {
    Retry(BackendError),
    Fatal(BackendError),
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

impl ChatBackend for OpenAiBackend {
    fn capabilities(&self) -> &BackendCapabilities {
        &self.caps
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<CompletionResult, BackendError> {
        validate_messages(request.messages)?;
        let want = request.want_logprobs && self.caps.supports_first_token_logprobs;
        let body = build_body(&self.cfg, request.messages, want)?;
        let mut last = None;
        for attempt in 0..=self.cfg.max_retries {
            if attempt > 0 {
                let wait = self.cfg.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                log::warn!("{}: retry {attempt} in {wait} ms", request.key);
                std::thread::sleep(Duration::from_millis(wait));
            }
            match self.attempt(&body, want) {
                Ok(r) => return Ok(r),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(e)) => last = Some(e),
            }
        }
        Err(last.unwrap_or_else(|| BackendError::Transport("no attempt made".into())))
    }
}

/// Encodes an image as a PNG data URL, downscaling so that neither edge
/// exceeds `max_edge`.
pub fn encode_image(img: &RgbImage, max_edge: u32) -> Result<String, BackendError> {
    let (w, h) = img.dimensions();
    let long = w.max(h);
    let mut bytes = Vec::new();
    let write = |im: &RgbImage, out: &mut Vec<u8>| {
        im.write_to(&mut Cursor::new(out), ImageFormat::Png)
            .map_err(|e| BackendError::InvalidRequest(format!("png encoding failed: {e}")))
    };
    if max_edge > 0 && long > max_edge {
        let scale = max_edge as f64 / long as f64;
        let nw = ((w as f64 * scale).round() as u32).max(1);
        let nh = ((h as f64 * scale).round() as u32).max(1);
        let small = image::imageops::resize(img, nw, nh, FilterType::Triangle);
        write(&small, &mut bytes)?;
    } else {
        write(img, &mut bytes)?;
    }
    Ok(format!(
        "data:image/png;base64,{}",
        base64::engine::general_purpose::STANDARD.encode(&bytes)
    ))
}

pub(crate) fn build_body(
    cfg: &OpenAiConfig,
    messages: &[ChatMessage],
    want_logprobs: bool,
) -> Result<Value, BackendError> {
    let mut wire = Vec::with_capacity(messages.len());
    for m in messages {
        // tool observations are not replies to native tool calls, so they
        // travel as user turns
        let role = match m.role {
            Role::System => "system",
            Role::User | Role::Tool => "user",
            Role::Assistant => "assistant",
        };
        if m.images.is_empty() {
            wire.push(json!({"role": role, "content": m.text}));
            continue;
        }
        let mut parts = vec![json!({"type": "text", "text": m.text})];
        for a in &m.images {
            parts.push(json!({"type": "text", "text": format!("[{}]", a.caption)}));
            parts.push(json!({
                "type": "image_url",
                "image_url": {"url": encode_image(&a.image, cfg.max_image_edge)?}
            }));
        }
        wire.push(json!({"role": role, "content": parts}));
    }
    let mut body = json!({
        "model": cfg.model,
        "messages": wire,
        "temperature": 0,
    });
    if want_logprobs {
        body["logprobs"] = json!(true);
        body["top_logprobs"] = json!(cfg.top_logprobs);
    }
    if let Some(n) = cfg.max_tokens {
        body["max_tokens"] = json!(n);
    }
    Ok(body)
}

pub(crate) fn parse_response(v: &Value, want_logprobs: bool) -> Result<CompletionResult, BackendError> {
    let choice = v
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| BackendError::Schema("response has no choices".into()))?;
    let text = match choice.pointer("/message/content") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Null) | None => {
            return Err(BackendError::Schema("choice has no message content".into()))
        }
        Some(other) => other.to_string(),
    };
    let first_token_logprobs = if want_logprobs {
        choice
            .pointer("/logprobs/content/0")
            .map(first_token_table)
    } else {
        None
    };
    let usage = v.get("usage").and_then(|u| {
        Some(Usage {
            input_tokens: u.get("prompt_tokens")?.as_u64()?,
            output_tokens: u.get("completion_tokens")?.as_u64()?,
        })
    });
    Ok(CompletionResult {
        text,
        first_token_logprobs,
        usage,
    })
}

fn first_token_table(entry: &Value) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    let mut put = |e: &Value| {
        if let (Some(t), Some(lp)) = (
            e.get("token").and_then(Value::as_str),
            e.get("logprob").and_then(Value::as_f64),
        ) {
            out.entry(t.to_string()).or_insert(lp);
        }
    };
    put(entry);
    if let Some(Value::Array(top)) = entry.get("top_logprobs") {
        top.iter().for_each(&mut put);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::Attachment;
    use std::sync::Arc;

    #[test]
    fn body_shape() {
        let cfg = OpenAiConfig {
            model: "m".into(),
            ..Default::default()
        };
        let img = Arc::new(RgbImage::new(4, 2));
        let msgs = vec![
            ChatMessage::system("sys"),
            ChatMessage::user("look", vec![Attachment::new("query", img)]),
            ChatMessage::assistant("{}"),
            ChatMessage::tool("obs", vec![]),
        ];
        let b = build_body(&cfg, &msgs, true).unwrap();
        assert_eq!(b["temperature"], 0);
        assert_eq!(b["logprobs"], true);
        assert_eq!(b["messages"][0]["role"], "system");
        assert_eq!(b["messages"][1]["content"][2]["type"], "image_url");
        assert!(b["messages"][1]["content"][2]["image_url"]["url"]
            .as_str()
            .unwrap()
            .starts_with("data:image/png;base64,"));
        assert_eq!(b["messages"][3]["role"], "user");
        let b = build_body(&cfg, &msgs, false).unwrap();
        assert!(b.get("logprobs").is_none());
    }

    #[test]
    fn downscale_bounds_edge() {
        let img = RgbImage::new(3000, 1500);
        let url = encode_image(&img, 1024).unwrap();
        let b64 = url.trim_start_matches("data:image/png;base64,");
        let bytes = base64::engine::general_purpose::STANDARD.decode(b64).unwrap();
        let back = image::load_from_memory(&bytes).unwrap();
        assert_eq!((back.width(), back.height()), (1024, 512));
    }

    #[test]
    fn response_parsing() {
        let v = json!({
            "choices": [{
                "message": {"content": "Yes"},
                "logprobs": {"content": [{
                    "token": "Yes", "logprob": -0.2,
                    "top_logprobs": [{"token": "Yes", "logprob": -0.2}, {"token": " No", "logprob": -1.9}]
                }]}
            }],
            "usage": {"prompt_tokens": 10, "completion_tokens": 1}
        });
        let r = parse_response(&v, true).unwrap();
        assert_eq!(r.text, "Yes");
        let lp = r.first_token_logprobs.unwrap();
        assert_eq!(lp.get(" No"), Some(&-1.9));
        assert_eq!(r.usage.unwrap().input_tokens, 10);
        assert!(parse_response(&v, false).unwrap().first_token_logprobs.is_none());
        assert!(matches!(
            parse_response(&json!({"choices": []}), false),
            Err(BackendError::Schema(_))
        ));
    }
}

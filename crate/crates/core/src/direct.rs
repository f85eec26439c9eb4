//! Single-call Direct scorer.
//!
//! Two forms share the prompt layout: the JSON form reads a label and a
//! confidence, the logit form reads first-token log-probabilities of a
//! yes/no answer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    call, parse_structured_block, tags, Attachment, BackendError, CallKey, ChatBackend,
    ChatMessage, JsonKind,
};
use crate::loader::ItemImages;
use crate::manifest::ItemView;
use crate::prompts;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DirectForm {
    Json,
    Logit,
}

/// Requested form; `Auto` picks logit when the backend exposes logprobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DirectFormChoice {
    Json,
    Logit,
    #[default]
    Auto,
}

impl DirectFormChoice {
    pub fn resolve(self, supports_logprobs: bool) -> DirectForm {
        match self {
            DirectFormChoice::Json => DirectForm::Json,
            DirectFormChoice::Logit => DirectForm::Logit,
            DirectFormChoice::Auto if supports_logprobs => DirectForm::Logit,
            DirectFormChoice::Auto => DirectForm::Json,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectResult {
    pub score: f64,
    pub form: DirectForm,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw_label: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw_confidence: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logprob_yes: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logprob_no: Option<f64>,
    pub parse_ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<String>,
    pub raw_completion: String,
}

#[derive(Debug, Error)]
pub enum DirectError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("backend {0} does not expose first-token logprobs; use the json form")]
    CapabilityMissing(String),
}

/// `c` for an anomalous label, `1 - c` otherwise.
pub fn json_score(anomalous: bool, confidence: f64) -> f64 {
    if anomalous {
        confidence
    } else {
        1.0 - confidence
    }
}

/// Two-way softmax `e^y / (e^y + e^n)`.
///
/// Computed from the difference so that large logits do not overflow, and
/// so that `logit_score(a, b) + logit_score(b, a) == 1` holds exactly: the
/// larger side is `p >= 0.5` and the smaller side is `1 - p`, which is
/// exact in floating point for `p` in `[0.5, 1]`.
pub fn logit_score(ly: f64, ln: f64) -> f64 {
    let d = ly - ln;
    let p = 1.0 / (1.0 + (-d.abs()).exp());
    if d >= 0.0 {
        p
    } else {
        1.0 - p
    }
}

/// Offset below the smallest observed logprob used for an absent token.
pub const MISSING_TOKEN_OFFSET: f64 = 10.0;

fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Reads `(ℓ_yes, ℓ_no)` from a first-token table.
///
/// Tokens match case-insensitively after trimming whitespace, so "Yes",
/// " yes" and "YES" all count; variants of one side are combined with
/// log-sum-exp. A side with no variant gets the smallest observed logprob
/// minus [`MISSING_TOKEN_OFFSET`]. Returns `None` for an empty table, and
/// the flag tells whether a substitution happened.
pub fn read_yes_no(table: &BTreeMap<String, f64>) -> Option<(f64, f64, bool)> {
    let finite: Vec<(&String, f64)> = table
        .iter()
        .filter(|(_, v)| v.is_finite())
        .map(|(k, v)| (k, *v))
        .collect();
    if finite.is_empty() {
        return None;
    }
    let side = |word: &str| -> Vec<f64> {
        finite
            .iter()
            .filter(|(k, _)| k.trim().eq_ignore_ascii_case(word))
            .map(|(_, v)| *v)
            .collect()
    };
    let yes = side("yes");
    let no = side("no");
    let floor = finite.iter().map(|(_, v)| *v).fold(f64::INFINITY, f64::min) - MISSING_TOKEN_OFFSET;
    let substituted = yes.is_empty() || no.is_empty();
    let ly = if yes.is_empty() { floor } else { logsumexp(&yes) };
    let ln = if no.is_empty() { floor } else { logsumexp(&no) };
    Some((ly, ln, substituted))
}

/// Query first, then the references, each captioned.
pub fn item_attachments(images: &ItemImages) -> Vec<Attachment> {
    let mut v = vec![Attachment::new("query", images.query.clone())];
    v.extend(
        images
            .references
            .iter()
            .enumerate()
            .map(|(i, r)| Attachment::new(format!("reference {i}"), r.clone())),
    );
    v
}

pub fn build_messages(form: DirectForm, images: &ItemImages, rules_context: &str) -> Vec<ChatMessage> {
    let template = match form {
        DirectForm::Json => prompts::DIRECT_JSON,
        DirectForm::Logit => prompts::DIRECT_LOGIT,
    };
    let n = images.references.len().to_string();
    let text = prompts::render(template, &[("rules", rules_context), ("n_refs", &n)]);
    vec![
        ChatMessage::system(prompts::DIRECT_SYSTEM),
        ChatMessage::user(text, item_attachments(images)),
    ]
}

/// Interprets a JSON-form completion. Never fails: unusable output gives
/// 0.5 with `parse_ok = false`.
pub fn interpret_json(text: &str) -> DirectResult {
    let mut r = DirectResult {
        score: 0.5,
        form: DirectForm::Json,
        raw_label: None,
        raw_confidence: None,
        logprob_yes: None,
        logprob_no: None,
        parse_ok: false,
        parse_error: None,
        raw_completion: text.to_string(),
    };
    let map = match parse_structured_block(
        text,
        &[("image_label", JsonKind::String), ("confidence", JsonKind::Number)],
    ) {
        Ok(m) => m,
        Err(e) => {
            r.parse_error = Some(e.to_string());
            return r;
        }
    };
    let label = map["image_label"].as_str().unwrap_or_default().to_string();
    let c = map["confidence"].as_f64().unwrap_or(f64::NAN);
    r.raw_label = Some(label.clone());
    r.raw_confidence = Some(c);
    let anomalous = match label.trim().to_ascii_lowercase().as_str() {
        "anomalous" | "anomaly" | "abnormal" => true,
        "normal" => false,
        other => {
            r.parse_error = Some(format!("unrecognised image_label {other:?}"));
            return r;
        }
    };
    if !c.is_finite() {
        r.parse_error = Some("confidence is not a finite number".into());
        return r;
    }
    let clamped = c.clamp(0.0, 1.0);
    r.score = json_score(anomalous, clamped);
    if clamped != c {
        r.parse_error = Some(format!("confidence {c} outside [0,1], clamped"));
    } else {
        r.parse_ok = true;
    }
    r
}

pub fn interpret_logit(text: &str, table: Option<&BTreeMap<String, f64>>) -> DirectResult {
    let mut r = DirectResult {
        score: 0.5,
        form: DirectForm::Logit,
        raw_label: None,
        raw_confidence: None,
        logprob_yes: None,
        logprob_no: None,
        parse_ok: false,
        parse_error: None,
        raw_completion: text.to_string(),
    };
    match table.and_then(read_yes_no) {
        None => r.parse_error = Some("no first-token logprobs returned".into()),
        Some((ly, ln, substituted)) => {
            r.score = logit_score(ly, ln);
            r.logprob_yes = Some(ly);
            r.logprob_no = Some(ln);
            r.parse_ok = !substituted;
            if substituted {
                r.parse_error = Some("yes or no token missing from top logprobs".into());
            }
        }
    }
    r
}

pub fn score_json_direct(
    backend: &dyn ChatBackend,
    item: &ItemView,
    images: &ItemImages,
    rules_context: &str,
) -> Result<DirectResult, DirectError> {
    let msgs = build_messages(DirectForm::Json, images, rules_context);
    let out = call(backend, CallKey::new(item.id.clone(), tags::DIRECT, 0), &msgs, false)?;
    Ok(interpret_json(&out.text))
}

pub fn score_logit_direct(
    backend: &dyn ChatBackend,
    item: &ItemView,
    images: &ItemImages,
    rules_context: &str,
) -> Result<DirectResult, DirectError> {
    let caps = backend.capabilities();
    if !caps.supports_first_token_logprobs {
        return Err(DirectError::CapabilityMissing(caps.name.clone()));
    }
    let msgs = build_messages(DirectForm::Logit, images, rules_context);
    let out = call(backend, CallKey::new(item.id.clone(), tags::DIRECT, 0), &msgs, true)?;
    Ok(interpret_logit(&out.text, out.first_token_logprobs.as_ref()))
}

pub fn score_direct(
    backend: &dyn ChatBackend,
    form: DirectForm,
    item: &ItemView,
    images: &ItemImages,
    rules_context: &str,
) -> Result<DirectResult, DirectError> {
    match form {
        DirectForm::Json => score_json_direct(backend, item, images, rules_context),
        DirectForm::Logit => score_logit_direct(backend, item, images, rules_context),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn json_examples() {
        let r = interpret_json(r#"{"image_label":"anomalous","confidence":0.85}"#);
        assert_eq!(r.score, 0.85);
        assert!(r.parse_ok);
        let r = interpret_json(r#"{"image_label":"normal","confidence":0.7}"#);
        assert!((r.score - 0.3).abs() < 1e-15);
        let r = interpret_json("I think it is fine.");
        assert_eq!(r.score, 0.5);
        assert!(!r.parse_ok);
        assert_eq!(r.raw_completion, "I think it is fine.");
    }

    #[test]
    fn json_out_of_range_is_clamped() {
        let r = interpret_json(r#"{"image_label":"anomalous","confidence":1.4}"#);
        assert_eq!(r.score, 1.0);
        assert!(!r.parse_ok);
        let r = interpret_json(r#"{"image_label":"normal","confidence":-0.2}"#);
        assert_eq!(r.score, 1.0);
        assert!(!r.parse_ok);
        let r = interpret_json(r#"{"image_label":"weird","confidence":0.9}"#);
        assert_eq!(r.score, 0.5);
    }

    #[test]
    fn logit_examples() {
        assert_eq!(logit_score(-1.3, -1.3), 0.5);
        assert!((logit_score(0.0, -20.0) - 1.0).abs() < 1e-8);
        assert!((logit_score(3f64.ln(), 0.0) - 0.75).abs() < 1e-15);
        assert!(logit_score(1000.0, -1000.0) == 1.0);
        assert!(logit_score(-1000.0, 1000.0) == 0.0);
    }

    #[test]
    fn yes_no_aliases_and_substitution() {
        let t = BTreeMap::from([
            ("Yes".to_string(), (0.3f64).ln()),
            (" yes".to_string(), (0.1f64).ln()),
            ("No".to_string(), (0.4f64).ln()),
        ]);
        let (ly, ln, sub) = read_yes_no(&t).unwrap();
        assert!(!sub);
        assert!((ly - 0.4f64.ln()).abs() < 1e-12);
        assert!((ln - 0.4f64.ln()).abs() < 1e-12);

        let t = BTreeMap::from([("Yes".to_string(), -0.5), ("Maybe".to_string(), -3.0)]);
        let (ly, ln, sub) = read_yes_no(&t).unwrap();
        assert!(sub);
        assert_eq!(ly, -0.5);
        assert_eq!(ln, -13.0);
        assert!(read_yes_no(&BTreeMap::new()).is_none());
        let r = interpret_logit("Yes", Some(&t));
        assert!(!r.parse_ok && r.score > 0.99);
        assert!(r.raw_label.is_none());
    }

    #[test]
    fn form_resolution() {
        assert_eq!(DirectFormChoice::Auto.resolve(true), DirectForm::Logit);
        assert_eq!(DirectFormChoice::Auto.resolve(false), DirectForm::Json);
        assert_eq!(DirectFormChoice::Json.resolve(true), DirectForm::Json);
    }

    proptest! {
        #[test]
        fn logit_symmetry(a in -50.0f64..50.0, b in -50.0f64..50.0) {
            prop_assert_eq!(logit_score(a, b) + logit_score(b, a), 1.0);
        }

        #[test]
        fn logit_shift_invariance(a in -30.0f64..30.0, b in -30.0f64..30.0, c in -30i32..30) {
            // integer shifts keep the difference exact for these magnitudes
            let a = (a * 1024.0).round() / 1024.0;
            let b = (b * 1024.0).round() / 1024.0;
            let c = c as f64;
            prop_assert_eq!(logit_score(a + c, b + c), logit_score(a, b));
        }

        #[test]
        fn json_score_law(anom in any::<bool>(), c in 0.0f64..=1.0) {
            let s = json_score(anom, c);
            prop_assert!(s == c || s == 1.0 - c);
            prop_assert_eq!(s >= 0.5, (anom && c >= 0.5) || (!anom && c <= 0.5));
        }
    }
}

//! Suspect-list state, clamp bands and per-turn response parsing.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::backend::{parse_structured_block, JsonKind, ParseError};

pub const MAX_CANDIDATES: usize = 3;
pub const EARLY_EXIT_BELOW: f64 = 0.3;
pub const EARLY_EXIT_SCORE: f64 = 0.05;
pub const REFUTED_BAND: (f64, f64) = (0.05, 0.20);
pub const SURVIVOR_BAND: (f64, f64) = (0.40, 0.95);
/// Score assumed when the first turn cannot be parsed at all.
pub const TURN1_FALLBACK_SCORE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateFeature {
    pub description: String,
    pub suspicion: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    CallTool,
    Final,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    FoundInRef,
    NotFound,
    Inconclusive,
}

impl Verdict {
    pub const ALL: [Verdict; 3] = [Verdict::FoundInRef, Verdict::NotFound, Verdict::Inconclusive];

    pub fn parse(s: &str) -> Option<Verdict> {
        match s.trim().to_ascii_lowercase().replace([' ', '-'], "_").as_str() {
            "found_in_ref" | "found_in_reference" | "found" => Some(Verdict::FoundInRef),
            "not_found" => Some(Verdict::NotFound),
            "inconclusive" => Some(Verdict::Inconclusive),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::FoundInRef => "found_in_ref",
            Verdict::NotFound => "not_found",
            Verdict::Inconclusive => "inconclusive",
        }
    }
}

/// Runtime clamp: clip to `[0, 1]`, then into the refuted band when no
/// suspect is live and into the survivor band otherwise.
pub fn clamp_score(score: f64, live: usize) -> f64 {
    let s = if score.is_nan() { 0.5 } else { score.clamp(0.0, 1.0) };
    let (lo, hi) = if live == 0 { REFUTED_BAND } else { SURVIVOR_BAND };
    s.clamp(lo, hi)
}

/// Appends `new` then evicts down to [`MAX_CANDIDATES`], always dropping the
/// lowest suspicion; among equal suspicions the later entry goes first.
pub fn push_capped(live: &mut Vec<CandidateFeature>, new: impl IntoIterator<Item = CandidateFeature>) {
    live.extend(new);
    while live.len() > MAX_CANDIDATES {
        let mut victim = 0;
        for (i, c) in live.iter().enumerate() {
            if c.suspicion <= live[victim].suspicion {
                victim = i;
            }
        }
        live.remove(victim);
    }
}

/// How the model named the suspect it is testing.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetRef {
    Index(usize),
    Text(String),
}

impl TargetRef {
    pub fn label(&self) -> String {
        match self {
            TargetRef::Index(i) => i.to_string(),
            TargetRef::Text(s) => s.clone(),
        }
    }

    /// Position in the live list: by 0-based index or by description,
    /// compared case-insensitively after trimming.
    pub fn resolve(&self, live: &[CandidateFeature]) -> Option<usize> {
        match self {
            TargetRef::Index(i) => (*i < live.len()).then_some(*i),
            TargetRef::Text(t) => {
                let t = t.trim();
                live.iter().position(|c| c.description.trim().eq_ignore_ascii_case(t))
            }
        }
    }
}

/// Applies a verdict to the live list. `found_in_ref` removes the target;
/// the other verdicts keep the list unchanged. An unknown target leaves
/// the list unchanged and is reported as a protocol violation.
pub fn apply_verdict(
    live: &mut Vec<CandidateFeature>,
    verdict: Verdict,
    target: &TargetRef,
) -> Result<(), String> {
    let Some(i) = target.resolve(live) else {
        return Err(format!(
            "refutation_target {:?} does not name a live suspect",
            target.label()
        ));
    };
    if verdict == Verdict::FoundInRef {
        live.remove(i);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub name: String,
    #[serde(default)]
    pub args: Value,
}

/// Parsed first-turn response.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstTurn {
    pub candidates: Vec<CandidateFeature>,
    pub initial_score: f64,
    pub action: Action,
    pub tool: Option<ToolCall>,
    pub target: Option<TargetRef>,
}

/// Parsed response of turns 2..K.
#[derive(Debug, Clone, PartialEq)]
pub struct LaterTurn {
    pub target: Option<TargetRef>,
    pub verdict: Option<Verdict>,
    /// Verdict string that did not match any known verdict.
    pub bad_verdict: Option<String>,
    pub updated_score: Option<f64>,
    pub add_candidates: Vec<CandidateFeature>,
    pub action: Action,
    pub tool: Option<ToolCall>,
}

fn field_err(key: &str, what: &str) -> ParseError {
    ParseError::WrongType {
        key: format!("{key} ({what})"),
        expected: "valid value",
    }
}

fn parse_action(map: &Map<String, Value>) -> Result<Action, ParseError> {
    match map.get("action").and_then(Value::as_str).map(|s| s.trim().to_ascii_lowercase()) {
        Some(s) if s == "call_tool" || s == "tool" => Ok(Action::CallTool),
        Some(s) if s == "final" => Ok(Action::Final),
        Some(_) => Err(field_err("action", "call_tool or final")),
        None => Err(ParseError::MissingKey("action".into())),
    }
}

fn parse_candidates(v: Option<&Value>, key: &str) -> Result<Vec<CandidateFeature>, ParseError> {
    let Some(v) = v else { return Ok(Vec::new()) };
    let Value::Array(items) = v else {
        return Err(field_err(key, "list"));
    };
    items
        .iter()
        .map(|it| match it {
            Value::String(s) => Ok(CandidateFeature {
                description: s.clone(),
                suspicion: 0.5,
            }),
            Value::Object(o) => {
                let description = o
                    .get("description")
                    .and_then(Value::as_str)
                    .ok_or_else(|| field_err(key, "description"))?
                    .to_string();
                let suspicion = match o.get("suspicion") {
                    None | Some(Value::Null) => 0.5,
                    Some(s) => s.as_f64().ok_or_else(|| field_err(key, "suspicion"))?,
                };
                Ok(CandidateFeature {
                    description,
                    suspicion: if suspicion.is_finite() { suspicion.clamp(0.0, 1.0) } else { 0.5 },
                })
            }
            _ => Err(field_err(key, "entry")),
        })
        .collect()
}

fn parse_tool(map: &Map<String, Value>) -> Result<Option<ToolCall>, ParseError> {
    match map.get("tool") {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(ToolCall {
            name: s.clone(),
            args: Value::Null,
        })),
        Some(Value::Object(o)) => Ok(Some(ToolCall {
            name: o.get("name").and_then(Value::as_str).unwrap_or("").to_string(),
            args: o.get("args").cloned().unwrap_or(Value::Null),
        })),
        Some(_) => Err(field_err("tool", "object")),
    }
}

fn parse_target(map: &Map<String, Value>) -> Result<Option<TargetRef>, ParseError> {
    match map.get("refutation_target") {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) if s.trim().is_empty() => Ok(None),
        Some(Value::String(s)) => Ok(Some(TargetRef::Text(s.clone()))),
        Some(Value::Number(n)) => n
            .as_u64()
            .map(|i| Some(TargetRef::Index(i as usize)))
            .ok_or_else(|| field_err("refutation_target", "index")),
        Some(_) => Err(field_err("refutation_target", "text or index")),
    }
}

fn finite_number(map: &Map<String, Value>, key: &str) -> Result<Option<f64>, ParseError> {
    match map.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => match v.as_f64() {
            Some(x) if x.is_finite() => Ok(Some(x)),
            _ => Err(field_err(key, "number")),
        },
    }
}

pub fn parse_first_turn(text: &str) -> Result<FirstTurn, ParseError> {
    let map = parse_structured_block(
        text,
        &[
            ("candidate_features", JsonKind::Array),
            ("initial_score", JsonKind::Number),
            ("action", JsonKind::String),
        ],
    )?;
    Ok(FirstTurn {
        candidates: parse_candidates(map.get("candidate_features"), "candidate_features")?,
        initial_score: finite_number(&map, "initial_score")?.expect("checked present"),
        action: parse_action(&map)?,
        tool: parse_tool(&map)?,
        target: parse_target(&map)?,
    })
}

pub fn parse_later_turn(text: &str) -> Result<LaterTurn, ParseError> {
    let map = parse_structured_block(text, &[("action", JsonKind::String)])?;
    let (verdict, bad_verdict) = match map.get("refutation_verdict") {
        None | Some(Value::Null) => (None, None),
        Some(Value::String(s)) => match Verdict::parse(s) {
            Some(v) => (Some(v), None),
            None => (None, Some(s.clone())),
        },
        Some(other) => (None, Some(other.to_string())),
    };
    Ok(LaterTurn {
        target: parse_target(&map)?,
        verdict,
        bad_verdict,
        updated_score: finite_number(&map, "updated_score")?,
        add_candidates: parse_candidates(map.get("add_candidates"), "add_candidates")?,
        action: parse_action(&map)?,
        tool: parse_tool(&map)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cand(d: &str, s: f64) -> CandidateFeature {
        CandidateFeature {
            description: d.into(),
            suspicion: s,
        }
    }

    #[test]
    fn clamp_examples() {
        assert_eq!(clamp_score(0.5, 0), 0.20);
        assert_eq!(clamp_score(0.30, 1), 0.40);
        assert_eq!(clamp_score(-3.0, 0), 0.05);
        assert_eq!(clamp_score(7.0, 2), 0.95);
        assert_eq!(clamp_score(0.12, 0), 0.12);
        assert_eq!(clamp_score(0.7, 3), 0.7);
    }

    #[test]
    fn verdicts() {
        let mut live = vec![cand("scratch", 0.8), cand("dent", 0.4)];
        apply_verdict(&mut live, Verdict::FoundInRef, &TargetRef::Text("Scratch ".into())).unwrap();
        assert_eq!(live, vec![cand("dent", 0.4)]);
        apply_verdict(&mut live, Verdict::NotFound, &TargetRef::Index(0)).unwrap();
        assert_eq!(live.len(), 1);
        apply_verdict(&mut live, Verdict::Inconclusive, &TargetRef::Index(0)).unwrap();
        assert_eq!(live.len(), 1);
        let before = live.clone();
        assert!(apply_verdict(&mut live, Verdict::FoundInRef, &TargetRef::Text("hole".into())).is_err());
        assert!(apply_verdict(&mut live, Verdict::FoundInRef, &TargetRef::Index(5)).is_err());
        assert_eq!(live, before);
    }

    #[test]
    fn cap_drops_lowest_then_latest() {
        let mut live = vec![cand("a", 0.9), cand("b", 0.3), cand("c", 0.6)];
        push_capped(&mut live, [cand("d", 0.5)]);
        assert_eq!(live.iter().map(|c| c.description.as_str()).collect::<Vec<_>>(), ["a", "c", "d"]);
        let mut live = vec![cand("a", 0.5), cand("b", 0.5), cand("c", 0.5)];
        push_capped(&mut live, [cand("d", 0.5)]);
        assert_eq!(live.iter().map(|c| c.description.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
    }

    #[test]
    fn parse_turns() {
        let t = parse_first_turn(
            r#"{"candidate_features":[{"description":"scratch","suspicion":0.7},"dent"],"initial_score":0.6,"action":"call_tool","tool":{"name":"zoom_bbox","args":{"bbox":[0,0,0.5,0.5]}},"refutation_target":"scratch"}"#,
        )
        .unwrap();
        assert_eq!(t.candidates.len(), 2);
        assert_eq!(t.candidates[1].suspicion, 0.5);
        assert_eq!(t.action, Action::CallTool);
        assert_eq!(t.tool.unwrap().name, "zoom_bbox");
        assert_eq!(t.target, Some(TargetRef::Text("scratch".into())));

        assert!(parse_first_turn(r#"{"candidate_features":[],"action":"final"}"#).is_err());

        let t = parse_later_turn(r#"{"refutation_target":0,"refutation_verdict":"found_in_ref","action":"final"}"#).unwrap();
        assert_eq!(t.target, Some(TargetRef::Index(0)));
        assert_eq!(t.verdict, Some(Verdict::FoundInRef));
        assert_eq!(t.updated_score, None);
        let t = parse_later_turn(r#"{"refutation_verdict":"maybe","action":"call_tool","tool":"side_by_side"}"#).unwrap();
        assert_eq!(t.bad_verdict.as_deref(), Some("maybe"));
        assert_eq!(t.tool.unwrap().name, "side_by_side");
        assert!(parse_later_turn(r#"{"action":"dance"}"#).is_err());
    }

    proptest! {
        #[test]
        fn clamp_never_in_gap(s in -2.0f64..3.0, live in 0usize..4) {
            let c = clamp_score(s, live);
            prop_assert!(!(c > 0.20 && c < 0.40));
            if live == 0 { prop_assert!((0.05..=0.20).contains(&c)); }
            else { prop_assert!((0.40..=0.95).contains(&c)); }
        }

        #[test]
        fn cap_holds(n in 0usize..8, extra in 0usize..5) {
            let mut live: Vec<CandidateFeature> =
                (0..n.min(3)).map(|i| cand(&format!("c{i}"), (i as f64) / 10.0)).collect();
            push_capped(&mut live, (0..extra).map(|i| cand(&format!("n{i}"), 0.05 * i as f64)));
            prop_assert!(live.len() <= MAX_CANDIDATES);
        }
    }
}

//! Multi-turn refutation agent.
//!
//! Turn 1 lists up to three suspects and an initial score and picks the
//! first tool. Each later turn sees the previous tool's observation, gives
//! a verdict on one suspect, updates the score and either picks the next
//! tool or finishes. Turn K is always the forced-final turn. The runtime,
//! not the model, enforces the suspect cap and the clamp bands.

pub mod state;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{call, tags, BackendError, CallKey, ChatBackend, ChatMessage, ParseError};
use crate::direct::item_attachments;
use crate::loader::LazyImages;
use crate::manifest::{DomainSpec, ItemView};
use crate::prompts;
use crate::tools::{self, FeatureProvider, KnowledgeBase, ToolConfig, ToolContext, ToolResult};

pub use state::{
    apply_verdict, clamp_score, push_capped, Action, CandidateFeature, TargetRef, ToolCall, Verdict,
};

pub const DEFAULT_MAX_TURNS: u32 = 5;

/// Tool name recorded when the model asks for a tool without naming one.
pub const MISSING_TOOL: &str = "<missing>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalizeReason {
    EarlyEmpty,
    ModelFinal,
    ForcedFinal,
    ParseFallback,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TurnRecord {
    pub index: u32,
    pub action: Action,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tool: Option<ToolCall>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refutation_target: Option<String>,
    /// Score held after this turn: the model's value clipped to `[0, 1]`,
    /// or the previous one carried forward. Always set on final turns.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub updated_score: Option<f64>,
    pub candidates_after: Vec<CandidateFeature>,
    pub raw_completion: String,
    /// Completions rejected by the parser before `raw_completion`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rejected_completions: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub protocol_violations: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tool_result: Option<ToolResult>,
}

impl TurnRecord {
    fn new(index: u32) -> Self {
        TurnRecord {
            index,
            action: Action::Final,
            tool: None,
            verdict: None,
            refutation_target: None,
            updated_score: None,
            candidates_after: Vec::new(),
            raw_completion: String::new(),
            rejected_completions: Vec::new(),
            protocol_violations: Vec::new(),
            tool_result: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub item_id: String,
    pub turns: Vec<TurnRecord>,
    pub s_r: f64,
    pub finalize_reason: FinalizeReason,
    /// Model calls issued by this trajectory: one per turn, one per
    /// re-prompt, plus calls made inside tools.
    pub vlm_calls: u32,
    pub retries: u32,
    pub extra_vlm_calls: u32,
    /// Size of the turn-1 suspect list after the cap.
    pub initial_candidates: usize,
}

impl Trajectory {
    pub fn n_turns(&self) -> u32 {
        self.turns.len() as u32
    }

    pub fn tools_invoked(&self) -> impl Iterator<Item = &str> {
        self.turns
            .iter()
            .filter_map(|t| t.tool_result.as_ref().map(|r| r.tool.as_str()))
    }
}

#[derive(Debug, Error)]
#[error("refutation for {item} failed at turn {turn}: {source}")]
pub struct AgentError {
    pub item: String,
    pub turn: u32,
    #[source]
    pub source: BackendError,
    /// Turns completed before the failure.
    pub partial: Vec<TurnRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub max_turns: u32,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            max_turns: DEFAULT_MAX_TURNS,
        }
    }
}

/// Everything the agent reads for one item.
pub struct AgentInputs<'a> {
    pub item: &'a ItemView,
    pub domain: &'a DomainSpec,
    pub images: &'a LazyImages<'a>,
    pub provider: &'a dyn FeatureProvider,
    pub knowledge: &'a KnowledgeBase,
    pub tool_config: &'a ToolConfig,
    pub rules_context: &'a str,
}

pub fn system_message(max_turns: u32) -> ChatMessage {
    ChatMessage::system(prompts::render(
        prompts::AGENT_SYSTEM,
        &[
            ("max_turns", &max_turns.to_string()),
            ("tools", &tools::catalog_listing()),
        ],
    ))
}

pub fn turn1_message(inputs: &AgentInputs<'_>, max_turns: u32) -> Result<ChatMessage, String> {
    let imgs = inputs.images.get().map_err(|e| e.to_string())?;
    let d = inputs.domain;
    let text = prompts::render(
        prompts::AGENT_TURN1,
        &[
            ("rules", inputs.rules_context),
            ("domain", d.code.as_str()),
            ("family", &d.family),
            ("hint", &d.hint),
            ("n_refs", &imgs.references.len().to_string()),
            ("max_turns", &max_turns.to_string()),
        ],
    );
    Ok(ChatMessage::user(text, item_attachments(imgs)))
}

pub fn format_candidates(live: &[CandidateFeature]) -> String {
    if live.is_empty() {
        return "(none)".to_string();
    }
    live.iter()
        .enumerate()
        .map(|(i, c)| format!("{i}. {} (suspicion {:.2})", c.description, c.suspicion))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Message for turn `turn >= 2`: the previous tool's observation with the
/// disconfirmatory clause, current suspects and score, then either the
/// next-turn request or, on the last turn, the forced-final request.
pub fn observation_message(
    turn: u32,
    max_turns: u32,
    live: &[CandidateFeature],
    score: f64,
    last: &ToolResult,
) -> ChatMessage {
    let mut text = prompts::render(
        prompts::AGENT_OBSERVATION,
        &[
            ("tool", &last.tool),
            ("prev_turn", &(turn - 1).to_string()),
            ("observation", &last.observation),
            ("candidates", &format_candidates(live)),
            ("score", &format!("{score:.2}")),
        ],
    );
    text.push('\n');
    let vars = [("turn", turn.to_string()), ("max_turns", max_turns.to_string())];
    let vars: Vec<(&str, &str)> = vars.iter().map(|(k, v)| (*k, v.as_str())).collect();
    let tail = if turn >= max_turns {
        prompts::AGENT_FORCED_FINAL
    } else {
        prompts::AGENT_NEXT
    };
    text.push_str(&prompts::render(tail, &vars));
    ChatMessage::tool(text, last.attachments.clone())
}

struct Run<'a> {
    backend: &'a dyn ChatBackend,
    inputs: &'a AgentInputs<'a>,
    messages: Vec<ChatMessage>,
    turns: Vec<TurnRecord>,
    retries: u32,
    extra: u32,
}

enum Reply<T> {
    Parsed { value: T, raw: String, rejected: Vec<String> },
    Failed { rejected: Vec<String> },
}

impl<'a> Run<'a> {
    fn fail(&mut self, turn: u32, source: BackendError) -> AgentError {
        AgentError {
            item: self.inputs.item.id.clone(),
            turn,
            source,
            partial: std::mem::take(&mut self.turns),
        }
    }

    /// Sends the conversation, parses the reply, re-prompts once on a
    /// parse failure.
    fn ask<T>(
        &mut self,
        turn: u32,
        parse: fn(&str) -> Result<T, ParseError>,
    ) -> Result<Reply<T>, AgentError> {
        let id = self.inputs.item.id.clone();
        let first = call(self.backend, CallKey::new(id.clone(), tags::AGENT, turn), &self.messages, false)
            .map_err(|e| self.fail(turn, e))?;
        self.messages.push(ChatMessage::assistant(first.text.clone()));
        let err = match parse(&first.text) {
            Ok(v) => {
                return Ok(Reply::Parsed {
                    value: v,
                    raw: first.text,
                    rejected: Vec::new(),
                })
            }
            Err(e) => e,
        };
        self.retries += 1;
        self.messages.push(ChatMessage::user(
            prompts::render(prompts::AGENT_RETRY, &[("error", &err.to_string())]),
            vec![],
        ));
        let second = call(self.backend, CallKey::new(id, tags::AGENT_RETRY, turn), &self.messages, false)
            .map_err(|e| self.fail(turn, e))?;
        self.messages.push(ChatMessage::assistant(second.text.clone()));
        Ok(match parse(&second.text) {
            Ok(v) => Reply::Parsed {
                value: v,
                raw: second.text,
                rejected: vec![first.text],
            },
            Err(_) => Reply::Failed {
                rejected: vec![first.text, second.text],
            },
        })
    }

    fn invoke(&mut self, turn: u32, call: Option<&ToolCall>) -> ToolResult {
        let name = call
            .map(|c| c.name.as_str())
            .filter(|n| !n.trim().is_empty())
            .unwrap_or(MISSING_TOOL);
        let args = call.map(|c| c.args.clone()).unwrap_or(serde_json::Value::Null);
        let ctx = ToolContext {
            item: self.inputs.item,
            domain: self.inputs.domain,
            images: self.inputs.images,
            provider: self.inputs.provider,
            backend: self.backend,
            knowledge: self.inputs.knowledge,
            config: self.inputs.tool_config,
            turn,
        };
        let r = tools::invoke(name, &args, &ctx);
        self.extra += r.vlm_calls;
        r
    }

    fn finish(self, s_r: f64, reason: FinalizeReason, initial: usize) -> Trajectory {
        let n = self.turns.len() as u32;
        Trajectory {
            item_id: self.inputs.item.id.clone(),
            turns: self.turns,
            s_r,
            finalize_reason: reason,
            vlm_calls: n + self.retries + self.extra,
            retries: self.retries,
            extra_vlm_calls: self.extra,
            initial_candidates: initial,
        }
    }
}

/// Runs one refutation trajectory. Backend failures abort the item; every
/// other irregularity (bad JSON, unknown tool, unknown target) is handled
/// inside the protocol.
pub fn run_refutation(
    backend: &dyn ChatBackend,
    inputs: &AgentInputs<'_>,
    config: &AgentConfig,
) -> Result<Trajectory, AgentError> {
    let k = config.max_turns.max(1);
    let mut run = Run {
        backend,
        inputs,
        messages: vec![system_message(k)],
        turns: Vec::new(),
        retries: 0,
        extra: 0,
    };
    let first = turn1_message(inputs, k).map_err(|e| {
        run.fail(1, BackendError::InvalidRequest(format!("cannot build turn 1: {e}")))
    })?;
    run.messages.push(first);

    // turn 1
    let mut rec = TurnRecord::new(1);
    let t1 = match run.ask(1, state::parse_first_turn)? {
        Reply::Parsed { value, raw, rejected } => {
            rec.raw_completion = raw;
            rec.rejected_completions = rejected;
            value
        }
        Reply::Failed { mut rejected } => {
            rec.raw_completion = rejected.pop().unwrap_or_default();
            rec.rejected_completions = rejected;
            rec.updated_score = Some(state::TURN1_FALLBACK_SCORE);
            rec.protocol_violations.push("unparseable response after re-prompt".into());
            run.turns.push(rec);
            return Ok(run.finish(state::TURN1_FALLBACK_SCORE, FinalizeReason::ParseFallback, 0));
        }
    };
    let mut live = Vec::new();
    if t1.candidates.len() > state::MAX_CANDIDATES {
        rec.protocol_violations.push(format!(
            "{} suspects proposed, capped at {}",
            t1.candidates.len(),
            state::MAX_CANDIDATES
        ));
    }
    push_capped(&mut live, t1.candidates.clone());
    let initial = live.len();
    let mut score = t1.initial_score.clamp(0.0, 1.0);
    rec.refutation_target = t1.target.as_ref().map(TargetRef::label);
    rec.updated_score = Some(score);
    rec.candidates_after = live.clone();

    if live.is_empty() && t1.initial_score < state::EARLY_EXIT_BELOW {
        rec.action = Action::Final;
        run.turns.push(rec);
        return Ok(run.finish(state::EARLY_EXIT_SCORE, FinalizeReason::EarlyEmpty, initial));
    }
    if t1.action == Action::Final || k == 1 {
        rec.action = Action::Final;
        let reason = if t1.action == Action::Final {
            FinalizeReason::ModelFinal
        } else {
            rec.protocol_violations.push("tool call ignored on the last turn".into());
            FinalizeReason::ForcedFinal
        };
        run.turns.push(rec);
        return Ok(run.finish(clamp_score(score, live.len()), reason, initial));
    }
    rec.action = Action::CallTool;
    rec.tool = Some(t1.tool.clone().unwrap_or(ToolCall {
        name: MISSING_TOOL.into(),
        args: serde_json::Value::Null,
    }));
    let mut last = run.invoke(1, t1.tool.as_ref());
    rec.tool_result = Some(last.clone());
    run.turns.push(rec);

    for turn in 2..=k {
        run.messages
            .push(observation_message(turn, k, &live, score, &last));
        let mut rec = TurnRecord::new(turn);
        let reply = match run.ask(turn, state::parse_later_turn)? {
            Reply::Parsed { value, raw, rejected } => {
                rec.raw_completion = raw;
                rec.rejected_completions = rejected;
                value
            }
            Reply::Failed { mut rejected } => {
                rec.raw_completion = rejected.pop().unwrap_or_default();
                rec.rejected_completions = rejected;
                rec.updated_score = Some(score);
                rec.candidates_after = live.clone();
                rec.protocol_violations.push("unparseable response after re-prompt".into());
                run.turns.push(rec);
                let s = clamp_score(score, live.len());
                return Ok(run.finish(s, FinalizeReason::ParseFallback, initial));
            }
        };
        rec.refutation_target = reply.target.as_ref().map(TargetRef::label);
        if let Some(bad) = &reply.bad_verdict {
            rec.protocol_violations.push(format!("unknown verdict {bad:?} ignored"));
        }
        match (reply.verdict, &reply.target) {
            (Some(v), Some(t)) => match apply_verdict(&mut live, v, t) {
                Ok(()) => rec.verdict = Some(v),
                Err(msg) => rec.protocol_violations.push(msg),
            },
            (Some(_), None) => rec
                .protocol_violations
                .push("verdict given without a refutation_target, ignored".into()),
            (None, _) => {}
        }
        if !reply.add_candidates.is_empty() {
            let before = live.len() + reply.add_candidates.len();
            push_capped(&mut live, reply.add_candidates.clone());
            if before > live.len() {
                rec.protocol_violations.push(format!(
                    "suspect list capped at {}",
                    state::MAX_CANDIDATES
                ));
            }
        }
        if let Some(s) = reply.updated_score {
            score = s.clamp(0.0, 1.0);
        }
        rec.updated_score = Some(score);
        rec.candidates_after = live.clone();

        let last_turn = turn == k;
        if reply.action == Action::Final || last_turn {
            rec.action = Action::Final;
            let reason = if reply.action == Action::Final {
                FinalizeReason::ModelFinal
            } else {
                rec.protocol_violations.push("tool call ignored on the last turn".into());
                FinalizeReason::ForcedFinal
            };
            run.turns.push(rec);
            return Ok(run.finish(clamp_score(score, live.len()), reason, initial));
        }
        rec.action = Action::CallTool;
        rec.tool = Some(reply.tool.clone().unwrap_or(ToolCall {
            name: MISSING_TOOL.into(),
            args: serde_json::Value::Null,
        }));
        last = run.invoke(turn, reply.tool.as_ref());
        rec.tool_result = Some(last.clone());
        run.turns.push(rec);
    }
    unreachable!("the last turn always finalizes")
}

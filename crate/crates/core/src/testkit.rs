//! Builders for scripted runs over synthetic images. Used by the
//! integration and acceptance suites, and handy for trying the runtime
//! without a model endpoint.

use std::collections::BTreeMap;

use serde_json::{json, Value};

use crate::backend::{BackendCapabilities, ChatBackend, ScriptedBackend};
use crate::fusion::{Scorer, ScoringConfig};
use crate::loader::DefaultSource;
use crate::manifest::{benchmark_domains, DomainCode, DomainSpec, ItemView, Split};
use crate::tools::{KnowledgeBase, SyntheticProvider};

pub const TOY_SIZE: u32 = 64;

/// A query with two references. Queries with `defect` get a bright disk.
pub fn texture_item(id: &str, domain: DomainCode, seed: u64, defect: bool) -> ItemView {
    let blob = if defect { "&blob=0.3,0.6,0.12" } else { "" };
    ItemView {
        id: id.to_string(),
        domain,
        category: String::new(),
        query_ref: format!("synth://texture/{seed}?size={TOY_SIZE}{blob}"),
        reference_refs: (1..=2).map(|k| format!("synth://texture/{}?size={TOY_SIZE}", seed + 1000 * k)).collect(),
        split: Split::Test,
    }
}

pub fn domain_map() -> BTreeMap<DomainCode, DomainSpec> {
    benchmark_domains().into_iter().map(|d| (d.code, d)).collect()
}

/// Shared non-model state for a scripted scorer.
pub struct World {
    pub source: DefaultSource,
    pub provider: SyntheticProvider,
    pub knowledge: KnowledgeBase,
    pub domains: BTreeMap<DomainCode, DomainSpec>,
}

impl Default for World {
    fn default() -> Self {
        World {
            source: DefaultSource::new(".", BTreeMap::new()),
            provider: SyntheticProvider::default(),
            knowledge: KnowledgeBase::bundled(),
            domains: domain_map(),
        }
    }
}

impl World {
    pub fn scorer<'a>(&'a self, backend: &'a dyn ChatBackend, config: ScoringConfig) -> Scorer<'a> {
        Scorer {
            backend,
            source: &self.source,
            provider: &self.provider,
            knowledge: &self.knowledge,
            domains: self.domains.clone(),
            config,
        }
    }
}

pub fn json_backend() -> ScriptedBackend {
    ScriptedBackend::new(BackendCapabilities {
        name: "scripted".into(),
        supports_first_token_logprobs: false,
    })
}

/// Reply texts in the formats the prompts ask for.
pub mod reply {
    use super::*;

    pub fn direct(label: &str, confidence: f64) -> String {
        json!({"image_label": label, "confidence": confidence}).to_string()
    }

    fn cands(c: &[(&str, f64)]) -> Value {
        Value::Array(c.iter().map(|(d, s)| json!({"description": d, "suspicion": s})).collect())
    }

    /// Turn 1 asking for `tool` (any name, possibly unknown).
    pub fn turn1_tool(c: &[(&str, f64)], score: f64, tool: &str, args: Value) -> String {
        json!({
            "candidate_features": cands(c),
            "initial_score": score,
            "action": "call_tool",
            "tool": {"name": tool, "args": args},
            "refutation_target": 0
        })
        .to_string()
    }

    pub fn turn1_final(c: &[(&str, f64)], score: f64) -> String {
        json!({"candidate_features": cands(c), "initial_score": score, "action": "final"}).to_string()
    }

    /// A later turn with a verdict on `target`, then a tool call.
    pub fn later_tool(target: Value, verdict: &str, score: f64, tool: &str, args: Value) -> String {
        json!({
            "refutation_target": target,
            "refutation_verdict": verdict,
            "updated_score": score,
            "add_candidates": [],
            "action": "call_tool",
            "tool": {"name": tool, "args": args}
        })
        .to_string()
    }

    pub fn later_final(target: Value, verdict: &str, score: f64) -> String {
        json!({
            "refutation_target": target,
            "refutation_verdict": verdict,
            "updated_score": score,
            "add_candidates": [],
            "action": "final"
        })
        .to_string()
    }

    pub fn rules(r: &[(&str, &str)]) -> String {
        let list: Vec<Value> = r.iter().map(|(t, c)| json!({"text": t, "confidence": c})).collect();
        json!({ "rules": list }).to_string()
    }
}

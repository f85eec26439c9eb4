//! Rule memory and the online self-reflection pass.
//!
//! Items of one domain are processed in manifest order. After each item
//! the two branch scores are compared; a strong disagreement queues the
//! item, and a full queue triggers one reflector call whose rules become
//! visible to later items of the same domain. No label is ever read here:
//! the pass only sees `ItemView`s.

pub mod alpha;
pub mod cluster;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agent::Trajectory;
use crate::backend::{call, parse_structured_block, tags, Attachment, CallKey, ChatBackend, ChatMessage, JsonKind};
use crate::direct::DirectResult;
use crate::fusion::{run_pool, ItemOutcome, Scorer};
use crate::loader::ImageSource;
use crate::manifest::{DomainCode, DomainSpec, ItemView};
use crate::prompts;

pub const DEFAULT_TAU: f64 = 0.30;
pub const DEFAULT_BATCH: usize = 10;
pub const DEFAULT_RULES_K: usize = 3;
pub const MAX_RULES_PER_CALL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleType {
    Osr,
    CorrectiveFn,
    CorrectiveFp,
    Invariant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Confidence {
    Low,
    Medium,
    High,
}

impl Confidence {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "low" => Some(Confidence::Low),
            "medium" | "med" => Some(Confidence::Medium),
            "high" => Some(Confidence::High),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub text: String,
    pub domain: DomainCode,
    /// Empty matches every category.
    #[serde(default)]
    pub category: String,
    pub rule_type: RuleType,
    pub confidence: Confidence,
    pub source_items: Vec<String>,
    /// Position (1-based) of the last item processed before the rule was
    /// written; 0 for rules present before the pass starts.
    pub created_seq: u64,
}

/// Per-domain, append-only rule lists.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RuleStore {
    pub domains: BTreeMap<DomainCode, Vec<Rule>>,
}

impl RuleStore {
    pub fn new() -> Self {
        RuleStore::default()
    }

    pub fn append(&mut self, rule: Rule) {
        self.domains.entry(rule.domain).or_default().push(rule);
    }

    pub fn rules(&self, d: DomainCode) -> &[Rule] {
        self.domains.get(&d).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.domains.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Up to `k` rule texts for an item at position `seq`: same domain,
    /// category equal or wildcard, created before `seq`, newest first.
    pub fn retrieve(&self, d: DomainCode, category: &str, seq: u64, k: usize) -> Vec<String> {
        let mut hits: Vec<(usize, &Rule)> = self
            .rules(d)
            .iter()
            .enumerate()
            .filter(|(_, r)| r.created_seq < seq.max(1))
            .filter(|(_, r)| r.category.is_empty() || r.category.eq_ignore_ascii_case(category))
            .collect();
        hits.sort_by(|a, b| b.1.created_seq.cmp(&a.1.created_seq).then(b.0.cmp(&a.0)));
        hits.into_iter().take(k).map(|(_, r)| r.text.clone()).collect()
    }

    pub fn split_by_domain(self) -> BTreeMap<DomainCode, RuleStore> {
        self.domains
            .into_iter()
            .map(|(d, v)| (d, RuleStore { domains: BTreeMap::from([(d, v)]) }))
            .collect()
    }

    pub fn merge(&mut self, other: RuleStore) {
        for (d, v) in other.domains {
            self.domains.entry(d).or_default().extend(v);
        }
    }

    /// All rules, domains in code order.
    pub fn all(&self) -> Vec<&Rule> {
        self.domains.values().flatten().collect()
    }

    /// Reads either a bare JSON array of rules or an object with a
    /// `rules` array (the layout written by runs).
    pub fn load(path: impl AsRef<Path>) -> Result<Self, String> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| format!("{}: {e}", path.as_ref().display()))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        let list = match v {
            Value::Object(mut m) => m.remove("rules").ok_or("missing \"rules\" array")?,
            other => other,
        };
        let rules: Vec<Rule> = serde_json::from_value(list).map_err(|e| e.to_string())?;
        let mut s = RuleStore::new();
        for r in rules {
            s.append(r);
        }
        Ok(s)
    }
}

/// Slack absorbing binary round-off, so that `|0.8 - 0.5|` is not read
/// as exceeding 0.30.
pub const DISAGREEMENT_EPS: f64 = 1e-9;

/// Strict `|s_d - s_r| > tau`, up to `DISAGREEMENT_EPS`.
pub fn disagrees(s_d: f64, s_r: f64, tau: f64) -> bool {
    (s_d - s_r).abs() > tau + DISAGREEMENT_EPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OsrConfig {
    pub enabled: bool,
    pub tau: f64,
    pub batch: usize,
    pub rules_k: usize,
}

impl Default for OsrConfig {
    fn default() -> Self {
        OsrConfig {
            enabled: true,
            tau: DEFAULT_TAU,
            batch: DEFAULT_BATCH,
            rules_k: DEFAULT_RULES_K,
        }
    }
}

/// What the reflector sees of one queued item.
#[derive(Debug, Clone)]
pub struct QueuedCase {
    pub view: ItemView,
    pub s_d: f64,
    pub s_r: f64,
    pub summary: String,
}

/// Compact text form of both branches, for reflector and cluster prompts.
pub fn summarize(direct: Option<&DirectResult>, traj: Option<&Trajectory>) -> String {
    let mut parts = Vec::new();
    if let Some(d) = direct {
        match (&d.raw_label, d.raw_confidence) {
            (Some(l), Some(c)) => parts.push(format!("quick look said {l} ({c:.2})")),
            _ => parts.push(format!("quick look score {:.2}", d.score)),
        }
    }
    if let Some(t) = traj {
        if let Some(first) = t.turns.first() {
            let names: Vec<String> = first
                .candidates_after
                .iter()
                .map(|c| c.description.clone())
                .collect();
            parts.push(if names.is_empty() {
                "no suspects at first look".to_string()
            } else {
                format!("suspects: {}", names.join("; "))
            });
        }
        for turn in t.turns.iter().skip(1) {
            let mut s = format!("turn {}", turn.index);
            if let Some(tool) = &turn.tool {
                s.push_str(&format!(" used {}", tool.name));
            }
            if let (Some(v), Some(tgt)) = (turn.verdict, &turn.refutation_target) {
                s.push_str(&format!(", {} on '{}'", v.as_str(), tgt));
            }
            parts.push(s);
        }
        let reason = serde_json::to_value(t.finalize_reason)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        parts.push(format!("ended {reason} with {:.2}", t.s_r));
    }
    parts.join(". ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Osr,
    Cluster,
    ResidualDiscarded,
}

/// One line of `reflections.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionEvent {
    pub kind: EventKind,
    pub domain: DomainCode,
    pub batch: u32,
    pub items: Vec<String>,
    pub proposed: usize,
    pub admitted: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rejected: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub call_error: Option<String>,
    #[serde(default)]
    pub raw_completion: String,
    pub created_seq: u64,
}

impl ReflectionEvent {
    fn new(kind: EventKind, domain: DomainCode, batch: u32, items: Vec<String>, seq: u64) -> Self {
        ReflectionEvent {
            kind,
            domain,
            batch,
            items,
            proposed: 0,
            admitted: 0,
            rejected: Vec::new(),
            parse_error: None,
            call_error: None,
            raw_completion: String::new(),
            created_seq: seq,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposedRule {
    pub text: String,
    pub category: String,
    pub confidence: Confidence,
}

/// Reads a `[{text, category?, confidence}]` array, keeping at most
/// `MAX_RULES_PER_CALL` usable entries. Unknown confidence reads as low.
pub fn read_rule_list(v: &Value) -> Vec<ProposedRule> {
    let Some(arr) = v.as_array() else {
        return Vec::new();
    };
    arr.iter()
        .filter_map(|r| {
            let text = r.get("text")?.as_str()?.trim().to_string();
            if text.is_empty() {
                return None;
            }
            let category = r
                .get("category")
                .and_then(Value::as_str)
                .unwrap_or("")
                .trim()
                .to_string();
            let confidence = r
                .get("confidence")
                .and_then(Value::as_str)
                .and_then(Confidence::parse)
                .unwrap_or(Confidence::Low);
            Some(ProposedRule { text, category, confidence })
        })
        .take(MAX_RULES_PER_CALL)
        .collect()
}

fn case_images(view: &ItemView, source: &dyn ImageSource, n: usize) -> Vec<Attachment> {
    let mut out = Vec::new();
    if let Ok(q) = source.load(&view.query_ref) {
        out.push(Attachment::new(format!("case {n} query"), q));
    }
    if let Some(r) = view.reference_refs.first().and_then(|r| source.load(r).ok()) {
        out.push(Attachment::new(format!("case {n} reference"), r));
    }
    out
}

/// Sends one reflector call over `queue` and admits rules rated medium or
/// higher. The queue is consumed whatever the outcome.
pub fn reflect(
    backend: &dyn ChatBackend,
    source: &dyn ImageSource,
    domain: &DomainSpec,
    queue: Vec<QueuedCase>,
    batch: u32,
    seq: u64,
    store: &mut RuleStore,
) -> ReflectionEvent {
    let ids: Vec<String> = queue.iter().map(|c| c.view.id.clone()).collect();
    let mut ev = ReflectionEvent::new(EventKind::Osr, domain.code, batch, ids.clone(), seq);
    let mut cases = String::new();
    let mut images = Vec::new();
    for (i, c) in queue.iter().enumerate() {
        let n = i + 1;
        let cat = if c.view.category.is_empty() { "none" } else { &c.view.category };
        cases.push_str(&format!(
            "Case {n} (category {cat}): score A {:.2}, score B {:.2}. {}\n",
            c.s_d, c.s_r, c.summary
        ));
        images.extend(case_images(&c.view, source, n));
    }
    let text = prompts::render(
        prompts::REFLECTOR,
        &[("domain", domain.code.as_str()), ("family", &domain.family), ("cases", cases.trim_end())],
    );
    let msgs = [ChatMessage::system(prompts::AUX_SYSTEM), ChatMessage::user(text, images)];
    let key = CallKey::new(domain.code.as_str(), tags::REFLECTOR, batch);
    let out = match call(backend, key, &msgs, false) {
        Ok(o) => o,
        Err(e) => {
            log::warn!("reflector call failed for {} batch {batch}: {e}", domain.code);
            ev.call_error = Some(e.to_string());
            return ev;
        }
    };
    ev.raw_completion = out.text.clone();
    let parsed = match parse_structured_block(&out.text, &[("rules", JsonKind::Array)]) {
        Ok(v) => v,
        Err(e) => {
            log::warn!("reflector reply for {} batch {batch} unparseable: {e}", domain.code);
            ev.parse_error = Some(e.to_string());
            return ev;
        }
    };
    let proposed = read_rule_list(&parsed["rules"]);
    ev.proposed = proposed.len();
    for p in proposed {
        if p.confidence < Confidence::Medium {
            ev.rejected.push(p.text);
            continue;
        }
        store.append(Rule {
            text: p.text,
            domain: domain.code,
            category: p.category,
            rule_type: RuleType::Osr,
            confidence: p.confidence,
            source_items: ids.clone(),
            created_seq: seq,
        });
        ev.admitted += 1;
    }
    ev
}

pub struct OsrOutput {
    /// In the order of the input items.
    pub outcomes: Vec<ItemOutcome>,
    pub store: RuleStore,
    pub events: Vec<ReflectionEvent>,
}

struct DomainPass {
    outcomes: Vec<(usize, ItemOutcome)>,
    store: RuleStore,
    events: Vec<ReflectionEvent>,
}

fn run_domain(
    scorer: &Scorer<'_>,
    domain: &DomainSpec,
    items: &[(usize, &ItemView)],
    mut store: RuleStore,
    cfg: &OsrConfig,
) -> DomainPass {
    let mut queue: Vec<QueuedCase> = Vec::new();
    let mut events = Vec::new();
    let mut outcomes = Vec::with_capacity(items.len());
    let mut batch = 0u32;
    for (pos, (idx, item)) in items.iter().enumerate() {
        let seq = pos as u64 + 1;
        let rules = store.retrieve(item.domain, &item.category, seq, cfg.rules_k);
        let out = scorer.run_item(item, &rules);
        if cfg.enabled {
            if let (Some(sd), Some(sr)) = (out.record.s_d, out.record.s_r) {
                if disagrees(sd, sr, cfg.tau) {
                    queue.push(QueuedCase {
                        view: (*item).clone(),
                        s_d: sd,
                        s_r: sr,
                        summary: summarize(out.trace.direct.as_ref(), out.trace.trajectory.as_ref()),
                    });
                }
            }
            if queue.len() >= cfg.batch.max(1) {
                batch += 1;
                let q = std::mem::take(&mut queue);
                events.push(reflect(scorer.backend, scorer.source, domain, q, batch, seq, &mut store));
            }
        }
        outcomes.push((*idx, out));
    }
    if !queue.is_empty() {
        log::info!("{}: {} queued items left unreflected at pass end", domain.code, queue.len());
        let ev = ReflectionEvent::new(
            EventKind::ResidualDiscarded,
            domain.code,
            batch,
            queue.iter().map(|c| c.view.id.clone()).collect(),
            items.len() as u64,
        );
        events.push(ev);
    }
    DomainPass { outcomes, store, events }
}

/// Scores items with a fixed rule store (no reflection), `workers` wide.
pub fn run_static_rules(
    scorer: &Scorer<'_>,
    items: &[ItemView],
    store: &RuleStore,
    k: usize,
    workers: usize,
) -> Vec<ItemOutcome> {
    use rayon::prelude::*;
    run_pool(workers, || {
        items
            .par_iter()
            .map(|it| {
                let rules = store.retrieve(it.domain, &it.category, u64::MAX, k);
                scorer.run_item(it, &rules)
            })
            .collect()
    })
}

/// Online pass over `items`. Domains run in parallel on `workers` threads;
/// items within a domain run in order.
pub fn run_osr_pass(
    scorer: &Scorer<'_>,
    items: &[ItemView],
    initial: RuleStore,
    cfg: &OsrConfig,
    workers: usize,
) -> OsrOutput {
    use rayon::prelude::*;
    let mut groups: BTreeMap<DomainCode, Vec<(usize, &ItemView)>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        groups.entry(it.domain).or_default().push((i, it));
    }
    let mut stores = initial.split_by_domain();
    let jobs: Vec<(DomainCode, Vec<(usize, &ItemView)>, RuleStore)> = groups
        .into_iter()
        .map(|(d, v)| (d, v, stores.remove(&d).unwrap_or_default()))
        .collect();
    // domains without items keep their rules untouched
    let mut store = RuleStore::new();
    for (_, s) in stores {
        store.merge(s);
    }
    let passes: Vec<Result<DomainPass, (DomainCode, Vec<(usize, &ItemView)>)>> = run_pool(workers, || {
        jobs.into_par_iter()
            .map(|(d, v, s)| match scorer.domains.get(&d) {
                Some(spec) => Ok(run_domain(scorer, spec, &v, s, cfg)),
                None => Err((d, v)),
            })
            .collect()
    });
    let mut slots: Vec<Option<ItemOutcome>> = (0..items.len()).map(|_| None).collect();
    let mut events = Vec::new();
    for p in passes {
        match p {
            Ok(p) => {
                for (i, o) in p.outcomes {
                    slots[i] = Some(o);
                }
                store.merge(p.store);
                events.extend(p.events);
            }
            Err((_, v)) => {
                // run_item reports the missing domain spec
                for (i, it) in v {
                    slots[i] = Some(scorer.run_item(it, &[]));
                }
            }
        }
    }
    OsrOutput {
        outcomes: slots.into_iter().map(|o| o.expect("every item scored")).collect(),
        store,
        events,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn rule(d: DomainCode, cat: &str, seq: u64, text: &str) -> Rule {
        Rule {
            text: text.into(),
            domain: d,
            category: cat.into(),
            rule_type: RuleType::Osr,
            confidence: Confidence::Medium,
            source_items: vec![],
            created_seq: seq,
        }
    }

    #[test]
    fn disagreement_is_strict() {
        assert!(!disagrees(0.8, 0.5, 0.30));
        assert!(disagrees(0.81, 0.5, 0.30));
        assert!(disagrees(0.1, 0.9, 0.30));
    }

    #[test]
    fn retrieval_order_and_filters() {
        let mut s = RuleStore::new();
        s.append(rule(DomainCode::D1, "", 0, "old wildcard"));
        s.append(rule(DomainCode::D1, "screw", 3, "screw rule"));
        s.append(rule(DomainCode::D1, "nut", 4, "nut rule"));
        s.append(rule(DomainCode::D1, "", 5, "new wildcard"));
        s.append(rule(DomainCode::D2, "", 0, "other domain"));
        assert_eq!(
            s.retrieve(DomainCode::D1, "screw", 10, 3),
            vec!["new wildcard", "screw rule", "old wildcard"]
        );
        // not yet visible
        assert_eq!(s.retrieve(DomainCode::D1, "screw", 4, 3), vec!["screw rule", "old wildcard"]);
        assert_eq!(s.retrieve(DomainCode::D1, "Screw", 1, 3), vec!["old wildcard"]);
        assert_eq!(s.retrieve(DomainCode::D1, "screw", 10, 1), vec!["new wildcard"]);
    }

    #[test]
    fn same_seq_newest_insert_first() {
        let mut s = RuleStore::new();
        s.append(rule(DomainCode::D1, "", 2, "a"));
        s.append(rule(DomainCode::D1, "", 2, "b"));
        assert_eq!(s.retrieve(DomainCode::D1, "", 3, 3), vec!["b", "a"]);
    }

    #[test]
    fn rule_list_reading() {
        let v = json!([
            {"text": "one", "confidence": "high"},
            {"text": "  ", "confidence": "high"},
            {"text": "two", "category": "nut", "confidence": "bogus"},
            {"text": "three", "confidence": "Medium"},
            {"text": "four", "confidence": "high"}
        ]);
        let r = read_rule_list(&v);
        assert_eq!(r.len(), 3);
        assert_eq!(r[1].confidence, Confidence::Low);
        assert_eq!(r[1].category, "nut");
        assert_eq!(r[2].confidence, Confidence::Medium);
        assert!(read_rule_list(&json!("x")).is_empty());
    }

    #[test]
    fn store_split_merge_roundtrip() {
        let mut s = RuleStore::new();
        s.append(rule(DomainCode::D1, "", 0, "a"));
        s.append(rule(DomainCode::D4, "", 0, "b"));
        let parts = s.clone().split_by_domain();
        let mut m = RuleStore::new();
        for (_, p) in parts {
            m.merge(p);
        }
        assert_eq!(m, s);
    }
}

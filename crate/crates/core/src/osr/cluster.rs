//! Offline corrective rules from labeled development mistakes.

use std::collections::BTreeMap;

use crate::backend::{call, parse_structured_block, tags, CallKey, ChatBackend, ChatMessage, JsonKind};
use crate::fusion::ItemTrace;
use crate::fusion::ScoreRecord;
use crate::loader::ImageSource;
use crate::manifest::{DomainCode, DomainSpec, ItemView};
use crate::prompts;

use super::{
    read_rule_list, summarize, Confidence, EventKind, ProposedRule, ReflectionEvent, Rule, RuleStore,
    RuleType,
};

pub const DEFAULT_CLUSTER_K: usize = 10;

/// A scored development item with its ground truth.
#[derive(Debug, Clone)]
pub struct LabeledCase<'a> {
    pub view: &'a ItemView,
    pub record: &'a ScoreRecord,
    pub trace: Option<&'a ItemTrace>,
    pub label: bool,
}

impl LabeledCase<'_> {
    fn score(&self) -> Option<f64> {
        self.record.s_final
    }

    pub fn is_false_negative(&self) -> bool {
        self.label && self.score().is_some_and(|s| s < 0.5)
    }

    pub fn is_false_positive(&self) -> bool {
        !self.label && self.score().is_some_and(|s| s >= 0.5)
    }
}

/// First `k / 2` false negatives and first `k / 2` false positives, in
/// input order.
pub fn select_mistakes<'c, 'a>(
    cases: &'c [LabeledCase<'a>],
    k: usize,
) -> (Vec<&'c LabeledCase<'a>>, Vec<&'c LabeledCase<'a>>) {
    let half = k / 2;
    let fns = cases.iter().filter(|c| c.is_false_negative()).take(half).collect();
    let fps = cases.iter().filter(|c| c.is_false_positive()).take(half).collect();
    (fns, fps)
}

fn case_block(cases: &[&LabeledCase<'_>]) -> String {
    if cases.is_empty() {
        return "(none)".to_string();
    }
    cases
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let cat = if c.view.category.is_empty() { "none" } else { &c.view.category };
            let summary = summarize(
                c.trace.and_then(|t| t.direct.as_ref()),
                c.trace.and_then(|t| t.trajectory.as_ref()),
            );
            format!(
                "{}. id {} (category {cat}): final score {:.2}. {summary}",
                i + 1,
                c.view.id,
                c.record.s_final.unwrap_or(f64::NAN)
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn mentions_any(text: &str, ids: &[String]) -> bool {
    ids.iter().any(|id| !id.is_empty() && text.contains(id.as_str()))
}

fn admit(
    store: &mut RuleStore,
    ev: &mut ReflectionEvent,
    domain: DomainCode,
    proposed: Vec<ProposedRule>,
    rule_type: RuleType,
    sources: &[String],
    batch_ids: &[String],
) {
    if sources.is_empty() {
        return;
    }
    ev.proposed += proposed.len();
    for p in proposed {
        if p.confidence < Confidence::Medium || mentions_any(&p.text, batch_ids) {
            ev.rejected.push(p.text);
            continue;
        }
        store.append(Rule {
            text: p.text,
            domain,
            category: p.category,
            rule_type,
            confidence: p.confidence,
            source_items: sources.to_vec(),
            created_seq: 0,
        });
        ev.admitted += 1;
    }
}

/// One cluster call for `domain` over the selected mistakes. Returns
/// `None` when the domain has no mistakes, in which case no call is made.
pub fn build_domain_rules(
    backend: &dyn ChatBackend,
    source: &dyn ImageSource,
    domain: &DomainSpec,
    cases: &[LabeledCase<'_>],
    k: usize,
    store: &mut RuleStore,
) -> Option<ReflectionEvent> {
    let (fns, fps) = select_mistakes(cases, k);
    if fns.is_empty() && fps.is_empty() {
        return None;
    }
    let fn_ids: Vec<String> = fns.iter().map(|c| c.view.id.clone()).collect();
    let fp_ids: Vec<String> = fps.iter().map(|c| c.view.id.clone()).collect();
    let all_ids: Vec<String> = fn_ids.iter().chain(&fp_ids).cloned().collect();
    let mut ev = ReflectionEvent::new(EventKind::Cluster, domain.code, 0, all_ids.clone(), 0);

    let mut images = Vec::new();
    for (side, list) in [("missed", &fns), ("false alarm", &fps)] {
        for (i, c) in list.iter().enumerate() {
            if let Ok(q) = source.load(&c.view.query_ref) {
                images.push(crate::backend::Attachment::new(format!("{side} {} query", i + 1), q));
            }
        }
    }
    let text = prompts::render(
        prompts::CLUSTER,
        &[
            ("domain", domain.code.as_str()),
            ("family", &domain.family),
            ("fn_cases", &case_block(&fns)),
            ("fp_cases", &case_block(&fps)),
        ],
    );
    let msgs = [ChatMessage::system(prompts::AUX_SYSTEM), ChatMessage::user(text, images)];
    let key = CallKey::new(domain.code.as_str(), tags::CLUSTER, 0);
    let out = match call(backend, key, &msgs, false) {
        Ok(o) => o,
        Err(e) => {
            ev.call_error = Some(e.to_string());
            return Some(ev);
        }
    };
    ev.raw_completion = out.text.clone();
    let parsed = match parse_structured_block(
        &out.text,
        &[("fn_rules", JsonKind::Array), ("fp_rules", JsonKind::Array)],
    ) {
        Ok(v) => v,
        Err(e) => {
            ev.parse_error = Some(e.to_string());
            return Some(ev);
        }
    };
    let fn_rules = read_rule_list(&parsed["fn_rules"]);
    let fp_rules = read_rule_list(&parsed["fp_rules"]);
    admit(store, &mut ev, domain.code, fn_rules, RuleType::CorrectiveFn, &fn_ids, &all_ids);
    admit(store, &mut ev, domain.code, fp_rules, RuleType::CorrectiveFp, &fp_ids, &all_ids);
    Some(ev)
}

/// Cluster rules for every domain present in `cases`, domains in code order.
pub fn build_cluster_rules(
    backend: &dyn ChatBackend,
    source: &dyn ImageSource,
    domains: &BTreeMap<DomainCode, DomainSpec>,
    cases: &[LabeledCase<'_>],
    k: usize,
) -> (RuleStore, Vec<ReflectionEvent>) {
    let mut by_domain: BTreeMap<DomainCode, Vec<LabeledCase<'_>>> = BTreeMap::new();
    for c in cases {
        by_domain.entry(c.view.domain).or_default().push(c.clone());
    }
    let mut store = RuleStore::new();
    let mut events = Vec::new();
    for (d, list) in by_domain {
        let Some(spec) = domains.get(&d) else {
            log::warn!("no domain spec for {d}; skipping cluster rules");
            continue;
        };
        if let Some(ev) = build_domain_rules(backend, source, spec, &list, k, &mut store) {
            events.push(ev);
        }
    }
    (store, events)
}

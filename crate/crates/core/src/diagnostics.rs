//! Label-free behaviour summaries over refutation trajectories.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Trajectory, Verdict};
use crate::fusion::ScoreRecord;
use crate::manifest::DomainCode;
use crate::tools::normalize_name;

pub const EFFECTIVE_TOOL_RATE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiagnosticsError {
    #[error("no trajectories to summarize")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CallStats {
    pub mean: f64,
    /// Nearest-rank 90th percentile.
    pub p90: u32,
    pub max: u32,
}

impl CallStats {
    pub fn of(calls: &[u32]) -> Option<Self> {
        if calls.is_empty() {
            return None;
        }
        let mut s = calls.to_vec();
        s.sort_unstable();
        let rank = (0.9 * s.len() as f64).ceil() as usize;
        Some(CallStats {
            mean: s.iter().map(|&c| c as f64).sum::<f64>() / s.len() as f64,
            p90: s[rank.max(1) - 1],
            max: *s.last().expect("non-empty"),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorSummary {
    pub items: usize,
    pub turn_histogram: BTreeMap<u32, f64>,
    pub turn1_finalize_share: f64,
    /// Fraction of items that invoked the tool at least once.
    pub tool_invocation_rates: BTreeMap<String, f64>,
    pub verdict_distribution: BTreeMap<String, f64>,
    /// Mean size of the turn-1 suspect list.
    pub mean_candidates: f64,
    /// Items whose final suspect list is empty.
    pub zero_candidate_final_share: f64,
    pub vlm_calls: CallStats,
    pub vlm_calls_by_domain: BTreeMap<DomainCode, CallStats>,
    pub effective_tools: Vec<String>,
}

/// Calls per item recomputed from the trajectory: the Direct call when it
/// succeeded, plus turns, re-prompts and tool-internal calls.
pub fn item_calls(record: &ScoreRecord, traj: Option<&Trajectory>) -> u32 {
    u32::from(record.s_d.is_some()) + traj.map_or(0, |t| t.vlm_calls)
}

/// Summary over items that have both a score record and a trajectory.
pub fn summarize(records: &[ScoreRecord], trajectories: &[Trajectory]) -> Result<BehaviorSummary, DiagnosticsError> {
    let by_id: BTreeMap<&str, &Trajectory> = trajectories.iter().map(|t| (t.item_id.as_str(), t)).collect();
    let joined: Vec<(&ScoreRecord, &Trajectory)> = records
        .iter()
        .filter_map(|r| by_id.get(r.item_id.as_str()).map(|t| (r, *t)))
        .collect();
    if joined.is_empty() {
        return Err(DiagnosticsError::Empty);
    }
    let n = joined.len() as f64;

    let mut turns: BTreeMap<u32, usize> = BTreeMap::new();
    let mut tools: BTreeMap<String, usize> = BTreeMap::new();
    let mut verdicts: BTreeMap<String, usize> = BTreeMap::new();
    let mut cands = 0usize;
    let mut zero_final = 0usize;
    let mut calls = Vec::with_capacity(joined.len());
    let mut calls_by_domain: BTreeMap<DomainCode, Vec<u32>> = BTreeMap::new();
    for (r, t) in &joined {
        *turns.entry(t.n_turns()).or_default() += 1;
        let mut seen: Vec<String> = t.tools_invoked().map(normalize_name).collect();
        seen.sort();
        seen.dedup();
        for name in seen {
            *tools.entry(name).or_default() += 1;
        }
        for v in t.turns.iter().filter_map(|x| x.verdict) {
            *verdicts.entry(v.as_str().to_string()).or_default() += 1;
        }
        cands += t.initial_candidates;
        if t.turns.last().is_none_or(|x| x.candidates_after.is_empty()) {
            zero_final += 1;
        }
        let c = item_calls(r, Some(t));
        calls.push(c);
        calls_by_domain.entry(r.domain).or_default().push(c);
    }
    let total_verdicts: usize = verdicts.values().sum();
    let mut verdict_distribution: BTreeMap<String, f64> = BTreeMap::new();
    if total_verdicts > 0 {
        for v in Verdict::ALL {
            let k = verdicts.get(v.as_str()).copied().unwrap_or(0);
            verdict_distribution.insert(v.as_str().to_string(), k as f64 / total_verdicts as f64);
        }
    }
    let tool_invocation_rates: BTreeMap<String, f64> =
        tools.into_iter().map(|(k, v)| (k, v as f64 / n)).collect();
    let mut s = BehaviorSummary {
        items: joined.len(),
        turn1_finalize_share: turns.get(&1).copied().unwrap_or(0) as f64 / n,
        turn_histogram: turns.into_iter().map(|(k, v)| (k, v as f64 / n)).collect(),
        effective_tools: Vec::new(),
        tool_invocation_rates,
        verdict_distribution,
        mean_candidates: cands as f64 / n,
        zero_candidate_final_share: zero_final as f64 / n,
        vlm_calls: CallStats::of(&calls).expect("non-empty"),
        vlm_calls_by_domain: calls_by_domain
            .into_iter()
            .map(|(d, v)| (d, CallStats::of(&v).expect("non-empty")))
            .collect(),
    };
    s.effective_tools = effective_tools(&s.tool_invocation_rates, EFFECTIVE_TOOL_RATE);
    Ok(s)
}

/// Tools at or above `threshold`, highest rate first, then by name.
pub fn effective_tools(rates: &BTreeMap<String, f64>, threshold: f64) -> Vec<String> {
    let mut v: Vec<(&String, f64)> = rates.iter().filter(|(_, &r)| r >= threshold).map(|(k, &r)| (k, r)).collect();
    v.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite").then(a.0.cmp(b.0)));
    v.into_iter().map(|(k, _)| k.clone()).collect()
}

/// Items whose recomputed call count differs from an independent counter.
pub fn call_mismatches(
    records: &[ScoreRecord],
    trajectories: &[Trajectory],
    counted: &BTreeMap<String, u32>,
) -> Vec<(String, u32, u32)> {
    let by_id: BTreeMap<&str, &Trajectory> = trajectories.iter().map(|t| (t.item_id.as_str(), t)).collect();
    records
        .iter()
        .filter(|r| !r.errored)
        .filter_map(|r| {
            let mine = item_calls(r, by_id.get(r.item_id.as_str()).copied());
            let theirs = counted.get(&r.item_id).copied().unwrap_or(0);
            (mine != theirs).then(|| (r.item_id.clone(), mine, theirs))
        })
        .collect()
}

fn tsv<K: std::fmt::Display>(header: &str, rows: impl IntoIterator<Item = (K, f64)>) -> String {
    let mut s = format!("{header}\tfraction\n");
    for (k, v) in rows {
        s.push_str(&format!("{k}\t{v:.6}\n"));
    }
    s
}

/// Plot-ready tables keyed by file name.
pub fn tables(s: &BehaviorSummary) -> BTreeMap<&'static str, String> {
    let mut tool_rows: Vec<(&String, f64)> = s.tool_invocation_rates.iter().map(|(k, &v)| (k, v)).collect();
    tool_rows.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite").then(a.0.cmp(b.0)));
    BTreeMap::from([
        ("turn_histogram.tsv", tsv("turns", s.turn_histogram.iter().map(|(k, &v)| (k, v)))),
        ("tool_rates.tsv", tsv("tool", tool_rows)),
        ("verdict_mix.tsv", tsv("verdict", s.verdict_distribution.iter().map(|(k, &v)| (k, v)))),
    ])
}

//! Per-item orchestration: Direct and refutation branches, then the convex
//! blend of their two scores.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{run_refutation, AgentConfig, AgentInputs, TurnRecord, Trajectory};
use crate::backend::ChatBackend;
use crate::direct::{score_direct, DirectForm, DirectFormChoice, DirectResult};
use crate::loader::{ImageSource, LazyImages};
use crate::manifest::{DomainCode, DomainSpec, ItemView};
use crate::prompts;
use crate::tools::{FeatureProvider, KnowledgeBase, ToolConfig};

pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FusionError {
    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("alpha {0} outside [0, 1]")]
    AlphaOutOfRange(f64),
}

fn unit(x: f64) -> bool {
    (0.0..=1.0).contains(&x)
}

/// `alpha * s_d + (1 - alpha) * s_r`.
pub fn fuse(s_d: f64, s_r: f64, alpha: f64) -> Result<f64, FusionError> {
    if !unit(alpha) {
        return Err(FusionError::AlphaOutOfRange(alpha));
    }
    for s in [s_d, s_r] {
        if !unit(s) {
            return Err(FusionError::ScoreOutOfRange(s));
        }
    }
    Ok(alpha * s_d + (1.0 - alpha) * s_r)
}

/// One line of `scores.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub item_id: String,
    pub domain: DomainCode,
    pub s_d: Option<f64>,
    pub s_r: Option<f64>,
    pub s_final: Option<f64>,
    pub alpha: f64,
    pub direct_form: DirectForm,
    pub errored: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Direct call plus every call made by the refutation trajectory.
    pub vlm_calls: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentFailure {
    pub turn: u32,
    pub error: String,
    pub partial: Vec<TurnRecord>,
}

/// One line of `traces.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItemTrace {
    pub item_id: String,
    pub domain: DomainCode,
    pub rules_context: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub direct: Option<DirectResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub direct_error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<Trajectory>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub agent_failure: Option<AgentFailure>,
    /// Calls seen by the metering wrapper, when one is in use.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backend_calls: Option<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItemOutcome {
    pub record: ScoreRecord,
    pub trace: ItemTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoringConfig {
    pub direct_form: DirectFormChoice,
    pub alpha: f64,
    /// Per-domain override of `alpha`.
    pub domain_alpha: BTreeMap<DomainCode, f64>,
    pub agent: AgentConfig,
    pub tools: ToolConfig,
    /// Run the two branches of one item concurrently.
    pub concurrent_branches: bool,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            direct_form: DirectFormChoice::Auto,
            alpha: DEFAULT_ALPHA,
            domain_alpha: BTreeMap::new(),
            agent: AgentConfig::default(),
            tools: ToolConfig::default(),
            concurrent_branches: true,
        }
    }
}

impl ScoringConfig {
    pub fn alpha_for(&self, d: DomainCode) -> f64 {
        self.domain_alpha.get(&d).copied().unwrap_or(self.alpha)
    }
}

/// Shared, read-only state for scoring items.
pub struct Scorer<'a> {
    pub backend: &'a dyn ChatBackend,
    pub source: &'a dyn ImageSource,
    pub provider: &'a dyn FeatureProvider,
    pub knowledge: &'a KnowledgeBase,
    pub domains: BTreeMap<DomainCode, DomainSpec>,
    pub config: ScoringConfig,
}

impl<'a> Scorer<'a> {
    pub fn direct_form(&self) -> DirectForm {
        self.config
            .direct_form
            .resolve(self.backend.capabilities().supports_first_token_logprobs)
    }

    /// Scores one item with the given rules spliced into both prompts.
    pub fn run_item(&self, item: &ItemView, rules: &[String]) -> ItemOutcome {
        let alpha = self.config.alpha_for(item.domain);
        let form = self.direct_form();
        let mut trace = ItemTrace {
            item_id: item.id.clone(),
            domain: item.domain,
            rules_context: rules.to_vec(),
            direct: None,
            direct_error: None,
            trajectory: None,
            agent_failure: None,
            backend_calls: None,
        };
        let mut record = ScoreRecord {
            item_id: item.id.clone(),
            domain: item.domain,
            s_d: None,
            s_r: None,
            s_final: None,
            alpha,
            direct_form: form,
            errored: true,
            error: None,
            vlm_calls: 0,
        };
        let Some(domain) = self.domains.get(&item.domain) else {
            record.error = Some(format!("no domain spec for {}", item.domain));
            return ItemOutcome { record, trace };
        };
        let images = LazyImages::new(item, self.source);
        // load once up front so both branches see the same buffers
        let loaded = match images.get() {
            Ok(i) => i,
            Err(e) => {
                record.error = Some(e.to_string());
                return ItemOutcome { record, trace };
            }
        };
        let rules_context = prompts::rules_block(rules);
        let inputs = AgentInputs {
            item,
            domain,
            images: &images,
            provider: self.provider,
            knowledge: self.knowledge,
            tool_config: &self.config.tools,
            rules_context: &rules_context,
        };
        let direct = || score_direct(self.backend, form, item, loaded, &rules_context);
        let agent = || run_refutation(self.backend, &inputs, &self.config.agent);
        let (d, a) = if self.config.concurrent_branches {
            rayon::join(direct, agent)
        } else {
            (direct(), agent())
        };

        let mut errors = Vec::new();
        let mut calls = 0;
        match d {
            Ok(r) => {
                record.s_d = Some(r.score);
                calls += 1;
                trace.direct = Some(r);
            }
            Err(e) => {
                errors.push(format!("direct: {e}"));
                trace.direct_error = Some(e.to_string());
            }
        }
        match a {
            Ok(t) => {
                record.s_r = Some(t.s_r);
                calls += t.vlm_calls;
                trace.trajectory = Some(t);
            }
            Err(e) => {
                errors.push(format!("agent: {e}"));
                trace.agent_failure = Some(AgentFailure {
                    turn: e.turn,
                    error: e.source.to_string(),
                    partial: e.partial,
                });
            }
        }
        record.vlm_calls = calls;
        if let (Some(sd), Some(sr)) = (record.s_d, record.s_r) {
            match fuse(sd, sr, alpha) {
                Ok(f) => {
                    record.s_final = Some(f);
                    record.errored = false;
                }
                Err(e) => errors.push(e.to_string()),
            }
        }
        if !errors.is_empty() {
            record.error = Some(errors.join("; "));
        }
        ItemOutcome { record, trace }
    }

    /// Scores items without rules on `workers` threads; output keeps the
    /// input order.
    pub fn run_passive(&self, items: &[ItemView], workers: usize) -> Vec<ItemOutcome> {
        run_pool(workers, || {
            use rayon::prelude::*;
            items.par_iter().map(|it| self.run_item(it, &[])).collect()
        })
    }
}

/// Runs `f` inside a dedicated pool of `workers` threads.
pub fn run_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool");
    pool.install(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fuse_examples() {
        assert_eq!(fuse(0.8, 0.4, 0.5).unwrap(), 0.6000000000000001);
        assert_eq!(fuse(0.8, 0.4, 1.0).unwrap(), 0.8);
        assert_eq!(fuse(0.8, 0.4, 0.0).unwrap(), 0.4);
        assert!(fuse(1.2, 0.4, 0.5).is_err());
        assert!(fuse(0.2, 0.4, -0.1).is_err());
    }

    #[test]
    fn per_domain_alpha() {
        let mut c = ScoringConfig::default();
        c.domain_alpha.insert(DomainCode::D3, 0.8);
        assert_eq!(c.alpha_for(DomainCode::D3), 0.8);
        assert_eq!(c.alpha_for(DomainCode::D4), DEFAULT_ALPHA);
    }

    proptest! {
        #[test]
        fn fused_lies_between(sd in 0.0f64..=1.0, sr in 0.0f64..=1.0, a in 0.0f64..=1.0) {
            let f = fuse(sd, sr, a).unwrap();
            prop_assert!(f >= sd.min(sr) - 1e-15 && f <= sd.max(sr) + 1e-15);
        }
    }
}

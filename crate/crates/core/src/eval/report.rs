//! Joins score files with labels and assembles the results document.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::fusion::ScoreRecord;
use crate::manifest::DomainCode;

use super::{
    auprc, auroc, fpr_at_tpr, leave_one_domain_out, macro_mean, stratified_paired_bootstrap,
    BootstrapConfig, BootstrapReport, EvalError, LabeledScores, LooSummary,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreField {
    SD,
    SR,
    #[default]
    SFinal,
}

impl ScoreField {
    pub fn get(self, r: &ScoreRecord) -> Option<f64> {
        match self {
            ScoreField::SD => r.s_d,
            ScoreField::SR => r.s_r,
            ScoreField::SFinal => r.s_final,
        }
    }
}

/// Labeled scores for records that carry the field and a label. Returns
/// the ids left out alongside.
pub fn join_labels(
    records: &[ScoreRecord],
    labels: &BTreeMap<String, bool>,
    field: ScoreField,
) -> (LabeledScores, Vec<String>) {
    let mut out = LabeledScores::default();
    let mut dropped = Vec::new();
    for r in records {
        match (field.get(r), labels.get(&r.item_id)) {
            (Some(s), Some(&l)) if !r.errored || field != ScoreField::SFinal => {
                out.push(r.item_id.clone(), r.domain, l, s)
            }
            _ => dropped.push(r.item_id.clone()),
        }
    }
    (out, dropped)
}

/// Restricts both sets to common item ids, in `a`'s order.
pub fn align(a: &LabeledScores, b: &LabeledScores) -> (LabeledScores, LabeledScores) {
    let idx_b: BTreeMap<&str, usize> = b.item_id.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut oa = LabeledScores::default();
    let mut ob = LabeledScores::default();
    for i in 0..a.len() {
        if let Some(&j) = idx_b.get(a.item_id[i].as_str()) {
            oa.push(a.item_id[i].clone(), a.domain[i], a.label[i], a.score[i]);
            ob.push(b.item_id[j].clone(), b.domain[j], b.label[j], b.score[j]);
        }
    }
    (oa, ob)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub n: usize,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub fpr_at_95_tpr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemMetrics {
    pub name: String,
    pub n_items: usize,
    pub excluded: Vec<String>,
    pub per_domain: BTreeMap<DomainCode, DomainMetrics>,
    pub macro_auroc: Option<f64>,
    pub macro_auprc: Option<f64>,
    pub macro_fpr_at_95_tpr: Option<f64>,
}

pub fn system_metrics(name: &str, s: &LabeledScores, excluded: Vec<String>) -> SystemMetrics {
    let mut per_domain = BTreeMap::new();
    for (d, idx) in s.strata() {
        let sc: Vec<f64> = idx.iter().map(|&i| s.score[i]).collect();
        let y: Vec<bool> = idx.iter().map(|&i| s.label[i]).collect();
        per_domain.insert(
            d,
            DomainMetrics {
                n: idx.len(),
                auroc: auroc(&sc, &y).ok(),
                auprc: auprc(&sc, &y).ok(),
                fpr_at_95_tpr: fpr_at_tpr(&sc, &y, 0.95).ok(),
            },
        );
    }
    let m = |f: fn(&DomainMetrics) -> Option<f64>| {
        macro_mean(&per_domain.values().filter_map(f).collect::<Vec<_>>()).ok()
    };
    SystemMetrics {
        name: name.to_string(),
        n_items: s.len(),
        excluded,
        macro_auroc: m(|d| d.auroc),
        macro_auprc: m(|d| d.auprc),
        macro_fpr_at_95_tpr: m(|d| d.fpr_at_95_tpr),
        per_domain,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub system: String,
    pub baseline: String,
    pub n_common: usize,
    pub bootstrap: BootstrapReport,
    pub per_domain_delta_pp: BTreeMap<DomainCode, f64>,
    pub loo: Option<LooSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub field: ScoreField,
    pub systems: Vec<SystemMetrics>,
    /// Every system against the first one.
    pub comparisons: Vec<Comparison>,
}

pub fn compare(
    name: &str,
    base_name: &str,
    sys: &LabeledScores,
    base: &LabeledScores,
    cfg: &BootstrapConfig,
) -> Result<Comparison, EvalError> {
    let (a, b) = align(sys, base);
    let bootstrap = stratified_paired_bootstrap(&a, &b, cfg)?;
    let pa = a.per_domain(auroc);
    let pb = b.per_domain(auroc);
    let per_domain_delta_pp: BTreeMap<DomainCode, f64> = pa
        .iter()
        .filter_map(|(d, va)| pb.get(d).map(|vb| (*d, (va - vb) * 100.0)))
        .collect();
    let deltas: Vec<(DomainCode, f64)> = per_domain_delta_pp.iter().map(|(d, v)| (*d, *v)).collect();
    Ok(Comparison {
        system: name.to_string(),
        baseline: base_name.to_string(),
        n_common: a.len(),
        bootstrap,
        loo: leave_one_domain_out(&deltas).ok(),
        per_domain_delta_pp,
    })
}

pub fn evaluate(
    systems: &[(String, Vec<ScoreRecord>)],
    labels: &BTreeMap<String, bool>,
    field: ScoreField,
    cfg: &BootstrapConfig,
) -> Result<EvalReport, EvalError> {
    if systems.is_empty() {
        return Err(EvalError::Empty);
    }
    let joined: Vec<(String, LabeledScores, Vec<String>)> = systems
        .iter()
        .map(|(n, r)| {
            let (s, d) = join_labels(r, labels, field);
            (n.clone(), s, d)
        })
        .collect();
    let metrics = joined.iter().map(|(n, s, d)| system_metrics(n, s, d.clone())).collect();
    let mut comparisons = Vec::new();
    for (n, s, _) in joined.iter().skip(1) {
        comparisons.push(compare(n, &joined[0].0, s, &joined[0].1, cfg)?);
    }
    Ok(EvalReport { field, systems: metrics, comparisons })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".to_string())
}

/// Tab-separated AUROC table: one row per system, domains as columns,
/// then the macro; comparisons follow.
pub fn render_table(r: &EvalReport) -> String {
    let domains: BTreeSet<DomainCode> = r.systems.iter().flat_map(|s| s.per_domain.keys().copied()).collect();
    let mut out = String::from("system");
    for d in &domains {
        out.push_str(&format!("\t{d}"));
    }
    out.push_str("\tmacro_auroc\tmacro_auprc\tmacro_fpr95\n");
    for s in &r.systems {
        out.push_str(&s.name);
        for d in &domains {
            out.push('\t');
            out.push_str(&cell(s.per_domain.get(d).and_then(|m| m.auroc)));
        }
        out.push_str(&format!(
            "\t{}\t{}\t{}\n",
            cell(s.macro_auroc),
            cell(s.macro_auprc),
            cell(s.macro_fpr_at_95_tpr)
        ));
    }
    if !r.comparisons.is_empty() {
        out.push_str("\nsystem\tbaseline\tdelta_pp\tci_lo\tci_hi\tp_gt_zero\tloo_min\tloo_max\n");
        for c in &r.comparisons {
            let b = &c.bootstrap;
            out.push_str(&format!(
                "{}\t{}\t{:+.2}\t{:+.2}\t{:+.2}\t{:.3}\t{}\t{}\n",
                c.system,
                c.baseline,
                b.delta_pp,
                b.ci95.0,
                b.ci95.1,
                b.p_gt_zero,
                c.loo.as_ref().map(|l| format!("{:+.2}", l.min)).unwrap_or_else(|| "-".into()),
                c.loo.as_ref().map(|l| format!("{:+.2}", l.max)).unwrap_or_else(|| "-".into()),
            ));
        }
    }
    out
}

//! Subcommand implementations. Each takes resolved arguments and returns
//! its result so tests can drive them without a process boundary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use refuter_core::backend::{ChatBackend, MeteredBackend, OpenAiBackend, ScriptedBackend};
use refuter_core::diagnostics::{self, BehaviorSummary};
use refuter_core::eval::report::{evaluate, join_labels, render_table, EvalReport, ScoreField};
use refuter_core::eval::transforms::{middle_mass, transform_affine, transform_bin, transform_ext_rank, unique_count};
use refuter_core::eval::{auroc, BootstrapConfig, LabeledScores};
use refuter_core::fusion::{fuse, ItemOutcome, ItemTrace, ScoreRecord, Scorer};
use refuter_core::loader::{sha256_hex, DefaultSource};
use refuter_core::manifest::{benchmark_domains, load_manifest, DomainCode, DomainSpec, ItemView, Manifest};
use refuter_core::osr::alpha::{tune_alpha, AlphaChoice, DevPoint};
use refuter_core::osr::cluster::{build_cluster_rules, LabeledCase, DEFAULT_CLUSTER_K};
use refuter_core::osr::{run_osr_pass, run_static_rules, ReflectionEvent, Rule, RuleStore};
use refuter_core::prompts::TEMPLATE_VERSION;
use refuter_core::tools::{KnowledgeBase, SyntheticProvider};

use crate::config::{BackendConfig, Mode, RunConfig, SCHEMA};
use crate::output::{self, Header};

fn manifest_at(path: &Path) -> Result<Manifest> {
    let m = load_manifest(path).with_context(|| format!("loading manifest {}", path.display()))?;
    m.validate().with_context(|| format!("validating manifest {}", path.display()))?;
    Ok(m)
}

fn domain_specs(m: &Manifest) -> BTreeMap<DomainCode, DomainSpec> {
    let list = if m.domains.is_empty() { benchmark_domains() } else { m.domains.clone() };
    list.into_iter().map(|d| (d.code, d)).collect()
}

fn parent(p: &Path) -> PathBuf {
    p.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

pub fn make_backend(cfg: &RunConfig, base: &Path) -> Result<Box<dyn ChatBackend>> {
    Ok(match &cfg.backend {
        BackendConfig::Scripted { script } => Box::new(ScriptedBackend::load(&base.join(script))?),
        BackendConfig::Openai(o) => Box::new(OpenAiBackend::new(o.clone())?),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub schema: String,
    pub mode: Mode,
    pub split: String,
    pub template_version: String,
    pub backend: String,
    pub inputs: BTreeMap<String, String>,
    pub items: usize,
    pub errored: usize,
    pub rules: usize,
    pub reflections: usize,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagnostics {
    pub summary: Option<BehaviorSummary>,
    /// `(item, recomputed, counted)` where the two call counts differ.
    pub call_mismatches: Vec<(String, u32, u32)>,
}

pub struct RunResult {
    pub config_hash: String,
    pub outcomes: Vec<ItemOutcome>,
    pub store: Option<RuleStore>,
    pub events: Vec<ReflectionEvent>,
    pub diagnostics: Diagnostics,
}

fn read_alphas(path: &Path) -> Result<BTreeMap<DomainCode, f64>> {
    output::read_json_field(path, "alphas")
}

/// Executes one run and writes its directory. `base` resolves relative
/// paths in the config.
pub fn cmd_run(cfg: &RunConfig, base: &Path, out: &Path) -> Result<RunResult> {
    cfg.validate()?;
    let hash = cfg.hash(base)?;
    let header = Header::new(&hash, cfg.seed, "run");
    let manifest_path = base.join(&cfg.manifest);
    let manifest = manifest_at(&manifest_path)?;
    let items: Vec<ItemView> = manifest
        .items_for(cfg.split, None)
        .into_iter()
        .filter(|r| cfg.domains.is_empty() || cfg.domains.contains(&r.domain))
        .map(|r| r.agent_view())
        .collect();
    if items.is_empty() {
        bail!("no items in split {} for the selected domains", cfg.split);
    }

    let mut scoring = cfg.scoring.clone();
    if cfg.mode == Mode::Alphas {
        let p = base.join(cfg.alphas.as_ref().expect("validated"));
        scoring.domain_alpha = read_alphas(&p)?;
    }
    let backend = MeteredBackend::new(make_backend(cfg, base)?, cfg.call_cap);
    let source = DefaultSource::new(parent(&manifest_path), manifest.hashes.clone());
    let provider = SyntheticProvider::new(cfg.provider.grid, cfg.provider.patch_px, cfg.provider.dim, cfg.seed);
    let knowledge = match &cfg.knowledge {
        Some(p) => KnowledgeBase::load(&base.join(p)).map_err(|e| anyhow!("{e}"))?,
        None => KnowledgeBase::bundled(),
    };
    let scorer = Scorer {
        backend: &backend,
        source: &source,
        provider: &provider,
        knowledge: &knowledge,
        domains: domain_specs(&manifest),
        config: scoring,
    };
    let initial = match &cfg.rules {
        Some(p) if matches!(cfg.mode, Mode::Cluster | Mode::Osr) => {
            RuleStore::load(base.join(p)).map_err(|e| anyhow!("rules file: {e}"))?
        }
        _ => RuleStore::new(),
    };
    let (mut outcomes, store, events) = match cfg.mode {
        Mode::Passive | Mode::Alphas => (scorer.run_passive(&items, cfg.workers), None, Vec::new()),
        Mode::Cluster => {
            let o = run_static_rules(&scorer, &items, &initial, cfg.osr.rules_k, cfg.workers);
            (o, Some(initial), Vec::new())
        }
        Mode::Osr => {
            let o = run_osr_pass(&scorer, &items, initial, &cfg.osr, cfg.workers);
            (o.outcomes, Some(o.store), o.events)
        }
    };
    let counts = backend.counts();
    for o in &mut outcomes {
        o.trace.backend_calls = Some(counts.get(&o.record.item_id).copied().unwrap_or(0));
    }

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut files = vec![output::RESOLVED, output::SCORES, output::TRACES, output::DIAGNOSTICS];
    output::write_json(&out.join(output::RESOLVED), &header.with_kind("config"), "config", cfg)?;
    let records: Vec<&ScoreRecord> = outcomes.iter().map(|o| &o.record).collect();
    output::write_jsonl(&out.join(output::SCORES), &header.with_kind("scores"), records.iter().copied())?;
    let traces: Vec<&ItemTrace> = outcomes.iter().map(|o| &o.trace).collect();
    output::write_jsonl(&out.join(output::TRACES), &header.with_kind("traces"), traces.iter().copied())?;
    if let Some(s) = &store {
        let rules: Vec<&Rule> = s.all();
        output::write_json(&out.join(output::RULES), &header.with_kind("rules"), "rules", &rules)?;
        files.push(output::RULES);
    }
    if cfg.mode == Mode::Osr {
        output::write_jsonl(&out.join(output::REFLECTIONS), &header.with_kind("reflections"), events.iter())?;
        files.push(output::REFLECTIONS);
    }
    let diagnostics = write_diagnostics(out, &header, &outcomes)?;
    if let Some(s) = &diagnostics.summary {
        files.extend(diagnostics::tables(s).into_keys());
    }

    let mut inputs = BTreeMap::new();
    for (k, p) in cfg.input_files(base) {
        inputs.insert(k.to_string(), sha256_hex(&fs::read(&p)?));
    }
    files.sort();
    let rm = RunManifest {
        config_hash: hash.clone(),
        seed: cfg.seed,
        schema: SCHEMA.to_string(),
        mode: cfg.mode,
        split: cfg.split.to_string(),
        template_version: TEMPLATE_VERSION.to_string(),
        backend: backend.capabilities().name.clone(),
        inputs,
        items: outcomes.len(),
        errored: outcomes.iter().filter(|o| o.record.errored).count(),
        rules: store.as_ref().map_or(0, RuleStore::len),
        reflections: events.len(),
        files: files.into_iter().map(str::to_string).collect(),
    };
    let mut s = serde_json::to_string_pretty(&rm)?;
    s.push('\n');
    fs::write(out.join(output::RUN_MANIFEST), s)?;
    Ok(RunResult { config_hash: hash, outcomes, store, events, diagnostics })
}

fn write_diagnostics(out: &Path, header: &Header, outcomes: &[ItemOutcome]) -> Result<Diagnostics> {
    let records: Vec<ScoreRecord> = outcomes.iter().map(|o| o.record.clone()).collect();
    let trajs: Vec<_> = outcomes.iter().filter_map(|o| o.trace.trajectory.clone()).collect();
    let counted: BTreeMap<String, u32> = outcomes
        .iter()
        .filter_map(|o| o.trace.backend_calls.map(|c| (o.record.item_id.clone(), c)))
        .collect();
    let summary = diagnostics::summarize(&records, &trajs).ok();
    let d = Diagnostics {
        call_mismatches: if counted.is_empty() {
            Vec::new()
        } else {
            diagnostics::call_mismatches(&records, &trajs, &counted)
        },
        summary,
    };
    output::write_json(&out.join(output::DIAGNOSTICS), &header.with_kind("diagnostics"), "diagnostics", &d)?;
    if let Some(s) = &d.summary {
        for (name, body) in diagnostics::tables(s) {
            output::write_tsv(&out.join(name), header, &body)?;
        }
    }
    Ok(d)
}

/// Reads the scores and traces of a run directory.
pub fn read_run(dir: &Path) -> Result<(Header, Vec<ScoreRecord>, Vec<ItemTrace>)> {
    let sp = dir.join(output::SCORES);
    if !sp.exists() {
        bail!("{} has no {}", dir.display(), output::SCORES);
    }
    let (h, scores) = output::read_jsonl::<ScoreRecord>(&sp)?;
    let (_, traces) = output::read_jsonl::<ItemTrace>(&dir.join(output::TRACES))?;
    let h = h.ok_or_else(|| anyhow!("{} lacks a header line", sp.display()))?;
    Ok((h, scores, traces))
}

pub fn cmd_diagnose(dir: &Path) -> Result<Diagnostics> {
    let (h, scores, traces) = read_run(dir)?;
    if scores.is_empty() {
        bail!("run directory {} has no scored items", dir.display());
    }
    let by_id: BTreeMap<&str, &ItemTrace> = traces.iter().map(|t| (t.item_id.as_str(), t)).collect();
    let outcomes: Vec<ItemOutcome> = scores
        .iter()
        .filter_map(|r| by_id.get(r.item_id.as_str()).map(|t| ItemOutcome { record: r.clone(), trace: (*t).clone() }))
        .collect();
    if outcomes.is_empty() {
        bail!("run directory {} has no traces", dir.display());
    }
    let header = Header::new(&h.config_hash, h.seed, "run");
    write_diagnostics(dir, &header, &outcomes)
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub manifest: PathBuf,
    pub scores: Vec<PathBuf>,
    pub names: Vec<String>,
    pub field: ScoreField,
    pub bootstrap: BootstrapConfig,
    pub transforms: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismRow {
    pub transform: String,
    pub unique_values: usize,
    pub middle_mass: f64,
    /// Macro AUROC of the transformed refutation score on its own.
    pub standalone_auroc: Option<f64>,
    /// Macro AUROC after fusing the transformed score with the Direct score.
    pub fused_auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub inputs: Vec<(String, Option<String>)>,
    pub report: EvalReport,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mechanism: Vec<MechanismRow>,
    pub table: String,
}

/// Granularity suite applied to the refutation score of one system.
pub fn mechanism_table(records: &[ScoreRecord], labels: &BTreeMap<String, bool>) -> Vec<MechanismRow> {
    let usable: Vec<&ScoreRecord> = records
        .iter()
        .filter(|r| r.s_d.is_some() && r.s_r.is_some() && labels.contains_key(&r.item_id))
        .collect();
    if usable.is_empty() {
        return Vec::new();
    }
    let sr: Vec<f64> = usable.iter().map(|r| r.s_r.expect("filtered")).collect();
    let variants: Vec<(&str, Vec<f64>)> = vec![
        ("original", sr.clone()),
        ("bin", transform_bin(&sr).expect("non-empty")),
        ("ext_rank", transform_ext_rank(&sr).expect("non-empty")),
        ("affine_0.5", transform_affine(&sr, 0.5).expect("non-empty")),
        ("affine_2.0", transform_affine(&sr, 2.0).expect("non-empty")),
    ];
    let macro_of = |scores: &[f64]| {
        let mut s = LabeledScores::default();
        for (r, v) in usable.iter().zip(scores) {
            s.push(r.item_id.clone(), r.domain, labels[&r.item_id], *v);
        }
        s.macro_metric(auroc).ok()
    };
    variants
        .into_iter()
        .map(|(name, t)| {
            let fused: Vec<f64> = usable
                .iter()
                .zip(&t)
                .map(|(r, v)| fuse(r.s_d.expect("filtered"), *v, r.alpha).expect("scores in range"))
                .collect();
            MechanismRow {
                transform: name.to_string(),
                unique_values: unique_count(&t),
                middle_mass: middle_mass(&t, 0.2, 0.8).expect("non-empty"),
                standalone_auroc: macro_of(&t),
                fused_auroc: macro_of(&fused),
            }
        })
        .collect()
}

pub fn cmd_eval(a: &EvalArgs) -> Result<EvalOutput> {
    if a.scores.is_empty() {
        bail!("at least one scores file is required");
    }
    let manifest = manifest_at(&a.manifest)?;
    let labels = manifest.labels();
    let mut systems = Vec::new();
    let mut inputs = Vec::new();
    for (i, p) in a.scores.iter().enumerate() {
        let (h, recs) = output::read_jsonl::<ScoreRecord>(p)?;
        let name = a.names.get(i).cloned().unwrap_or_else(|| {
            let stem = p.parent().and_then(|d| d.file_name()).or_else(|| p.file_stem());
            stem.map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| format!("system{i}"))
        });
        inputs.push((name.clone(), h.map(|h| h.config_hash)));
        systems.push((name, recs));
    }
    let report = evaluate(&systems, &labels, a.field, &a.bootstrap)?;
    let mechanism = if a.transforms { mechanism_table(&systems[0].1, &labels) } else { Vec::new() };
    let mut table = render_table(&report);
    if !mechanism.is_empty() {
        table.push_str("\ntransform\tunique_vals\tmiddle_mass\tstandalone_auroc\tfused_auroc\n");
        let c = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        for m in &mechanism {
            table.push_str(&format!(
                "{}\t{}\t{:.3}\t{}\t{}\n",
                m.transform,
                m.unique_values,
                m.middle_mass,
                c(m.standalone_auroc),
                c(m.fused_auroc)
            ));
        }
    }
    Ok(EvalOutput { inputs, report, mechanism, table })
}

fn views_by_id(m: &Manifest) -> BTreeMap<String, ItemView> {
    m.items.iter().map(|r| (r.id.clone(), r.agent_view())).collect()
}

/// Cluster rules from a scored development run. Returns the store and the
/// per-domain call events.
pub fn cmd_build_cluster(
    cfg: &RunConfig,
    base: &Path,
    run_dir: &Path,
    k: Option<usize>,
    out: &Path,
) -> Result<(RuleStore, Vec<ReflectionEvent>)> {
    let manifest_path = base.join(&cfg.manifest);
    let manifest = manifest_at(&manifest_path)?;
    let labels = manifest.labels();
    let views = views_by_id(&manifest);
    let (h, scores, traces) = read_run(run_dir)?;
    let tr: BTreeMap<&str, &ItemTrace> = traces.iter().map(|t| (t.item_id.as_str(), t)).collect();
    let mut cases = Vec::new();
    for r in &scores {
        let (Some(v), Some(&label)) = (views.get(&r.item_id), labels.get(&r.item_id)) else {
            continue;
        };
        cases.push(LabeledCase { view: v, record: r, trace: tr.get(r.item_id.as_str()).copied(), label });
    }
    let backend = make_backend(cfg, base)?;
    let source = DefaultSource::new(parent(&manifest_path), manifest.hashes.clone());
    let (store, events) = build_cluster_rules(
        backend.as_ref(),
        &source,
        &domain_specs(&manifest),
        &cases,
        k.unwrap_or(DEFAULT_CLUSTER_K),
    );
    let header = Header::new(&h.config_hash, h.seed, "cluster_rules");
    output::write_json(out, &header, "rules", &store.all())?;
    let ev_path = out.with_extension("events.jsonl");
    output::write_jsonl(&ev_path, &header.with_kind("cluster_events"), events.iter())?;
    Ok((store, events))
}

pub fn cmd_tune_alpha(
    manifest_path: &Path,
    run_dir: &Path,
    k: usize,
    seed: u64,
    out: &Path,
) -> Result<Vec<AlphaChoice>> {
    let manifest = manifest_at(manifest_path)?;
    let labels = manifest.labels();
    let (h, scores, _) = read_run(run_dir)?;
    let mut by_domain: BTreeMap<DomainCode, Vec<DevPoint>> = BTreeMap::new();
    for r in &scores {
        if let (Some(s_d), Some(s_r), Some(&label)) = (r.s_d, r.s_r, labels.get(&r.item_id)) {
            by_domain.entry(r.domain).or_default().push(DevPoint { s_d, s_r, label });
        }
    }
    let choices: Vec<AlphaChoice> = by_domain.iter().map(|(d, p)| tune_alpha(p, k, seed, *d)).collect();
    let alphas: BTreeMap<DomainCode, f64> = choices.iter().map(|c| (c.domain, c.alpha)).collect();
    let header = Header::new(&h.config_hash, seed, "alphas");
    let mut m = serde_json::Map::new();
    m.insert("header".into(), serde_json::to_value(&header)?);
    m.insert("alphas".into(), serde_json::to_value(&alphas)?);
    m.insert("choices".into(), serde_json::to_value(&choices)?);
    let mut s = serde_json::to_string_pretty(&serde_json::Value::Object(m))?;
    s.push('\n');
    fs::write(out, s).with_context(|| format!("writing {}", out.display()))?;
    Ok(choices)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManifestSummary {
    pub items: usize,
    pub per_split: BTreeMap<String, usize>,
    pub per_domain: BTreeMap<DomainCode, usize>,
    pub unlabeled: usize,
}

pub fn cmd_validate_manifest(path: &Path) -> Result<ManifestSummary> {
    let m = manifest_at(path)?;
    let mut per_split = BTreeMap::new();
    let mut per_domain = BTreeMap::new();
    for r in &m.items {
        *per_split.entry(r.split.to_string()).or_insert(0) += 1;
        *per_domain.entry(r.domain).or_insert(0) += 1;
    }
    Ok(ManifestSummary {
        items: m.items.len(),
        per_split,
        per_domain,
        unlabeled: m.items.iter().filter(|r| r.label.is_none()).count(),
    })
}

/// Labeled scores of one field, for callers that want raw metric input.
pub fn labeled(records: &[ScoreRecord], labels: &BTreeMap<String, bool>, field: ScoreField) -> LabeledScores {
    join_labels(records, labels, field).0
}

//! The tool catalog and its dispatcher.
//!
//! Gated tools are refused before any image is loaded. Unknown tools and
//! malformed arguments come back as ordinary observations so the agent can
//! recover inside its turn budget.

pub mod expert;
pub mod knowledge;
pub mod ops;
pub mod provider;
pub mod retriever;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::backend::{call, tags, Attachment, BackendError, CallKey, ChatBackend, ChatMessage};
use crate::imaging::{connected_components, NormBox};
use crate::loader::LazyImages;
use crate::manifest::{DomainCode, DomainSpec, ItemView};
use crate::prompts;

pub use expert::{ExpertConfig, ExpertReduce, ExpertVerdict};
pub use knowledge::{KnowledgeBase, KnowledgeEntry};
pub use provider::{FeatureProvider, PatchTokens, SyntheticProvider};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Ladder {
    L1,
    L2,
    L3,
    L4,
    L5,
    L6,
    L7,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToolSpec {
    pub name: &'static str,
    pub ladder_level: Option<Ladder>,
    pub applicability_clause: &'static str,
    pub allowed_domains: Option<BTreeSet<DomainCode>>,
    pub consumes_vlm_call: bool,
    pub args_hint: &'static str,
}

fn aligned_set() -> BTreeSet<DomainCode> {
    DomainCode::ALL.iter().copied().filter(|d| d.aligned()).collect()
}

/// The thirteen tools, in prompt order.
pub fn catalog() -> Vec<ToolSpec> {
    use Ladder::*;
    let t = |name, level, clause, allowed, vlm, args| ToolSpec {
        name,
        ladder_level: level,
        applicability_clause: clause,
        allowed_domains: allowed,
        consumes_vlm_call: vlm,
        args_hint: args,
    };
    vec![
        t("side_by_side", Some(L2), "Query region next to the same region of the references. Works in every domain; the default first check.", None, false, "bbox"),
        t("reference_profiler", Some(L1), "Text summary of what the normal references look like. Costs one extra model call.", None, true, ""),
        t("expert_score", Some(L3), "Frozen-feature anomaly score with heatmap and hotspot box. Returns unavailable where the expert is unreliable.", None, false, ""),
        t("zoom_bbox", Some(L5), "High-resolution crop of one query region, for small defects.", None, false, "bbox"),
        t("image_diff", Some(L7), "Pixel difference against one reference. Only for pixel-aligned domains (D1, D3, D5).", Some(aligned_set()), false, "ref_index"),
        t("rotate_align", Some(L7), "Rigid rotation of the query onto a reference pose. Only for pixel-aligned domains (D1, D3, D5).", Some(aligned_set()), false, "ref_index"),
        t("segment_and_count", Some(L6), "Foreground components of the query and one reference, for count and arrangement checks.", None, false, "ref_index"),
        t("patch_grid", None, "K x K tiled comparison with a reference, pointing at the cell that differs most.", None, false, "ref_index, k"),
        t("texture_fft", Some(L6), "Frequency-band energy ratios against a reference, for texture and surface checks.", None, false, "ref_index"),
        t("reference_retriever", Some(L4), "Indices of the references most similar to the query.", None, false, "k"),
        t("domain_knowledge", None, "Keyword list and short primer on typical anomalies in this domain.", None, true, ""),
        t("component_counter", Some(L6), "Counts connected regions above a threshold in the expert heatmap or the reference difference map.", None, false, "source (expert|diff), threshold, ref_index"),
        t("visual_retriever", None, "Attaches the references most similar to the query for a closer look.", None, false, "k"),
    ]
}

pub fn spec(name: &str) -> Option<ToolSpec> {
    let n = normalize_name(name);
    catalog().into_iter().find(|t| t.name == n)
}

/// Strips decoration models sometimes add to tool names (`tool_` prefix,
/// case, surrounding whitespace).
pub fn normalize_name(name: &str) -> String {
    let n = name.trim().to_ascii_lowercase();
    n.strip_prefix("tool_").map(str::to_string).unwrap_or(n)
}

/// One-line-per-tool listing used in the agent system prompt.
pub fn catalog_listing() -> String {
    catalog()
        .iter()
        .map(|t| {
            let args = if t.args_hint.is_empty() {
                "no args".to_string()
            } else {
                format!("args: {}", t.args_hint)
            };
            format!("- {} ({args}): {}", t.name, t.applicability_clause)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToolConfig {
    pub expert: ExpertConfig,
    pub zoom_edge: u32,
    pub patch_grid_k: usize,
    pub retriever_k: usize,
    pub visual_retriever_k: usize,
    pub side_by_side_refs: usize,
    pub min_component_area: usize,
    pub counter_threshold: f64,
}

impl Default for ToolConfig {
    fn default() -> Self {
        ToolConfig {
            expert: ExpertConfig::default(),
            zoom_edge: 512,
            patch_grid_k: 3,
            retriever_k: 3,
            visual_retriever_k: 2,
            side_by_side_refs: 3,
            min_component_area: 4,
            counter_threshold: 0.5,
        }
    }
}

/// Optional tool arguments; every field has a default.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
pub struct ToolArgs {
    pub bbox: Option<[f64; 4]>,
    pub ref_index: Option<usize>,
    pub k: Option<usize>,
    pub threshold: Option<f64>,
    pub source: Option<String>,
}

impl ToolArgs {
    pub fn parse(v: &Value) -> Result<Self, String> {
        match v {
            Value::Null => Ok(ToolArgs::default()),
            Value::Object(_) => serde_json::from_value(v.clone()).map_err(|e| e.to_string()),
            other => Err(format!("arguments must be an object, got {other}")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToolResult {
    pub tool: String,
    pub observation: String,
    #[serde(skip)]
    pub attachments: Vec<Attachment>,
    pub attachment_digests: Vec<String>,
    pub payload: Value,
    pub refused: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refusal_reason: Option<String>,
    /// Set for unknown tools, malformed arguments and tool-side failures.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Model calls issued by the tool itself.
    pub vlm_calls: u32,
}

impl ToolResult {
    fn ok(tool: &str, out: ops::Output) -> Self {
        ToolResult {
            tool: tool.to_string(),
            attachment_digests: out.attachments.iter().map(Attachment::digest).collect(),
            observation: out.observation,
            attachments: out.attachments,
            payload: out.payload,
            refused: false,
            refusal_reason: None,
            error: None,
            vlm_calls: 0,
        }
    }

    fn text(tool: &str, observation: String, payload: Value) -> Self {
        ToolResult::ok(
            tool,
            ops::Output {
                observation,
                attachments: Vec::new(),
                payload,
            },
        )
    }

    fn failed(tool: &str, error: String) -> Self {
        let mut r = ToolResult::text(tool, format!("Tool {tool} failed: {error}"), Value::Null);
        r.error = Some(error);
        r
    }

    fn refused(tool: &str, reason: String) -> Self {
        let mut r = ToolResult::text(tool, format!("Tool {tool} refused: {reason}"), Value::Null);
        r.refused = true;
        r.refusal_reason = Some(reason);
        r
    }
}

/// Everything a tool may read. Labels are not reachable from here.
pub struct ToolContext<'a> {
    pub item: &'a ItemView,
    pub domain: &'a DomainSpec,
    pub images: &'a LazyImages<'a>,
    pub provider: &'a dyn FeatureProvider,
    pub backend: &'a dyn ChatBackend,
    pub knowledge: &'a KnowledgeBase,
    pub config: &'a ToolConfig,
    /// Agent turn in which the tool was requested; keys tool-side calls.
    pub turn: u32,
}

/// Runs a tool by name.
pub fn invoke(name: &str, args: &Value, ctx: &ToolContext<'_>) -> ToolResult {
    let Some(spec) = spec(name) else {
        let valid: Vec<&str> = catalog().iter().map(|t| t.name).collect();
        let mut r = ToolResult::text(
            name,
            format!("Unknown tool \"{name}\". Valid tools: {}.", valid.join(", ")),
            Value::Null,
        );
        r.error = Some(format!("unknown tool {name}"));
        return r;
    };
    let tool = spec.name;
    if let Some(allowed) = &spec.allowed_domains {
        if !allowed.contains(&ctx.item.domain) {
            let list: Vec<&str> = allowed.iter().map(|d| d.as_str()).collect();
            return ToolResult::refused(
                tool,
                format!(
                    "{tool} needs pixel-aligned images and is only available on {}; {} is not aligned.",
                    list.join(", "),
                    ctx.item.domain
                ),
            );
        }
    }
    let args = match ToolArgs::parse(args) {
        Ok(a) => a,
        Err(e) => return ToolResult::failed(tool, format!("malformed arguments: {e}")),
    };
    match dispatch(tool, &args, ctx) {
        Ok(r) => r,
        Err(e) => ToolResult::failed(tool, e),
    }
}

fn dispatch(tool: &str, args: &ToolArgs, ctx: &ToolContext<'_>) -> Result<ToolResult, String> {
    let cfg = ctx.config;
    let bbox = || -> Result<NormBox, String> { NormBox(args.bbox.unwrap_or(NormBox::FULL.0)).validate() };
    let n_refs = ctx.item.reference_refs.len();
    let ref_index = || -> Result<usize, String> {
        let i = args.ref_index.unwrap_or(0);
        if i < n_refs {
            Ok(i)
        } else {
            Err(format!("ref_index {i} out of range (item has {n_refs} references)"))
        }
    };
    match tool {
        "reference_profiler" => return Ok(reference_profiler(ctx)),
        "domain_knowledge" => return Ok(domain_knowledge(ctx)),
        "expert_score" if !ctx.item.domain.expert_available() => {
            return Ok(ToolResult::text(
                tool,
                format!("Expert score unavailable on {}: the expert is not reliable in this domain.", ctx.item.domain),
                json!({"available": false}),
            ))
        }
        _ => {}
    }
    let imgs = ctx.images.get().map_err(|e| e.to_string())?;
    let q = imgs.query.as_ref();
    let refs = imgs.reference_slices();
    let out = match tool {
        "side_by_side" => ops::side_by_side(q, &refs, bbox()?, cfg.side_by_side_refs),
        "zoom_bbox" => ops::zoom_bbox(q, bbox()?, cfg.zoom_edge),
        "image_diff" => {
            let i = ref_index()?;
            ops::image_diff(q, refs[i], i)
        }
        "rotate_align" => {
            let i = ref_index()?;
            ops::rotate_align(q, refs[i], i)
        }
        "segment_and_count" => {
            let i = ref_index()?;
            ops::segment_and_count(q, Some((refs[i], i)), cfg.min_component_area)
        }
        "patch_grid" => {
            let i = ref_index()?;
            ops::patch_grid(q, refs[i], i, args.k.unwrap_or(cfg.patch_grid_k).clamp(1, 8))
        }
        "texture_fft" => {
            let i = ref_index()?;
            ops::texture_fft(q, refs[i], i)
        }
        "expert_score" => {
            let v = expert::expert_score(ctx.item.domain, q, &refs, ctx.provider, &cfg.expert);
            let heat = v.heatmap.as_ref().expect("available verdict has a heatmap");
            let b = v.suggested_bbox.expect("available verdict has a bbox");
            let (w, h) = (q.width() as f64, q.height() as f64);
            let norm = [b[0] / w, b[1] / h, b[2] / w, b[3] / h];
            ops::Output {
                observation: format!(
                    "Expert score {:.4} (highest patch residual on a {}x{} grid). Hotspot box (normalized) [{:.3}, {:.3}, {:.3}, {:.3}]. Heatmap attached.",
                    v.score.unwrap_or(0.0), heat.width, heat.height, norm[0], norm[1], norm[2], norm[3]
                ),
                attachments: vec![Attachment::new(
                    "expert_heatmap",
                    std::sync::Arc::new(heat.to_image(0.0, heat.max().max(1e-12))),
                )],
                payload: json!({"available": true, "score": v.score, "suggested_bbox": b, "bbox_normalized": norm, "rank": v.rank}),
            }
        }
        "reference_retriever" | "visual_retriever" => {
            let default_k = if tool == "visual_retriever" { cfg.visual_retriever_k } else { cfg.retriever_k };
            let k = args.k.unwrap_or(default_k).max(1);
            let qe = ctx.provider.embed_global(q);
            let re: Vec<Vec<f64>> = refs.iter().map(|r| ctx.provider.embed_global(r)).collect();
            let top = retriever::top_k(&qe, &re, k);
            let listing = top
                .iter()
                .map(|(i, s)| format!("ref {i} (cosine {s:.4})"))
                .collect::<Vec<_>>()
                .join(", ");
            let attachments = if tool == "visual_retriever" {
                top.iter()
                    .map(|(i, _)| Attachment::new(format!("reference {i}"), imgs.references[*i].clone()))
                    .collect()
            } else {
                Vec::new()
            };
            ops::Output {
                observation: format!("References most similar to the query: {listing}."),
                attachments,
                payload: json!({
                    "indices": top.iter().map(|t| t.0).collect::<Vec<_>>(),
                    "similarities": top.iter().map(|t| t.1).collect::<Vec<_>>(),
                }),
            }
        }
        "component_counter" => {
            let threshold = args.threshold.unwrap_or(cfg.counter_threshold);
            let source = args
                .source
                .clone()
                .unwrap_or_else(|| if ctx.item.domain.expert_available() { "expert" } else { "diff" }.to_string());
            let mask = match source.as_str() {
                "expert" => {
                    if !ctx.item.domain.expert_available() {
                        return Err(format!("expert heatmap unavailable on {}", ctx.item.domain));
                    }
                    let v = expert::expert_score(ctx.item.domain, q, &refs, ctx.provider, &cfg.expert);
                    let mut h = v.heatmap.expect("available verdict has a heatmap");
                    let m = h.max();
                    if m > 0.0 {
                        h.data.iter_mut().for_each(|x| *x /= m);
                    }
                    h
                }
                "diff" => {
                    let mut d = ops::diff_grid(q, refs[ref_index()?]);
                    d.data.iter_mut().for_each(|x| *x = x.abs());
                    d
                }
                other => return Err(format!("unknown source {other:?}, use \"expert\" or \"diff\"")),
            };
            let comps = connected_components(&mask, threshold);
            ops::Output {
                observation: format!(
                    "{} connected region(s) above {threshold} in the {source} map ({}x{} cells); areas {:?}.",
                    comps.len(),
                    mask.width,
                    mask.height,
                    comps.iter().map(|c| c.area).collect::<Vec<_>>()
                ),
                attachments: Vec::new(),
                payload: json!({
                    "source": source,
                    "threshold": threshold,
                    "count": comps.len(),
                    "components": comps.iter().map(|c| json!({"area": c.area, "centroid": [c.centroid.0, c.centroid.1]})).collect::<Vec<_>>(),
                }),
            }
        }
        other => unreachable!("tool {other} has no dispatcher"),
    };
    Ok(ToolResult::ok(tool, out))
}

fn calls_made(e: &BackendError) -> u32 {
    // a rejected-over-budget call never reached the model
    u32::from(!matches!(e, BackendError::BudgetExceeded { .. }))
}

fn reference_profiler(ctx: &ToolContext<'_>) -> ToolResult {
    let tool = "reference_profiler";
    let imgs = match ctx.images.get() {
        Ok(i) => i,
        Err(e) => return ToolResult::failed(tool, e.to_string()),
    };
    let n = imgs.references.len().to_string();
    let text = prompts::render(
        prompts::REFERENCE_PROFILER,
        &[("n_refs", &n), ("domain", ctx.domain.code.as_str())],
    );
    let images = imgs
        .references
        .iter()
        .enumerate()
        .map(|(i, r)| Attachment::new(format!("reference {i}"), r.clone()))
        .collect();
    let msgs = [ChatMessage::system(prompts::AUX_SYSTEM), ChatMessage::user(text, images)];
    let key = CallKey::new(ctx.item.id.clone(), tags::REFERENCE_PROFILER, ctx.turn);
    match call(ctx.backend, key, &msgs, false) {
        Ok(r) => {
            let mut out = ToolResult::text(
                tool,
                format!("Reference profile: {}", r.text.trim()),
                json!({"profile": r.text}),
            );
            out.vlm_calls = 1;
            out
        }
        Err(e) => {
            let mut out = ToolResult::refused(tool, format!("profiler call failed: {e}"));
            out.vlm_calls = calls_made(&e);
            out
        }
    }
}

fn domain_knowledge(ctx: &ToolContext<'_>) -> ToolResult {
    let tool = "domain_knowledge";
    let code = ctx.item.domain;
    if let Some(e) = ctx.knowledge.get(code) {
        return ToolResult::text(
            tool,
            format!("Domain knowledge for {code}. Typical anomalies: {}. {}", e.keywords.join(", "), e.primer),
            json!({"keywords": e.keywords, "primer": e.primer, "static": true}),
        );
    }
    let text = prompts::render(
        prompts::DOMAIN_KNOWLEDGE,
        &[
            ("domain", code.as_str()),
            ("family", &ctx.domain.family),
            ("task", &ctx.domain.descriptor_task),
        ],
    );
    let msgs = [ChatMessage::system(prompts::AUX_SYSTEM), ChatMessage::user(text, vec![])];
    let key = CallKey::new(ctx.item.id.clone(), tags::DOMAIN_KNOWLEDGE, ctx.turn);
    match call(ctx.backend, key, &msgs, false) {
        Ok(r) => {
            let mut out = ToolResult::text(
                tool,
                format!("Domain knowledge for {code}: {}", r.text.trim()),
                json!({"text": r.text, "static": false}),
            );
            out.vlm_calls = 1;
            out
        }
        Err(e) => {
            let mut out = ToolResult::refused(tool, format!("knowledge call failed: {e}"));
            out.vlm_calls = calls_made(&e);
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_shape() {
        let c = catalog();
        assert_eq!(c.len(), 13);
        let names: BTreeSet<&str> = c.iter().map(|t| t.name).collect();
        assert_eq!(names.len(), 13);
        let vlm: BTreeSet<&str> = c.iter().filter(|t| t.consumes_vlm_call).map(|t| t.name).collect();
        assert_eq!(vlm, BTreeSet::from(["reference_profiler", "domain_knowledge"]));
        let gated: BTreeSet<&str> = c.iter().filter(|t| t.allowed_domains.is_some()).map(|t| t.name).collect();
        assert_eq!(gated, BTreeSet::from(["image_diff", "rotate_align"]));
        assert_eq!(
            spec("image_diff").unwrap().allowed_domains.unwrap(),
            BTreeSet::from([DomainCode::D1, DomainCode::D3, DomainCode::D5])
        );
        assert_eq!(spec("side_by_side").unwrap().ladder_level, Some(Ladder::L2));
        assert_eq!(spec("reference_profiler").unwrap().ladder_level, Some(Ladder::L1));
        assert_eq!(spec("expert_score").unwrap().ladder_level, Some(Ladder::L3));
        assert_eq!(spec("reference_retriever").unwrap().ladder_level, Some(Ladder::L4));
        assert_eq!(spec("zoom_bbox").unwrap().ladder_level, Some(Ladder::L5));
        assert_eq!(spec("texture_fft").unwrap().ladder_level, Some(Ladder::L6));
        assert_eq!(spec("rotate_align").unwrap().ladder_level, Some(Ladder::L7));
    }

    #[test]
    fn names_are_normalized() {
        assert_eq!(normalize_name(" Tool_Zoom_BBox "), "zoom_bbox");
        assert!(spec("tool_side_by_side").is_some());
        assert!(spec("magic").is_none());
    }

    #[test]
    fn args_parsing() {
        assert_eq!(ToolArgs::parse(&Value::Null).unwrap(), ToolArgs::default());
        let a = ToolArgs::parse(&json!({"bbox": [0.1, 0.2, 0.3, 0.4], "k": 2, "extra": 1})).unwrap();
        assert_eq!(a.k, Some(2));
        assert!(ToolArgs::parse(&json!({"bbox": "left"})).is_err());
        assert!(ToolArgs::parse(&json!([1])).is_err());
    }
}

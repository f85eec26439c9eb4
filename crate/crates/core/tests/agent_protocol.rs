use refuter_core::agent::{run_refutation, AgentConfig, AgentInputs, FinalizeReason, Trajectory};
use refuter_core::backend::{tags, ScriptedBackend, ANY_ITEM};
use refuter_core::loader::LazyImages;
use refuter_core::manifest::DomainCode;
use refuter_core::testkit::{json_backend, reply, texture_item, World};
use refuter_core::tools::ToolConfig;
use serde_json::json;

fn run(world: &World, backend: &ScriptedBackend, domain: DomainCode, k: u32) -> Trajectory {
    let item = texture_item("x1", domain, 7, true);
    let images = LazyImages::new(&item, &world.source);
    let tool_config = ToolConfig::default();
    let inputs = AgentInputs {
        item: &item,
        domain: &world.domains[&domain],
        images: &images,
        provider: &world.provider,
        knowledge: &world.knowledge,
        tool_config: &tool_config,
        rules_context: "",
    };
    run_refutation(backend, &inputs, &AgentConfig { max_turns: k }).expect("scripted run")
}

fn at(b: &mut ScriptedBackend, turn: u32, text: String) {
    b.insert(ANY_ITEM, tags::AGENT, turn, text);
}

#[test]
fn empty_low_first_turn_exits_early() {
    let w = World::default();
    let mut b = json_backend();
    at(&mut b, 1, reply::turn1_tool(&[], 0.1, "side_by_side", json!({})));
    let t = run(&w, &b, DomainCode::D2, 5);
    assert_eq!(t.finalize_reason, FinalizeReason::EarlyEmpty);
    assert_eq!(t.s_r, 0.05);
    assert_eq!(t.n_turns(), 1);
    assert_eq!(t.vlm_calls, 1);
}

#[test]
fn refuted_suspect_lands_in_refuted_band() {
    let w = World::default();
    let mut b = json_backend();
    at(&mut b, 1, reply::turn1_tool(&[("dark spot", 0.6)], 0.6, "side_by_side", json!({})));
    at(&mut b, 2, reply::later_final(json!(0), "found_in_ref", 0.5));
    let t = run(&w, &b, DomainCode::D2, 5);
    assert_eq!(t.finalize_reason, FinalizeReason::ModelFinal);
    assert_eq!(t.s_r, 0.20);
    assert!(t.turns[1].candidates_after.is_empty());
}

#[test]
fn survivor_is_lifted_into_survivor_band() {
    let w = World::default();
    let mut b = json_backend();
    at(&mut b, 1, reply::turn1_tool(&[("scratch", 0.6)], 0.6, "side_by_side", json!({})));
    at(&mut b, 2, reply::later_final(json!("Scratch "), "not_found", 0.30));
    let t = run(&w, &b, DomainCode::D2, 5);
    assert_eq!(t.s_r, 0.40);
}

#[test]
fn turn_k_is_forced_final() {
    let w = World::default();
    let mut b = json_backend();
    at(&mut b, 1, reply::turn1_tool(&[("a", 0.7)], 0.7, "side_by_side", json!({})));
    for turn in 2..=3 {
        at(&mut b, turn, reply::later_tool(json!(0), "inconclusive", 0.7, "zoom_bbox", json!({})));
    }
    let t = run(&w, &b, DomainCode::D2, 3);
    assert_eq!(t.n_turns(), 3);
    assert_eq!(t.finalize_reason, FinalizeReason::ForcedFinal);
    assert_eq!(t.s_r, 0.7);
    assert!(t.turns[2].tool_result.is_none());
}

#[test]
fn single_turn_budget_accepts_turn_one() {
    let w = World::default();
    let mut b = json_backend();
    at(&mut b, 1, reply::turn1_tool(&[("a", 0.7)], 0.99, "side_by_side", json!({})));
    let t = run(&w, &b, DomainCode::D2, 1);
    assert_eq!(t.finalize_reason, FinalizeReason::ForcedFinal);
    assert_eq!(t.s_r, 0.95);
    assert_eq!(t.vlm_calls, 1);
}

#[test]
fn unparseable_first_turn_falls_back() {
    let w = World::default();
    let mut b = json_backend();
    at(&mut b, 1, "no json here".into());
    b.insert(ANY_ITEM, tags::AGENT_RETRY, 1, "still none");
    let t = run(&w, &b, DomainCode::D2, 5);
    assert_eq!(t.finalize_reason, FinalizeReason::ParseFallback);
    assert_eq!(t.s_r, 0.5);
    assert_eq!((t.vlm_calls, t.retries), (2, 1));
}

#[test]
fn retry_recovers_turn() {
    let w = World::default();
    let mut b = json_backend();
    at(&mut b, 1, "thinking...".into());
    b.insert(ANY_ITEM, tags::AGENT_RETRY, 1, reply::turn1_final(&[("a", 0.8)], 0.8));
    let t = run(&w, &b, DomainCode::D2, 5);
    assert_eq!(t.finalize_reason, FinalizeReason::ModelFinal);
    assert_eq!(t.turns[0].rejected_completions, vec!["thinking..."]);
    assert_eq!(t.vlm_calls, 2);
}

#[test]
fn later_parse_failure_clamps_current_score() {
    let w = World::default();
    let mut b = json_backend();
    at(&mut b, 1, reply::turn1_tool(&[("a", 0.7)], 0.3, "side_by_side", json!({})));
    at(&mut b, 2, "?".into());
    b.insert(ANY_ITEM, tags::AGENT_RETRY, 2, "??");
    let t = run(&w, &b, DomainCode::D2, 5);
    assert_eq!(t.finalize_reason, FinalizeReason::ParseFallback);
    assert_eq!(t.s_r, 0.40);
    assert_eq!(t.vlm_calls, 3);
}

#[test]
fn unknown_tool_gets_catalog_observation() {
    let w = World::default();
    let mut b = json_backend();
    at(&mut b, 1, reply::turn1_tool(&[("a", 0.7)], 0.7, "magic_wand", json!({})));
    at(&mut b, 2, reply::later_final(json!(0), "not_found", 0.8));
    let t = run(&w, &b, DomainCode::D2, 5);
    let r = t.turns[0].tool_result.as_ref().unwrap();
    assert!(r.observation.contains("Valid tools"));
    assert!(r.observation.contains("side_by_side"));
    assert_eq!(t.n_turns(), 2);
}

#[test]
fn suspect_list_is_capped() {
    let w = World::default();
    let mut b = json_backend();
    let many = [("a", 0.9), ("b", 0.2), ("c", 0.5), ("d", 0.6)];
    at(&mut b, 1, reply::turn1_final(&many, 0.8));
    let t = run(&w, &b, DomainCode::D2, 5);
    assert_eq!(t.initial_candidates, 3);
    let names: Vec<&str> = t.turns[0].candidates_after.iter().map(|c| c.description.as_str()).collect();
    assert_eq!(names, vec!["a", "c", "d"]);
}

#[test]
fn unknown_target_is_a_violation() {
    let w = World::default();
    let mut b = json_backend();
    at(&mut b, 1, reply::turn1_tool(&[("a", 0.7)], 0.7, "side_by_side", json!({})));
    at(&mut b, 2, reply::later_final(json!("zzz"), "found_in_ref", 0.7));
    let t = run(&w, &b, DomainCode::D2, 5);
    assert_eq!(t.turns[1].candidates_after.len(), 1);
    assert!(!t.turns[1].protocol_violations.is_empty());
    assert_eq!(t.s_r, 0.7);
}

#[test]
fn gated_tool_refused_off_aligned_domain() {
    let w = World::default();
    let mut b = json_backend();
    at(&mut b, 1, reply::turn1_tool(&[("a", 0.7)], 0.7, "image_diff", json!({"ref_index": 0})));
    at(&mut b, 2, reply::later_final(json!(0), "not_found", 0.7));
    let t = run(&w, &b, DomainCode::D2, 5);
    assert!(t.turns[0].tool_result.as_ref().unwrap().refused);
    let t = run(&w, &b, DomainCode::D1, 5);
    assert!(!t.turns[0].tool_result.as_ref().unwrap().refused);
}

#[test]
fn profiler_call_counts() {
    let w = World::default();
    let mut b = json_backend();
    at(&mut b, 1, reply::turn1_tool(&[("a", 0.7)], 0.7, "tool_reference_profiler", json!({})));
    b.insert(ANY_ITEM, tags::REFERENCE_PROFILER, 1, "References show a uniform woven texture.");
    at(&mut b, 2, reply::later_final(json!(0), "not_found", 0.7));
    let t = run(&w, &b, DomainCode::D2, 5);
    // two turns plus the profiler; the Direct call makes four per item
    assert_eq!(t.vlm_calls, 3);
    assert_eq!(t.extra_vlm_calls, 1);
}

#[test]
fn trajectories_repeat_exactly() {
    let w = World::default();
    let mut b = json_backend();
    at(&mut b, 1, reply::turn1_tool(&[("a", 0.7)], 0.7, "expert_score", json!({})));
    at(&mut b, 2, reply::later_tool(json!(0), "inconclusive", 0.6, "texture_fft", json!({})));
    at(&mut b, 3, reply::later_tool(json!(0), "inconclusive", 0.6, "patch_grid", json!({"k": 3})));
    at(&mut b, 4, reply::later_final(json!(0), "not_found", 0.65));
    let a = serde_json::to_string(&run(&w, &b, DomainCode::D2, 5)).unwrap();
    let c = serde_json::to_string(&run(&w, &b, DomainCode::D2, 5)).unwrap();
    assert_eq!(a, c);
}

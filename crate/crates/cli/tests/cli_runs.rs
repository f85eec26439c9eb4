mod common;

use std::fs;
use std::process::Command;

use refuter_cli::commands::{
    cmd_build_cluster, cmd_diagnose, cmd_eval, cmd_run, cmd_tune_alpha, cmd_validate_manifest, read_run, EvalArgs,
};
use refuter_cli::config::{Mode, RunConfig};
use refuter_cli::output;
use refuter_core::eval::report::ScoreField;
use refuter_core::eval::BootstrapConfig;
use refuter_core::osr::{Rule, RuleType};
use serde_json::Value;

use common::{check_golden, run_toy, toy_config, toy_dir};

fn read(p: &std::path::Path) -> String {
    fs::read_to_string(p).unwrap()
}

#[test]
fn toy_run_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let r = run_toy(&toy_config(), dir.path());
    assert_eq!(r.outcomes.len(), 4);
    let (_, scores, traces) = read_run(dir.path()).unwrap();
    assert_eq!((scores.len(), traces.len()), (4, 4));
    check_golden(dir.path()).unwrap();
}

#[test]
fn rerun_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut cfg = toy_config();
    run_toy(&cfg, a.path());
    cfg.workers = 1;
    cfg.scoring.concurrent_branches = false;
    run_toy(&cfg, b.path());
    // only the config hash may differ
    for f in [output::SCORES, output::TRACES, output::RULES, output::REFLECTIONS] {
        let strip = |s: String| s.lines().skip(1).collect::<Vec<_>>().join("\n");
        let (x, y) = (read(&a.path().join(f)), read(&b.path().join(f)));
        if f == output::RULES {
            let rx: Vec<Rule> = output::read_json_field(&a.path().join(f), "rules").unwrap();
            let ry: Vec<Rule> = output::read_json_field(&b.path().join(f), "rules").unwrap();
            assert_eq!(rx, ry);
        } else {
            assert_eq!(strip(x), strip(y), "{f}");
        }
    }
}

#[test]
fn every_file_carries_hash_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let r = run_toy(&toy_config(), dir.path());
    for e in fs::read_dir(dir.path()).unwrap() {
        let text = read(&e.unwrap().path());
        let head = text.lines().take(4).collect::<Vec<_>>().join(" ");
        assert!(text.contains(&r.config_hash), "{head}");
        assert!(text.contains("seed") && text.contains('7'), "{head}");
    }
}

#[test]
fn osr_without_disagreements_writes_empty_rule_store() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_config();
    cfg.osr.tau = 0.99;
    let r = run_toy(&cfg, dir.path());
    assert!(r.events.is_empty());
    let rules: Vec<Rule> = output::read_json_field(&dir.path().join(output::RULES), "rules").unwrap();
    assert!(rules.is_empty());
    let refl = read(&dir.path().join(output::REFLECTIONS));
    assert_eq!(refl.lines().count(), 1);
}

#[test]
fn passive_run_has_no_rules_and_scores_without_context() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_config();
    cfg.mode = Mode::Passive;
    let r = run_toy(&cfg, dir.path());
    assert!(!dir.path().join(output::RULES).exists());
    assert!(r.outcomes.iter().all(|o| o.trace.rules_context.is_empty()));
    let calls: Vec<Option<u32>> = r.outcomes.iter().map(|o| o.trace.backend_calls).collect();
    let recorded: Vec<Option<u32>> = r.outcomes.iter().map(|o| Some(o.record.vlm_calls)).collect();
    assert_eq!(calls, recorded);
}

#[test]
fn config_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_config();
    cfg.scoring.alpha = 2.0;
    assert!(cmd_run(&cfg, &toy_dir(), dir.path()).is_err());
    let mut cfg = toy_config();
    cfg.mode = Mode::Cluster;
    assert!(cmd_run(&cfg, &toy_dir(), dir.path()).is_err());
    let mut cfg = toy_config();
    cfg.split = refuter_core::manifest::Split::Dev;
    assert!(cmd_run(&cfg, &toy_dir(), dir.path()).is_err());
}

fn eval_args(scores: Vec<std::path::PathBuf>, transforms: bool) -> EvalArgs {
    EvalArgs {
        manifest: toy_dir().join("manifest.json"),
        scores,
        names: vec!["osr".into(), "passive".into()],
        field: ScoreField::SFinal,
        bootstrap: BootstrapConfig { resamples: 200, seed: 3 },
        transforms,
    }
}

#[test]
fn eval_single_and_paired() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_toy(&toy_config(), a.path());
    let mut cfg = toy_config();
    cfg.mode = Mode::Passive;
    run_toy(&cfg, b.path());

    let one = cmd_eval(&eval_args(vec![a.path().join(output::SCORES)], false)).unwrap();
    assert_eq!(one.report.systems.len(), 1);
    assert!(one.report.comparisons.is_empty());
    assert!(one.table.starts_with("system\tD1\tD2\t"));
    assert!(one.mechanism.is_empty());

    let two = cmd_eval(&eval_args(vec![a.path().join(output::SCORES), b.path().join(output::SCORES)], true)).unwrap();
    assert_eq!(two.report.comparisons.len(), 1);
    let c = &two.report.comparisons[0];
    assert_eq!((c.system.as_str(), c.baseline.as_str()), ("passive", "osr"));
    assert!(c.bootstrap.resamples > 0 && c.bootstrap.resamples <= 200);
    let names: Vec<&str> = two.mechanism.iter().map(|m| m.transform.as_str()).collect();
    assert_eq!(names, ["original", "bin", "ext_rank", "affine_0.5", "affine_2.0"]);
    assert_eq!(two.mechanism[1].unique_values, 2);
    assert_eq!(two.inputs[0].1.as_deref().map(str::len), Some(64));
}

#[test]
fn diagnose_matches_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let r = run_toy(&toy_config(), dir.path());
    let before = read(&dir.path().join(output::DIAGNOSTICS));
    let d = cmd_diagnose(dir.path()).unwrap();
    assert_eq!(read(&dir.path().join(output::DIAGNOSTICS)), before);
    let s = d.summary.unwrap();
    assert_eq!(s.items, 4);
    assert_eq!(s.vlm_calls.mean, 3.25);
    assert!(d.call_mismatches.is_empty());
    assert_eq!(r.diagnostics.summary.unwrap().vlm_calls.max, 4);
    let empty = tempfile::tempdir().unwrap();
    assert!(cmd_diagnose(empty.path()).is_err());
}

#[test]
fn cluster_rules_then_cluster_mode() {
    let dev = tempfile::tempdir().unwrap();
    let mut cfg = toy_config();
    cfg.mode = Mode::Passive;
    run_toy(&cfg, dev.path());
    let rules_path = dev.path().join("cluster_rules.json");
    let (store, events) = cmd_build_cluster(&cfg, &toy_dir(), dev.path(), None, &rules_path).unwrap();
    // D1-001 is the only mistake (a false alarm at 0.5); D2 has none
    assert_eq!(events.len(), 1);
    assert_eq!(events[0].items, ["D1-001"]);
    let rules = store.all();
    assert_eq!(rules.len(), 1);
    assert_eq!(rules[0].rule_type, RuleType::CorrectiveFp);

    let out = tempfile::tempdir().unwrap();
    let mut cfg = toy_config();
    cfg.mode = Mode::Cluster;
    cfg.rules = Some(rules_path.clone());
    let r = run_toy(&cfg, out.path());
    let d1: Vec<_> = r.outcomes.iter().filter(|o| o.record.domain.as_str() == "D1").collect();
    assert!(d1.iter().all(|o| o.trace.rules_context == [rules[0].text.clone()]));
    let d2 = r.outcomes.iter().find(|o| o.record.item_id == "D2-000").unwrap();
    assert!(d2.trace.rules_context.is_empty());
    let rm: Value = serde_json::from_str(&read(&out.path().join(output::RUN_MANIFEST))).unwrap();
    assert!(rm["inputs"]["rules"].is_string());
}

#[test]
fn tuned_alphas_feed_an_alphas_run() {
    let dev = tempfile::tempdir().unwrap();
    let mut cfg = toy_config();
    cfg.mode = Mode::Passive;
    run_toy(&cfg, dev.path());
    let path = dev.path().join("alphas.json");
    let choices = cmd_tune_alpha(&toy_dir().join("manifest.json"), dev.path(), 10, 0, &path).unwrap();
    assert_eq!(choices.len(), 2);
    let d2 = choices.iter().find(|c| c.domain.as_str() == "D2").unwrap();
    assert!(d2.fallback);
    assert_eq!(d2.alpha, 0.5);
    let d1 = choices.iter().find(|c| c.domain.as_str() == "D1").unwrap();
    assert!(!d1.fallback);

    let out = tempfile::tempdir().unwrap();
    let mut cfg = toy_config();
    cfg.mode = Mode::Alphas;
    cfg.alphas = Some(path);
    let r = run_toy(&cfg, out.path());
    let got = r.outcomes.iter().find(|o| o.record.item_id == "D1-000").unwrap().record.alpha;
    assert_eq!(got, d1.alpha);
}

#[test]
fn manifest_summary() {
    let s = cmd_validate_manifest(&toy_dir().join("manifest.json")).unwrap();
    assert_eq!(s.items, 4);
    assert_eq!(s.per_split["test"], 4);
    assert_eq!(s.unlabeled, 0);
}

#[test]
fn credentials_in_config_are_refused() {
    let text = read(&toy_dir().join("run.toml")) + "\n[extra]\nToken = \"abc\"\n";
    let err = RunConfig::from_toml(&text).unwrap_err();
    assert!(format!("{err:#}").contains("environment variable"));
}

#[test]
fn binary_runs_the_toy_config() {
    let dir = tempfile::tempdir().unwrap();
    let st = Command::new(env!("CARGO_BIN_EXE_refuter"))
        .args(["run", "--config"])
        .arg(toy_dir().join("run.toml"))
        .arg("--out")
        .arg(dir.path())
        .env("RUST_LOG", "warn")
        .status()
        .unwrap();
    assert!(st.success());
    check_golden(dir.path()).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_refuter"))
        .args(["eval", "--resamples", "50", "--manifest"])
        .arg(toy_dir().join("manifest.json"))
        .arg("--scores")
        .arg(dir.path().join(output::SCORES))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("macro_auroc"));
    let bad = Command::new(env!("CARGO_BIN_EXE_refuter"))
        .args(["diagnose", "--run"])
        .arg(tempfile::tempdir().unwrap().path())
        .output()
        .unwrap();
    assert!(!bad.status.success());
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use refuter_cli::commands::{self, EvalArgs};
use refuter_cli::config::{Mode, Overrides, RunConfig};
use refuter_core::eval::report::ScoreField;
use refuter_core::eval::BootstrapConfig;
use refuter_core::manifest::{DomainCode, Split};

#[derive(Parser)]
#[command(name = "refuter", version, about = "Refutation-agent anomaly scoring: runs, evaluation and diagnostics")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Field {
    #[value(name = "s_d")]
    SD,
    #[value(name = "s_r")]
    SR,
    #[value(name = "s_final")]
    SFinal,
}

#[derive(Subcommand)]
enum Cmd {
    /// Score a split and write a run directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        split: Option<Split>,
        /// Comma-separated domain codes.
        #[arg(long, value_delimiter = ',')]
        domains: Option<Vec<DomainCode>>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        /// Use the scripted backend with this script.
        #[arg(long)]
        script: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        max_turns: Option<u32>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        no_osr: bool,
        #[arg(long)]
        rules: Option<PathBuf>,
        #[arg(long)]
        alphas: Option<PathBuf>,
    },
    /// Metrics, paired bootstrap and leave-one-domain-out over score files.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// scores.jsonl files; the first is the baseline for comparisons.
        #[arg(long = "scores", required = true, num_args = 1..)]
        scores: Vec<PathBuf>,
        #[arg(long = "name")]
        names: Vec<String>,
        #[arg(long, value_enum, default_value = "s_final")]
        field: Field,
        #[arg(long, default_value_t = 1000)]
        resamples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Add the score-granularity table for the first system.
        #[arg(long)]
        transforms: bool,
        /// Directory for eval.json and eval.tsv; stdout only when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute behavior diagnostics for a run directory.
    Diagnose {
        #[arg(long)]
        run: PathBuf,
    },
    /// Distill corrective rules from a scored dev run.
    BuildCluster {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pick per-domain fusion weights on a labeled dev sample.
    TuneAlpha {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    ValidateManifest {
        path: PathBuf,
    },
}

fn config_with_base(path: &Path) -> Result<(RunConfig, PathBuf)> {
    let cfg = RunConfig::load(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    Ok((cfg, base))
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Run {
            config,
            out,
            manifest,
            split,
            domains,
            mode,
            seed,
            workers,
            script,
            alpha,
            max_turns,
            tau,
            batch,
            no_osr,
            rules,
            alphas,
        } => {
            let (mut cfg, base) = config_with_base(&config)?;
            let cwd = std::env::current_dir()?;
            // flag paths are relative to the working directory, not the config
            let abs = |p: Option<PathBuf>| p.map(|p| cwd.join(p));
            cfg.apply(&Overrides {
                manifest: abs(manifest),
                split,
                domains,
                mode,
                seed,
                workers,
                script: abs(script),
                alpha,
                max_turns,
                tau,
                batch,
                osr_enabled: no_osr.then_some(false),
                rules: abs(rules),
                alphas: abs(alphas),
            });
            let r = commands::cmd_run(&cfg, &base, &out)?;
            let errored = r.outcomes.iter().filter(|o| o.record.errored).count();
            log::info!("{} items, {errored} errored, config {}", r.outcomes.len(), r.config_hash);
            println!("{}", out.display());
        }
        Cmd::Eval { manifest, scores, names, field, resamples, seed, transforms, out } => {
            let field = match field {
                Field::SD => ScoreField::SD,
                Field::SR => ScoreField::SR,
                Field::SFinal => ScoreField::SFinal,
            };
            let args = EvalArgs {
                manifest,
                scores,
                names,
                field,
                bootstrap: BootstrapConfig { resamples, seed },
                transforms,
            };
            let r = commands::cmd_eval(&args)?;
            print!("{}", r.table);
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                let mut s = serde_json::to_string_pretty(&r)?;
                s.push('\n');
                std::fs::write(dir.join("eval.json"), s)?;
                std::fs::write(dir.join("eval.tsv"), &r.table)?;
            }
        }
        Cmd::Diagnose { run } => print_json(&commands::cmd_diagnose(&run)?)?,
        Cmd::BuildCluster { config, run, k, out } => {
            let (cfg, base) = config_with_base(&config)?;
            let (store, events) = commands::cmd_build_cluster(&cfg, &base, &run, k, &out)?;
            log::info!("{} rules from {} domain calls", store.len(), events.len());
            println!("{}", out.display());
        }
        Cmd::TuneAlpha { manifest, run, k, seed, out } => {
            let choices = commands::cmd_tune_alpha(&manifest, &run, k, seed, &out)?;
            for c in choices {
                println!("{}\t{}", c.domain, c.alpha);
            }
        }
        Cmd::ValidateManifest { path } => print_json(&commands::cmd_validate_manifest(&path)?)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.cmd).context("refuter") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

//! Run configuration: TOML file, command-line overrides, validation and
//! the content hash stamped on every output.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use refuter_core::backend::OpenAiConfig;
use refuter_core::fusion::ScoringConfig;
use refuter_core::loader::sha256_hex;
use refuter_core::manifest::{DomainCode, Split};
use refuter_core::osr::OsrConfig;

pub const SCHEMA: &str = "refuter-run/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Passive,
    /// Static rules from `rules` injected into both prompts.
    Cluster,
    Osr,
    /// Per-domain fusion weights from `alphas`.
    Alphas,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Scripted { script: PathBuf },
    Openai(OpenAiConfig),
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Scripted { script: PathBuf::from("script.json") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub grid: usize,
    pub patch_px: u32,
    pub dim: usize,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig { grid: 48, patch_px: 4, dim: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub split: Split,
    /// Empty selects every domain.
    pub domains: Vec<DomainCode>,
    pub mode: Mode,
    pub seed: u64,
    pub workers: usize,
    /// Hard cap on model calls per item.
    pub call_cap: Option<u32>,
    pub backend: BackendConfig,
    pub scoring: ScoringConfig,
    pub osr: OsrConfig,
    pub provider: ProviderConfig,
    pub rules: Option<PathBuf>,
    pub alphas: Option<PathBuf>,
    /// Replaces the bundled domain knowledge file.
    pub knowledge: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifest: PathBuf::from("manifest.json"),
            split: Split::Test,
            domains: Vec::new(),
            mode: Mode::Passive,
            seed: 0,
            workers: 4,
            call_cap: None,
            backend: BackendConfig::default(),
            scoring: ScoringConfig::default(),
            osr: OsrConfig::default(),
            provider: ProviderConfig::default(),
            rules: None,
            alphas: None,
            knowledge: None,
        }
    }
}

/// Command-line values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub manifest: Option<PathBuf>,
    pub split: Option<Split>,
    pub domains: Option<Vec<DomainCode>>,
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub script: Option<PathBuf>,
    pub alpha: Option<f64>,
    pub max_turns: Option<u32>,
    pub tau: Option<f64>,
    pub batch: Option<usize>,
    pub osr_enabled: Option<bool>,
    pub rules: Option<PathBuf>,
    pub alphas: Option<PathBuf>,
}

const SECRET_KEYS: [&str; 6] = ["api_key", "apikey", "token", "bearer", "password", "authorization"];

fn secret_key(t: &toml::Table) -> Option<String> {
    for (k, v) in t {
        if SECRET_KEYS.contains(&k.to_ascii_lowercase().as_str()) {
            return Some(k.clone());
        }
        if let toml::Value::Table(inner) = v {
            if let Some(k) = secret_key(inner) {
                return Some(k);
            }
        }
    }
    None
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: toml::Table = toml::from_str(text).context("invalid TOML")?;
        if let Some(k) = secret_key(&raw) {
            bail!("credential-like key {k:?} in config; put the secret in an environment variable named by backend.auth_env");
        }
        toml::from_str(text).context("invalid run config")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        macro_rules! set {
            ($field:ident => $target:expr) => {
                if let Some(v) = &o.$field {
                    $target = v.clone();
                }
            };
        }
        set!(manifest => self.manifest);
        set!(split => self.split);
        set!(domains => self.domains);
        set!(mode => self.mode);
        set!(seed => self.seed);
        set!(workers => self.workers);
        set!(alpha => self.scoring.alpha);
        set!(max_turns => self.scoring.agent.max_turns);
        set!(tau => self.osr.tau);
        set!(batch => self.osr.batch);
        set!(osr_enabled => self.osr.enabled);
        if let Some(s) = &o.script {
            self.backend = BackendConfig::Scripted { script: s.clone() };
        }
        if o.rules.is_some() {
            self.rules = o.rules.clone();
        }
        if o.alphas.is_some() {
            self.alphas = o.alphas.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.scoring.alpha) {
            bail!("alpha {} outside [0, 1]", self.scoring.alpha);
        }
        if let Some((d, a)) = self.scoring.domain_alpha.iter().find(|(_, a)| !unit(**a)) {
            bail!("alpha {a} for {d} outside [0, 1]");
        }
        if self.scoring.agent.max_turns < 1 {
            bail!("max_turns must be at least 1");
        }
        if !(self.osr.tau > 0.0) {
            bail!("tau must be positive");
        }
        if self.osr.batch < 1 {
            bail!("osr batch must be at least 1");
        }
        if self.workers < 1 {
            bail!("workers must be at least 1");
        }
        if self.mode == Mode::Cluster && self.rules.is_none() {
            bail!("cluster mode needs a rules file");
        }
        if self.mode == Mode::Alphas && self.alphas.is_none() {
            bail!("alphas mode needs an alphas file");
        }
        if let BackendConfig::Openai(c) = &self.backend {
            if c.model.is_empty() {
                bail!("backend.model is required for the openai backend");
            }
        }
        Ok(())
    }

    /// Files whose contents feed the run, resolved against `base`.
    pub fn input_files(&self, base: &Path) -> Vec<(&'static str, PathBuf)> {
        let mut v = vec![("manifest", base.join(&self.manifest))];
        if let BackendConfig::Scripted { script } = &self.backend {
            v.push(("script", base.join(script)));
        }
        let opt = [("rules", &self.rules), ("alphas", &self.alphas), ("knowledge", &self.knowledge)];
        for (k, p) in opt {
            let used = match k {
                "rules" => matches!(self.mode, Mode::Cluster | Mode::Osr),
                "alphas" => self.mode == Mode::Alphas,
                _ => true,
            };
            if let (Some(p), true) = (p, used) {
                v.push((k, base.join(p)));
            }
        }
        v
    }

    /// sha256 over the canonical JSON of the config followed by the
    /// digests of every input file, so equal hashes imply equal inputs.
    pub fn hash(&self, base: &Path) -> Result<String> {
        let mut s = serde_json::to_string(self)?;
        for (k, p) in self.input_files(base) {
            let bytes = std::fs::read(&p).with_context(|| format!("reading {k} file {}", p.display()))?;
            s.push_str(&format!("\n{k}:{}", sha256_hex(&bytes)));
        }
        Ok(sha256_hex(s.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_overrides() {
        let c = RunConfig::from_toml(
            r#"
manifest = "m.json"
split = "dev"
mode = "osr"
[backend]
kind = "openai"
endpoint = "http://localhost:1/v1"
model = "m"
auth_env = "MY_TOKEN"
[scoring]
alpha = 0.7
[scoring.agent]
max_turns = 3
[osr]
tau = 0.25
"#,
        )
        .unwrap();
        assert_eq!(c.split, Split::Dev);
        assert_eq!(c.scoring.agent.max_turns, 3);
        assert_eq!(c.osr.tau, 0.25);
        assert!(matches!(&c.backend, BackendConfig::Openai(o) if o.auth_env.as_deref() == Some("MY_TOKEN")));
        let mut c2 = c.clone();
        c2.apply(&Overrides { alpha: Some(0.2), script: Some("s.json".into()), ..Overrides::default() });
        assert_eq!(c2.scoring.alpha, 0.2);
        assert!(matches!(c2.backend, BackendConfig::Scripted { .. }));
    }

    #[test]
    fn invalid_values_rejected() {
        let mut c = RunConfig::default();
        c.scoring.alpha = 1.5;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.scoring.agent.max_turns = 0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.osr.tau = 0.0;
        assert!(c.validate().is_err());
        assert!(RunConfig::from_toml("[backend]\nkind = \"openai\"\napi_key = \"x\"").is_err());
        assert!(RunConfig::from_toml("bogus = 1").is_err());
    }
}

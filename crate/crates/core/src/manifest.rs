//! Benchmark manifest: domains, frozen splits and items.
//!
//! A manifest is a single JSON document carrying a version stamp, the
//! per-domain metadata and the item list. Item order in the file is
//! significant: [`Manifest::items_for`] returns items in file order and the
//! online rule-learning pass depends on it.
//!
//! Labels live only on [`ItemRecord`]. Everything that talks to a model or
//! a tool receives an [`ItemView`], which has no label field at all.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_REFERENCES: usize = 10;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("failed to read manifest {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse manifest: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("manifest validation failed: {0}")]
    Validation(String),
}

/// Domain code of the twelve-domain benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DomainCode {
    D1,
    D2,
    D3,
    D4,
    D5,
    D6,
    D7,
    D8,
    D9,
    D10,
    D11,
    D12,
}

impl DomainCode {
    pub const ALL: [DomainCode; 12] = [
        DomainCode::D1,
        DomainCode::D2,
        DomainCode::D3,
        DomainCode::D4,
        DomainCode::D5,
        DomainCode::D6,
        DomainCode::D7,
        DomainCode::D8,
        DomainCode::D9,
        DomainCode::D10,
        DomainCode::D11,
        DomainCode::D12,
    ];

    pub fn index(self) -> usize {
        self as usize + 1
    }

    /// Whether the frozen subspace expert is considered reliable here.
    pub fn expert_available(self) -> bool {
        !matches!(
            self,
            DomainCode::D2 | DomainCode::D4 | DomainCode::D8 | DomainCode::D11 | DomainCode::D12
        )
    }

    /// Whether pixel-aligned diffing between query and reference is meaningful.
    pub fn aligned(self) -> bool {
        matches!(self, DomainCode::D1 | DomainCode::D3 | DomainCode::D5)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DomainCode::D1 => "D1",
            DomainCode::D2 => "D2",
            DomainCode::D3 => "D3",
            DomainCode::D4 => "D4",
            DomainCode::D5 => "D5",
            DomainCode::D6 => "D6",
            DomainCode::D7 => "D7",
            DomainCode::D8 => "D8",
            DomainCode::D9 => "D9",
            DomainCode::D10 => "D10",
            DomainCode::D11 => "D11",
            DomainCode::D12 => "D12",
        }
    }
}

impl fmt::Display for DomainCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DomainCode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DomainCode::ALL
            .iter()
            .copied()
            .find(|d| d.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown domain code {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Calibration,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Calibration => "calibration",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "calibration" | "cal" => Ok(Split::Calibration),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub code: DomainCode,
    pub family: String,
    pub aligned: bool,
    pub expert_available: bool,
    #[serde(default)]
    pub descriptor_generic: String,
    #[serde(default)]
    pub descriptor_task: String,
    /// Turn-1 hint naming expert reliability and the recommended tool pipeline.
    #[serde(default)]
    pub hint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub id: String,
    pub domain: DomainCode,
    #[serde(default)]
    pub category: String,
    #[serde(rename = "query")]
    pub query_ref: String,
    #[serde(rename = "references")]
    pub reference_refs: Vec<String>,
    pub split: Split,
    /// True when anomalous. Never reachable from agent-facing code.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<bool>,
}

/// Label-free projection of an item; the only form agents, scorers and tools accept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemView {
    pub id: String,
    pub domain: DomainCode,
    pub category: String,
    pub query_ref: String,
    pub reference_refs: Vec<String>,
    pub split: Split,
}

impl ItemRecord {
    pub fn agent_view(&self) -> ItemView {
        ItemView {
            id: self.id.clone(),
            domain: self.domain,
            category: self.category.clone(),
            query_ref: self.query_ref.clone(),
            reference_refs: self.reference_refs.clone(),
            split: self.split,
        }
    }
}

impl ItemView {
    pub fn agent_view(&self) -> ItemView {
        self.clone()
    }
}

/// Expected item counts per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub calibration: usize,
    pub dev: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Calibration => self.calibration,
            Split::Dev => self.dev,
            Split::Test => self.test,
        }
    }
}

/// Per-domain split-size contract. Absent from a manifest means the
/// twelve-domain benchmark contract (20/40/120, D7 test 98).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub default: SplitCounts,
    #[serde(default)]
    pub overrides: BTreeMap<DomainCode, SplitOverride>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitOverride {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<usize>,
}

impl Default for SplitSizes {
    fn default() -> Self {
        let mut overrides = BTreeMap::new();
        overrides.insert(
            DomainCode::D7,
            SplitOverride {
                test: Some(98),
                ..Default::default()
            },
        );
        SplitSizes {
            default: SplitCounts {
                calibration: 20,
                dev: 40,
                test: 120,
            },
            overrides,
        }
    }
}

impl SplitSizes {
    pub fn expected(&self, domain: DomainCode, split: Split) -> usize {
        let o = self.overrides.get(&domain).copied().unwrap_or_default();
        let v = match split {
            Split::Calibration => o.calibration,
            Split::Dev => o.dev,
            Split::Test => o.test,
        };
        v.unwrap_or_else(|| self.default.get(split))
    }
}

fn default_hash_algorithm() -> String {
    "sha256".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    #[serde(default = "default_hash_algorithm")]
    pub hash_algorithm: String,
    #[serde(default)]
    pub split_sizes: SplitSizes,
    pub domains: Vec<DomainSpec>,
    pub items: Vec<ItemRecord>,
    /// Content hash per image locator.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub hashes: BTreeMap<String, String>,
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest, ManifestError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_manifest(&text)
}

pub fn parse_manifest(text: &str) -> Result<Manifest, ManifestError> {
    let manifest: Manifest = serde_json::from_str(text)?;
    manifest.validate()?;
    Ok(manifest)
}

impl Manifest {
    /// Checks every manifest invariant, reporting the first violation.
    pub fn validate(&self) -> Result<(), ManifestError> {
        let fail = |msg: String| Err(ManifestError::Validation(msg));

        if self.hash_algorithm != "sha256" {
            return fail(format!(
                "unsupported hash algorithm {:?} (expected sha256)",
                self.hash_algorithm
            ));
        }

        let mut seen_domains = HashSet::new();
        for d in &self.domains {
            if !seen_domains.insert(d.code) {
                return fail(format!("domain {} declared twice", d.code));
            }
            if d.expert_available != d.code.expert_available() {
                return fail(format!(
                    "domain {}: expert_available must be {}",
                    d.code,
                    d.code.expert_available()
                ));
            }
            if d.aligned != d.code.aligned() {
                return fail(format!("domain {}: aligned must be {}", d.code, d.code.aligned()));
            }
        }

        let mut ids = HashSet::new();
        for item in &self.items {
            if !ids.insert(item.id.as_str()) {
                return fail(format!("duplicate item id {}", item.id));
            }
            if !seen_domains.contains(&item.domain) {
                return fail(format!("item {}: domain {} is not declared", item.id, item.domain));
            }
            let n = item.reference_refs.len();
            if !(1..=MAX_REFERENCES).contains(&n) {
                return fail(format!(
                    "item {}: {} references, expected 1..={}",
                    item.id, n, MAX_REFERENCES
                ));
            }
            if item.reference_refs.iter().any(|r| r == &item.query_ref) {
                return fail(format!("item {}: a reference equals the query", item.id));
            }
        }

        for d in &self.domains {
            for split in [Split::Calibration, Split::Dev, Split::Test] {
                let got = self
                    .items
                    .iter()
                    .filter(|i| i.domain == d.code && i.split == split)
                    .count();
                let want = self.split_sizes.expected(d.code, split);
                if got != want {
                    return fail(format!(
                        "domain {} split {}: {} items, expected {}",
                        d.code, split, got, want
                    ));
                }
            }
        }
        Ok(())
    }

    /// Items of a split (optionally one domain), in manifest file order.
    pub fn items_for(&self, split: Split, domain: Option<DomainCode>) -> Vec<&ItemRecord> {
        self.items
            .iter()
            .filter(|i| i.split == split && domain.is_none_or(|d| i.domain == d))
            .collect()
    }

    pub fn domain(&self, code: DomainCode) -> Option<&DomainSpec> {
        self.domains.iter().find(|d| d.code == code)
    }

    pub fn item(&self, id: &str) -> Option<&ItemRecord> {
        self.items.iter().find(|i| i.id == id)
    }

    /// Map of item id to label for items that carry one.
    pub fn labels(&self) -> BTreeMap<String, bool> {
        self.items
            .iter()
            .filter_map(|i| i.label.map(|l| (i.id.clone(), l)))
            .collect()
    }

    pub fn domain_codes(&self) -> Vec<DomainCode> {
        self.domains.iter().map(|d| d.code).collect()
    }
}

#[derive(Debug, Deserialize)]
struct DomainTable {
    domains: Vec<DomainSpec>,
}

/// The twelve benchmark domain specs shipped with the crate.
pub fn benchmark_domains() -> Vec<DomainSpec> {
    let table: DomainTable = serde_json::from_str(include_str!("../data/domains.json"))
        .expect("bundled domain table is valid JSON");
    table.domains
}

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::manifest::DomainCode;

pub const MAX_KEYWORDS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    pub keywords: Vec<String>,
    pub primer: String,
}

/// Static per-domain keyword lists and primers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeBase {
    entries: BTreeMap<DomainCode, KnowledgeEntry>,
}

impl KnowledgeBase {
    pub fn bundled() -> Self {
        Self::parse(include_str!("../../data/domain_knowledge.json"))
            .expect("bundled domain knowledge is valid")
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let raw: BTreeMap<String, KnowledgeEntry> =
            serde_json::from_str(text).map_err(|e| format!("malformed domain knowledge: {e}"))?;
        let mut entries = BTreeMap::new();
        for (k, v) in raw {
            let code = DomainCode::from_str(&k)?;
            if v.keywords.len() > MAX_KEYWORDS {
                return Err(format!(
                    "{k}: {} keywords, at most {MAX_KEYWORDS} allowed",
                    v.keywords.len()
                ));
            }
            entries.insert(code, v);
        }
        Ok(KnowledgeBase { entries })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn get(&self, domain: DomainCode) -> Option<&KnowledgeEntry> {
        self.entries.get(&domain)
    }

    /// Lookup by textual code; unknown codes are an error, known codes
    /// without an entry give `Ok(None)`.
    pub fn lookup(&self, code: &str) -> Result<Option<&KnowledgeEntry>, String> {
        let d = DomainCode::from_str(code)?;
        Ok(self.get(d))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_covers_all_domains() {
        let kb = KnowledgeBase::bundled();
        for d in DomainCode::ALL {
            let e = kb.get(d).expect("entry");
            assert!(!e.keywords.is_empty() && e.keywords.len() <= MAX_KEYWORDS);
            assert!(!e.primer.is_empty());
        }
    }

    #[test]
    fn unknown_code_is_error() {
        let kb = KnowledgeBase::bundled();
        assert!(kb.lookup("D13").is_err());
        assert!(kb.lookup("D6").unwrap().unwrap().keywords.len() <= 6);
        assert!(KnowledgeBase::empty().lookup("D6").unwrap().is_none());
    }

    #[test]
    fn too_many_keywords_rejected() {
        let text = r#"{"D1": {"keywords": ["a","b","c","d","e","f","g"], "primer": "p"}}"#;
        assert!(KnowledgeBase::parse(text).is_err());
    }
}

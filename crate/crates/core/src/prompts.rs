//! Prompt templates, compiled into the binary.
//!
//! Templates use `{{name}}` placeholders. Rendering fails loudly on a
//! placeholder without a value so a template edit cannot silently send a
//! half-filled prompt. Golden-trace tests pin the rendered text.

pub const TEMPLATE_VERSION: &str = "v1";

pub const DIRECT_SYSTEM: &str = include_str!("../templates/direct_system.txt");
pub const DIRECT_JSON: &str = include_str!("../templates/direct_json.txt");
pub const DIRECT_LOGIT: &str = include_str!("../templates/direct_logit.txt");
pub const RULES_HEADER: &str = include_str!("../templates/rules_header.txt");
pub const AGENT_SYSTEM: &str = include_str!("../templates/agent_system.txt");
pub const AGENT_TURN1: &str = include_str!("../templates/agent_turn1.txt");
pub const AGENT_OBSERVATION: &str = include_str!("../templates/agent_observation.txt");
pub const AGENT_NEXT: &str = include_str!("../templates/agent_next.txt");
pub const AGENT_FORCED_FINAL: &str = include_str!("../templates/agent_forced_final.txt");
pub const AGENT_RETRY: &str = include_str!("../templates/agent_retry.txt");
pub const AUX_SYSTEM: &str = include_str!("../templates/aux_system.txt");
pub const REFERENCE_PROFILER: &str = include_str!("../templates/reference_profiler.txt");
pub const DOMAIN_KNOWLEDGE: &str = include_str!("../templates/domain_knowledge.txt");
pub const REFLECTOR: &str = include_str!("../templates/reflector.txt");
pub const CLUSTER: &str = include_str!("../templates/cluster.txt");

/// Substitutes `{{key}}` placeholders.
///
/// # Panics
/// When a placeholder in the template has no value in `vars`.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find("}}")
            .unwrap_or_else(|| panic!("unterminated placeholder in template"));
        let key = &after[..end];
        let value = vars
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("no value for placeholder {{{{{key}}}}}"));
        out.push_str(value);
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    out
}

/// Rules context block: fixed header, then a numbered list. Empty input
/// gives an empty string so templates can splice it unconditionally.
pub fn rules_block(rules: &[String]) -> String {
    if rules.is_empty() {
        return String::new();
    }
    let mut s = RULES_HEADER.to_string();
    for (i, r) in rules.iter().enumerate() {
        s.push_str(&format!("{}. {}\n", i + 1, r.trim()));
    }
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_substitutes() {
        assert_eq!(render("a {{x}} b {{y}}{{x}}", &[("x", "1"), ("y", "2")]), "a 1 b 21");
        assert_eq!(render("no placeholders", &[]), "no placeholders");
    }

    #[test]
    #[should_panic(expected = "no value")]
    fn render_missing_value_panics() {
        render("{{missing}}", &[]);
    }

    #[test]
    fn rules_block_layout() {
        assert_eq!(rules_block(&[]), "");
        let b = rules_block(&["first".into(), "second".into()]);
        assert!(b.starts_with(RULES_HEADER));
        assert!(b.contains("1. first\n2. second\n"));
    }

    #[test]
    fn json_templates_keep_their_braces() {
        // braces of the JSON schema lines are single and survive rendering
        let s = render(DIRECT_JSON, &[("rules", ""), ("n_refs", "2")]);
        assert!(s.contains("{\"image_label\""));
    }
}

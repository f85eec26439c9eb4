use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JsonKind {
    String,
    Number,
    Bool,
    Array,
    Object,
    Any,
}

impl JsonKind {
    fn matches(self, v: &Value) -> bool {
        match self {
            JsonKind::String => v.is_string(),
            JsonKind::Number => v.is_number(),
            JsonKind::Bool => v.is_boolean(),
            JsonKind::Array => v.is_array(),
            JsonKind::Object => v.is_object(),
            JsonKind::Any => true,
        }
    }

    fn name(self) -> &'static str {
        match self {
            JsonKind::String => "string",
            JsonKind::Number => "number",
            JsonKind::Bool => "boolean",
            JsonKind::Array => "array",
            JsonKind::Object => "object",
            JsonKind::Any => "any",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("no JSON object found in completion")]
    NoObject,
    #[error("missing key \"{0}\"")]
    MissingKey(String),
    #[error("key \"{key}\" should be a {expected}")]
    WrongType { key: String, expected: &'static str },
}

/// Extracts the first JSON object embedded in `text` and checks it for the
/// expected keys.
///
/// Every `{` is tried as the start of an object, so surrounding prose and
/// markdown fences are ignored. Among the objects found, the first one
/// carrying all expected keys with the right types wins; if none does, the
/// error describes what was wrong with the first object found.
pub fn parse_structured_block(
    text: &str,
    expected: &[(&str, JsonKind)],
) -> Result<Map<String, Value>, ParseError> {
    let mut first_err: Option<ParseError> = None;
    let mut pos = 0;
    while let Some(off) = text[pos..].find('{') {
        let start = pos + off;
        let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(map))) => {
                match check(&map, expected) {
                    Ok(()) => return Ok(map),
                    Err(e) => {
                        first_err.get_or_insert(e);
                    }
                }
                // skip past the whole object so nested braces are not retried
                pos = start + stream.byte_offset().max(1);
            }
            _ => pos = start + 1,
        }
    }
    Err(first_err.unwrap_or(ParseError::NoObject))
}

fn check(map: &Map<String, Value>, expected: &[(&str, JsonKind)]) -> Result<(), ParseError> {
    for &(key, kind) in expected {
        match map.get(key) {
            None => return Err(ParseError::MissingKey(key.to_string())),
            Some(v) if !kind.matches(v) => {
                return Err(ParseError::WrongType {
                    key: key.to_string(),
                    expected: kind.name(),
                })
            }
            Some(_) => {}
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const LABEL_CONF: &[(&str, JsonKind)] =
        &[("image_label", JsonKind::String), ("confidence", JsonKind::Number)];

    #[test]
    fn plain_object() {
        let m = parse_structured_block(
            r#"{"image_label":"anomalous","confidence":0.85}"#,
            LABEL_CONF,
        )
        .unwrap();
        assert_eq!(m["image_label"], "anomalous");
        assert_eq!(m["confidence"].as_f64(), Some(0.85));
        assert_eq!(m.len(), 2);
    }

    #[test]
    fn fenced_with_prose() {
        let text = "Looking closely {not json} at it.\n```json\n{\"image_label\": \"normal\", \"confidence\": 0.7}\n```\nDone.";
        let m = parse_structured_block(text, LABEL_CONF).unwrap();
        assert_eq!(m["image_label"], "normal");
    }

    #[test]
    fn no_object() {
        assert_eq!(
            parse_structured_block("the image looks fine", LABEL_CONF),
            Err(ParseError::NoObject)
        );
        assert_eq!(
            parse_structured_block("{ broken", LABEL_CONF),
            Err(ParseError::NoObject)
        );
    }

    #[test]
    fn missing_key_is_named() {
        let err = parse_structured_block(r#"{"image_label":"anomalous"}"#, LABEL_CONF).unwrap_err();
        assert_eq!(err, ParseError::MissingKey("confidence".into()));
        assert!(err.to_string().contains("confidence"));
    }

    #[test]
    fn wrong_type() {
        let err =
            parse_structured_block(r#"{"image_label":"anomalous","confidence":"high"}"#, LABEL_CONF)
                .unwrap_err();
        assert!(matches!(err, ParseError::WrongType { .. }));
    }

    #[test]
    fn later_object_with_keys_wins() {
        let text = r#"example: {"a":1} answer: {"image_label":"normal","confidence":0.2}"#;
        let m = parse_structured_block(text, LABEL_CONF).unwrap();
        assert_eq!(m["confidence"].as_f64(), Some(0.2));
    }

    #[test]
    fn nested_objects_parse_as_outer() {
        let text = r#"{"action":"call_tool","tool":{"name":"zoom_bbox","args":{"bbox":[0,0,1,1]}}}"#;
        let m = parse_structured_block(text, &[("action", JsonKind::String)]).unwrap();
        assert!(m["tool"].is_object());
    }
}

use std::collections::HashSet;
use std::fmt;
use std::marker::PhantomData;

use indexmap::IndexMap;
use serde::de::{self, Deserializer, IgnoredAny, MapAccess, Visitor};
use serde::Deserialize;
use serde_json::{Map, Value};

use super::ModelError;

/// Map of keys seen in one JSON object, remembering repeated keys instead of
/// silently keeping the last one.
#[derive(Debug, Default)]
pub(crate) struct KeyAudit {
    pub duplicates: Vec<String>,
}

impl<'de> Deserialize<'de> for KeyAudit {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct AuditVisitor(PhantomData<()>);

        impl<'de> Visitor<'de> for AuditVisitor {
            type Value = KeyAudit;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<KeyAudit, A::Error> {
                let mut seen = HashSet::new();
                let mut duplicates = Vec::new();
                while let Some(key) = access.next_key::<String>()? {
                    access.next_value::<IgnoredAny>()?;
                    if !seen.insert(key.clone()) {
                        duplicates.push(key);
                    }
                }
                Ok(KeyAudit { duplicates })
            }

            fn visit_unit<E: de::Error>(self) -> Result<KeyAudit, E> {
                Ok(KeyAudit::default())
            }
        }

        deserializer.deserialize_any(AuditVisitor(PhantomData))
    }
}

/// Parse text into a top-level JSON object.
pub(crate) fn parse_object(text: &str) -> Result<Map<String, Value>, ModelError> {
    match serde_json::from_str::<Value>(text).map_err(ModelError::malformed)? {
        Value::Object(map) => Ok(map),
        _ => Err(ModelError::MalformedDocument {
            line: 1,
            column: 1,
            message: "top-level value is not an object".into(),
        }),
    }
}

/// Turn an audit-pass error into the most specific model error.
pub(crate) fn audit_error(err: serde_json::Error) -> ModelError {
    let msg = err.to_string();
    if let Some(rest) = msg.strip_prefix("duplicate field `") {
        let key = rest.split('`').next().unwrap_or_default().to_string();
        return ModelError::DuplicateKey {
            section: "<top level>".into(),
            key,
        };
    }
    ModelError::malformed(err)
}

pub(crate) fn check_duplicates(section: &str, audit: &Option<KeyAudit>) -> Result<(), ModelError> {
    match audit.as_ref().and_then(|a| a.duplicates.first()) {
        Some(key) => Err(ModelError::DuplicateKey {
            section: section.to_string(),
            key: key.clone(),
        }),
        None => Ok(()),
    }
}

/// Read a `{name: range}` section, tolerating absence.
pub(crate) fn string_map(
    obj: &Map<String, Value>,
    field: &str,
) -> Result<IndexMap<String, String>, ModelError> {
    let mut out = IndexMap::new();
    match obj.get(field) {
        None | Some(Value::Null) => {}
        Some(Value::Object(m)) => {
            for (k, v) in m {
                let range = match v {
                    Value::String(s) => s.clone(),
                    _ => {
                        return Err(ModelError::InvalidField {
                            field: format!("{field}.{k}"),
                            expected: "a version-range string",
                        })
                    }
                };
                out.insert(k.clone(), range);
            }
        }
        Some(_) => {
            return Err(ModelError::InvalidField {
                field: field.to_string(),
                expected: "an object",
            })
        }
    }
    Ok(out)
}

pub(crate) fn to_object(map: &IndexMap<String, String>) -> Value {
    Value::Object(
        map.iter()
            .map(|(k, v)| (k.clone(), Value::String(v.clone())))
            .collect(),
    )
}

/// npm's on-disk style: two-space indentation and a trailing newline.
pub(crate) fn write_pretty(value: &Value) -> String {
    let mut out = serde_json::to_string_pretty(value).expect("JSON values always serialize");
    out.push('\n');
    out
}

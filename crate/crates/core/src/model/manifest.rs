use indexmap::IndexMap;
use serde::Deserialize;
use serde_json::{Map, Value};

use super::json::{self, KeyAudit};
use super::ModelError;

/// Parsed `package.json`.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub name: String,
    /// The `dependencies` section.
    pub runtime_deps: IndexMap<String, String>,
    /// The `devDependencies` section.
    pub dev_deps: IndexMap<String, String>,
    doc: Map<String, Value>,
}

#[derive(Deserialize)]
struct SectionAudit {
    #[serde(default)]
    dependencies: Option<KeyAudit>,
    #[serde(default, rename = "devDependencies")]
    dev_dependencies: Option<KeyAudit>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let doc = json::parse_object(text)?;
        let audit: SectionAudit = serde_json::from_str(text).map_err(json::audit_error)?;
        json::check_duplicates("dependencies", &audit.dependencies)?;
        json::check_duplicates("devDependencies", &audit.dev_dependencies)?;

        let name = match doc.get("name") {
            Some(Value::String(s)) => s.clone(),
            None | Some(Value::Null) => String::new(),
            Some(_) => {
                return Err(ModelError::InvalidField {
                    field: "name".into(),
                    expected: "a string",
                })
            }
        };
        Ok(Manifest {
            name,
            runtime_deps: json::string_map(&doc, "dependencies")?,
            dev_deps: json::string_map(&doc, "devDependencies")?,
            doc,
        })
    }

    /// Every field other than the two dependency sections, in input order.
    pub fn passthrough(&self) -> impl Iterator<Item = (&String, &Value)> {
        self.doc
            .iter()
            .filter(|(k, _)| k.as_str() != "dependencies" && k.as_str() != "devDependencies")
    }

    pub fn to_value(&self) -> Value {
        let mut doc = self.doc.clone();
        for (key, section) in [
            ("dependencies", &self.runtime_deps),
            ("devDependencies", &self.dev_deps),
        ] {
            if let Some(slot) = doc.get_mut(key) {
                *slot = json::to_object(section);
            } else if !section.is_empty() {
                doc.insert(key.to_string(), json::to_object(section));
            }
        }
        Value::Object(doc)
    }

    pub fn serialize(&self) -> String {
        json::write_pretty(&self.to_value())
    }
}

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::json::{self, KeyAudit};
use super::path::InstallPath;
use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Runtime,
    Dev,
}

/// Which declaration section an edge came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Prod,
    Optional,
    Peer,
}

impl EdgeKind {
    /// Prod edges must resolve; optional and peer edges may be absent.
    pub fn is_required(self) -> bool {
        matches!(self, EdgeKind::Prod)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeclaredDep {
    pub range: String,
    pub kind: EdgeKind,
}

pub(crate) const EDGE_SECTIONS: [(&str, EdgeKind); 3] = [
    ("dependencies", EdgeKind::Prod),
    ("optionalDependencies", EdgeKind::Optional),
    ("peerDependencies", EdgeKind::Peer),
];

/// One installed copy of a dependency.
#[derive(Debug, Clone, PartialEq)]
pub struct DependencyInstance {
    pub install_path: InstallPath,
    pub name: String,
    pub version: String,
    pub scope: Scope,
    pub declared_deps: IndexMap<String, DeclaredDep>,
    pub is_direct: bool,
    entry: Map<String, Value>,
}

impl DependencyInstance {
    fn from_entry(
        install_path: InstallPath,
        entry: Map<String, Value>,
        root_declared: &IndexMap<String, DeclaredDep>,
        root_dev: &IndexMap<String, String>,
    ) -> Result<Self, ModelError> {
        let flag = |key: &str| matches!(entry.get(key), Some(Value::Bool(true)));
        let scope = if flag("dev") || flag("devOptional") {
            Scope::Dev
        } else {
            Scope::Runtime
        };
        let version = match entry.get("version") {
            Some(Value::String(v)) => v.clone(),
            _ => String::new(),
        };
        let declared_deps = declared_edges(&entry, install_path.as_str())?;
        let name = install_path.name().to_string();
        let is_direct = install_path.depth() == 1
            && (root_declared.contains_key(&name) || root_dev.contains_key(&name));
        Ok(DependencyInstance {
            install_path,
            name,
            version,
            scope,
            declared_deps,
            is_direct,
            entry,
        })
    }

    /// The raw lockfile entry (integrity, resolved URL, engines, ...).
    pub fn entry(&self) -> &Map<String, Value> {
        &self.entry
    }

    pub fn is_bundled(&self) -> bool {
        matches!(self.entry.get("inBundle"), Some(Value::Bool(true)))
    }

    /// Drop a declared dependency from every section that lists it.
    /// Sections left empty are removed. Returns whether anything changed.
    pub(crate) fn remove_declared(&mut self, name: &str) -> bool {
        if self.declared_deps.shift_remove(name).is_none() {
            return false;
        }
        remove_from_sections(&mut self.entry, name);
        true
    }
}

pub(crate) fn remove_from_sections(entry: &mut Map<String, Value>, name: &str) {
    for (section, _) in EDGE_SECTIONS {
        let emptied = match entry.get_mut(section) {
            Some(Value::Object(m)) => m.shift_remove(name).is_some() && m.is_empty(),
            _ => false,
        };
        if emptied {
            entry.shift_remove(section);
        }
    }
}

/// Collect edges from the three declaration sections. A name listed both as a
/// prod and optional dependency is treated as optional; peer only applies if
/// no other section mentions the name.
fn declared_edges(
    entry: &Map<String, Value>,
    owner: &str,
) -> Result<IndexMap<String, DeclaredDep>, ModelError> {
    let mut out: IndexMap<String, DeclaredDep> = IndexMap::new();
    for (section, kind) in EDGE_SECTIONS {
        let map = json::string_map(entry, section).map_err(|e| match e {
            ModelError::InvalidField { field, expected } => ModelError::InvalidField {
                field: format!("packages[{owner:?}].{field}"),
                expected,
            },
            other => other,
        })?;
        for (name, range) in map {
            match out.get_mut(&name) {
                None => {
                    out.insert(name, DeclaredDep { range, kind });
                }
                Some(existing) => {
                    if kind == EdgeKind::Optional {
                        existing.kind = EdgeKind::Optional;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Deserialize)]
struct PackagesAudit {
    #[serde(default)]
    packages: Option<KeyAudit>,
}

/// Parsed `package-lock.json`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lockfile {
    pub lockfile_version: u64,
    pub root_name: String,
    /// The `packages` map without the root (`""`) entry, in input order.
    pub instances: IndexMap<InstallPath, DependencyInstance>,
    root_entry: Map<String, Value>,
    doc: Map<String, Value>,
}

impl Lockfile {
    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let doc = json::parse_object(text)?;
        let version = match doc.get("lockfileVersion") {
            Some(v) => v.as_u64().ok_or_else(|| {
                ModelError::UnsupportedLockfileVersion(format!("lockfileVersion {v}"))
            })?,
            None => {
                return Err(ModelError::UnsupportedLockfileVersion(
                    "missing lockfileVersion".into(),
                ))
            }
        };
        if !(2..=3).contains(&version) {
            return Err(ModelError::UnsupportedLockfileVersion(format!(
                "lockfileVersion {version}"
            )));
        }
        let packages = match doc.get("packages") {
            Some(Value::Object(p)) => p.clone(),
            _ => {
                return Err(ModelError::UnsupportedLockfileVersion(
                    "missing `packages` map".into(),
                ))
            }
        };
        let audit: PackagesAudit = serde_json::from_str(text).map_err(json::audit_error)?;
        json::check_duplicates("packages", &audit.packages)?;

        let root_entry = match packages.get("") {
            Some(Value::Object(r)) => r.clone(),
            None => Map::new(),
            Some(_) => {
                return Err(ModelError::InvalidField {
                    field: "packages[\"\"]".into(),
                    expected: "an object",
                })
            }
        };
        let root_name = root_entry
            .get("name")
            .or_else(|| doc.get("name"))
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string();
        let root_declared = declared_edges(&root_entry, "")?;
        let root_dev = json::string_map(&root_entry, "devDependencies")?;

        let mut instances = IndexMap::with_capacity(packages.len());
        for (key, value) in packages {
            if key.is_empty() {
                continue;
            }
            let path = InstallPath::parse(&key)?;
            let entry = match value {
                Value::Object(e) => e,
                _ => {
                    return Err(ModelError::InvalidField {
                        field: format!("packages[{key:?}]"),
                        expected: "an object",
                    })
                }
            };
            let inst = DependencyInstance::from_entry(path.clone(), entry, &root_declared, &root_dev)?;
            instances.insert(path, inst);
        }

        Ok(Lockfile {
            lockfile_version: version,
            root_name,
            instances,
            root_entry,
            doc,
        })
    }

    /// The root (`""`) entry of the `packages` map.
    pub fn root_entry(&self) -> &Map<String, Value> {
        &self.root_entry
    }

    /// Runtime-side declarations of the root package
    /// (`dependencies`, `optionalDependencies`, `peerDependencies`).
    pub fn root_declared(&self) -> IndexMap<String, DeclaredDep> {
        declared_edges(&self.root_entry, "").unwrap_or_default()
    }

    pub fn root_dev_declared(&self) -> IndexMap<String, String> {
        json::string_map(&self.root_entry, "devDependencies").unwrap_or_default()
    }

    pub fn get(&self, path: &str) -> Option<&DependencyInstance> {
        self.instances.get(path)
    }

    pub(crate) fn get_mut(&mut self, path: &str) -> Option<&mut DependencyInstance> {
        self.instances.get_mut(path)
    }

    pub(crate) fn remove_instance(&mut self, path: &str) -> Option<DependencyInstance> {
        self.instances.shift_remove(path)
    }

    /// Remove `name` from the root entry's runtime declaration sections.
    pub(crate) fn remove_root_declared(&mut self, name: &str) {
        remove_from_sections(&mut self.root_entry, name);
        for inst in self.instances.values_mut() {
            if inst.install_path.depth() == 1 && inst.name == name {
                inst.is_direct = self
                    .root_entry
                    .get("devDependencies")
                    .and_then(Value::as_object)
                    .is_some_and(|m| m.contains_key(name));
            }
        }
    }

    pub(crate) fn remove_root_dev_declared(&mut self, name: &str) {
        let emptied = match self.root_entry.get_mut("devDependencies") {
            Some(Value::Object(m)) => m.shift_remove(name).is_some() && m.is_empty(),
            _ => false,
        };
        if emptied {
            self.root_entry.shift_remove("devDependencies");
        }
    }

    /// Whether the v2 dual-format legacy `dependencies` tree is present.
    pub fn has_legacy_tree(&self) -> bool {
        self.doc.contains_key("dependencies")
    }

    pub(crate) fn drop_legacy_tree(&mut self) -> bool {
        self.doc.shift_remove("dependencies").is_some()
    }

    pub fn to_value(&self) -> Value {
        let mut packages = Map::with_capacity(self.instances.len() + 1);
        packages.insert(String::new(), Value::Object(self.root_entry.clone()));
        for (path, inst) in &self.instances {
            packages.insert(path.as_str().to_string(), Value::Object(inst.entry.clone()));
        }
        let mut doc = self.doc.clone();
        if let Some(slot) = doc.get_mut("packages") {
            *slot = Value::Object(packages);
        }
        Value::Object(doc)
    }

    pub fn serialize(&self) -> String {
        json::write_pretty(&self.to_value())
    }
}

use std::borrow::Borrow;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::ModelError;

pub(crate) const NODE_MODULES: &str = "node_modules";

/// Location of one installed dependency, relative to the package root.
///
/// Always of the shape `node_modules/<pkg>(/node_modules/<pkg>)*`, where
/// `<pkg>` is either a plain name or `@scope/name`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct InstallPath(String);

impl InstallPath {
    pub fn parse(raw: &str) -> Result<Self, ModelError> {
        let bad = |reason: &str| ModelError::BadInstallPath {
            path: raw.to_string(),
            reason: reason.to_string(),
        };
        if raw.is_empty() {
            return Err(bad("empty path"));
        }
        let parts: Vec<&str> = raw.split('/').collect();
        let mut i = 0;
        while i < parts.len() {
            if parts[i] != NODE_MODULES {
                return Err(bad("expected a node_modules segment"));
            }
            i += 1;
            let first = *parts.get(i).ok_or_else(|| bad("node_modules is the final component"))?;
            check_component(first).map_err(&bad)?;
            if first.starts_with('@') {
                i += 1;
                let second = *parts.get(i).ok_or_else(|| bad("scope without package name"))?;
                check_component(second).map_err(&bad)?;
            }
            i += 1;
        }
        Ok(InstallPath(raw.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Package name installed here (`@scope/name` for scoped packages).
    pub fn name(&self) -> &str {
        name_after_last_node_modules(&self.0)
    }

    /// Number of node_modules segments; root-level instances have depth 1.
    pub fn depth(&self) -> usize {
        self.0.split('/').filter(|c| *c == NODE_MODULES).count()
    }

    /// Install path of the package whose node_modules folder holds this one.
    pub fn parent(&self) -> Option<InstallPath> {
        self.0
            .rfind("/node_modules/")
            .map(|idx| InstallPath(self.0[..idx].to_string()))
    }

    /// Directories probed when a package at this path resolves a bare name:
    /// this package first, then each enclosing package, then the root (`""`).
    pub fn lookup_dirs(&self) -> impl Iterator<Item = &str> {
        let s = self.0.as_str();
        let mut next = Some(s);
        std::iter::from_fn(move || {
            let cur = next?;
            next = if cur.is_empty() {
                None
            } else {
                Some(cur.rfind("/node_modules/").map_or("", |idx| &cur[..idx]))
            };
            Some(cur)
        })
    }
}

fn check_component(c: &str) -> Result<(), &'static str> {
    match c {
        "" => Err("empty path component"),
        "." | ".." => Err("relative path component"),
        NODE_MODULES => Err("node_modules used as a package name"),
        _ => Ok(()),
    }
}

/// Candidate install path for `name` inside the node_modules folder of `dir`
/// (`""` denotes the package root).
pub(crate) fn candidate(dir: &str, name: &str) -> String {
    if dir.is_empty() {
        format!("{NODE_MODULES}/{name}")
    } else {
        format!("{dir}/{NODE_MODULES}/{name}")
    }
}

fn name_after_last_node_modules(path: &str) -> &str {
    match path.rfind("node_modules/") {
        Some(idx) => &path[idx + "node_modules/".len()..],
        None => path,
    }
}

/// Derive the package name from a (valid) install path.
pub fn map_path_to_name(install_path: &str) -> Result<String, ModelError> {
    InstallPath::parse(install_path).map(|p| p.name().to_string())
}

impl fmt::Display for InstallPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Borrow<str> for InstallPath {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl AsRef<str> for InstallPath {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for InstallPath {
    type Error = ModelError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        InstallPath::parse(&value)
    }
}

impl From<InstallPath> for String {
    fn from(p: InstallPath) -> String {
        p.0
    }
}

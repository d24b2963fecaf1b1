//! Node-style resolution over the installed-instance tree.

use std::collections::{BTreeSet, VecDeque};

use super::lockfile::{DependencyInstance, Lockfile, Scope};
use super::path::{candidate, InstallPath};
use super::ModelError;

/// Resolve `name` as requested by the package at `from` (`None` is the root),
/// against an arbitrary membership test. The first hit wins.
pub fn resolve_with(
    from: Option<&InstallPath>,
    name: &str,
    present: impl Fn(&str) -> bool,
) -> Option<String> {
    match from {
        Some(p) => p
            .lookup_dirs()
            .map(|dir| candidate(dir, name))
            .find(|c| present(c)),
        None => Some(candidate("", name)).filter(|c| present(c)),
    }
}

impl Lockfile {
    pub fn resolve(&self, from: Option<&InstallPath>, name: &str) -> Option<&DependencyInstance> {
        resolve_with(from, name, |c| self.instances.contains_key(c))
            .and_then(|p| self.instances.get(p.as_str()))
    }

    pub fn runtime_instances(&self) -> BTreeSet<InstallPath> {
        self.instances_with_scope(Scope::Runtime)
    }

    pub fn dev_instances(&self) -> BTreeSet<InstallPath> {
        self.instances_with_scope(Scope::Dev)
    }

    fn instances_with_scope(&self, scope: Scope) -> BTreeSet<InstallPath> {
        self.instances
            .values()
            .filter(|i| i.scope == scope)
            .map(|i| i.install_path.clone())
            .collect()
    }

    /// Runtime instances reachable from the root's runtime declarations
    /// minus `excluded_direct`, following declared edges with the resolution
    /// walk. Dev instances are never entered.
    pub fn reachable_instances(
        &self,
        excluded_direct: &BTreeSet<String>,
    ) -> Result<BTreeSet<InstallPath>, ModelError> {
        let mut seen: BTreeSet<InstallPath> = BTreeSet::new();
        let mut queue: VecDeque<&DependencyInstance> = VecDeque::new();

        for (name, dep) in self.root_declared() {
            if excluded_direct.contains(&name) {
                continue;
            }
            match self.resolve(None, &name) {
                Some(inst) => queue.push_back(inst),
                None if dep.kind.is_required() => {
                    return Err(ModelError::UnresolvableDependency {
                        from: "<root>".into(),
                        name,
                    })
                }
                None => {}
            }
        }

        while let Some(inst) = queue.pop_front() {
            if inst.scope == Scope::Dev || seen.contains(&inst.install_path) {
                continue;
            }
            seen.insert(inst.install_path.clone());
            for (name, dep) in &inst.declared_deps {
                match self.resolve(Some(&inst.install_path), name) {
                    Some(target) => {
                        if !seen.contains(&target.install_path) {
                            queue.push_back(target);
                        }
                    }
                    None if dep.kind.is_required() => {
                        return Err(ModelError::UnresolvableDependency {
                            from: inst.install_path.to_string(),
                            name: name.clone(),
                        })
                    }
                    None => {}
                }
            }
        }
        Ok(seen)
    }

    /// Every instance (runtime or dev) reachable from any root declaration,
    /// with `excluded_direct` dropped from the root's runtime sections only.
    /// This is what a package manager keeps after pruning.
    pub fn reachable_from_all_roots(
        &self,
        excluded_direct: &BTreeSet<String>,
    ) -> Result<BTreeSet<InstallPath>, ModelError> {
        let mut roots: Vec<(String, bool)> = self
            .root_declared()
            .into_iter()
            .filter(|(n, _)| !excluded_direct.contains(n))
            .map(|(n, d)| (n, d.kind.is_required()))
            .collect();
        roots.extend(self.root_dev_declared().into_keys().map(|n| (n, true)));

        let mut seen: BTreeSet<InstallPath> = BTreeSet::new();
        let mut queue: VecDeque<&DependencyInstance> = VecDeque::new();
        for (name, required) in roots {
            match self.resolve(None, &name) {
                Some(inst) => queue.push_back(inst),
                None if required => {
                    return Err(ModelError::UnresolvableDependency {
                        from: "<root>".into(),
                        name,
                    })
                }
                None => {}
            }
        }
        while let Some(inst) = queue.pop_front() {
            if !seen.insert(inst.install_path.clone()) {
                continue;
            }
            for (name, dep) in &inst.declared_deps {
                match self.resolve(Some(&inst.install_path), name) {
                    Some(target) => queue.push_back(target),
                    None if dep.kind.is_required() => {
                        return Err(ModelError::UnresolvableDependency {
                            from: inst.install_path.to_string(),
                            name: name.clone(),
                        })
                    }
                    None => {}
                }
            }
        }
        Ok(seen)
    }

    /// Runtime instances not reachable from the root at all.
    pub fn orphans(&self) -> Result<BTreeSet<InstallPath>, ModelError> {
        let reachable = self.reachable_instances(&BTreeSet::new())?;
        Ok(self
            .runtime_instances()
            .into_iter()
            .filter(|p| !reachable.contains(p))
            .collect())
    }

    /// Another runtime instance with the same name that `path` would fall back
    /// to if it were absent: the first hit when resolving its name from the
    /// package that contains it, skipping `path` itself.
    pub fn shadowing_instance(&self, path: &InstallPath) -> Option<&DependencyInstance> {
        let parent = path.parent()?;
        let name = path.name();
        let found = parent
            .lookup_dirs()
            .skip(1)
            .map(|dir| candidate(dir, name))
            .filter_map(|c| self.instances.get(c.as_str()))
            .find(|i| i.scope == Scope::Runtime);
        found
    }
}

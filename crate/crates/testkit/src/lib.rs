//! Test-only helpers: random npm lockfile generation and brute-force oracles.
//!
//! Nothing in here depends on `depprune-core`. The oracles re-derive every
//! answer from the generator's own bookkeeping so the implementation can be
//! checked against something that does not share its code path.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::{json, Map, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    Prod,
    Optional,
    Peer,
}

#[derive(Debug, Clone)]
pub struct GenInstance {
    pub path: String,
    pub name: String,
    pub dev: bool,
    pub edges: Vec<(String, EdgeKind)>,
}

/// A generated lockfile together with the facts used to build it.
#[derive(Debug, Clone)]
pub struct GenLock {
    pub lockfile: String,
    pub manifest: String,
    pub instances: BTreeMap<String, GenInstance>,
    pub root_deps: Vec<String>,
    pub root_dev_deps: Vec<String>,
}

impl GenLock {
    pub fn runtime_paths(&self) -> BTreeSet<String> {
        self.instances
            .values()
            .filter(|i| !i.dev)
            .map(|i| i.path.clone())
            .collect()
    }

    pub fn direct_runtime_names(&self) -> Vec<String> {
        self.root_deps.clone()
    }

    /// Node-style lookup: probe `<dir>/node_modules/<name>` for the requesting
    /// directory and each enclosing package directory, then the root.
    pub fn lookup(&self, from: &str, name: &str) -> Option<String> {
        lookup_in(|p| self.instances.contains_key(p), from, name)
    }
}

/// Resolution walk over an arbitrary set of present paths.
pub fn lookup_in(present: impl Fn(&str) -> bool, from: &str, name: &str) -> Option<String> {
    let mut dir = from.to_string();
    loop {
        let candidate = if dir.is_empty() {
            format!("node_modules/{name}")
        } else {
            format!("{dir}/node_modules/{name}")
        };
        if present(&candidate) {
            return Some(candidate);
        }
        if dir.is_empty() {
            return None;
        }
        dir = match dir.rfind("/node_modules/") {
            Some(idx) => dir[..idx].to_string(),
            None => String::new(),
        };
    }
}

/// Brute-force breadth-first reachability over runtime instances.
pub fn oracle_reachable(gen: &GenLock, excluded: &HashSet<String>) -> BTreeSet<String> {
    let mut seen = BTreeSet::new();
    let mut queue = VecDeque::new();
    for name in &gen.root_deps {
        if excluded.contains(name) {
            continue;
        }
        if let Some(p) = gen.lookup("", name) {
            queue.push_back(p);
        }
    }
    while let Some(p) = queue.pop_front() {
        let inst = &gen.instances[&p];
        if inst.dev || !seen.insert(p.clone()) {
            continue;
        }
        for (dep, _) in &inst.edges {
            if let Some(target) = gen.lookup(&p, dep) {
                if !seen.contains(&target) {
                    queue.push_back(target);
                }
            }
        }
    }
    seen
}

fn pool(rng: &mut impl Rng) -> Vec<String> {
    let size = rng.gen_range(6..40);
    (0..size)
        .map(|i| {
            if rng.gen_bool(0.2) {
                format!("@scope{}/pkg-{i}", i % 3)
            } else {
                format!("pkg-{i}")
            }
        })
        .collect()
}

fn depth_of(path: &str) -> usize {
    path.split('/').filter(|c| *c == "node_modules").count()
}

/// Generate a random, internally consistent v3 lockfile plus manifest.
///
/// Every prod edge resolves. Nested instances are always required by their
/// parent directory's package so they are reachable whenever the parent is.
pub fn random_lockfile(rng: &mut impl Rng, max_instances: usize, max_depth: usize) -> GenLock {
    let names = pool(rng);
    let target = rng.gen_range(1..=max_instances.max(1));
    let mut paths: Vec<String> = Vec::new();
    let mut present: HashSet<String> = HashSet::new();

    let root_level = rng.gen_range(1..=names.len().min(target));
    let mut shuffled = names.clone();
    shuffled.shuffle(rng);
    for n in shuffled.iter().take(root_level) {
        let p = format!("node_modules/{n}");
        present.insert(p.clone());
        paths.push(p);
    }
    let mut attempts = 0;
    while paths.len() < target && attempts < target * 20 {
        attempts += 1;
        let parent = paths.choose(rng).unwrap().clone();
        if depth_of(&parent) >= max_depth {
            continue;
        }
        let n = names.choose(rng).unwrap();
        let p = format!("{parent}/node_modules/{n}");
        if present.contains(&p) {
            continue;
        }
        present.insert(p.clone());
        paths.push(p);
    }

    let mut instances: BTreeMap<String, GenInstance> = BTreeMap::new();
    for p in &paths {
        let name = name_of(p);
        instances.insert(
            p.clone(),
            GenInstance {
                path: p.clone(),
                name,
                dev: false,
                edges: Vec::new(),
            },
        );
    }

    // Parent edges for nested instances.
    for p in &paths {
        if let Some(idx) = p.rfind("/node_modules/") {
            let parent = &p[..idx];
            let name = name_of(p);
            let inst = instances.get_mut(parent).unwrap();
            if !inst.edges.iter().any(|(n, _)| *n == name) {
                inst.edges.push((name, EdgeKind::Prod));
            }
        }
    }

    // Extra random edges to names that resolve from each instance.
    let lookup = |from: &str, name: &str| lookup_in(|q| present.contains(q), from, name);
    for p in &paths {
        let own = name_of(p);
        let extra = rng.gen_range(0..4);
        for _ in 0..extra {
            let n = names.choose(rng).unwrap().clone();
            if n == own {
                continue;
            }
            let inst = &instances[p];
            if inst.edges.iter().any(|(e, _)| *e == n) {
                continue;
            }
            let kind = match rng.gen_range(0..10) {
                0 => EdgeKind::Optional,
                1 => EdgeKind::Peer,
                _ => EdgeKind::Prod,
            };
            if lookup(p, &n).is_some() {
                instances.get_mut(p).unwrap().edges.push((n, kind));
            } else if kind != EdgeKind::Prod {
                // Absent optional or peer edges must be tolerated.
                instances.get_mut(p).unwrap().edges.push((n, kind));
            }
        }
        if rng.gen_bool(0.05) {
            let kind = if rng.gen_bool(0.5) {
                EdgeKind::Optional
            } else {
                EdgeKind::Peer
            };
            instances
                .get_mut(p)
                .unwrap()
                .edges
                .push((format!("ghost-{}", rng.gen_range(0..5)), kind));
        }
    }

    // Root declarations partition the root-level names.
    let mut root_level_names: Vec<String> = paths
        .iter()
        .filter(|p| depth_of(p) == 1)
        .map(|p| name_of(p))
        .collect();
    root_level_names.shuffle(rng);
    let mut root_deps = Vec::new();
    let mut root_dev_deps = Vec::new();
    for n in root_level_names {
        match rng.gen_range(0..10) {
            0..=5 => root_deps.push(n),
            6..=7 => root_dev_deps.push(n),
            _ => {}
        }
    }
    root_deps.sort();
    root_dev_deps.sort();

    // Scope: runtime iff reachable from runtime roots; dev if only reachable
    // from dev roots; orphans get a coin flip.
    let walk = |roots: &[String], instances: &BTreeMap<String, GenInstance>| {
        let mut seen = BTreeSet::new();
        let mut queue: VecDeque<String> = roots
            .iter()
            .filter_map(|n| lookup("", n))
            .collect();
        while let Some(p) = queue.pop_front() {
            if !seen.insert(p.clone()) {
                continue;
            }
            for (n, _) in &instances[&p].edges {
                if let Some(t) = lookup(&p, n) {
                    queue.push_back(t);
                }
            }
        }
        seen
    };
    let prod = walk(&root_deps, &instances);
    let dev = walk(&root_dev_deps, &instances);
    for (p, inst) in instances.iter_mut() {
        inst.dev = if prod.contains(p) {
            false
        } else if dev.contains(p) {
            true
        } else {
            rng.gen_bool(0.5)
        };
    }

    let mut gen = GenLock {
        lockfile: String::new(),
        manifest: String::new(),
        instances,
        root_deps,
        root_dev_deps,
    };
    gen.lockfile = render_lockfile(&gen);
    gen.manifest = render_manifest(&gen);
    gen
}

/// Name of the package installed at an install path.
pub fn name_of(path: &str) -> String {
    let idx = path.rfind("node_modules/").unwrap();
    path[idx + "node_modules/".len()..].to_string()
}

fn dep_map(names: &[String]) -> Value {
    let mut m = Map::new();
    for n in names {
        m.insert(n.clone(), json!("^1.0.0"));
    }
    Value::Object(m)
}

fn render_lockfile(gen: &GenLock) -> String {
    let mut packages = Map::new();
    let mut root = Map::new();
    root.insert("name".into(), json!("generated"));
    root.insert("version".into(), json!("1.0.0"));
    if !gen.root_deps.is_empty() {
        root.insert("dependencies".into(), dep_map(&gen.root_deps));
    }
    if !gen.root_dev_deps.is_empty() {
        root.insert("devDependencies".into(), dep_map(&gen.root_dev_deps));
    }
    packages.insert(String::new(), Value::Object(root));
    for (i, (p, inst)) in gen.instances.iter().enumerate() {
        let mut e = Map::new();
        e.insert("version".into(), json!(format!("1.{i}.0")));
        e.insert(
            "resolved".into(),
            json!(format!("https://registry.example/{}/-/{}.tgz", inst.name, i)),
        );
        e.insert("integrity".into(), json!(format!("sha512-{i:08x}")));
        if inst.dev {
            e.insert("dev".into(), json!(true));
        }
        for (key, kind) in [
            ("dependencies", EdgeKind::Prod),
            ("optionalDependencies", EdgeKind::Optional),
            ("peerDependencies", EdgeKind::Peer),
        ] {
            let names: Vec<String> = inst
                .edges
                .iter()
                .filter(|(_, k)| *k == kind)
                .map(|(n, _)| n.clone())
                .collect();
            if !names.is_empty() {
                e.insert(key.into(), dep_map(&names));
            }
        }
        e.insert("license".into(), json!("MIT"));
        packages.insert(p.clone(), Value::Object(e));
    }
    let doc = json!({
        "name": "generated",
        "version": "1.0.0",
        "lockfileVersion": 3,
        "requires": true,
        "packages": Value::Object(packages),
    });
    let mut s = serde_json::to_string_pretty(&doc).unwrap();
    s.push('\n');
    s
}

fn render_manifest(gen: &GenLock) -> String {
    let mut m = Map::new();
    m.insert("name".into(), json!("generated"));
    m.insert("version".into(), json!("1.0.0"));
    m.insert("dependencies".into(), dep_map(&gen.root_deps));
    m.insert("devDependencies".into(), dep_map(&gen.root_dev_deps));
    m.insert("license".into(), json!("MIT"));
    let mut s = serde_json::to_string_pretty(&Value::Object(m)).unwrap();
    s.push('\n');
    s
}

/// Ranks with ties averaged, computed by counting (quadratic on purpose).
pub fn naive_ranks(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|&x| {
            let below = xs.iter().filter(|&&y| y < x).count() as f64;
            let equal = xs.iter().filter(|&&y| y == x).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn naive_pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman's coefficient as Pearson correlation of naive average ranks.
pub fn naive_spearman(xs: &[f64], ys: &[f64]) -> f64 {
    naive_pearson(&naive_ranks(xs), &naive_ranks(ys))
}

/// A two-direct-dependency lockfile where one direct dependency exclusively
/// owns `owned` indirect instances. Returns (lockfile, manifest).
pub fn exclusive_subtree_fixture(kept: &str, heavy: &str, owned: usize) -> (String, String) {
    let mut packages = Map::new();
    packages.insert(
        String::new(),
        json!({
            "name": "fixture",
            "version": "1.0.0",
            "dependencies": { kept: "^1.0.0", heavy: "^1.0.0" }
        }),
    );
    packages.insert(
        format!("node_modules/{kept}"),
        json!({ "version": "1.0.0", "license": "MIT" }),
    );
    let chain: Vec<String> = (0..owned).map(|i| format!("dep-{i:04}")).collect();
    let mut heavy_deps = Map::new();
    // First level fan-out under the heavy dependency, the rest hoisted.
    for n in chain.iter().take(owned.min(10)) {
        heavy_deps.insert(n.clone(), json!("^1.0.0"));
    }
    packages.insert(
        format!("node_modules/{heavy}"),
        json!({ "version": "1.0.0", "dependencies": Value::Object(heavy_deps) }),
    );
    for (i, n) in chain.iter().enumerate() {
        let mut e = Map::new();
        e.insert("version".into(), json!("1.0.0"));
        // Each of the first ten pulls in a slice of the remainder.
        if i < 10 {
            let mut d = Map::new();
            let mut j = 10 + i;
            while j < owned {
                d.insert(chain[j].clone(), json!("^1.0.0"));
                j += 10;
            }
            if !d.is_empty() {
                e.insert("dependencies".into(), Value::Object(d));
            }
        }
        packages.insert(format!("node_modules/{n}"), Value::Object(e));
    }
    let lock = json!({
        "name": "fixture",
        "version": "1.0.0",
        "lockfileVersion": 3,
        "requires": true,
        "packages": Value::Object(packages),
    });
    let manifest = json!({
        "name": "fixture",
        "version": "1.0.0",
        "dependencies": { kept: "^1.0.0", heavy: "^1.0.0" }
    });
    (
        serde_json::to_string_pretty(&lock).unwrap() + "\n",
        serde_json::to_string_pretty(&manifest).unwrap() + "\n",
    )
}

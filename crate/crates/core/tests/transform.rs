use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};

use depprune_core::detect::detect;
use depprune_core::model::{InstallPath, Lockfile, Manifest};
use depprune_core::transform::{apply_full, plan, realize_direct, Debloated, Strategy, TransformError};
use depprune_testkit::{lookup_in, random_lockfile, GenLock};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

/// path -> declared dependency names, read straight from the JSON text.
fn edges_of(text: &str) -> BTreeMap<String, Vec<String>> {
    let v: Value = serde_json::from_str(text).unwrap();
    let mut out = BTreeMap::new();
    for (path, entry) in v["packages"].as_object().unwrap() {
        let mut names = Vec::new();
        for key in ["dependencies", "optionalDependencies", "peerDependencies"] {
            if let Some(m) = entry.get(key).and_then(Value::as_object) {
                names.extend(m.keys().cloned());
            }
        }
        out.insert(path.clone(), names);
    }
    out
}

/// Remove until the plan is consistent: a removal that would make a
/// survivor fall back to another copy marks that instance accessed.
fn closed_removal(rng: &mut ChaCha8Rng, lock: &Lockfile, manifest: &Manifest) -> (BTreeSet<InstallPath>, Debloated) {
    let mut accessed: BTreeSet<InstallPath> =
        lock.runtime_instances().into_iter().filter(|_| rng.gen_bool(0.5)).collect();
    loop {
        let report = detect(lock, &accessed).unwrap();
        let p = plan(&report, Strategy::FullScale);
        match apply_full(lock, manifest, &p, Default::default()) {
            Ok(d) => return (p.remove_instances, d),
            Err(TransformError::RemovalBreaksSurvivor { removed, .. }) => {
                accessed.insert(InstallPath::parse(&removed).unwrap());
            }
            Err(e) => panic!("{e}"),
        }
    }
}

#[test]
fn apply_full_is_sound() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xdeb1);
    let mut cleaned_refs = 0;
    for _ in 0..120 {
        let gen = random_lockfile(&mut rng, 200, 4);
        let lock = Lockfile::parse(&gen.lockfile).unwrap();
        let manifest = Manifest::parse(&gen.manifest).unwrap();
        let (removed, out) = closed_removal(&mut rng, &lock, &manifest);
        let text = out.lockfile.serialize();

        let before = edges_of(&gen.lockfile);
        let after = edges_of(&text);
        let had = |p: &str| before.contains_key(p);
        let has = |p: &str| after.contains_key(p);

        // (a) no removed path remains
        for p in &removed {
            assert!(!has(p.as_str()), "{p} survived");
        }
        // (b) every surviving declaration resolves, to the same instance as before
        for (path, names) in &after {
            for name in names {
                let pre = lookup_in(had, path, name);
                let post = lookup_in(has, path, name);
                if pre.is_none() {
                    continue; // optional or peer edge that never resolved
                }
                assert_eq!(post, pre, "{path:?} -> {name}");
            }
            cleaned_refs += before[path].len() - names.len();
        }
        let m = Manifest::parse(&out.manifest.serialize()).unwrap();
        for name in m.runtime_deps.keys() {
            assert!(lookup_in(has, "", name).is_some(), "manifest dep {name}");
        }
        // (c) idempotent
        let p = depprune_core::transform::DebloatPlan {
            strategy: Strategy::FullScale,
            remove_direct: BTreeSet::new(),
            remove_instances: removed.clone(),
        };
        let again = apply_full(&out.lockfile, &out.manifest, &p, Default::default()).unwrap();
        assert_eq!(again.lockfile.serialize(), text);
        assert_eq!(again.manifest.serialize(), out.manifest.serialize());
        // (d) round-trips through parse
        let reparsed = Lockfile::parse(&text).unwrap();
        assert_eq!(reparsed.serialize(), text);
        assert_eq!(reparsed.instances.keys().collect::<Vec<_>>(), out.lockfile.instances.keys().collect::<Vec<_>>());
    }
    assert!(cleaned_refs > 0, "no dangling reference was ever cleaned");
}

#[test]
fn survivors_are_byte_preserved() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..40 {
        let gen = random_lockfile(&mut rng, 120, 4);
        let lock = Lockfile::parse(&gen.lockfile).unwrap();
        let manifest = Manifest::parse(&gen.manifest).unwrap();
        let (_, out) = closed_removal(&mut rng, &lock, &manifest);
        let orig: Value = serde_json::from_str(&gen.lockfile).unwrap();
        let new: Value = serde_json::from_str(&out.lockfile.serialize()).unwrap();
        for (path, entry) in new["packages"].as_object().unwrap() {
            if path.is_empty() {
                continue;
            }
            let mut a = orig["packages"][path].clone();
            let mut b = entry.clone();
            for key in ["dependencies", "optionalDependencies", "peerDependencies"] {
                a.as_object_mut().unwrap().remove(key);
                b.as_object_mut().unwrap().remove(key);
            }
            assert_eq!(a, b, "{path}");
        }
    }
}

/// Instances reachable from every root declaration (runtime and dev).
fn oracle_all_roots(gen: &GenLock, excluded: &HashSet<String>) -> BTreeSet<String> {
    let mut seen = BTreeSet::new();
    let mut queue: VecDeque<String> = gen
        .root_deps
        .iter()
        .filter(|n| !excluded.contains(*n))
        .chain(&gen.root_dev_deps)
        .filter_map(|n| gen.lookup("", n))
        .collect();
    while let Some(p) = queue.pop_front() {
        if !seen.insert(p.clone()) {
            continue;
        }
        for (dep, _) in &gen.instances[&p].edges {
            if let Some(t) = gen.lookup(&p, dep) {
                queue.push_back(t);
            }
        }
    }
    seen
}

#[test]
fn direct_only_realization_matches_prune_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5150);
    for _ in 0..100 {
        let gen = random_lockfile(&mut rng, 150, 4);
        let lock = Lockfile::parse(&gen.lockfile).unwrap();
        let manifest = Manifest::parse(&gen.manifest).unwrap();
        let accessed: BTreeSet<InstallPath> =
            lock.runtime_instances().into_iter().filter(|_| rng.gen_bool(0.5)).collect();
        let report = detect(&lock, &accessed).unwrap();
        let mut p = plan(&report, Strategy::DirectOnly);
        for dropped in p.restrict_to_manifest(&manifest) {
            assert!(manifest.dev_deps.contains_key(&dropped));
        }
        let out = realize_direct(&lock, &manifest, &p).unwrap();

        let excl: HashSet<String> = p.remove_direct.iter().cloned().collect();
        let expected: BTreeSet<String> = oracle_all_roots(&gen, &HashSet::new())
            .difference(&oracle_all_roots(&gen, &excl))
            .cloned()
            .collect();
        let got: BTreeSet<String> = out.removed.iter().map(|p| p.to_string()).collect();
        assert_eq!(got, expected);
        for name in &p.remove_direct {
            assert!(!out.manifest.runtime_deps.contains_key(name));
        }
        // Whatever direct-only removes, full-scale would also remove unless a
        // dev root still needs it.
        assert!(out.removed.iter().all(|r| report.unaccessed.contains(r) || report.accessed.contains(r)));
    }
}

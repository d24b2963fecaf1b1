use std::collections::{BTreeSet, HashSet};

use depprune_core::detect::detect;
use depprune_core::model::{InstallPath, Lockfile, Scope};
use depprune_testkit::{oracle_reachable, random_lockfile, GenLock};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn strings(set: &BTreeSet<InstallPath>) -> BTreeSet<String> {
    set.iter().map(|p| p.to_string()).collect()
}

fn random_exclusion(rng: &mut ChaCha8Rng, gen: &GenLock) -> HashSet<String> {
    gen.root_deps.iter().filter(|_| rng.gen_bool(0.3)).cloned().collect()
}

#[test]
fn reachable_instances_match_bfs_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut scoped = 0;
    let mut deep = 0;
    for _ in 0..150 {
        let gen = random_lockfile(&mut rng, 200, 4);
        let lock = Lockfile::parse(&gen.lockfile).unwrap();
        scoped += gen.instances.keys().any(|p| p.contains("/@")) as usize;
        deep += gen.instances.keys().any(|p| p.matches("node_modules").count() >= 3) as usize;
        for _ in 0..3 {
            let excl = random_exclusion(&mut rng, &gen);
            let ours = lock
                .reachable_instances(&excl.iter().cloned().collect())
                .unwrap();
            assert_eq!(strings(&ours), oracle_reachable(&gen, &excl), "{}", gen.lockfile);
        }
    }
    assert!(scoped > 10, "generator produced too few scoped names");
    assert!(deep > 10, "generator produced too few nested instances");
}

#[test]
fn runtime_scope_matches_generator() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let gen = random_lockfile(&mut rng, 120, 4);
        let lock = Lockfile::parse(&gen.lockfile).unwrap();
        assert_eq!(strings(&lock.runtime_instances()), gen.runtime_paths());
    }
}

#[test]
fn detection_identities_hold() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let gen = random_lockfile(&mut rng, 150, 4);
        let lock = Lockfile::parse(&gen.lockfile).unwrap();
        let all: Vec<InstallPath> = lock.instances.keys().cloned().collect();
        let accessed: BTreeSet<InstallPath> = all.iter().filter(|_| rng.gen_bool(0.4)).cloned().collect();
        let r = detect(&lock, &accessed).unwrap();

        let runtime = lock.runtime_instances();
        // Partition of the runtime instances.
        assert!(r.accessed.is_disjoint(&r.unaccessed));
        assert_eq!(r.accessed.union(&r.unaccessed).cloned().collect::<BTreeSet<_>>(), runtime);
        assert_eq!(r.total_runtime, runtime.len());
        assert_eq!(r.direct_bloated.len() + r.indirect_bloated.len(), r.unaccessed.len());
        assert!(r.direct_bloated.len() <= r.direct_count);
        // The cascade is runtime and indirect.
        for p in &r.cascade_from_direct {
            assert!(runtime.contains(p));
            assert!(!lock.get(p.as_str()).unwrap().is_direct);
        }
        // Dev instances never show up.
        let dev = lock.dev_instances();
        for set in [&r.accessed, &r.unaccessed, &r.indirect_bloated, &r.cascade_from_direct, &r.orphans] {
            assert!(set.is_disjoint(&dev));
        }
        let expected = if r.total_runtime == 0 { 0.0 } else { r.unaccessed.len() as f64 / r.total_runtime as f64 };
        assert!((r.r_d - expected).abs() < 1e-12);
        assert!(r.unaccessed.iter().all(|p| lock.get(p.as_str()).unwrap().scope == Scope::Runtime));
    }
}

#[test]
fn more_accesses_never_add_bloat() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..60 {
        let gen = random_lockfile(&mut rng, 120, 4);
        let lock = Lockfile::parse(&gen.lockfile).unwrap();
        let mut order: Vec<InstallPath> = lock.runtime_instances().into_iter().collect();
        order.shuffle(&mut rng);
        let mut accessed = BTreeSet::new();
        let mut prev = detect(&lock, &accessed).unwrap();
        for p in order {
            accessed.insert(p);
            let next = detect(&lock, &accessed).unwrap();
            assert!(next.unaccessed.is_subset(&prev.unaccessed));
            assert!(next.direct_bloated.is_subset(&prev.direct_bloated));
            assert!(next.cascade_from_direct.is_subset(&prev.cascade_from_direct));
            assert!(next.r_d <= prev.r_d);
            prev = next;
        }
        assert!(prev.unaccessed.is_empty());
    }
}

use depprune_core::report::{render_percent, spearman, ReportError};
use depprune_core::trace::parse_trace_line;
use depprune_core::tracer::strace_escape;
use depprune_testkit::naive_spearman;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn perfect_correlations() {
    let xs: Vec<f64> = (1..=8).map(f64::from).collect();
    let up: Vec<f64> = xs.iter().map(|x| x * x).collect();
    let down: Vec<f64> = xs.iter().map(|x| -x.powi(3)).collect();
    assert_eq!(spearman(&xs, &up).unwrap(), (1.0, 0.0));
    assert_eq!(spearman(&xs, &down).unwrap(), (-1.0, 0.0));
}

#[test]
fn twenty_point_sample_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for _ in 0..50 {
        // Small integer ranges force ties.
        let xs: Vec<f64> = (0..20).map(|_| f64::from(rng.gen_range(0..12))).collect();
        let ys: Vec<f64> = (0..20).map(|_| f64::from(rng.gen_range(0..1000)) / 7.0).collect();
        let (rs, p) = spearman(&xs, &ys).unwrap();
        assert!((rs - naive_spearman(&xs, &ys)).abs() < 1e-9);
        assert!((0.0..=1.0).contains(&p));
    }
}

#[test]
fn invariant_under_monotone_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xs: Vec<f64> = (0..20).map(|_| rng.gen_range(0.0..100.0)).collect();
    let ys: Vec<f64> = (0..20).map(|_| rng.gen_range(0.0..100.0)).collect();
    let base = spearman(&xs, &ys).unwrap();
    let mapped: Vec<f64> = xs.iter().map(|x| (x + 1.0).ln() * 3.0 + 5.0).collect();
    let again = spearman(&mapped, &ys).unwrap();
    assert!((base.0 - again.0).abs() < 1e-12);
    assert!((base.1 - again.1).abs() < 1e-12);
}

#[test]
fn degenerate_inputs() {
    assert!(matches!(spearman(&[1.0, 2.0], &[1.0, 2.0]), Err(ReportError::TooFewPoints(2))));
    assert!(matches!(spearman(&[1.0, 2.0, 3.0], &[1.0]), Err(ReportError::LengthMismatch { .. })));
    assert!(matches!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(ReportError::ConstantSeries)));
}

/// Half-up rounding to hundredths of a percent via exact rationals.
fn percent_oracle(removed: u64, total: u64) -> String {
    let num = removed as u128 * 10_000;
    let den = total as u128;
    let mut h = num / den;
    if (num % den) * 2 >= den {
        h += 1;
    }
    let s = format!("{}.{:02}", h / 100, h % 100);
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

proptest! {
    #[test]
    fn percent_matches_rational_oracle(total in 1u64..5_000_000, frac in 0.0f64..=1.0) {
        let removed = ((total as f64) * frac).floor() as u64;
        prop_assert_eq!(render_percent(removed as usize, total as usize), percent_oracle(removed, total));
    }

    #[test]
    fn escaped_paths_parse_back(path in "[^\u{0}]{1,60}") {
        let line = format!("77  openat(AT_FDCWD, \"{}\", O_RDONLY) = 3", strace_escape(path.as_bytes()));
        let ev = parse_trace_line(&line).expect("parses");
        prop_assert_eq!(ev.pid, 77);
        prop_assert_eq!(ev.path, path);
    }
}

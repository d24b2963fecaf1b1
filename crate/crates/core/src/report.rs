//! Human and machine renderings of bloat reports, plus corpus statistics.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::detect::{compute_rd, BloatReport};
use crate::transform::Strategy;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("xs has {xs} values but ys has {ys}")]
    LengthMismatch { xs: usize, ys: usize },
    #[error("need at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("rank correlation is undefined when one series is constant")]
    ConstantSeries,
    #[error("report is not valid JSON: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Text,
    Json,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(Format::Text),
            "json" => Ok(Format::Json),
            other => Err(format!("unknown format `{other}` (expected `text` or `json`)")),
        }
    }
}

/// `removed / total` as a percentage, rounded half-up to two decimals with
/// trailing zeros dropped: 680/681 → "99.85", 1470/1470 → "100".
pub fn render_percent(removed: usize, total: usize) -> String {
    if total == 0 {
        return "0".to_string();
    }
    let (r, t) = (removed as u128, total as u128);
    let hundredths = (r * 10_000 * 2 + t) / (2 * t);
    let (int, frac) = (hundredths / 100, hundredths % 100);
    match frac {
        0 => int.to_string(),
        f if f % 10 == 0 => format!("{int}.{}", f / 10),
        f => format!("{int}.{f:02}"),
    }
}

pub fn render(report: &BloatReport, format: Format) -> String {
    match format {
        Format::Json => to_json(report),
        Format::Text => to_text(report),
    }
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

pub fn parse_report(text: &str) -> Result<BloatReport, ReportError> {
    Ok(serde_json::from_str(text)?)
}

fn to_text(r: &BloatReport) -> String {
    let total = r.total_runtime;
    let direct_removed = r.direct_only_removed();
    let mut rows: Vec<(&str, String)> = vec![
        ("package", if r.package.is_empty() { "(unnamed)".into() } else { r.package.clone() }),
        ("runtime instances", total.to_string()),
        ("direct dependencies", r.direct_count.to_string()),
        ("accessed", r.accessed.len().to_string()),
        ("unaccessed", r.unaccessed.len().to_string()),
        ("direct bloated", r.direct_bloated.len().to_string()),
        ("indirect bloated", r.indirect_bloated.len().to_string()),
        ("cascade of direct", r.cascade_from_direct.len().to_string()),
        (
            "R_d full-scale",
            format!("{} / {}  {}%", r.unaccessed.len(), total, render_percent(r.unaccessed.len(), total)),
        ),
        (
            "R_d direct-only",
            format!("{} / {}  {}%", direct_removed, total, render_percent(direct_removed, total)),
        ),
    ];
    if !r.orphans.is_empty() {
        rows.push(("orphans", r.orphans.len().to_string()));
    }
    if !r.shadow_candidates.is_empty() {
        rows.push(("shadow candidates", r.shadow_candidates.len().to_string()));
    }
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (k, v) in &rows {
        let _ = writeln!(out, "{k:<width$}  {v}");
    }

    let mut list = |title: &str, items: Vec<String>| {
        if items.is_empty() {
            return;
        }
        let _ = writeln!(out, "\n{title}:");
        for i in items {
            let _ = writeln!(out, "  {i}");
        }
    };
    list("direct bloated", r.direct_bloated.iter().cloned().collect());
    list("indirect bloated", r.indirect_bloated.iter().map(|p| p.to_string()).collect());
    list("shadow candidates (kept)", r.shadow_candidates.iter().map(|p| p.to_string()).collect());
    let d = &r.diagnostics;
    list("untracked accesses", d.untracked_accesses.iter().cloned().collect());
    list("accessed only via package.json", d.manifest_only_accesses.iter().cloned().collect());
    list("warnings", d.warnings.clone());
    out
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rank correlation (average ranks for ties) and its two-tailed
/// p-value from the t approximation with n - 2 degrees of freedom.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<(f64, f64), ReportError> {
    if xs.len() != ys.len() {
        return Err(ReportError::LengthMismatch { xs: xs.len(), ys: ys.len() });
    }
    let n = xs.len();
    if n < 3 {
        return Err(ReportError::TooFewPoints(n));
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let rs = pearson(&rx, &ry);
    if !rs.is_finite() {
        return Err(ReportError::ConstantSeries);
    }
    let rs = rs.clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p = if rs.abs() > 1.0 - f64::EPSILON {
        0.0
    } else {
        let t = rs * (df / (1.0 - rs * rs)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Ok((rs, p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRow {
    pub name: String,
    pub dir: String,
    pub total_runtime: usize,
    pub direct_count: usize,
    pub direct_bloated: usize,
    pub cascade: usize,
    /// Prune_d as (removed, original).
    pub prune_d: (usize, usize),
    pub r_d: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CorpusRow {
    pub fn from_report(dir: &str, r: &BloatReport, strategy: Strategy) -> Self {
        let removed = match strategy {
            Strategy::DirectOnly => r.direct_only_removed(),
            Strategy::FullScale => r.unaccessed.len(),
        };
        CorpusRow {
            name: r.package.clone(),
            dir: dir.to_string(),
            total_runtime: r.total_runtime,
            direct_count: r.direct_count,
            direct_bloated: r.direct_bloated.len(),
            cascade: r.cascade_from_direct.len(),
            prune_d: (removed, r.total_runtime),
            r_d: compute_rd(removed, r.total_runtime).unwrap_or(0.0),
            error: None,
        }
    }

    pub fn failed(dir: &str, error: String) -> Self {
        CorpusRow {
            name: String::new(),
            dir: dir.to_string(),
            total_runtime: 0,
            direct_count: 0,
            direct_bloated: 0,
            cascade: 0,
            prune_d: (0, 0),
            r_d: 0.0,
            error: Some(error),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusAggregate {
    pub packages: usize,
    pub errors: usize,
    pub total_runtime: usize,
    pub direct_count: usize,
    pub direct_bloated: usize,
    pub cascade: usize,
    pub removed: usize,
    /// removed / total_runtime over all successful rows.
    pub r_d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub strategy: Strategy,
    /// Successful rows ranked by R_d (descending), then errors.
    pub rows: Vec<CorpusRow>,
    pub aggregate: CorpusAggregate,
    /// Correlation of bloat fraction with tree size; absent below 3 packages
    /// or when either series is constant.
    pub spearman_rs: Option<f64>,
    pub spearman_p: Option<f64>,
}

impl CorpusSummary {
    pub fn build(mut rows: Vec<CorpusRow>, strategy: Strategy) -> Self {
        rows.sort_by(|a, b| {
            a.error
                .is_some()
                .cmp(&b.error.is_some())
                .then(b.r_d.total_cmp(&a.r_d))
                .then(a.dir.cmp(&b.dir))
        });
        let ok: Vec<&CorpusRow> = rows.iter().filter(|r| r.error.is_none()).collect();
        let mut agg = CorpusAggregate {
            packages: ok.len(),
            errors: rows.len() - ok.len(),
            ..Default::default()
        };
        for r in &ok {
            agg.total_runtime += r.total_runtime;
            agg.direct_count += r.direct_count;
            agg.direct_bloated += r.direct_bloated;
            agg.cascade += r.cascade;
            agg.removed += r.prune_d.0;
        }
        agg.r_d = compute_rd(agg.removed, agg.total_runtime).unwrap_or(0.0);
        let xs: Vec<f64> = ok.iter().map(|r| r.r_d).collect();
        let ys: Vec<f64> = ok.iter().map(|r| r.total_runtime as f64).collect();
        let (spearman_rs, spearman_p) = match spearman(&xs, &ys) {
            Ok((rs, p)) => (Some(rs), Some(p)),
            Err(_) => (None, None),
        };
        CorpusSummary {
            strategy,
            rows,
            aggregate: agg,
            spearman_rs,
            spearman_p,
        }
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Json => to_json(self),
            Format::Text => self.to_text(),
        }
    }

    fn to_text(&self) -> String {
        let header = ["package", "#D", "#BD", "#BD->I", "Prune_d", "R_d (%)"];
        let mut table: Vec<[String; 6]> = Vec::new();
        for r in &self.rows {
            let name = if r.name.is_empty() { r.dir.clone() } else { r.name.clone() };
            match &r.error {
                Some(e) => table.push([name, "-".into(), "-".into(), "-".into(), "-".into(), format!("error: {e}")]),
                None => table.push([
                    name,
                    r.direct_count.to_string(),
                    r.direct_bloated.to_string(),
                    r.cascade.to_string(),
                    format!("{} / {}", r.prune_d.0, r.prune_d.1),
                    render_percent(r.prune_d.0, r.prune_d.1),
                ]),
            }
        }
        let a = &self.aggregate;
        table.push([
            "total".into(),
            a.direct_count.to_string(),
            a.direct_bloated.to_string(),
            a.cascade.to_string(),
            format!("{} / {}", a.removed, a.total_runtime),
            render_percent(a.removed, a.total_runtime),
        ]);
        let mut widths = header.map(str::len);
        for row in &table {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let line = |cells: Vec<&str>, out: &mut String| {
            let mut s = String::new();
            for (i, c) in cells.iter().enumerate() {
                if i == 0 {
                    let _ = write!(s, "{c:<w$}", w = widths[0]);
                } else {
                    let _ = write!(s, "  {c:>w$}", w = widths[i]);
                }
            }
            out.push_str(s.trim_end());
            out.push('\n');
        };
        line(header.to_vec(), &mut out);
        for row in &table {
            line(row.iter().map(String::as_str).collect(), &mut out);
        }
        match (self.spearman_rs, self.spearman_p) {
            (Some(rs), Some(p)) => {
                let _ = writeln!(out, "\nSpearman r_s (R_d vs tree size) = {rs:.5}, p = {p:.5}");
            }
            _ => out.push_str("\nSpearman r_s: not enough data\n"),
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::detect;
    use crate::model::{InstallPath, Lockfile};
    use std::collections::BTreeSet;

    #[test]
    fn percent_examples() {
        assert_eq!(render_percent(680, 681), "99.85");
        assert_eq!(render_percent(12, 22), "54.55");
        assert_eq!(render_percent(206, 828), "24.88");
        assert_eq!(render_percent(1470, 1470), "100");
        assert_eq!(render_percent(1, 8), "12.5");
        assert_eq!(render_percent(0, 5), "0");
        // Exactly half a hundredth rounds up.
        assert_eq!(render_percent(1, 16), "6.25");
        assert_eq!(render_percent(1, 32), "3.13");
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
    }

    #[test]
    fn spearman_edges() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let (rs, p) = spearman(&a, &a).unwrap();
        assert_eq!((rs, p), (1.0, 0.0));
        let (rs, _) = spearman(&a, &[4.0, 3.0, 2.0, 1.0]).unwrap();
        assert_eq!(rs, -1.0);
        assert!(matches!(spearman(&a, &a[..3]), Err(ReportError::LengthMismatch { .. })));
        assert!(matches!(spearman(&a[..2], &a[..2]), Err(ReportError::TooFewPoints(2))));
        assert!(matches!(spearman(&a, &[1.0; 4]), Err(ReportError::ConstantSeries)));
    }

    #[test]
    fn spearman_p_value_reference() {
        // scipy.stats.spearmanr([1,2,3,4,5],[2,1,4,3,5]) -> (0.8, 0.10408803866182788)
        let (rs, p) = spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 1.0, 4.0, 3.0, 5.0]).unwrap();
        assert!((rs - 0.8).abs() < 1e-12);
        assert!((p - 0.104_088_038_661_827_88).abs() < 1e-9);
    }

    #[test]
    fn empty_report_json() {
        let l = Lockfile::parse(r#"{"lockfileVersion":3,"packages":{"":{}}}"#).unwrap();
        let r = detect(&l, &BTreeSet::new()).unwrap();
        let j = render(&r, Format::Json);
        let v: serde_json::Value = serde_json::from_str(&j).unwrap();
        assert_eq!(v["unaccessed"], serde_json::json!([]));
        assert_eq!(v["total_runtime"], 0);
        assert_eq!(parse_report(&j).unwrap(), r);
        assert!(render(&r, Format::Text).contains("0 / 0  0%"));
    }

    #[test]
    fn text_shows_ratio_row() {
        let l = Lockfile::parse(
            r#"{"lockfileVersion":3,"packages":{"":{"dependencies":{"a":"1","b":"1"}},"node_modules/a":{},"node_modules/b":{}}}"#,
        )
        .unwrap();
        let acc: BTreeSet<InstallPath> = [InstallPath::parse("node_modules/a").unwrap()].into();
        let text = render(&detect(&l, &acc).unwrap(), Format::Text);
        assert!(text.lines().any(|l| l.starts_with("R_d full-scale") && l.ends_with(" 1 / 2  50%")), "{text}");
    }

    #[test]
    fn corpus_rows_rank_and_errors() {
        let mk = |dir: &str, removed: usize, total: usize| CorpusRow {
            name: dir.into(),
            dir: dir.into(),
            total_runtime: total,
            direct_count: 1,
            direct_bloated: 1,
            cascade: removed.saturating_sub(1),
            prune_d: (removed, total),
            r_d: removed as f64 / total as f64,
            error: None,
        };
        let s = CorpusSummary::build(
            vec![mk("a", 1, 4), CorpusRow::failed("bad", "boom".into()), mk("b", 3, 4)],
            Strategy::DirectOnly,
        );
        assert_eq!(s.rows.iter().map(|r| r.dir.as_str()).collect::<Vec<_>>(), ["b", "a", "bad"]);
        assert_eq!((s.aggregate.packages, s.aggregate.errors, s.aggregate.removed), (2, 1, 4));
        assert_eq!(s.spearman_rs, None);
        assert!(s.render(Format::Text).contains("error: boom"));
    }
}

//! Aggregates final snapshots per (method, dataset, k, variance) across seeds.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::Path;

use crate::config::{CellSpec, Dataset, Method};
use crate::error::{CliError, CliResult};
use crate::runner::{read_manifest, read_metrics, Status, CONFIG};

pub const COLUMNS: [&str; 10] = [
    "method",
    "dataset",
    "k",
    "variance",
    "seed_count",
    "modes",
    "hq_pct",
    "rev_kl",
    "nmi",
    "purity",
];

/// Mean and sample standard deviation (0 for a single value).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std })
    }

    fn render(stat: Option<Self>, digits: usize) -> String {
        match stat {
            Some(s) => format!("{:.*} ± {:.*}", digits, s.mean, digits, s.std),
            None => "diverged".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub method: Method,
    pub dataset: Dataset,
    pub k: usize,
    pub variance: f64,
    /// Seeds that completed; failed seeds are excluded from the statistics.
    pub seed_count: usize,
    pub failed_count: usize,
    pub modes: Option<Stat>,
    pub hq_pct: Option<Stat>,
    pub rev_kl: Option<Stat>,
    pub nmi: Option<Stat>,
    pub purity: Option<Stat>,
}

impl ReportRow {
    fn cells(&self) -> [String; 10] {
        [
            self.method.to_string(),
            self.dataset.to_string(),
            self.k.to_string(),
            self.variance.to_string(),
            self.seed_count.to_string(),
            Stat::render(self.modes, 2),
            Stat::render(self.hq_pct, 2),
            Stat::render(self.rev_kl, 4),
            Stat::render(self.nmi, 4),
            Stat::render(self.purity, 4),
        ]
    }
}

#[derive(Default)]
struct Group {
    failed: usize,
    modes: Vec<f64>,
    hq_pct: Vec<f64>,
    rev_kl: Vec<f64>,
    nmi: Vec<f64>,
    purity: Vec<f64>,
}

/// Reads every cell recorded in the manifest under `out`.
pub fn collect(out: &Path) -> CliResult<Vec<ReportRow>> {
    let manifest = read_manifest(out)?;
    // Variance is keyed by its bit pattern so equal configs group together.
    let mut groups: BTreeMap<(Method, Dataset, usize, u64), Group> = BTreeMap::new();
    for (id, entry) in &manifest {
        let dir = out.join(id);
        let path = dir.join(CONFIG);
        let text = std::fs::read_to_string(&path).map_err(CliError::io(&path))?;
        let cell: CellSpec = serde_json::from_str(&text).map_err(CliError::json(&path))?;
        let key = (cell.method, cell.dataset, cell.train.k, cell.variance.to_bits());
        let group = groups.entry(key).or_default();
        let last = match entry.status {
            Status::Complete => read_metrics(&dir)?.pop(),
            Status::Failed => None,
        };
        match last {
            Some(r) => {
                group.modes.push(r.modes_covered as f64);
                group.hq_pct.push(100.0 * r.high_quality_fraction);
                group.rev_kl.push(r.reverse_kl);
                group.nmi.push(r.nmi);
                group.purity.push(r.purity);
            }
            None => group.failed += 1,
        }
    }
    let mut rows: Vec<ReportRow> = groups
        .into_iter()
        .map(|((method, dataset, k, var_bits), g)| ReportRow {
            method,
            dataset,
            k,
            variance: f64::from_bits(var_bits),
            seed_count: g.modes.len(),
            failed_count: g.failed,
            modes: Stat::of(&g.modes),
            hq_pct: Stat::of(&g.hq_pct),
            rev_kl: Stat::of(&g.rev_kl),
            nmi: Stat::of(&g.nmi),
            purity: Stat::of(&g.purity),
        })
        .collect();
    // Bit order and numeric order differ for floats; sort numerically.
    rows.sort_by(|a, b| {
        (a.method, a.dataset, a.k)
            .cmp(&(b.method, b.dataset, b.k))
            .then(a.variance.total_cmp(&b.variance))
    });
    if rows.is_empty() {
        return Err(CliError::NoData(out.to_path_buf()));
    }
    Ok(rows)
}

pub fn to_csv(rows: &[ReportRow]) -> String {
    let mut s = COLUMNS.join(",");
    s.push('\n');
    for row in rows {
        s.push_str(&row.cells().join(","));
        s.push('\n');
    }
    s
}

/// Fixed-width text table.
pub fn to_text(rows: &[ReportRow]) -> String {
    let cells: Vec<[String; 10]> = rows.iter().map(ReportRow::cells).collect();
    let mut widths: Vec<usize> = COLUMNS.iter().map(|c| c.chars().count()).collect();
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut s = String::new();
    let line = |s: &mut String, items: &mut dyn Iterator<Item = &str>| {
        let parts: Vec<String> = items
            .zip(&widths)
            .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        let _ = writeln!(s, "{}", parts.join("  ").trim_end());
    };
    line(&mut s, &mut COLUMNS.iter().copied());
    for row in &cells {
        line(&mut s, &mut row.iter().map(String::as_str));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stat_mean_and_sample_std() {
        let s = Stat::of(&[24.0, 25.0, 25.0]).unwrap();
        assert!((s.mean - 74.0 / 3.0).abs() < 1e-12);
        assert!((s.std - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(Stat::of(&[3.0]).unwrap().std, 0.0);
        assert!(Stat::of(&[]).is_none());
    }

    #[test]
    fn failed_group_renders_diverged() {
        let row = ReportRow {
            method: Method::Selfcond,
            dataset: Dataset::Grid,
            k: 100,
            variance: 0.0025,
            seed_count: 0,
            failed_count: 2,
            modes: None,
            hq_pct: None,
            rev_kl: None,
            nmi: None,
            purity: None,
        };
        let csv = to_csv(&[row]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "method,dataset,k,variance,seed_count,modes,hq_pct,rev_kl,nmi,purity");
        assert_eq!(lines[1], "selfcond,grid,100,0.0025,0,diverged,diverged,diverged,diverged,diverged");
    }
}

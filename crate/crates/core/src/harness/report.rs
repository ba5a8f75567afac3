use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const HISTOGRAM_BIN_WIDTH: usize = 16;

/// One generation of one image under one method and policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub seed: u64,
    pub image_id: usize,
    pub method: String,
    pub policy: String,
    pub length: usize,
    pub eos_emitted: bool,
    pub linf: f64,
    pub l2: f64,
    pub flops: u64,
    pub proxy_energy: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub policy: String,
    pub count: usize,
    pub mean_length: f64,
    /// Population standard deviation.
    pub std_length: f64,
    pub mean_proxy_energy: f64,
    pub mean_wall_seconds: f64,
    pub mean_linf: f64,
    pub mean_l2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub method: String,
    pub policy: String,
    /// Inclusive bounds.
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    /// Informational checks never affect the exit status.
    pub gating: bool,
    /// Depends on wall-clock measurements, so it is left out of summaries.
    pub timing: bool,
}

impl Check {
    pub fn gate(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
            gating: true,
            timing: false,
        }
    }

    pub fn info(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            gating: false,
            ..Self::gate(name, passed, detail)
        }
    }

    pub fn timed(self) -> Self {
        Self { timing: true, ..self }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub command: String,
    pub label: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub aggregates: Vec<Aggregate>,
    pub rows: Vec<ImageRow>,
    pub histogram: Vec<HistogramBin>,
    pub checks: Vec<Check>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryAggregate {
    pub method: String,
    pub policy: String,
    pub count: usize,
    pub mean_length: f64,
    pub std_length: f64,
    pub mean_proxy_energy: f64,
    pub mean_linf: f64,
    pub mean_l2: f64,
}

/// The wall-clock-free part of a report; identical inputs give identical
/// bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub command: String,
    pub label: String,
    pub version: String,
    pub seeds: Vec<u64>,
    pub lengths: Vec<(String, String, Vec<usize>)>,
    pub aggregates: Vec<SummaryAggregate>,
    pub checks: Vec<Check>,
    pub config: ExperimentConfig,
}

/// Groups rows by `(method, policy)` in order of first appearance.
fn groups(rows: &[ImageRow]) -> Vec<((String, String), Vec<&ImageRow>)> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut map: HashMap<(String, String), Vec<&ImageRow>> = HashMap::new();
    for r in rows {
        let key = (r.method.clone(), r.policy.clone());
        map.entry(key.clone())
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(r);
    }
    order
        .into_iter()
        .map(|k| {
            let v = map.remove(&k).unwrap_or_default();
            (k, v)
        })
        .collect()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn aggregate_rows(rows: &[ImageRow]) -> Vec<Aggregate> {
    groups(rows)
        .into_iter()
        .map(|((method, policy), g)| {
            let m = mean(g.iter().map(|r| r.length as f64));
            let var = mean(g.iter().map(|r| (r.length as f64 - m).powi(2)));
            Aggregate {
                method,
                policy,
                count: g.len(),
                mean_length: m,
                std_length: var.sqrt(),
                mean_proxy_energy: mean(g.iter().map(|r| r.proxy_energy)),
                mean_wall_seconds: mean(g.iter().map(|r| r.wall_seconds)),
                mean_linf: mean(g.iter().map(|r| r.linf)),
                mean_l2: mean(g.iter().map(|r| r.l2)),
            }
        })
        .collect()
}

/// Bins of width [`HISTOGRAM_BIN_WIDTH`]: `1..=16`, `17..=32`, …, up to the
/// longest length in the rows.
pub fn histogram(rows: &[ImageRow]) -> Vec<HistogramBin> {
    let w = HISTOGRAM_BIN_WIDTH;
    let max = rows.iter().map(|r| r.length).max().unwrap_or(0);
    let bins = max.div_ceil(w).max(1);
    let mut out = Vec::new();
    for ((method, policy), g) in groups(rows) {
        let mut counts = vec![0usize; bins];
        for r in g {
            counts[r.length.saturating_sub(1) / w] += 1;
        }
        for (i, count) in counts.into_iter().enumerate() {
            out.push(HistogramBin {
                method: method.clone(),
                policy: policy.clone(),
                lo: i * w + 1,
                hi: (i + 1) * w,
                count,
            });
        }
    }
    out
}

pub fn write_rows_csv(rows: &[ImageRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rows_csv(path: &Path) -> Result<Vec<ImageRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

pub(crate) fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

impl Report {
    pub fn new(command: &str, label: &str, config: &ExperimentConfig, rows: Vec<ImageRow>) -> Self {
        Self {
            command: command.into(),
            label: label.into(),
            version: VERSION.into(),
            config: config.clone(),
            aggregates: aggregate_rows(&rows),
            histogram: histogram(&rows),
            rows,
            checks: Vec::new(),
        }
    }

    pub fn aggregate(&self, method: &str, policy: &str) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.method == method && a.policy == policy)
    }

    pub fn mean_length(&self, method: &str, policy: &str) -> Option<f64> {
        self.aggregate(method, policy).map(|a| a.mean_length)
    }

    /// True when every gating check passed.
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed || !c.gating)
    }

    pub fn summary(&self) -> Summary {
        let mut seeds: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        Summary {
            command: self.command.clone(),
            label: self.label.clone(),
            version: self.version.clone(),
            seeds,
            lengths: groups(&self.rows)
                .into_iter()
                .map(|((m, p), g)| (m, p, g.iter().map(|r| r.length).collect()))
                .collect(),
            aggregates: self
                .aggregates
                .iter()
                .map(|a| SummaryAggregate {
                    method: a.method.clone(),
                    policy: a.policy.clone(),
                    count: a.count,
                    mean_length: a.mean_length,
                    std_length: a.std_length,
                    mean_proxy_energy: a.mean_proxy_energy,
                    mean_linf: a.mean_linf,
                    mean_l2: a.mean_l2,
                })
                .collect(),
            checks: self.checks.iter().filter(|c| !c.timing).cloned().collect(),
            config: self.config.clone(),
        }
    }

    /// One line per aggregate, for terminals.
    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        for a in &self.aggregates {
            let _ = writeln!(
                s,
                "{:<10} {:<14} n={:<4} length {:>7.2} ± {:>6.2}  energy {:.3e} J  linf {:.4}",
                a.method, a.policy, a.count, a.mean_length, a.std_length, a.mean_proxy_energy, a.mean_linf
            );
        }
        s
    }

    pub fn histogram_text(&self) -> String {
        let mut s = String::from("# method policy lo hi count\n");
        for b in &self.histogram {
            let _ = writeln!(s, "{} {} {} {} {}", b.method, b.policy, b.lo, b.hi, b.count);
        }
        s
    }

    /// Writes `report.json`, `summary.json`, `rows.csv`, `histogram.txt` and
    /// `config.toml` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        write_json(self, &dir.join("report.json"))?;
        write_json(&self.summary(), &dir.join("summary.json"))?;
        write_rows_csv(&self.rows, &dir.join("rows.csv"))?;
        let hist = dir.join("histogram.txt");
        std::fs::write(&hist, self.histogram_text()).map_err(|e| Error::io(&hist, e))?;
        let cfg = dir.join("config.toml");
        std::fs::write(&cfg, self.config.to_toml()).map_err(|e| Error::io(&cfg, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, length: usize, wall: f64) -> ImageRow {
        ImageRow {
            seed: 0,
            image_id: length,
            method: method.into(),
            policy: "greedy".into(),
            length,
            eos_emitted: true,
            linf: 0.0,
            l2: 0.0,
            flops: length as u64,
            proxy_energy: length as f64 * 1e-9,
            wall_seconds: wall,
        }
    }

    #[test]
    fn aggregates_and_histogram() {
        let rows = vec![row("a", 4, 0.1), row("b", 20, 0.2), row("a", 8, 0.3), row("a", 17, 0.0)];
        let r = Report::new("t", "", &ExperimentConfig::default(), rows);
        assert_eq!(r.aggregates.len(), 2);
        let a = r.aggregate("a", "greedy").unwrap();
        assert_eq!(a.count, 3);
        assert!((a.mean_length - 29.0 / 3.0).abs() < 1e-12);
        let var = [4.0f64, 8.0, 17.0].iter().map(|x| (x - 29.0 / 3.0).powi(2)).sum::<f64>() / 3.0;
        assert!((a.std_length - var.sqrt()).abs() < 1e-12);
        let bins: Vec<(usize, usize)> = r
            .histogram
            .iter()
            .filter(|b| b.method == "a")
            .map(|b| (b.lo, b.count))
            .collect();
        assert_eq!(bins, vec![(1, 2), (17, 1)]);
        assert!(r.histogram_text().contains("b greedy 17 32 1"));
    }

    #[test]
    fn summary_ignores_wall_clock() {
        let cfg = ExperimentConfig::default();
        let a = Report::new("t", "", &cfg, vec![row("a", 4, 0.1)]);
        let b = Report::new("t", "", &cfg, vec![row("a", 4, 0.7)]);
        assert_ne!(a, b);
        assert_eq!(
            serde_json::to_string(&a.summary()).unwrap(),
            serde_json::to_string(&b.summary()).unwrap()
        );
    }

    #[test]
    fn gating_only_counts_gates() {
        let mut r = Report::new("t", "", &ExperimentConfig::default(), vec![]);
        r.checks.push(Check::info("x", false, ""));
        assert!(r.passed());
        r.checks.push(Check::gate("y", false, ""));
        assert!(!r.passed());
    }

    #[test]
    fn rows_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![row("a", 4, 0.125), row("b", 9, 1.5)];
        let p = dir.path().join("rows.csv");
        write_rows_csv(&rows, &p).unwrap();
        assert_eq!(read_rows_csv(&p).unwrap(), rows);
    }
}

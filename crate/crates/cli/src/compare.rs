//! Metric-by-metric comparison of two finished runs.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use mvsde_core::particle::csv_float;
use serde::Deserialize;

use crate::error::{CliError, Result};

/// Files compared row by row; everything else is compared by hash only.
const COMPARED: [&str; 3] = ["distances.csv", "coupling.csv", "rate.csv"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Absolute band for every row; overrides the noise-floor bands.
    pub absolute: Option<f64>,
    /// Band for distances, in multiples of the larger of the two noise floors.
    pub floor_multiple: f64,
    /// Relative band for fitted `c`, `λ` and `R²`.
    pub rate_relative: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { absolute: None, floor_multiple: 3.0, rate_relative: 0.25 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    /// Within tolerance.
    Green,
    /// Outside tolerance.
    Red,
    /// Present in only one run.
    Unmatched,
    /// Files compared by hash that differ.
    Changed,
}

impl Status {
    fn as_str(self) -> &'static str {
        match self {
            Status::Green => "green",
            Status::Red => "red",
            Status::Unmatched => "unmatched",
            Status::Changed => "changed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffRow {
    pub file: String,
    pub key: String,
    pub a: f64,
    pub b: f64,
    pub tolerance: f64,
    pub status: Status,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CompareReport {
    /// Only rows that differ; identical runs give an empty report.
    pub rows: Vec<DiffRow>,
}

impl CompareReport {
    pub fn red(&self) -> usize {
        self.rows.iter().filter(|r| r.status == Status::Red).count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("file,key,a,b,difference,tolerance,status\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.file,
                r.key,
                csv_float(r.a),
                csv_float(r.b),
                csv_float(r.b - r.a),
                csv_float(r.tolerance),
                r.status.as_str()
            ));
        }
        s
    }
}

#[derive(Debug, Deserialize)]
struct ManifestFiles {
    files: BTreeMap<String, String>,
}

fn read_manifest(path: &Path) -> Result<(PathBuf, BTreeMap<String, String>)> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let m: ManifestFiles = serde_json::from_str(&text)
        .map_err(|e| CliError::Invalid(format!("{}: not a run manifest ({e})", path.display())))?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((dir, m.files))
}

type Table = BTreeMap<String, f64>;

fn parse_float(s: &str) -> f64 {
    s.trim().parse().unwrap_or(f64::NAN)
}

/// `time,statistic,value` → `statistic@time`; `rate.csv` → `metric/column`.
fn read_table(path: &Path, name: &str) -> Result<Table> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let mut t = Table::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if name == "rate.csv" {
            for col in ["c", "lambda", "r_squared", "noise_floor"] {
                if let Some(k) = header.iter().position(|h| *h == col) {
                    t.insert(format!("{}/{col}", f[0]), parse_float(f[k]));
                }
            }
        } else if f.len() >= 3 {
            t.insert(format!("{}@{}", f[1], f[0]), parse_float(f[2]));
        }
    }
    Ok(t)
}

fn floors(rate: &Table) -> BTreeMap<String, f64> {
    rate.iter().filter_map(|(k, v)| k.strip_suffix("/noise_floor").map(|m| (m.to_string(), *v))).collect()
}

fn same(a: f64, b: f64) -> bool {
    a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan())
}

/// Compares two runs given their manifest paths.
pub fn compare_runs(manifest_a: &Path, manifest_b: &Path, tol: Tolerances) -> Result<CompareReport> {
    let (dir_a, files_a) = read_manifest(manifest_a)?;
    let (dir_b, files_b) = read_manifest(manifest_b)?;
    let load = |dir: &Path, files: &BTreeMap<String, String>, name: &str| -> Result<Option<Table>> {
        if files.contains_key(name) {
            read_table(&dir.join(name), name).map(Some)
        } else {
            Ok(None)
        }
    };
    let rate_a = load(&dir_a, &files_a, "rate.csv")?.unwrap_or_default();
    let rate_b = load(&dir_b, &files_b, "rate.csv")?.unwrap_or_default();
    let (floor_a, floor_b) = (floors(&rate_a), floors(&rate_b));

    let mut report = CompareReport::default();
    let names: BTreeSet<&String> = files_a.keys().chain(files_b.keys()).collect();
    for name in names {
        let (ha, hb) = (files_a.get(name), files_b.get(name));
        if ha == hb {
            continue;
        }
        if !COMPARED.contains(&name.as_str()) || ha.is_none() || hb.is_none() {
            let status = if ha.is_some() && hb.is_some() { Status::Changed } else { Status::Unmatched };
            report.rows.push(DiffRow {
                file: name.clone(),
                key: "*".into(),
                a: f64::NAN,
                b: f64::NAN,
                tolerance: 0.0,
                status,
            });
            continue;
        }
        let ta = load(&dir_a, &files_a, name)?.unwrap_or_default();
        let tb = load(&dir_b, &files_b, name)?.unwrap_or_default();
        let keys: BTreeSet<&String> = ta.keys().chain(tb.keys()).collect();
        for key in keys {
            let (a, b) = (ta.get(key).copied(), tb.get(key).copied());
            let (Some(a), Some(b)) = (a, b) else {
                report.rows.push(DiffRow {
                    file: name.clone(),
                    key: key.clone(),
                    a: a.unwrap_or(f64::NAN),
                    b: b.unwrap_or(f64::NAN),
                    tolerance: 0.0,
                    status: Status::Unmatched,
                });
                continue;
            };
            if same(a, b) {
                continue;
            }
            let tolerance = tol.absolute.unwrap_or_else(|| match name.as_str() {
                "distances.csv" => {
                    let metric = key.split('@').next().unwrap_or_default();
                    let f =
                        floor_a.get(metric).copied().unwrap_or(0.0).max(floor_b.get(metric).copied().unwrap_or(0.0));
                    tol.floor_multiple * f
                }
                // a floor is itself one sampled distance, so it gets the distance band
                "rate.csv" if key.ends_with("/noise_floor") => tol.floor_multiple * a.max(b),
                "rate.csv" => tol.rate_relative * a.abs().max(b.abs()),
                _ => 0.0,
            });
            let status = if (b - a).abs() <= tolerance { Status::Green } else { Status::Red };
            report.rows.push(DiffRow { file: name.clone(), key: key.clone(), a, b, tolerance, status });
        }
    }
    Ok(report)
}

use std::collections::BTreeMap;
use std::fs;
use std::path::{Component, Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::sample_std;
use crate::error::{CoopError, Result};
use crate::evaluation::{mean, EvalReport};
use crate::model::{Checkpoint, Digest};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const AGGREGATE_FILE: &str = "aggregate.json";

/// Record of one suite invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub name: String,
    pub suite: String,
    /// The full config in its text form.
    pub config: String,
    pub seeds: Vec<u64>,
    /// Artifact key → checkpoint digest.
    pub digests: BTreeMap<String, String>,
    /// Report files, relative to the run directory.
    pub reports: Vec<String>,
    /// Every other file written, relative to the run directory.
    pub files: Vec<String>,
    pub timings_ms: BTreeMap<String, u64>,
    pub errors: Vec<String>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        read_json(&dir.join(MANIFEST_FILE))
    }
}

/// One metric across seeds, traceable to its report field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub report: String,
    pub field: String,
    pub values: BTreeMap<String, f64>,
    pub mean: f64,
    /// Sample standard deviation; zero for a single seed.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub format_version: u32,
    pub seeds: Vec<u64>,
    pub metrics: BTreeMap<String, MetricSummary>,
}

pub const AGGREGATED_FIELDS: [&str; 3] = ["ew_loss", "vs_base_pct", "vs_best_specialist_pct"];

pub fn report_field(report: &EvalReport, field: &str) -> Option<f64> {
    match field {
        "ew_loss" => Some(report.ew_loss),
        "vs_base_pct" => Some(report.vs_base_pct),
        "vs_best_specialist_pct" => Some(report.vs_best_specialist_pct),
        "base_ew_loss" => Some(report.base_ew_loss),
        _ => None,
    }
}

/// Mean and sample std of each report field over the seeds that produced
/// that report label.
pub fn aggregate(reports: &BTreeMap<u64, Vec<EvalReport>>) -> Aggregate {
    let mut metrics = BTreeMap::new();
    let mut labels: Vec<&str> = reports.values().flatten().map(|r| r.label.as_str()).collect();
    labels.sort_unstable();
    labels.dedup();
    for label in labels {
        for field in AGGREGATED_FIELDS {
            let values: BTreeMap<String, f64> = reports
                .iter()
                .filter_map(|(seed, rs)| {
                    let r = rs.iter().find(|r| r.label == label)?;
                    Some((seed.to_string(), report_field(r, field)?))
                })
                .collect();
            let v: Vec<f64> = values.values().copied().collect();
            metrics.insert(
                format!("{label}.{field}"),
                MetricSummary {
                    report: label.to_string(),
                    field: field.to_string(),
                    mean: mean(v.iter().copied()),
                    std: sample_std(&v),
                    values,
                },
            );
        }
    }
    Aggregate { format_version: FORMAT_VERSION, seeds: reports.keys().copied().collect(), metrics }
}

pub fn seed_dir(seed: u64) -> String {
    format!("seed_{seed}")
}

pub fn report_path(seed: u64, label: &str) -> String {
    format!("{}/reports/{label}.json", seed_dir(seed))
}

/// Forward-slash form with `.` segments removed; `..` and absolute paths
/// are rejected.
pub fn normalize_relative(path: &str) -> Option<String> {
    let unified = path.replace('\\', "/");
    let mut parts = Vec::new();
    for c in Path::new(&unified).components() {
        match c {
            Component::Normal(s) => parts.push(s.to_str()?.to_string()),
            Component::CurDir => {}
            _ => return None,
        }
    }
    (!parts.is_empty()).then(|| parts.join("/"))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CoopError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CoopError::json(path, e))
}

/// Writes every artifact of a run beneath one directory and keeps the
/// manifest in step.
pub struct ResultsWriter {
    root: PathBuf,
    manifest: RunManifest,
    started: Instant,
}

impl ResultsWriter {
    pub fn create(root: &Path, name: &str, suite: &str, config_text: String, seeds: &[u64]) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| CoopError::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest: RunManifest {
                format_version: FORMAT_VERSION,
                name: name.to_string(),
                suite: suite.to_string(),
                config: config_text,
                seeds: seeds.to_vec(),
                digests: BTreeMap::new(),
                reports: Vec::new(),
                files: Vec::new(),
                timings_ms: BTreeMap::new(),
                errors: Vec::new(),
            },
            started: Instant::now(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn resolve(&self, rel: &str) -> Result<(String, PathBuf)> {
        let norm = normalize_relative(rel)
            .ok_or_else(|| CoopError::InvalidInput(format!("`{rel}` escapes the output directory")))?;
        let path = self.root.join(&norm);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CoopError::io(parent, e))?;
        }
        Ok((norm, path))
    }

    pub fn write_text(&mut self, rel: &str, contents: &str) -> Result<PathBuf> {
        let (norm, path) = self.resolve(rel)?;
        fs::write(&path, contents).map_err(|e| CoopError::io(&path, e))?;
        if !self.manifest.files.contains(&norm) {
            self.manifest.files.push(norm);
        }
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf> {
        let text = serde_json::to_string_pretty(value).map_err(|e| CoopError::json(rel, e))?;
        self.write_text(rel, &text)
    }

    pub fn write_report(&mut self, seed: u64, report: &EvalReport) -> Result<PathBuf> {
        let (norm, path) = self.resolve(&report_path(seed, &report.label))?;
        fs::write(&path, report.to_json()).map_err(|e| CoopError::io(&path, e))?;
        if !self.manifest.reports.contains(&norm) {
            self.manifest.reports.push(norm);
        }
        Ok(path)
    }

    pub fn write_checkpoint(&mut self, rel: &str, key: &str, ckpt: &Checkpoint) -> Result<PathBuf> {
        let (norm, path) = self.resolve(rel)?;
        ckpt.save(&path)?;
        self.manifest.files.push(norm);
        self.record_digest(key, ckpt.digest());
        Ok(path)
    }

    pub fn record_digest(&mut self, key: &str, digest: Digest) {
        self.manifest.digests.insert(key.to_string(), digest.to_hex());
    }

    pub fn record_timing(&mut self, key: &str, since: Instant) {
        self.manifest.timings_ms.insert(key.to_string(), since.elapsed().as_millis() as u64);
    }

    pub fn record_error(&mut self, context: &str, err: &CoopError) {
        self.manifest.errors.push(format!("{context}: {err}"));
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    /// Writes `manifest.json` after checking that every listed file exists.
    pub fn finish(mut self) -> Result<RunManifest> {
        self.manifest.timings_ms.insert("total".into(), self.started.elapsed().as_millis() as u64);
        for rel in self.manifest.reports.iter().chain(&self.manifest.files) {
            if !self.root.join(rel).is_file() {
                return Err(CoopError::InvalidInput(format!("manifest references missing file `{rel}`")));
            }
        }
        let path = self.root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| CoopError::json(&path, e))?;
        fs::write(&path, text).map_err(|e| CoopError::io(&path, e))?;
        Ok(self.manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_unifies_separators_and_rejects_escapes() {
        assert_eq!(normalize_relative("seed_1\\reports\\a.json").as_deref(), Some("seed_1/reports/a.json"));
        assert_eq!(normalize_relative("./seed_1//x").as_deref(), Some("seed_1/x"));
        assert_eq!(normalize_relative("../x"), None);
        assert_eq!(normalize_relative("/etc/passwd"), None);
        assert_eq!(normalize_relative(""), None);
    }

    #[test]
    fn aggregate_uses_sample_std() {
        let mk = |ew: f64| EvalReport::new("fused", [("a".to_string(), ew)].into(), 2.0, 1.5, "00").unwrap();
        let reports: BTreeMap<u64, Vec<EvalReport>> = [(1, vec![mk(1.0)]), (2, vec![mk(1.2)])].into();
        let agg = aggregate(&reports);
        let m = &agg.metrics["fused.ew_loss"];
        assert!((m.mean - 1.1).abs() < 1e-12);
        assert!((m.std - 0.02f64.sqrt()).abs() < 1e-12);
        assert_eq!(m.values.len(), 2);
    }
}

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::sample_std;
use crate::evaluation::{improvement, EvalReport};
use crate::harness::results::{
    normalize_relative, read_json, report_field, seed_dir, Aggregate, RunManifest, AGGREGATE_FILE, MANIFEST_FILE,
};

/// Stored percentages must be recomputable to this many points.
const PCT_TOLERANCE: f64 = 0.005;
const LOSS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AuditCheck {
    /// A results file could be read and parsed.
    Readable,
    AggregateMatchesSeeds,
    BaseLossConsistent,
    ImprovementRecomputable,
    SeedsPresent,
    EwIsDomainMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditIssue {
    pub check: AuditCheck,
    pub file: String,
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub checks_run: usize,
    pub checks_passed: usize,
    pub issues: Vec<AuditIssue>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.issues.is_empty() && self.checks_run == self.checks_passed
    }

    fn check(&mut self, ok: bool, check: AuditCheck, file: &str, field: &str, message: impl FnOnce() -> String) {
        self.checks_run += 1;
        if ok {
            self.checks_passed += 1;
        } else {
            self.issues.push(AuditIssue { check, file: file.to_string(), field: field.to_string(), message: message() });
        }
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn collect_files(dir: &Path, root: &Path, out: &mut Vec<String>, report: &mut AuditReport) {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) => {
            let rel = rel_name(dir, root);
            report.check(false, AuditCheck::Readable, &rel, "", || e.to_string());
            return;
        }
    };
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for p in paths {
        if p.is_dir() {
            collect_files(&p, root, out, report);
        } else {
            out.push(rel_name(&p, root));
        }
    }
}

fn rel_name(path: &Path, root: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    normalize_relative(&rel.to_string_lossy()).unwrap_or_else(|| rel.to_string_lossy().replace('\\', "/"))
}

fn is_report(rel: &str) -> bool {
    let parts: Vec<&str> = rel.split('/').collect();
    parts.len() >= 2 && parts[parts.len() - 2] == "reports" && rel.ends_with(".json")
}

fn parent_of(rel: &str) -> &str {
    rel.rsplit_once('/').map(|(p, _)| p).unwrap_or("")
}

fn join(dir: &str, rel: &str) -> String {
    if dir.is_empty() {
        rel.to_string()
    } else {
        format!("{dir}/{rel}")
    }
}

/// Integrity checks over every report, manifest and aggregate found below
/// `dir`. Problems reading files are reported as issues.
pub fn audit_results(dir: &Path) -> AuditReport {
    let mut report = AuditReport::default();
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files, &mut report);

    let mut reports: BTreeMap<String, EvalReport> = BTreeMap::new();
    for rel in files.iter().filter(|f| is_report(f)) {
        let parsed = fs::read_to_string(dir.join(rel))
            .map_err(|e| e.to_string())
            .and_then(|t| EvalReport::from_json(&t).map_err(|e| e.to_string()));
        match parsed {
            Ok(r) => {
                report.check(true, AuditCheck::Readable, rel, "", String::new);
                reports.insert(rel.clone(), r);
            }
            Err(e) => report.check(false, AuditCheck::Readable, rel, "", || e),
        }
    }

    for (rel, r) in &reports {
        // (5) equal-weight aggregate.
        let mean = r.per_domain_loss.values().sum::<f64>() / r.per_domain_loss.len().max(1) as f64;
        report.check(
            !r.per_domain_loss.is_empty() && close(r.ew_loss, mean, LOSS_TOLERANCE),
            AuditCheck::EwIsDomainMean,
            rel,
            "ew_loss",
            || format!("ew_loss {} but per-domain mean {mean}", r.ew_loss),
        );
        // (3) improvement percentages.
        for (field, baseline, stored) in [
            ("vs_base_pct", r.base_ew_loss, r.vs_base_pct),
            ("vs_best_specialist_pct", r.best_specialist_ew_loss, r.vs_best_specialist_pct),
        ] {
            let recomputed = improvement(baseline, r.ew_loss).unwrap_or(f64::NAN);
            report.check(close(recomputed, stored, PCT_TOLERANCE), AuditCheck::ImprovementRecomputable, rel, field, || {
                format!("stored {stored}, recomputed {recomputed}")
            });
        }
    }

    // (2) one base loss per base digest.
    let mut by_base: BTreeMap<&str, Vec<(&str, f64)>> = BTreeMap::new();
    for (rel, r) in &reports {
        by_base.entry(r.base_digest.as_str()).or_default().push((rel.as_str(), r.base_ew_loss));
        if r.label == "base" {
            by_base.entry(r.base_digest.as_str()).or_default().push((rel.as_str(), r.ew_loss));
        }
    }
    for (digest, entries) in &by_base {
        let first = entries[0].1;
        for (rel, v) in entries {
            report.check(v.to_bits() == first.to_bits(), AuditCheck::BaseLossConsistent, rel, "base_ew_loss", || {
                format!("base {digest} has loss {v} here but {first} in {}", entries[0].0)
            });
        }
    }

    for manifest_rel in files.iter().filter(|f| f.rsplit('/').next() == Some(MANIFEST_FILE)) {
        audit_run(dir, parent_of(manifest_rel), manifest_rel, &files, &reports, &mut report);
    }
    report
}

fn audit_run(
    dir: &Path,
    run: &str,
    manifest_rel: &str,
    files: &[String],
    reports: &BTreeMap<String, EvalReport>,
    report: &mut AuditReport,
) {
    let manifest: RunManifest = match read_json(&dir.join(manifest_rel)) {
        Ok(m) => {
            report.check(true, AuditCheck::Readable, manifest_rel, "", String::new);
            m
        }
        Err(e) => return report.check(false, AuditCheck::Readable, manifest_rel, "", || e.to_string()),
    };
    // (4) declared seeds and referenced files.
    for seed in &manifest.seeds {
        let prefix = join(run, &format!("{}/", seed_dir(*seed)));
        let present = manifest.suite != "core" || files.iter().any(|f| f.starts_with(&prefix));
        report.check(present, AuditCheck::SeedsPresent, manifest_rel, &format!("seeds.{seed}"), || {
            format!("no results for seed {seed}")
        });
    }
    for (i, rel) in manifest.reports.iter().chain(&manifest.files).enumerate() {
        let found = normalize_relative(rel).map(|n| files.contains(&join(run, &n))).unwrap_or(false);
        report.check(found, AuditCheck::SeedsPresent, manifest_rel, &format!("files[{i}]"), || {
            format!("referenced file `{rel}` is missing")
        });
    }

    // (1) aggregate against per-seed reports.
    let agg_rel = join(run, AGGREGATE_FILE);
    if !files.contains(&agg_rel) {
        return;
    }
    let agg: Aggregate = match read_json(&dir.join(&agg_rel)) {
        Ok(a) => a,
        Err(e) => return report.check(false, AuditCheck::Readable, &agg_rel, "", || e.to_string()),
    };
    for (name, m) in &agg.metrics {
        let field = format!("metrics.{name}");
        for (seed, v) in &m.values {
            let src = join(run, &format!("seed_{seed}/reports/{}.json", m.report));
            let stored = reports.get(&src).and_then(|r| report_field(r, &m.field));
            report.check(stored.map(|s| close(s, *v, LOSS_TOLERANCE)) == Some(true), AuditCheck::AggregateMatchesSeeds, &agg_rel, &format!("{field}.values.{seed}"), || match stored {
                Some(s) => format!("aggregate has {v}, {src} has {s}"),
                None => format!("{src} missing or lacks `{}`", m.field),
            });
        }
        let v: Vec<f64> = m.values.values().copied().collect();
        let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
        report.check(close(mean, m.mean, LOSS_TOLERANCE), AuditCheck::AggregateMatchesSeeds, &agg_rel, &format!("{field}.mean"), || {
            format!("stored mean {}, recomputed {mean}", m.mean)
        });
        let std = sample_std(&v);
        report.check(close(std, m.std, LOSS_TOLERANCE), AuditCheck::AggregateMatchesSeeds, &agg_rel, &format!("{field}.std"), || {
            format!("stored std {}, recomputed {std}", m.std)
        });
    }
    let mut declared: Vec<u64> = manifest.seeds.clone();
    declared.sort_unstable();
    let mut covered = agg.seeds.clone();
    covered.sort_unstable();
    report.check(covered == declared, AuditCheck::SeedsPresent, &agg_rel, "seeds", || {
        format!("aggregate covers seeds {:?}, manifest declares {declared:?}", agg.seeds)
    });
}

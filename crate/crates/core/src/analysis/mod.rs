//! Divergence, the divergence→gain regression, conversion rates and the
//! results audit.

mod audit;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

pub use audit::{audit_results, AuditCheck, AuditIssue, AuditReport};

use crate::error::{CoopError, Result};
use crate::evaluation::improvement;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceRecord {
    pub domain: String,
    pub base_loss: f64,
    pub specialist_loss: f64,
    pub divergence_pct: f64,
}

impl DivergenceRecord {
    pub fn new(domain: impl Into<String>, base_loss: f64, specialist_loss: f64) -> Result<Self> {
        Ok(Self { domain: domain.into(), base_loss, specialist_loss, divergence_pct: divergence(base_loss, specialist_loss)? })
    }
}

/// A specialist's own-domain improvement over the base, in percent.
pub fn divergence(base_loss: f64, specialist_loss: f64) -> Result<f64> {
    improvement(base_loss, specialist_loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub slope_stderr: f64,
    pub slope_ci_low: f64,
    pub slope_ci_high: f64,
    pub n: usize,
}

impl RegressionFit {
    /// Divergence at which the fitted gain crosses zero.
    pub fn floor(&self) -> f64 {
        -self.intercept / self.slope
    }
}

/// Two-sided 97.5% Student-t quantile at `dof` degrees of freedom.
pub fn t_quantile_975(dof: usize) -> f64 {
    StudentsT::new(0.0, 1.0, dof as f64).expect("positive dof").inverse_cdf(0.975)
}

/// Ordinary least squares of gain on divergence with a 95% slope interval.
pub fn fit_divergence_gain(points: &[(f64, f64)]) -> Result<RegressionFit> {
    let n = points.len();
    if n < 3 {
        return Err(CoopError::InvalidInput(format!("regression needs at least 3 points, got {n}")));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(CoopError::InvalidInput("non-finite regression point".into()));
    }
    let nf = n as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx <= f64::EPSILON * nf * mx.abs().max(1.0).powi(2) {
        return Err(CoopError::InvalidInput("divergences have no variance; slope is undefined".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = points.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let r_squared = if syy == 0.0 { 1.0 } else { (1.0 - sse / syy).clamp(0.0, 1.0) };
    let slope_stderr = (sse / (nf - 2.0) / sxx).sqrt();
    let half = t_quantile_975(n - 2) * slope_stderr;
    Ok(RegressionFit {
        slope,
        intercept,
        r_squared,
        slope_stderr,
        slope_ci_low: slope - half,
        slope_ci_high: slope + half,
        n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainPrediction {
    pub divergence_pct: f64,
    pub gain_pct: f64,
    /// `actual − predicted`, when an observed gain is supplied.
    pub residual: Option<f64>,
}

pub fn predict_gain(fit: &RegressionFit, divergence_pct: f64, actual: Option<f64>) -> GainPrediction {
    let gain_pct = fit.intercept + fit.slope * divergence_pct;
    GainPrediction { divergence_pct, gain_pct, residual: actual.map(|a| a - gain_pct) }
}

/// Fusion gain per point of mean divergence.
pub fn conversion_rate(gain_pct: f64, mean_divergence_pct: f64) -> Result<f64> {
    if !(mean_divergence_pct > 0.0) {
        return Err(CoopError::InvalidInput(format!("mean divergence must be positive, got {mean_divergence_pct}")));
    }
    Ok(gain_pct / mean_divergence_pct)
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(CoopError::InvalidInput(format!("pearson needs ≥ 3 paired values, got {} and {}", xs.len(), ys.len())));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(CoopError::InvalidInput("pearson is undefined for a constant series".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Sample standard deviation (n − 1 denominator); zero below two values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = values.iter().sum::<f64>() / values.len() as f64;
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

/// Correlation between log base perplexity and conversion rate.
pub fn correlate_base_competence(conditions: &[(f64, f64)]) -> Result<f64> {
    if conditions.iter().any(|(ppl, _)| !(*ppl > 0.0)) {
        return Err(CoopError::InvalidInput("perplexities must be positive".into()));
    }
    let xs: Vec<f64> = conditions.iter().map(|c| c.0.ln()).collect();
    let ys: Vec<f64> = conditions.iter().map(|c| c.1).collect();
    pearson(&xs, &ys)
}

/// Parses `divergence_pct,gain_pct` rows; a non-numeric first row is taken as
/// a header.
pub fn parse_points_csv(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut points = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CoopError::Parse { line: i + 1, message: e.to_string() })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(i + 1);
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        if rec.len() != 2 {
            return Err(CoopError::Parse { line, message: format!("expected 2 columns, found {}", rec.len()) });
        }
        let parsed = (rec[0].parse::<f64>(), rec[1].parse::<f64>());
        match parsed {
            (Ok(x), Ok(y)) if x.is_finite() && y.is_finite() => points.push((x, y)),
            _ if i == 0 => continue,
            _ => return Err(CoopError::Parse { line, message: format!("`{},{}` is not a numeric pair", &rec[0], &rec[1]) }),
        }
    }
    Ok(points)
}

/// Fit, per-point predictions and residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub fit: RegressionFit,
    pub divergence_floor_pct: f64,
    pub points: Vec<GainPrediction>,
}

pub fn regression_report(points: &[(f64, f64)]) -> Result<RegressionReport> {
    let fit = fit_divergence_gain(points)?;
    let preds = points.iter().map(|&(x, y)| predict_gain(&fit, x, Some(y))).collect();
    Ok(RegressionReport { divergence_floor_pct: fit.floor(), fit, points: preds })
}

impl RegressionReport {
    pub fn residuals_csv(&self) -> String {
        let mut out = String::from("divergence_pct,gain_pct,predicted_pct,residual\n");
        for p in &self.points {
            let r = p.residual.unwrap_or(f64::NAN);
            out.push_str(&format!("{},{},{},{}\n", p.divergence_pct, p.gain_pct + r, p.gain_pct, r));
        }
        out
    }
}

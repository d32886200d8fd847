use coop_core::analysis::{
    conversion_rate, correlate_base_competence, divergence, fit_divergence_gain, parse_points_csv, pearson,
    predict_gain, regression_report, sample_std, t_quantile_975, DivergenceRecord,
};
use coop_core::evaluation::improvement;
use proptest::prelude::*;

const POINTS: [(f64, f64); 6] = [(3.16, 1.06), (8.73, 6.53), (15.28, 7.49), (15.65, 7.72), (18.52, 10.17), (25.65, 21.76)];

/// Solves the 2×2 normal equations directly.
fn normal_equations(p: &[(f64, f64)]) -> (f64, f64) {
    let n = p.len() as f64;
    let (sx, sy) = p.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (sxx, sxy) = p.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x * x, b + x * y));
    let det = n * sxx - sx * sx;
    ((n * sxy - sx * sy) / det, (sxx * sy - sx * sxy) / det)
}

#[test]
fn reference_regression() {
    let f = fit_divergence_gain(&POINTS).unwrap();
    assert!((f.slope - 0.817).abs() < 0.01);
    assert!((f.intercept + 2.72).abs() < 0.05);
    assert!((f.r_squared - 0.856).abs() < 0.005);
    assert!((f.slope_ci_low - 0.35).abs() < 0.05 && (f.slope_ci_high - 1.28).abs() < 0.05);
    assert!((f.floor() - 3.33).abs() < 0.1);
    assert_eq!(f.n, 6);
    let (m, b) = normal_equations(&POINTS);
    assert!((f.slope - m).abs() < 1e-12 && (f.intercept - b).abs() < 1e-12);
}

#[test]
fn predictions_and_conversion() {
    let f = fit_divergence_gain(&POINTS).unwrap();
    let p = predict_gain(&f, 12.1, Some(5.0));
    assert!((p.gain_pct - (f.intercept + f.slope * 12.1)).abs() < 1e-12);
    assert!((p.residual.unwrap() - (5.0 - p.gain_pct)).abs() < 1e-12);
    assert!(predict_gain(&f, 1.0, None).residual.is_none());
    assert!((conversion_rate(7.72, 10.0).unwrap() - 0.772).abs() < 1e-12);
    assert!(conversion_rate(1.0, 0.0).is_err());
}

#[test]
fn report_residuals_sum_to_zero() {
    let r = regression_report(&POINTS).unwrap();
    let total: f64 = r.points.iter().map(|p| p.residual.unwrap()).sum();
    assert!(total.abs() < 1e-9);
    let csv = r.residuals_csv();
    assert_eq!(csv.lines().count(), 7);
    let back = parse_points_csv(&csv.lines().map(|l| l.split(',').take(2).collect::<Vec<_>>().join(",")).collect::<Vec<_>>().join("\n")).unwrap();
    for (a, b) in back.iter().zip(&POINTS) {
        assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-9);
    }
}

#[test]
fn degenerate_fits_are_rejected() {
    assert!(fit_divergence_gain(&POINTS[..2]).is_err());
    assert!(fit_divergence_gain(&[(1.0, 2.0), (1.0, 3.0), (1.0, 4.0)]).is_err());
    assert!(fit_divergence_gain(&[(1.0, 2.0), (2.0, f64::NAN), (3.0, 4.0)]).is_err());
}

#[test]
fn student_t_quantiles() {
    assert!((t_quantile_975(4) - 2.776).abs() < 1e-3);
    assert!((t_quantile_975(1) - 12.706).abs() < 1e-3);
    assert!((t_quantile_975(1000) - 1.962).abs() < 1e-3);
}

#[test]
fn divergence_is_own_domain_improvement() {
    assert_eq!(divergence(3.0, 2.4).unwrap(), improvement(3.0, 2.4).unwrap());
    let r = DivergenceRecord::new("d", 2.5, 2.0).unwrap();
    assert!((r.divergence_pct - 20.0).abs() < 1e-12);
    assert!(DivergenceRecord::new("d", 0.0, 2.0).is_err());
}

#[test]
fn pearson_and_competence() {
    assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
    assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
    assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
    assert!(pearson(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    let r = correlate_base_competence(&[(std::f64::consts::E, 0.1), (7.389, 0.2), (20.09, 0.3)]).unwrap();
    assert!(r > 0.999);
    assert!(correlate_base_competence(&[(0.0, 1.0), (1.0, 2.0), (2.0, 3.0)]).is_err());
}

#[test]
fn sample_standard_deviation() {
    assert_eq!(sample_std(&[]), 0.0);
    assert_eq!(sample_std(&[5.0]), 0.0);
    assert!((sample_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]) - 2.138089935).abs() < 1e-8);
}

#[test]
fn points_csv_parsing() {
    let text = "# reference points\ndivergence_pct,gain_pct\n3.16, 1.06\n\n8.73,6.53\n";
    assert_eq!(parse_points_csv(text).unwrap(), vec![(3.16, 1.06), (8.73, 6.53)]);
    assert!(parse_points_csv("1,2\nx,y\n").is_err());
    assert!(parse_points_csv("1,2,3\n").is_err());
    assert!(parse_points_csv("1,2\n3,inf\n").is_err());
}

proptest! {
    #[test]
    fn slope_scales_with_gain(scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
        let a = fit_divergence_gain(&POINTS).unwrap();
        let scaled: Vec<(f64, f64)> = POINTS.iter().map(|&(x, y)| (x, y * scale + shift)).collect();
        let b = fit_divergence_gain(&scaled).unwrap();
        prop_assert!((b.slope - a.slope * scale).abs() < 1e-9 * scale.max(1.0));
        prop_assert!((b.r_squared - a.r_squared).abs() < 1e-12);
    }

    #[test]
    fn csv_parse_never_panics(s in "\\PC{0,64}") {
        let _ = parse_points_csv(&s);
    }
}

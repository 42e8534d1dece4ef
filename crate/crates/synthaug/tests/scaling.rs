use synthaug::scaling::{
    excess_curve, fit_loglog_slope, fourier_curve, Design, FourierSpec, GaussianSeqConfig, Lambda, SweepAxis,
};

fn design(alpha: f64) -> Design {
    Design {
        n: vec![200, 800],
        n_aug: 64,
        alpha,
        sigma: vec![1.0, 1.0],
        sigma_tilde: vec![1.0, 1.0],
    }
}

fn within_3_se(mean: f64, std: f64, reps: usize, want: f64) -> bool {
    (mean - want).abs() <= 3.0 * std / (reps as f64).sqrt()
}

#[test]
fn gaussian_monte_carlo_matches_analytic_risk() {
    let cfg = GaussianSeqConfig::standard(2, 3, 0.1, design(0.4));
    let reps = 400;
    for p in excess_curve(&cfg, SweepAxis::Augmentation, &[16, 256, 4096], reps, 11).unwrap() {
        assert!(within_3_se(p.mean, p.std, reps, p.analytic), "{p:?}");
    }
}

#[test]
fn fourier_monte_carlo_matches_analytic_risk() {
    let spec = FourierSpec {
        dim: 1,
        q_max: 64,
        r: 2,
        p: 2,
        sobolev: vec![0.8, 1.0],
        contrast: vec![0.3, -0.3],
        bias: vec![0.05, -0.02],
        lambda: Lambda::Auto { c: 1.0 },
        design: design(0.5),
    };
    let cfg = spec.build().unwrap();
    let reps = 400;
    for p in fourier_curve(&cfg, SweepAxis::Raw, &[100, 1000, 10000], reps, 12).unwrap() {
        assert!(within_3_se(p.mean, p.std, reps, p.analytic), "{p:?}");
    }
}

#[test]
fn zero_bias_risk_decreases_along_the_grid() {
    let cfg = GaussianSeqConfig::standard(2, 3, 0.0, design(1.0));
    let grid: Vec<usize> = (6..=14).map(|k| 1 << k).collect();
    let curve = excess_curve(&cfg, SweepAxis::Augmentation, &grid, 100, 3).unwrap();
    assert!(curve.windows(2).all(|w| w[1].mean < w[0].mean));
    let pts: Vec<(f64, f64)> = curve.iter().map(|p| (p.size as f64, p.mean)).collect();
    let fit = fit_loglog_slope(&pts).unwrap();
    assert!((fit.slope + 0.8).abs() <= 0.15, "{fit:?}");
}

#[test]
fn curves_are_reproducible_per_seed() {
    let cfg = GaussianSeqConfig::standard(2, 3, 0.0, design(0.5));
    let a = excess_curve(&cfg, SweepAxis::Raw, &[100, 400], 10, 5).unwrap();
    let b = excess_curve(&cfg, SweepAxis::Raw, &[100, 400], 10, 5).unwrap();
    assert_eq!(a, b);
    let c = excess_curve(&cfg, SweepAxis::Raw, &[100, 400], 10, 6).unwrap();
    assert_ne!(a[0].risks, c[0].risks);
}

#[test]
fn bad_grids_are_rejected() {
    let cfg = GaussianSeqConfig::standard(2, 3, 0.0, design(0.5));
    assert!(excess_curve(&cfg, SweepAxis::Raw, &[400, 100], 10, 5).is_err());
    assert!(excess_curve(&cfg, SweepAxis::Raw, &[100, 400], 5, 5).is_err());
    let mut bad = cfg.clone();
    bad.p = 2;
    bad.r = 2;
    assert!(excess_curve(&bad, SweepAxis::Raw, &[100], 10, 5).is_err());
}

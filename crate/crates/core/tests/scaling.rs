mod common;

use common::{ansatz_optimum, ansatz_records};
use molekit::scaling::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const KAPPA: f64 = 6.0;

fn truth() -> Ansatz {
    Ansatz { e: 0.0, a: 10.0, b: 5.0, alpha_hat: 0.3, beta_hat: 0.3 }
}

fn minima_records(minima: &[(f64, f64)], kappa: f64) -> Vec<RunRecord> {
    minima.iter().map(|&(c, n)| RunRecord { n, d: c / (kappa * n), c, loss: 1.0, tag: "min".into() }).collect()
}

fn power_law_coefs(rs: &[RunRecord], kappa: f64) -> molekit::Result<Vec<f64>> {
    let m: Vec<(f64, f64)> = rs.iter().map(|r| (r.c, r.n)).collect();
    let f = fit_power_laws(&m, kappa)?;
    Ok(vec![f.alpha, f.a, f.beta, f.b])
}

#[test]
fn noisy_parabola_vertex_within_two_percent() {
    let normal = Normal::<f64>::new(0.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (x0, curvature, floor) = (5.3, 0.8, 0.4);
    let xs: Vec<f64> = (0..9).map(|i| x0 - 1.0 + 0.25 * i as f64).collect();
    let mut within = 0;
    for _ in 0..200 {
        let ls: Vec<f64> = xs.iter().map(|x| curvature * (x - x0).powi(2) + floor + 0.01 * curvature * normal.sample(&mut rng)).collect();
        let ns: Vec<f64> = xs.iter().map(|x| 10f64.powf(*x)).collect();
        let (n, _, status) = parabola_minimum(&ns, &ls).unwrap();
        assert_eq!(status, GroupStatus::Ok);
        if (n / 10f64.powf(x0) - 1.0).abs() <= 0.02 {
            within += 1;
        }
    }
    assert!(within >= 190, "{within}/200 vertices within 2%");
}

#[test]
fn exact_power_law_recovered() {
    // Reference dense-model exponent and intercept.
    let (alpha, a) = (0.61, -4.5);
    let minima: Vec<(f64, f64)> = (0..7).map(|i| {
        let c = 10f64.powf(15.0 + i as f64);
        (c, 10f64.powf(alpha * c.log10() + a))
    }).collect();
    let f = fit_power_laws(&minima, KAPPA).unwrap();
    assert!((f.alpha - alpha).abs() <= 1e-10 && (f.a - a).abs() <= 1e-10, "{f:?}");
    assert!((f.alpha + f.beta - 1.0).abs() <= 1e-10);
    assert!((f.b - (-a - KAPPA.log10())).abs() <= 1e-9);
}

#[test]
fn noisy_power_law_recovery() {
    let normal = Normal::<f64>::new(0.0, 0.05).unwrap();
    let mut hits = 0;
    let trials = 50;
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(t);
        let minima: Vec<(f64, f64)> = (0..10).map(|i| {
            let c = 10f64.powf(15.0 + 0.6 * i as f64);
            (c, 10f64.powf(0.61 * c.log10() - 4.5) * normal.sample(&mut rng).exp())
        }).collect();
        let f = fit_power_laws(&minima, KAPPA).unwrap();
        let bands = bootstrap(&minima_records(&minima, KAPPA), 1000, t, Resample::Pooled, |rs| power_law_coefs(rs, KAPPA)).unwrap();
        if (f.alpha - 0.61).abs() <= 0.05 && bands.contains(0, f.alpha) {
            hits += 1;
        }
    }
    assert!(hits * 10 >= trials * 9, "{hits}/{trials}");
}

#[test]
fn noise_free_ansatz_recovered() {
    let t = truth();
    let rs = ansatz_records(&t, 1e14, 5, KAPPA, 0.0, 0);
    let fit = fit_ansatz(&rs, &AnsatzOptions::default()).unwrap();
    let p = fit.params;
    assert!(fit.starts >= 16);
    assert!(p.e.abs() <= 1e-4, "{p:?}");
    assert!((p.a - 10.0).abs() <= 1e-4 && (p.b - 5.0).abs() <= 1e-4, "{p:?}");
    assert!((p.alpha_hat - 0.3).abs() <= 1e-4 && (p.beta_hat - 0.3).abs() <= 1e-4, "{p:?}");
    let (alpha, beta) = p.mapped_exponents();
    assert!((alpha - 0.5).abs() <= 1e-4 && (beta - 0.5).abs() <= 1e-4);
}

#[test]
fn mapping_identity() {
    assert_eq!(map_exponents(0.3, 0.3), (0.5, 0.5));
    assert_eq!(map_exponents(0.7, 0.7), (0.5, 0.5));
}

#[test]
fn iso_flop_exponents_sum_to_one_on_ansatz_data() {
    for (ah, bh) in [(0.3, 0.3), (0.25, 0.45), (0.5, 0.2)] {
        let t = Ansatz { e: 0.0, a: 10.0, b: 5.0, alpha_hat: ah, beta_hat: bh };
        let rs = ansatz_records(&t, 1e14, 6, KAPPA, 0.0, 0);
        let (_, laws, reduced) = powerlaw_pipeline(&rs, Some(KAPPA)).unwrap();
        assert!((laws.alpha + laws.beta - 1.0).abs() <= 0.02, "{laws:?}");
        let (alpha, _) = map_exponents(ah, bh);
        assert!((laws.alpha - alpha).abs() <= 0.02, "{} vs {alpha}", laws.alpha);
        // The reduced fit slope is −α̂ and its intercept is the ansatz γ.
        assert!((reduced.slope + ah).abs() <= 0.02, "{reduced:?}");
        assert!((reduced.gamma - t.gamma()).abs() <= 0.05, "{} vs {}", reduced.gamma, t.gamma());
    }
}

#[test]
fn reference_exponents_are_consistent_under_the_mapping() {
    // |α̂| = 0.29 with the β̂ the mapping needs for β = 0.39 (α = 0.61).
    let ah = 0.29;
    let bh = ah * 0.61 / 0.39;
    let t = Ansatz { e: 0.0, a: 10.0, b: 5.0, alpha_hat: ah, beta_hat: bh };
    let rs = ansatz_records(&t, 1e14, 6, KAPPA, 0.0, 1);
    let fit = fit_ansatz(&rs, &AnsatzOptions::default()).unwrap().params;
    let (alpha, _) = fit.mapped_exponents();
    assert!((0.57..=0.65).contains(&alpha), "{alpha}");
    assert!((-0.31..=-0.27).contains(&-fit.alpha_hat));
    let (_, laws, reduced) = powerlaw_pipeline(&rs, Some(KAPPA)).unwrap();
    assert!((0.57..=0.65).contains(&laws.alpha), "{laws:?}");
    assert!((-0.31..=-0.27).contains(&reduced.slope), "{reduced:?}");
    assert!(ansatz_optimum(&t, 1e16, KAPPA) > 0.0);
}

#[test]
fn zero_noise_band_collapses() {
    let minima: Vec<(f64, f64)> = (0..8).map(|i| {
        let c = 10f64.powf(15.0 + 0.5 * i as f64);
        (c, 10f64.powf(0.61 * c.log10() - 4.5))
    }).collect();
    let rs = minima_records(&minima, KAPPA);
    let b = bootstrap(&rs, 200, 1, Resample::Pooled, |s| power_law_coefs(s, KAPPA)).unwrap();
    assert_eq!(b.n_failed, 0);
    for (i, truth) in [0.61, -4.5].into_iter().enumerate() {
        assert!((b.p10[i] - truth).abs() <= 1e-9 && (b.p90[i] - truth).abs() <= 1e-9, "{b:?}");
    }
}

#[test]
fn single_resample_band_is_that_refit() {
    let rs = ansatz_records(&truth(), 1e14, 5, KAPPA, 0.05, 2);
    let fit = |s: &[RunRecord]| Ok(vec![s.iter().map(|r| r.loss).sum::<f64>()]);
    let b = bootstrap(&rs, 1, 9, Resample::Pooled, fit).unwrap();
    assert_eq!(b.p10, b.p90);
    assert_eq!(b, bootstrap(&rs, 1, 9, Resample::Pooled, fit).unwrap());
    assert_ne!(b, bootstrap(&rs, 1, 10, Resample::Pooled, fit).unwrap());
}

#[test]
fn band_width_matches_standard_error() {
    // y = 0.5 x + 1 + ε, σ known: the slope's 10–90 width is 2·1.2816·σ/√Sxx.
    let sigma = 0.05;
    let normal = Normal::<f64>::new(0.0, sigma).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let xs: Vec<f64> = (0..40).map(|i| 14.0 + 0.15 * i as f64).collect();
    let minima: Vec<(f64, f64)> = xs.iter().map(|x| (10f64.powf(*x), 10f64.powf(0.5 * x + 1.0 + normal.sample(&mut rng)))).collect();
    let b = bootstrap(&minima_records(&minima, KAPPA), 1000, 0, Resample::Pooled, |rs| power_law_coefs(rs, KAPPA)).unwrap();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let predicted = 2.0 * 1.2816 * sigma / sxx.sqrt();
    let width = b.p90[0] - b.p10[0];
    assert!((width / predicted - 1.0).abs() <= 0.3, "width {width} vs {predicted}");
}

#[test]
fn too_many_failures_is_an_error() {
    let rs = ansatz_records(&truth(), 1e14, 2, KAPPA, 0.0, 0);
    let err = bootstrap(&rs, 20, 0, Resample::Pooled, |_| Err(molekit::Error::Fit("no".into()))).unwrap_err();
    assert!(matches!(err, molekit::Error::Bootstrap { failed: 20, total: 20 }));
}

#[test]
fn degenerate_inputs_rejected() {
    assert!(fit_power_laws(&[(1e15, 1e6), (1e15, 2e6)], KAPPA).is_err());
    assert!(fit_ansatz(&ansatz_records(&truth(), 1e14, 1, KAPPA, 0.0, 0)[..4], &AnsatzOptions::default()).is_err());
    let rs = ansatz_records(&truth(), 1e14, 2, KAPPA, 0.0, 0);
    assert!(kappa_outliers(&rs, KAPPA, 0.05).is_empty());
    assert_eq!(kappa_outliers(&rs, 2.0 * KAPPA, 0.05).len(), rs.len());
}

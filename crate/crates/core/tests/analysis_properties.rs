use ordergate::analysis::{
    classify_growth, dispersion_stats, eg_optimize_mixture, fit_log_dispersion, jensen_gap, mixture_ce_report,
    regime_study, DispersionRecord, EgOptions, GrowthClass,
};
use ordergate::rng::{below, seeded, unit};
use ordergate::synth::PotentialSpec;
use proptest::prelude::*;
use rand_distr::{Distribution, Normal};

#[test]
fn pair_dispersion_sits_between_one_and_two_residuals() {
    let mut r = seeded(1, 0);
    for _ in 0..10_000 {
        let k = 2 + below(&mut r, 30) as usize;
        let q: Vec<f64> = (0..k).map(|_| unit(&mut r).powf(1.0 + 3.0 * unit(&mut r))).collect();
        let s = dispersion_stats(&q).unwrap();
        assert!(s.mean_abs_residual <= s.e_pair + 1e-12);
        assert!(s.e_pair <= 2.0 * s.mean_abs_residual + 1e-12);
    }
}

#[test]
fn eg_traces_never_increase() {
    let mut r = seeded(2, 0);
    for _ in 0..200 {
        let rows = 1 + below(&mut r, 20) as usize;
        let m = 2 + below(&mut r, 10) as usize;
        let scores: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..m).map(|_| 1e-6 + unit(&mut r) * (1.0 - 1e-6)).collect())
            .collect();
        let groups: Vec<usize> = (0..rows).map(|i| 8 + 4 * (i % 3)).collect();
        let fit = eg_optimize_mixture(&scores, &groups, &EgOptions::default()).unwrap();
        for trace in fit.traces.values() {
            assert!(trace.windows(2).all(|w| w[1] <= w[0]));
        }
        for w in fit.weights.groups.values() {
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(w.iter().all(|&x| x >= 0.0));
        }
        let rep = mixture_ce_report(&scores, &groups, &EgOptions::default()).unwrap();
        assert!(rep.optimized_ce <= rep.uniform_ce + 1e-15);
        assert!(rep.uniform_ce <= rep.mean_single_ce + 1e-12);
    }
}

#[test]
fn bootstrap_interval_covers_the_planted_slope() {
    let (a, b) = (0.02, 0.05);
    let noise = Normal::new(0.0, 0.02).unwrap();
    let ns = [8usize, 16, 32, 60];
    let trials = 200;
    let mut covered = 0;
    for t in 0..trials {
        let mut r = seeded(500 + t, 1);
        let records: Vec<DispersionRecord> = (0..80)
            .map(|i| {
                let n = ns[i % ns.len()];
                let y = a + b * (n as f64).ln() + noise.sample(&mut r);
                DispersionRecord {
                    item_id: format!("m{i}"),
                    n,
                    q: vec![],
                    q_bar: 0.5,
                    mean_abs_residual: y,
                    e_pair: f64::NAN,
                }
            })
            .collect();
        let fit = fit_log_dispersion(&records, 500, t).unwrap();
        if fit.ci_low <= b && b <= fit.ci_high {
            covered += 1;
        }
    }
    let rate = covered as f64 / trials as f64;
    assert!(rate >= 0.90, "coverage {rate}");
}

#[test]
fn regimes_separate_by_decay_exponent() {
    let ns: Vec<usize> = (3..=9).map(|k| 1usize << k).collect();
    let (_, half) = regime_study(&PotentialSpec::new(0.5, 0.02, -1).unwrap(), 0.0, &ns).unwrap();
    let (_, one) = regime_study(&PotentialSpec::new(1.0, 0.02, -1).unwrap(), 0.0, &ns).unwrap();
    let (_, two) = regime_study(&PotentialSpec::new(2.0, 0.02, -1).unwrap(), 0.0, &ns).unwrap();
    assert_eq!(half.class, GrowthClass::Power);
    assert_eq!(one.class, GrowthClass::Logarithmic);
    assert_eq!(two.class, GrowthClass::Saturating);
    assert!(half.exponent > one.exponent && one.exponent > two.exponent);
}

#[test]
fn planted_curves_classify() {
    let ns: Vec<usize> = (3..=9).map(|k| 1usize << k).collect();
    let power: Vec<f64> = ns.iter().map(|&n| 0.01 * (n as f64).sqrt()).collect();
    let log: Vec<f64> = ns.iter().map(|&n| 0.01 * (n as f64).ln()).collect();
    let offset_log: Vec<f64> = ns.iter().map(|&n| 1.0 + 0.01 * (n as f64).ln()).collect();
    let flat: Vec<f64> = ns.iter().map(|&n| 0.3 + 0.1 / n as f64).collect();
    assert_eq!(classify_growth(&ns, &offset_log).unwrap().class, GrowthClass::Logarithmic);
    assert_eq!(classify_growth(&ns, &power).unwrap().class, GrowthClass::Power);
    assert_eq!(classify_growth(&ns, &log).unwrap().class, GrowthClass::Logarithmic);
    assert_eq!(classify_growth(&ns, &flat).unwrap().class, GrowthClass::Saturating);
}

proptest! {
    #[test]
    fn jensen_gap_is_nonnegative(scores in prop::collection::vec(1e-12f64..=1.0, 1..24), tokens in 1usize..50) {
        prop_assert!(jensen_gap(&scores, tokens).unwrap() >= 0.0);
    }

    #[test]
    fn jensen_gap_vanishes_on_constant_scores(s in 1e-9f64..=1.0, k in 1usize..20) {
        prop_assert!(jensen_gap(&vec![s; k], 1).unwrap().abs() < 1e-12);
    }
}

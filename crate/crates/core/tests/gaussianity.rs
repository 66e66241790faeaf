use bladca::excitation::{design_multisine, draw_realizations, MultisineKind};
use statrs::distribution::{ContinuousCDF, Normal};

fn ks_statistic(mut x: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = cdf(v);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

#[test]
fn random_phase_multisine_samples_look_gaussian() {
    let rms = 0.7;
    let spec = design_multisine(1.0, 1.0, 500.0, rms, MultisineKind::Full, 4).unwrap();
    let normal = Normal::new(0.0, rms).unwrap();
    let n = 2048;
    for r in draw_realizations(&spec, 5, 11).unwrap() {
        let d = ks_statistic(r.time_samples(n), |v| normal.cdf(v));
        // 1 % critical value of the one-sample test
        assert!(d < 1.63 / (n as f64).sqrt(), "realization {}: D = {d}", r.index());
    }
}

#[test]
fn single_sine_is_rejected() {
    let spec = design_multisine(1.0, 1.0, 1.0, 0.7, MultisineKind::Full, 4).unwrap();
    let normal = Normal::new(0.0, 0.7).unwrap();
    let r = &draw_realizations(&spec, 1, 1).unwrap()[0];
    let n = 2048;
    assert!(ks_statistic(r.time_samples(n), |v| normal.cdf(v)) > 1.63 / (n as f64).sqrt());
}

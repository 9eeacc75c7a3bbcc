mod common;

use common::{ks_critical, ks_statistic, ks_two_sample};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safeproj::env::{sample_truncated_normal, sample_truncated_normal_rejection, stream_rng};

const STD: f64 = 0.316_227_766_016_838;
const RADIUS: f64 = 0.1;

fn truncated_rayleigh_cdf(r: f64) -> f64 {
    let s2 = 2.0 * STD * STD;
    (1.0 - (-r * r / s2).exp()) / (1.0 - (-RADIUS * RADIUS / s2).exp())
}

#[test]
fn radius_follows_truncated_rayleigh() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 20_000;
    let mut radii: Vec<f64> = (0..n).map(|_| sample_truncated_normal(STD, RADIUS, &mut rng).norm()).collect();
    assert!(radii.iter().all(|&r| r <= RADIUS));
    let d = ks_statistic(&mut radii, truncated_rayleigh_cdf);
    assert!(d < ks_critical(n), "KS statistic {d}");
}

#[test]
fn angle_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 20_000;
    let mut angles: Vec<f64> = (0..n)
        .map(|_| {
            let v = sample_truncated_normal(STD, RADIUS, &mut rng);
            v[1].atan2(v[0])
        })
        .collect();
    let pi = std::f64::consts::PI;
    let d = ks_statistic(&mut angles, |a| (a + pi) / (2.0 * pi));
    assert!(d < ks_critical(n), "KS statistic {d}");
}

#[test]
fn inverse_cdf_and_rejection_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let n = 5_000;
    let mut a: Vec<f64> = (0..n).map(|_| sample_truncated_normal(STD, RADIUS, &mut rng)[0]).collect();
    let mut b: Vec<f64> = (0..n)
        .map(|_| sample_truncated_normal_rejection(2, STD, RADIUS, &mut rng)[0])
        .collect();
    // two-sample critical value at level 0.001 with equal sizes
    let d = ks_two_sample(&mut a, &mut b);
    assert!(d < 1.95 * (2.0 / n as f64).sqrt(), "KS statistic {d}");
}

#[test]
fn streams_are_reproducible_and_distinct() {
    let draw = |stream| sample_truncated_normal(STD, RADIUS, &mut stream_rng(5, stream));
    assert_eq!(draw(3), draw(3));
    assert_ne!(draw(3), draw(4));
}

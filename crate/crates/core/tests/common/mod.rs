#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use mfirl::{MeanField, PerStepPolicy, TimeVaryingPolicy};

/// `|a - b| / max(|a|, |b|)`, with an absolute floor on the denominator.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| rel_err(*x, *y, floor))
        .fold(0.0, f64::max)
}

/// Central difference of a scalar function along every coordinate.
pub fn central_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn random_simplex(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| -rng.gen_range(1e-12f64..1.0).ln()).collect();
    let z: f64 = v.iter().sum();
    v.into_iter().map(|x| x / z).collect()
}

pub fn random_mean_field(n: usize, rng: &mut ChaCha8Rng) -> MeanField {
    MeanField::new(random_simplex(n, rng)).unwrap()
}

pub fn random_policy(
    horizon: usize,
    ns: usize,
    na: usize,
    rng: &mut ChaCha8Rng,
) -> TimeVaryingPolicy {
    let steps = (0..=horizon)
        .map(|_| {
            let probs: Vec<f64> = (0..ns).flat_map(|_| random_simplex(na, rng)).collect();
            PerStepPolicy::new(ns, na, probs).unwrap()
        })
        .collect();
    TimeVaryingPolicy::new(steps).unwrap()
}

pub fn median(values: &[f64]) -> f64 {
    mfirl::experiment::median(values)
}

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::random_simplex;
use mfirl::envs::{make_env, EnvName, EnvVariant};

const VARIANTS: [EnvVariant; 2] = [EnvVariant::Original, EnvVariant::New];

#[test]
fn kernel_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for env in EnvName::ALL {
        for variant in VARIANTS {
            let spec = make_env(env, variant);
            let (ns, na) = (spec.num_states(), spec.num_actions());
            for _ in 0..1000 {
                let mu = random_simplex(ns, &mut rng);
                let (s, a) = (rng.gen_range(0..ns), rng.gen_range(0..na));
                let p = spec.kernel().next_state_probs(s, a, &mu);
                assert_eq!(p.len(), ns);
                assert!(p.iter().all(|&x| x >= 0.0));
                assert!(
                    (p.iter().sum::<f64>() - 1.0).abs() < 1e-9,
                    "{env} {variant} ({s},{a})"
                );
            }
        }
    }
}

#[test]
fn investing_never_moves_down() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for variant in VARIANTS {
        let spec = make_env(EnvName::Invest, variant);
        for _ in 0..200 {
            let mu = random_simplex(10, &mut rng);
            for s in 0..10 {
                let p = spec.kernel().next_state_probs(s, 1, &mu);
                assert!(p[..s].iter().all(|&x| x == 0.0));
                let stay = spec.kernel().next_state_probs(s, 0, &mu);
                assert_eq!(stay[s], 1.0);
            }
        }
    }
}

#[test]
fn distancing_never_infects() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for variant in VARIANTS {
        let spec = make_env(EnvName::Virus, variant);
        for _ in 0..1000 {
            let mu = random_simplex(2, &mut rng);
            assert_eq!(spec.kernel().next_state_probs(0, 1, &mu)[1], 0.0);
        }
    }
}

#[test]
fn original_move_games_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for env in [EnvName::Lr, EnvName::Rps] {
        let spec = make_env(env, EnvVariant::Original);
        let mu = random_simplex(spec.num_states(), &mut rng);
        for s in 0..spec.num_states() {
            for a in 0..spec.num_actions() {
                let p = spec.kernel().next_state_probs(s, a, &mu);
                assert_eq!(p.iter().filter(|&&x| x == 1.0).count(), 1);
                assert_eq!(p.iter().filter(|&&x| x == 0.0).count(), p.len() - 1);
            }
        }
        // the noisy variant keeps 0.8 on the intended move and spreads the rest
        let noisy = make_env(env, EnvVariant::New);
        let p = noisy.kernel().next_state_probs(0, 0, &mu);
        assert!(p.iter().cloned().fold(0.0, f64::max) >= 0.8);
        assert!(p.iter().filter(|&&x| x > 0.0).count() >= 2);
    }
}

/// Simulated `s + floor(chi * (10 - s) / halve)` with `chi ~ U(lo, 1)`.
fn simulated_floor_law(
    s: usize,
    lo: f64,
    halve: f64,
    draws: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut counts = [0.0; 10];
    for _ in 0..draws {
        let chi: f64 = rng.gen_range(lo..1.0);
        let k = (chi * (10 - s) as f64 / halve).floor() as usize;
        counts[s + k] += 1.0;
    }
    counts.iter().map(|c| c / draws as f64).collect()
}

#[test]
fn floor_of_uniform_kernels_match_simulation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let below = {
        let mut m = vec![0.0; 10];
        m[0] = 1.0;
        m
    };
    let above = {
        let mut m = vec![0.0; 10];
        m[9] = 1.0;
        m
    };
    let cases = [
        (
            make_env(EnvName::Malware, EnvVariant::Original),
            0,
            0.0,
            1.0,
            below.clone(),
        ),
        (
            make_env(EnvName::Malware, EnvVariant::New),
            0,
            0.5,
            1.0,
            below.clone(),
        ),
        (
            make_env(EnvName::Invest, EnvVariant::Original),
            1,
            0.0,
            1.0,
            below.clone(),
        ),
        (
            make_env(EnvName::Invest, EnvVariant::Original),
            1,
            0.0,
            2.0,
            above.clone(),
        ),
        (
            make_env(EnvName::Invest, EnvVariant::New),
            1,
            0.0,
            2.0,
            above,
        ),
    ];
    for (spec, action, lo, halve, mu) in cases {
        for s in [0, 3, 7, 8, 9] {
            let exact = spec.kernel().next_state_probs(s, action, &mu);
            let sim = simulated_floor_law(s, lo, halve, 1_000_000, &mut rng);
            for (e, m) in exact.iter().zip(&sim) {
                assert!(
                    (e - m).abs() < 0.005,
                    "{spec:?} s={s}: {exact:?} vs {sim:?}"
                );
            }
        }
    }
}

#[test]
fn invest_new_only_moves_the_threshold() {
    let orig = make_env(EnvName::Invest, EnvVariant::Original);
    let new = make_env(EnvName::Invest, EnvVariant::New);
    // <mu> = 4.5 is above the original threshold and below the new one
    let mu = vec![0.1; 10];
    let p_orig = orig.kernel().next_state_probs(0, 1, &mu);
    let p_new = new.kernel().next_state_probs(0, 1, &mu);
    assert!((p_orig[0] - 0.2).abs() < 1e-15);
    assert!((p_new[0] - 0.1).abs() < 1e-15);
    for s in 0..10 {
        for a in 0..2 {
            assert_eq!(
                orig.require_reward().unwrap().reward(s, a, &mu),
                new.require_reward().unwrap().reward(s, a, &mu)
            );
        }
    }
}

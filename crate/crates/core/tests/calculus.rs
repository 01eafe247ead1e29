mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::random_policy;
use mfirl::calculus::{
    boltzmann_backward, expected_return, exploitability, propagate_flow, q_backward_optimal,
};
use mfirl::envs::{make_env, EnvName, EnvVariant};
use mfirl::simulate::{rollout_return, simulate_population, Coupling};
use mfirl::{MeanFieldFlow, MfgSpec, PerStepPolicy, TimeVaryingPolicy};

/// Every deterministic policy over `t < T` (the terminal step is uniform).
fn deterministic_policies(spec: &MfgSpec) -> Vec<TimeVaryingPolicy> {
    let (ns, na, horizon) = (spec.num_states(), spec.num_actions(), spec.horizon());
    let slots = ns * horizon;
    let count = na.pow(slots as u32);
    (0..count)
        .map(|mut code| {
            let mut steps = Vec::with_capacity(horizon + 1);
            for _ in 0..horizon {
                let actions: Vec<usize> = (0..ns)
                    .map(|_| {
                        let a = code % na;
                        code /= na;
                        a
                    })
                    .collect();
                steps.push(PerStepPolicy::deterministic(na, &actions).unwrap());
            }
            steps.push(PerStepPolicy::uniform(ns, na));
            TimeVaryingPolicy::new(steps).unwrap()
        })
        .collect()
}

fn lr3() -> MfgSpec {
    make_env(EnvName::Lr, EnvVariant::Original)
        .with_horizon(3)
        .unwrap()
        .with_discount(1.0)
        .unwrap()
}

#[test]
fn lr_greedy_response_beats_every_deterministic_policy() {
    let spec = lr3();
    let reward = spec.require_reward().unwrap();
    let policies = deterministic_policies(&spec);
    assert_eq!(policies.len(), 512);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // the uniform flow is consistent with the uniform policy; a random one is not
    let flows = [
        propagate_flow(&spec, &TimeVaryingPolicy::uniform(3, 3, 2)).unwrap(),
        propagate_flow(&spec, &random_policy(3, 3, 2, &mut rng)).unwrap(),
    ];
    for flow in &flows {
        let (_, best) = q_backward_optimal(&spec, flow, reward).unwrap();
        let j_best = expected_return(&spec, flow, &best, reward).unwrap();
        let enumerated = policies
            .iter()
            .map(|p| expected_return(&spec, flow, p, reward).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(
            (j_best - enumerated).abs() < 1e-9,
            "{j_best} vs {enumerated}"
        );
        for p in policies.iter().step_by(37) {
            let gap = exploitability(&spec, flow, p, reward).unwrap();
            let j = expected_return(&spec, flow, p, reward).unwrap();
            assert!((gap - (enumerated - j)).abs() < 1e-9);
        }
        assert!(exploitability(&spec, flow, &best, reward).unwrap().abs() < 1e-9);
    }
}

#[test]
fn greedy_dominates_random_policies_everywhere() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for env in EnvName::ALL {
        for variant in [EnvVariant::Original, EnvVariant::New] {
            let spec = make_env(env, variant).with_horizon(10).unwrap();
            let reward = spec.require_reward().unwrap();
            let (ns, na) = (spec.num_states(), spec.num_actions());
            let flow = propagate_flow(&spec, &random_policy(10, ns, na, &mut rng)).unwrap();
            let (q, best) = q_backward_optimal(&spec, &flow, reward).unwrap();
            for s in 0..ns {
                for a in 0..na {
                    assert_eq!(q.get(10, s, a), 0.0);
                }
            }
            let j_best = expected_return(&spec, &flow, &best, reward).unwrap();
            for _ in 0..200 {
                let p = random_policy(10, ns, na, &mut rng);
                assert!(
                    expected_return(&spec, &flow, &p, reward).unwrap() <= j_best + 1e-9,
                    "{env} {variant}"
                );
            }
        }
    }
}

#[test]
fn sharp_boltzmann_policies_are_nearly_greedy() {
    let spec = make_env(EnvName::Malware, EnvVariant::Original)
        .with_horizon(8)
        .unwrap();
    let reward = spec.require_reward().unwrap();
    let flow = propagate_flow(&spec, &TimeVaryingPolicy::uniform(8, 10, 2)).unwrap();
    let (q, policy) = boltzmann_backward(&spec, &flow, reward, 1e3).unwrap();
    let mut checked = 0;
    for t in 0..8 {
        for s in 0..10 {
            let row = q.row(t, s);
            let gap = (row[0] - row[1]).abs();
            if gap >= 0.05 {
                let greedy = if row[0] > row[1] { 0 } else { 1 };
                assert!(policy.at(t).prob(s, greedy) >= 0.999);
                checked += 1;
            }
        }
    }
    assert!(checked > 0);
}

#[test]
fn virus_step_matches_a_large_population() {
    let spec = make_env(EnvName::Virus, EnvVariant::Original)
        .with_horizon(1)
        .unwrap();
    let up = PerStepPolicy::deterministic(2, &[0, 0]).unwrap();
    let policy = TimeVaryingPolicy::new(vec![up.clone(), up]).unwrap();
    let flow = propagate_flow(&spec, &policy).unwrap();
    assert!((flow.at(1)[0] - 0.4475).abs() < 1e-12);
    let sim = simulate_population(&spec, &policy, 1_000_000, 3, Coupling::Given(&flow)).unwrap();
    assert!((sim.at(1)[0] - 0.4475).abs() < 3e-3, "{}", sim.at(1)[0]);
}

#[test]
fn lr_return_agrees_with_rollouts() {
    let spec = make_env(EnvName::Lr, EnvVariant::Original)
        .with_horizon(2)
        .unwrap()
        .with_discount(1.0)
        .unwrap();
    let left = PerStepPolicy::deterministic(2, &[0, 0, 0]).unwrap();
    let policy = TimeVaryingPolicy::new(vec![left; 3]).unwrap();
    let flow = propagate_flow(&spec, &policy).unwrap();
    let reward = spec.require_reward().unwrap();
    assert!((expected_return(&spec, &flow, &policy, reward).unwrap() + 1.5).abs() < 1e-12);
    let mc = rollout_return(&spec, &flow, &policy, reward, 100_000, 1).unwrap();
    assert!((mc.mean + 1.5).abs() <= 3.0 * mc.std_err + 1e-12, "{mc:?}");
}

#[test]
fn inconsistent_flow_lengths_are_rejected() {
    let spec = make_env(EnvName::Rps, EnvVariant::Original)
        .with_horizon(4)
        .unwrap();
    let short = MeanFieldFlow::new(vec![spec.initial_mean_field().clone(); 3]).unwrap();
    let policy = TimeVaryingPolicy::uniform(4, 3, 3);
    let reward = spec.require_reward().unwrap();
    assert!(expected_return(&spec, &short, &policy, reward).is_err());
    assert!(q_backward_optimal(&spec, &short, reward).is_err());
}

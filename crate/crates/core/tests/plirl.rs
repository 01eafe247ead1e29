mod common;

use common::median;
use mfirl::calculus::propagate_flow;
use mfirl::demos::{sample_trajectories, DemoLabels, EmpiricalEstimates};
use mfirl::envs::{make_env, EnvName, EnvVariant};
use mfirl::model::{PerStepPolicy, RewardOracle};
use mfirl::plirl::{plirl_equilibrium, plirl_train, PlirlOptions, SocietalRewardModel};
use mfirl::solvers::{
    maximize_reduced_objective, solve_mfso, MfsoOptions, PolicyScores, SocietalObjective,
};
use mfirl::{MfgSpec, TimeVaryingPolicy};

/// Societal reward of the true individual reward, with its mean field
/// derivative taken numerically.
struct TruthSocietal<'a>(&'a dyn RewardOracle);

impl SocietalObjective for TruthSocietal<'_> {
    fn value(&self, mu: &[f64], pi: &PerStepPolicy) -> f64 {
        let mut total = 0.0;
        for s in 0..mu.len() {
            for (a, p) in pi.row(s).iter().enumerate() {
                total += mu[s] * p * self.0.reward(s, a, mu);
            }
        }
        total
    }

    fn gradient(&self, mu: &[f64], pi: &PerStepPolicy) -> (Vec<f64>, Vec<f64>) {
        let na = pi.num_actions();
        let mut d_pi = vec![0.0; mu.len() * na];
        let mut d_mu = vec![0.0; mu.len()];
        for s in 0..mu.len() {
            for a in 0..na {
                let r = self.0.reward(s, a, mu);
                d_pi[s * na + a] = mu[s] * r;
                d_mu[s] += pi.row(s)[a] * r;
            }
        }
        let h = 1e-6;
        for (k, d) in d_mu.iter_mut().enumerate() {
            let mut up = mu.to_vec();
            let mut down = mu.to_vec();
            up[k] += h;
            down[k] -= h;
            for s in 0..mu.len() {
                for a in 0..na {
                    *d += mu[s]
                        * pi.row(s)[a]
                        * (self.0.reward(s, a, &up) - self.0.reward(s, a, &down))
                        / (2.0 * h);
                }
            }
        }
        (d_mu, d_pi)
    }
}

fn estimates(spec: &MfgSpec, plays: usize, seed: u64) -> Vec<EmpiricalEstimates> {
    let expert = solve_mfso(spec, &MfsoOptions::default()).unwrap();
    let demos = sample_trajectories(
        spec,
        &expert.flow,
        &expert.policy,
        plays,
        100,
        seed,
        &DemoLabels::default(),
    )
    .unwrap();
    EmpiricalEstimates::per_play(&demos).unwrap()
}

#[test]
fn true_societal_reward_recovers_the_social_optimum() {
    for env in [EnvName::Lr, EnvName::Virus, EnvName::Invest] {
        let spec = make_env(env, EnvVariant::Original)
            .with_horizon(20)
            .unwrap();
        let opts = MfsoOptions::default();
        let reference = solve_mfso(&spec, &opts).unwrap();
        let truth = TruthSocietal(spec.reward().unwrap());
        let init = PolicyScores::zeros(20, spec.num_states(), spec.num_actions());
        let out = maximize_reduced_objective(&spec, spec.initial_mean_field(), &truth, init, &opts)
            .unwrap();
        assert!(
            (out.value - reference.expected_return).abs() <= 1e-4,
            "{env}: {} vs {}",
            out.value,
            reference.expected_return
        );
    }
}

#[test]
fn constant_societal_reward_makes_every_policy_optimal() {
    let spec = make_env(EnvName::Malware, EnvVariant::Original)
        .with_horizon(15)
        .unwrap();
    let model = SocietalRewardModel::constant(10, 2, -0.3);
    let expected: f64 = (0..15).map(|t| -0.3 * spec.discount().powi(t)).sum();
    let res = plirl_equilibrium(&model, &spec.without_reward(), &MfsoOptions::default()).unwrap();
    assert!((res.expected_return - expected).abs() < 1e-12);
    assert!(
        res.flow
            .max_abs_diff(&propagate_flow(&spec, &res.policy).unwrap())
            <= 1e-8
    );
    let uniform = TimeVaryingPolicy::uniform(15, 10, 2);
    let mu = propagate_flow(&spec, &uniform).unwrap();
    let v: f64 = (0..15)
        .map(|t| spec.discount().powi(t as i32) * model.value(mu.at(t).probs(), uniform.at(t)))
        .sum();
    assert!((v - expected).abs() < 1e-12);
}

#[test]
fn inner_solution_is_never_beaten_by_the_expert_estimate() {
    // population-exact estimates: the expert pair is feasible for the inner problem
    for env in [EnvName::Virus, EnvName::Rps] {
        let spec = make_env(env, EnvVariant::Original)
            .with_horizon(20)
            .unwrap();
        let expert = solve_mfso(&spec, &MfsoOptions::default()).unwrap();
        let est = vec![EmpiricalEstimates {
            mean_field_flow: expert.flow.clone(),
            policy: expert.policy.clone(),
        }];
        let opts = PlirlOptions {
            outer_epochs: 25,
            ..PlirlOptions::default()
        };
        let out = plirl_train(&est, &spec.without_reward(), &opts).unwrap();
        assert_eq!(out.log.len(), 25);
        for e in &out.log {
            assert!(
                e.inner_value >= e.expert_value - 1e-6,
                "{env} epoch {}: {} < {}",
                e.epoch,
                e.inner_value,
                e.expert_value
            );
        }
    }
}

#[test]
fn left_right_margin_closes() {
    let spec = make_env(EnvName::Lr, EnvVariant::Original);
    let mut ratios = Vec::new();
    for seed in 0..5 {
        let est = estimates(&spec, 10, seed);
        let opts = PlirlOptions {
            seed,
            ..PlirlOptions::default()
        };
        let out = plirl_train(&est, &spec.without_reward(), &opts).unwrap();
        let last = out.log.last().unwrap();
        ratios.push(last.margin.abs() / last.expert_value.abs());
    }
    assert!(median(&ratios) <= 0.05, "{ratios:?}");
}

#[test]
fn equilibrium_under_a_trained_model_is_consistent() {
    let spec = make_env(EnvName::Rps, EnvVariant::Original)
        .with_horizon(10)
        .unwrap();
    let est = estimates(&spec, 2, 1);
    let out = plirl_train(
        &est,
        &spec.without_reward(),
        &PlirlOptions {
            outer_epochs: 5,
            ..PlirlOptions::default()
        },
    )
    .unwrap();
    let res = plirl_equilibrium(&out.model, &spec, &MfsoOptions::default()).unwrap();
    assert!(
        res.flow
            .max_abs_diff(&propagate_flow(&spec, &res.policy).unwrap())
            <= 1e-8
    );
    assert!(res.exploitability.is_some());
}

#[test]
fn reduced_gradient_with_a_societal_network_matches_finite_differences() {
    use mfirl::solvers::reduced_objective_grad;
    let spec = make_env(EnvName::Lr, EnvVariant::Original)
        .with_horizon(5)
        .unwrap()
        .without_reward();
    let model = SocietalRewardModel::init(3, 2, 11);
    let mut scores = PolicyScores::zeros(5, 3, 2);
    for (i, v) in scores.values.iter_mut().enumerate() {
        *v = ((i * 7 % 11) as f64 - 5.0) / 4.0;
    }
    let mu0 = spec.initial_mean_field();
    let (_, grad) = reduced_objective_grad(&spec, mu0, &model, &scores).unwrap();
    let fd = common::central_gradient(&scores.values, 1e-5, |v| {
        let mut s = scores.clone();
        s.values = v.to_vec();
        mfirl::solvers::reduced_objective(&spec, mu0, &model, &s).unwrap()
    });
    assert!(common::max_rel_err(&grad, &fd, 1e-6) <= 1e-4);
}

//! Population-level reward recovery: a societal reward `r_bar(mu, pi)` is fit
//! so that the demonstrated population trajectory scores as well as the best
//! trajectory of the reduced decision process.
//!
//! Each epoch solves the reduced process under the current reward (warm
//! started) and then moves the parameters along
//! `grad [J_hat_E(theta) - J_theta(mu*, pi*)]` with the inner solution held
//! fixed.

use serde::{Deserialize, Serialize};

use crate::demos::EmpiricalEstimates;
use crate::error::{argument, Error, Result};
use crate::mlp::Mlp;
use crate::model::{MfgSpec, PerStepPolicy};
use crate::reward_model::{adam_step, AdamState, RewardFile, HIDDEN_WIDTH};
use crate::solvers::{
    finish_mfso, maximize_reduced_objective, reduced_objective, EquilibriumResult, MfsoOptions,
    PolicyScores, SocietalObjective,
};

/// Societal reward network over `[mu, flattened pi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SocietalRewardModel {
    pub num_states: usize,
    pub num_actions: usize,
    pub theta: Vec<f64>,
}

fn societal_network(num_states: usize, num_actions: usize) -> Mlp {
    Mlp::new(vec![
        num_states * (1 + num_actions),
        HIDDEN_WIDTH,
        HIDDEN_WIDTH,
        1,
    ])
}

impl SocietalRewardModel {
    pub fn init(num_states: usize, num_actions: usize, seed: u64) -> Self {
        Self {
            num_states,
            num_actions,
            theta: societal_network(num_states, num_actions).init_params(seed),
        }
    }

    /// A model whose output is the constant `c`.
    pub fn constant(num_states: usize, num_actions: usize, c: f64) -> Self {
        let net = societal_network(num_states, num_actions);
        let mut theta = vec![0.0; net.num_params()];
        *theta.last_mut().unwrap() = c;
        Self {
            num_states,
            num_actions,
            theta,
        }
    }

    pub fn new(num_states: usize, num_actions: usize, theta: Vec<f64>) -> Result<Self> {
        let d = societal_network(num_states, num_actions).num_params();
        if theta.len() != d {
            return Err(argument(format!(
                "expected {d} parameters, got {}",
                theta.len()
            )));
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(argument("parameters must be finite"));
        }
        Ok(Self {
            num_states,
            num_actions,
            theta,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.num_states * (1 + self.num_actions)
    }

    fn input(&self, mu: &[f64], pi: &PerStepPolicy) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.input_dim());
        x.extend_from_slice(mu);
        x.extend_from_slice(pi.as_slice());
        x
    }

    pub fn value(&self, mu: &[f64], pi: &PerStepPolicy) -> f64 {
        societal_network(self.num_states, self.num_actions)
            .forward(&self.theta, &self.input(mu, pi))
    }

    /// Parameter gradient at one `(mu, pi)`.
    pub fn param_grad(&self, mu: &[f64], pi: &PerStepPolicy) -> Vec<f64> {
        societal_network(self.num_states, self.num_actions)
            .backward(&self.theta, &self.input(mu, pi))
            .params
    }

    fn check_spec(&self, spec: &MfgSpec) -> Result<()> {
        if spec.num_states() != self.num_states || spec.num_actions() != self.num_actions {
            return Err(Error::Contract(
                "societal reward model does not match the game size".into(),
            ));
        }
        Ok(())
    }
}

impl RewardFile {
    pub fn from_societal(model: &SocietalRewardModel, metadata: serde_json::Value) -> Self {
        Self {
            kind: "societal".into(),
            architecture: serde_json::json!({
                "kind": "mlp",
                "input": "mu ++ pi",
                "hidden": [HIDDEN_WIDTH, HIDDEN_WIDTH],
            }),
            theta: model.theta.clone(),
            num_states: model.num_states,
            num_actions: model.num_actions,
            metadata,
        }
    }

    pub fn to_societal(&self) -> Result<SocietalRewardModel> {
        if self.kind != "societal" {
            return Err(argument(format!(
                "expected a societal reward, found '{}'",
                self.kind
            )));
        }
        SocietalRewardModel::new(self.num_states, self.num_actions, self.theta.clone())
    }
}

impl SocietalObjective for SocietalRewardModel {
    fn value(&self, mu: &[f64], pi: &PerStepPolicy) -> f64 {
        SocietalRewardModel::value(self, mu, pi)
    }

    fn gradient(&self, mu: &[f64], pi: &PerStepPolicy) -> (Vec<f64>, Vec<f64>) {
        let (_, mut d_mu) = societal_network(self.num_states, self.num_actions)
            .input_backward(&self.theta, &self.input(mu, pi));
        let d_pi = d_mu[self.num_states..].to_vec();
        d_mu.truncate(self.num_states);
        (d_mu, d_pi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlirlOptions {
    pub outer_epochs: usize,
    pub outer_lr: f64,
    /// Options of the reduced-process solve performed every epoch.
    pub inner: MfsoOptions,
    pub seed: u64,
}

impl Default for PlirlOptions {
    fn default() -> Self {
        Self {
            outer_epochs: 200,
            outer_lr: 1e-3,
            inner: MfsoOptions {
                max_steps: 200,
                ..MfsoOptions::default()
            },
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlirlEpochLog {
    pub epoch: usize,
    pub expert_value: f64,
    pub inner_value: f64,
    /// `expert_value - inner_value`
    pub margin: f64,
}

#[derive(Clone, Debug)]
pub struct PlirlOutcome {
    pub model: SocietalRewardModel,
    pub log: Vec<PlirlEpochLog>,
}

fn discounted_value_and_grad(
    model: &SocietalRewardModel,
    spec: &MfgSpec,
    mus: &[Vec<f64>],
    pis: &[PerStepPolicy],
) -> (f64, Vec<f64>) {
    let mut value = 0.0;
    let mut grad = vec![0.0; model.theta.len()];
    let mut discount = 1.0;
    for t in 0..spec.horizon() {
        let g = societal_network(model.num_states, model.num_actions)
            .backward(&model.theta, &model.input(&mus[t], &pis[t]));
        value += discount * g.value;
        for (acc, x) in grad.iter_mut().zip(&g.params) {
            *acc += discount * x;
        }
        discount *= spec.discount();
    }
    (value, grad)
}

fn estimate_arrays(est: &EmpiricalEstimates) -> (Vec<Vec<f64>>, Vec<PerStepPolicy>) {
    (
        est.mean_field_flow
            .fields()
            .iter()
            .map(|f| f.probs().to_vec())
            .collect(),
        est.policy.steps().to_vec(),
    )
}

/// Fits a societal reward to per-play population estimates.
pub fn plirl_train(
    estimates: &[EmpiricalEstimates],
    spec: &MfgSpec,
    opts: &PlirlOptions,
) -> Result<PlirlOutcome> {
    if estimates.is_empty() {
        return Err(argument("need at least one population estimate"));
    }
    if opts.outer_epochs == 0 || !(opts.outer_lr > 0.0) {
        return Err(argument("outer_epochs and outer_lr must be positive"));
    }
    for est in estimates {
        spec.check_flow(&est.mean_field_flow)?;
        spec.check_policy(&est.policy)?;
    }
    let (ns, na, horizon) = (spec.num_states(), spec.num_actions(), spec.horizon());
    let mut model = SocietalRewardModel::init(ns, na, opts.seed);
    let mut adam = AdamState::new(model.theta.len());
    let expert_arrays: Vec<_> = estimates.iter().map(estimate_arrays).collect();
    // mean of the empirical policies, used as an alternative inner starting point
    let expert_scores = {
        let mut avg = PolicyScores::zeros(horizon, ns, na);
        for (_, pis) in &expert_arrays {
            for t in 0..horizon {
                for (i, p) in pis[t].as_slice().iter().enumerate() {
                    avg.values[t * ns * na + i] += p / estimates.len() as f64;
                }
            }
        }
        avg.values.iter_mut().for_each(|p| *p = p.max(1e-12).ln());
        avg
    };
    let mu0 = spec.initial_mean_field();
    let mut warm = PolicyScores::zeros(horizon, ns, na);
    let mut log = Vec::with_capacity(opts.outer_epochs);
    for epoch in 0..opts.outer_epochs {
        let wrap = |e: Error| match e {
            Error::Divergence(msg) => Error::Divergence(format!("outer epoch {epoch}: {msg}")),
            other => other,
        };
        let start = {
            let a = reduced_objective(spec, mu0, &model, &warm).map_err(wrap)?;
            let b = reduced_objective(spec, mu0, &model, &expert_scores).map_err(wrap)?;
            if b > a {
                expert_scores.clone()
            } else {
                warm.clone()
            }
        };
        let inner =
            maximize_reduced_objective(spec, mu0, &model, start, &opts.inner).map_err(wrap)?;
        warm = inner.scores.clone();

        let mus = {
            let mut mus = vec![mu0.probs().to_vec()];
            let pis: Vec<PerStepPolicy> =
                (0..horizon).map(|t| inner.scores.step_policy(t)).collect();
            for t in 0..horizon {
                let table = spec.kernel_table(&mus[t]).map_err(wrap)?;
                let next =
                    crate::calculus::mkv_step_with_table(&mus[t], &pis[t], &table).map_err(wrap)?;
                mus.push(next.into_inner());
            }
            (mus, pis)
        };
        let (inner_value, inner_grad) = discounted_value_and_grad(&model, spec, &mus.0, &mus.1);

        let mut expert_value = 0.0;
        let mut grad = vec![0.0; model.theta.len()];
        let k = estimates.len() as f64;
        for (m, p) in &expert_arrays {
            let (v, g) = discounted_value_and_grad(&model, spec, m, p);
            expert_value += v / k;
            for (acc, x) in grad.iter_mut().zip(&g) {
                *acc += x / k;
            }
        }
        for (acc, x) in grad.iter_mut().zip(&inner_grad) {
            *acc -= x;
        }
        if !expert_value.is_finite()
            || !inner_value.is_finite()
            || grad.iter().any(|g| !g.is_finite())
        {
            return Err(Error::Divergence(format!(
                "outer epoch {epoch}: non-finite margin or gradient"
            )));
        }
        log.push(PlirlEpochLog {
            epoch,
            expert_value,
            inner_value,
            margin: expert_value - inner_value,
        });
        adam_step(&mut model.theta, &grad, &mut adam, opts.outer_lr);
    }
    Ok(PlirlOutcome { model, log })
}

/// The social optimum of the reduced process under a learned societal reward,
/// solved from uniform policies. Exploitability is reported under the game's
/// own reward when it has one.
pub fn plirl_equilibrium(
    model: &SocietalRewardModel,
    spec: &MfgSpec,
    opts: &MfsoOptions,
) -> Result<EquilibriumResult> {
    model.check_spec(spec)?;
    let init = PolicyScores::zeros(spec.horizon(), spec.num_states(), spec.num_actions());
    let outcome = maximize_reduced_objective(spec, spec.initial_mean_field(), model, init, opts)?;
    finish_mfso(spec, &outcome, spec.reward())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::propagate_flow;
    use crate::envs::{make_env, EnvName, EnvVariant};
    use crate::model::TimeVaryingPolicy;
    use crate::solvers::reduced_objective_grad;

    #[test]
    fn constant_model_has_zero_margin_and_gradient() {
        let spec = make_env(EnvName::Rps, EnvVariant::Original)
            .with_horizon(6)
            .unwrap();
        let model = SocietalRewardModel::constant(3, 3, 0.4);
        let policy = TimeVaryingPolicy::uniform(6, 3, 3);
        let est = EmpiricalEstimates {
            mean_field_flow: propagate_flow(&spec, &policy).unwrap(),
            policy,
        };
        let (m, p) = estimate_arrays(&est);
        let (v, g_expert) = discounted_value_and_grad(&model, &spec, &m, &p);
        let expected: f64 = (0..6).map(|t| 0.4 * 0.99f64.powi(t)).sum();
        assert!((v - expected).abs() < 1e-12);

        let res = plirl_equilibrium(&model, &spec, &MfsoOptions::default()).unwrap();
        assert!((res.expected_return - expected).abs() < 1e-12);
        assert!(
            res.flow
                .max_abs_diff(&propagate_flow(&spec, &res.policy).unwrap())
                <= 1e-8
        );
        // the margin gradient w.r.t. the output bias is exactly zero
        let pis: Vec<PerStepPolicy> = res.policy.steps()[..6].to_vec();
        let mus: Vec<Vec<f64>> = res
            .flow
            .fields()
            .iter()
            .map(|f| f.probs().to_vec())
            .collect();
        let (_, g_inner) = discounted_value_and_grad(&model, &spec, &mus, &pis);
        assert_eq!(g_expert.last(), g_inner.last());
    }

    #[test]
    fn reduced_gradient_with_network_objective() {
        let spec = make_env(EnvName::Lr, EnvVariant::Original)
            .with_horizon(5)
            .unwrap();
        let model = SocietalRewardModel::init(3, 2, 7);
        let mut scores = PolicyScores::zeros(5, 3, 2);
        for (i, v) in scores.values.iter_mut().enumerate() {
            *v = ((i * 31) % 7) as f64 / 3.0 - 1.0;
        }
        let mu0 = spec.initial_mean_field();
        let (_, grad) = reduced_objective_grad(&spec, mu0, &model, &scores).unwrap();
        let h = 1e-5;
        for i in 0..scores.values.len() {
            let mut up = scores.clone();
            up.values[i] += h;
            let mut down = scores.clone();
            down.values[i] -= h;
            let fd = (reduced_objective(&spec, mu0, &model, &up).unwrap()
                - reduced_objective(&spec, mu0, &model, &down).unwrap())
                / (2.0 * h);
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            assert!(err <= 1e-4, "component {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn rejects_empty_estimates() {
        let spec = make_env(EnvName::Lr, EnvVariant::Original);
        assert!(plirl_train(&[], &spec, &PlirlOptions::default()).is_err());
    }
}

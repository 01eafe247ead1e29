//! Forward equilibrium computation.
//!
//! * [`solve_mfne_fixed_point`] alternates best responses and population
//!   propagation until the flow stops moving.
//! * [`solve_mfso`] maximises the population's cumulative societal reward
//!   over open-loop policy sequences. Because the mean field recursion is
//!   deterministic given the initial mean field, the policy sequence alone
//!   determines the trajectory of the reduced decision process, and the exact
//!   gradient is available by reverse accumulation through the recursion.

use serde::{Deserialize, Serialize};

use crate::calculus::{
    boltzmann_backward, expected_return, exploitability, mkv_step_with_table, propagate_flow,
    q_backward_optimal, softmax_row,
};
use crate::error::{argument, Error, Result};
use crate::model::{
    KernelTable, MeanField, MeanFieldFlow, MfgSpec, PerStepPolicy, RewardOracle, TimeVaryingPolicy,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixedPointOptions {
    pub max_iters: usize,
    pub mse_tol: f64,
    /// Weight kept on the previous flow iterate, in `[0, 1)`.
    pub damping: f64,
    /// Use Boltzmann best responses at this inverse temperature instead of
    /// greedy ones.
    pub beta_soft: Option<f64>,
    /// Initial flow iterate; the flow of the uniform policy when absent.
    #[serde(skip)]
    pub warm_start: Option<MeanFieldFlow>,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            mse_tol: 1e-10,
            damping: 0.0,
            beta_soft: None,
            warm_start: None,
        }
    }
}

impl FixedPointOptions {
    fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(argument("max_iters must be positive"));
        }
        if !(self.mse_tol > 0.0) {
            return Err(argument("mse_tol must be positive"));
        }
        if !(0.0..1.0).contains(&self.damping) {
            return Err(argument("damping must lie in [0, 1)"));
        }
        if let Some(beta) = self.beta_soft {
            if !(beta > 0.0 && beta.is_finite()) {
                return Err(argument("beta_soft must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfsoOptions {
    pub learning_rate: f64,
    pub max_steps: usize,
    /// Stop once the largest score-gradient entry falls below this value.
    pub grad_tol: f64,
    /// Recorded for provenance; initialisation is deterministic (all-zero scores).
    pub seed: u64,
}

impl Default for MfsoOptions {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            max_steps: 5000,
            grad_tol: 1e-7,
            seed: 0,
        }
    }
}

impl MfsoOptions {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(argument("learning_rate must be positive"));
        }
        if self.max_steps == 0 {
            return Err(argument("max_steps must be positive"));
        }
        Ok(())
    }
}

/// A population-consistent flow/policy pair produced by a solver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumResult {
    pub flow: MeanFieldFlow,
    pub policy: TimeVaryingPolicy,
    /// Return of the pair under the objective the solver optimised (the
    /// ground-truth reward for the forward solvers).
    pub expected_return: f64,
    /// Best-response gain against `flow`; absent when no ground-truth reward is known.
    pub exploitability: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Fixed point: residual MSE per iteration. MFSO: objective per accepted step.
    pub history: Vec<f64>,
}

/// Mean squared change of a flow over the interior steps `t = 1..T-1`.
pub fn flow_mse(a: &MeanFieldFlow, b: &MeanFieldFlow) -> f64 {
    let horizon = a.horizon();
    let ns = a.num_states();
    let mut total = 0.0;
    for t in 1..horizon {
        for (x, y) in a.at(t).probs().iter().zip(b.at(t).probs()) {
            total += (x - y).powi(2);
        }
    }
    total / ((horizon.saturating_sub(1)).max(1) * ns) as f64
}

fn mix_flows(new: &MeanFieldFlow, old: &MeanFieldFlow, keep: f64) -> Result<MeanFieldFlow> {
    let fields = new
        .fields()
        .iter()
        .zip(old.fields())
        .map(|(n, o)| {
            let v: Vec<f64> = n
                .probs()
                .iter()
                .zip(o.probs())
                .map(|(x, y)| (1.0 - keep) * x + keep * y)
                .collect();
            let z: f64 = v.iter().sum();
            MeanField::new(v.into_iter().map(|x| x / z).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    MeanFieldFlow::new(fields)
}

fn best_response(
    spec: &MfgSpec,
    flow: &MeanFieldFlow,
    reward: &dyn RewardOracle,
    beta_soft: Option<f64>,
) -> Result<TimeVaryingPolicy> {
    Ok(match beta_soft {
        Some(beta) => boltzmann_backward(spec, flow, reward, beta)?.1,
        None => q_backward_optimal(spec, flow, reward)?.1,
    })
}

/// Mean field Nash equilibrium by (optionally damped) fixed-point iteration:
/// `pi <- BR(mu)`, `mu <- Phi(pi)`.
///
/// The residual recorded per iteration is the mean squared difference between
/// the flow induced by the best response and the current flow iterate, over
/// steps `1..T-1`. Without damping this is exactly the change between
/// consecutive iterates. Non-convergence is reported through
/// `converged = false`; the returned pair is always population consistent.
pub fn solve_mfne_fixed_point(
    spec: &MfgSpec,
    opts: &FixedPointOptions,
) -> Result<EquilibriumResult> {
    opts.validate()?;
    let reward = spec.require_reward()?;
    let mut belief = match &opts.warm_start {
        Some(flow) => {
            spec.check_flow(flow)?;
            flow.clone()
        }
        None => propagate_flow(
            spec,
            &TimeVaryingPolicy::uniform(spec.horizon(), spec.num_states(), spec.num_actions()),
        )?,
    };
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut last: Option<(TimeVaryingPolicy, MeanFieldFlow)> = None;
    for _ in 0..opts.max_iters {
        iterations += 1;
        let policy = best_response(spec, &belief, reward, opts.beta_soft)?;
        let induced = propagate_flow(spec, &policy)?;
        let mse = flow_mse(&induced, &belief);
        if !mse.is_finite() {
            return Err(Error::Divergence(format!(
                "fixed-point residual is not finite at iteration {iterations}"
            )));
        }
        history.push(mse);
        if mse <= opts.mse_tol {
            converged = true;
            last = Some((policy, induced));
            break;
        }
        belief = if opts.damping > 0.0 {
            mix_flows(&induced, &belief, opts.damping)?
        } else {
            induced
        };
    }
    let (policy, flow) = match last {
        Some(pair) => pair,
        None => {
            let policy = best_response(spec, &belief, reward, opts.beta_soft)?;
            let flow = propagate_flow(spec, &policy)?;
            (policy, flow)
        }
    };
    let value = expected_return(spec, &flow, &policy, reward)?;
    let gap = exploitability(spec, &flow, &policy, reward)?;
    Ok(EquilibriumResult {
        flow,
        policy,
        expected_return: value,
        exploitability: Some(gap),
        iterations,
        converged,
        history,
    })
}

/// A per-step population objective `r_bar(mu, pi)` of the reduced decision
/// process, together with its partial derivatives.
pub trait SocietalObjective {
    fn value(&self, mu: &[f64], pi: &PerStepPolicy) -> f64;

    /// `(d r_bar / d mu, d r_bar / d pi)`, the latter row-major over `(s, a)`.
    fn gradient(&self, mu: &[f64], pi: &PerStepPolicy) -> (Vec<f64>, Vec<f64>);
}

/// The societal reward induced by an individual reward function.
pub struct IndividualRewardObjective<'a>(pub &'a dyn RewardOracle);

impl SocietalObjective for IndividualRewardObjective<'_> {
    fn value(&self, mu: &[f64], pi: &PerStepPolicy) -> f64 {
        let mut total = 0.0;
        for (s, &mass) in mu.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            for (a, &p) in pi.row(s).iter().enumerate() {
                if p != 0.0 {
                    total += mass * p * self.0.reward(s, a, mu);
                }
            }
        }
        total
    }

    fn gradient(&self, mu: &[f64], pi: &PerStepPolicy) -> (Vec<f64>, Vec<f64>) {
        let (ns, na) = (pi.num_states(), pi.num_actions());
        let mut d_mu = vec![0.0; ns];
        let mut d_pi = vec![0.0; ns * na];
        for s in 0..ns {
            for a in 0..na {
                let p = pi.prob(s, a);
                let w = mu[s] * p;
                let r = if w != 0.0 {
                    let (r, grad) = self.0.reward_and_grad_mu(s, a, mu);
                    for (acc, g) in d_mu.iter_mut().zip(grad) {
                        *acc += w * g;
                    }
                    r
                } else {
                    self.0.reward(s, a, mu)
                };
                d_pi[s * na + a] = mu[s] * r;
                d_mu[s] += p * r;
            }
        }
        (d_mu, d_pi)
    }
}

/// Open-loop policy scores of the reduced decision process, laid out `[t][s][a]`
/// for `t < T`. The policy at step `t` is the row-wise softmax of the scores.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyScores {
    pub horizon: usize,
    pub num_states: usize,
    pub num_actions: usize,
    pub values: Vec<f64>,
}

impl PolicyScores {
    pub fn zeros(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        Self {
            horizon,
            num_states,
            num_actions,
            values: vec![0.0; horizon * num_states * num_actions],
        }
    }

    /// Scores reproducing `policy` up to a floor of `1e-12` on each probability.
    pub fn from_policy(policy: &TimeVaryingPolicy) -> Self {
        let horizon = policy.horizon();
        let values = policy.steps()[..horizon]
            .iter()
            .flat_map(|p| p.as_slice().iter().map(|&x| x.max(1e-12).ln()))
            .collect();
        Self {
            horizon,
            num_states: policy.num_states(),
            num_actions: policy.num_actions(),
            values,
        }
    }

    pub fn step_policy(&self, t: usize) -> PerStepPolicy {
        let (ns, na) = (self.num_states, self.num_actions);
        let base = t * ns * na;
        let probs: Vec<f64> = (0..ns)
            .flat_map(|s| softmax_row(&self.values[base + s * na..base + (s + 1) * na], 1.0))
            .collect();
        PerStepPolicy::new(ns, na, probs).expect("softmax rows are distributions")
    }

    /// Full policy; the terminal step (which never affects returns) is uniform.
    pub fn policy(&self) -> TimeVaryingPolicy {
        let mut steps: Vec<PerStepPolicy> =
            (0..self.horizon).map(|t| self.step_policy(t)).collect();
        steps.push(PerStepPolicy::uniform(self.num_states, self.num_actions));
        TimeVaryingPolicy::new(steps).expect("consistent shapes")
    }
}

struct Rollout {
    value: f64,
    mus: Vec<Vec<f64>>,
    pis: Vec<PerStepPolicy>,
    tables: Vec<KernelTable>,
}

fn rollout(
    spec: &MfgSpec,
    mu0: &MeanField,
    objective: &dyn SocietalObjective,
    scores: &PolicyScores,
) -> Result<Rollout> {
    let mut mus = vec![mu0.probs().to_vec()];
    let mut pis = Vec::with_capacity(spec.horizon());
    let mut tables = Vec::with_capacity(spec.horizon());
    let mut value = 0.0;
    let mut discount = 1.0;
    for t in 0..spec.horizon() {
        let pi = scores.step_policy(t);
        let mu = &mus[t];
        value += discount * objective.value(mu, &pi);
        discount *= spec.discount();
        let table = spec.kernel_table(mu)?;
        let next = mkv_step_with_table(mu, &pi, &table)?;
        mus.push(next.into_inner());
        pis.push(pi);
        tables.push(table);
    }
    Ok(Rollout {
        value,
        mus,
        pis,
        tables,
    })
}

/// Objective `sum_{t<T} gamma^t r_bar(mu_t, pi_t)` of the reduced process
/// started at `mu0`.
pub fn reduced_objective(
    spec: &MfgSpec,
    mu0: &MeanField,
    objective: &dyn SocietalObjective,
    scores: &PolicyScores,
) -> Result<f64> {
    Ok(rollout(spec, mu0, objective, scores)?.value)
}

/// Objective and its exact gradient with respect to every policy score.
pub fn reduced_objective_grad(
    spec: &MfgSpec,
    mu0: &MeanField,
    objective: &dyn SocietalObjective,
    scores: &PolicyScores,
) -> Result<(f64, Vec<f64>)> {
    let (ns, na, horizon) = (spec.num_states(), spec.num_actions(), spec.horizon());
    let run = rollout(spec, mu0, objective, scores)?;
    let mut grad = vec![0.0; scores.values.len()];
    // adjoint of mu_{t+1}; mu_T never enters the objective
    let mut lambda = vec![0.0; ns];
    let mut discounts: Vec<f64> = Vec::with_capacity(horizon);
    let mut d = 1.0;
    for _ in 0..horizon {
        discounts.push(d);
        d *= spec.discount();
    }
    for t in (0..horizon).rev() {
        let mu = &run.mus[t];
        let pi = &run.pis[t];
        let table = &run.tables[t];
        let (r_mu, r_pi) = objective.gradient(mu, pi);
        let disc = discounts[t];

        let mut g_pi = vec![0.0; ns * na];
        let mut next_lambda: Vec<f64> = r_mu.iter().map(|g| disc * g).collect();
        for s in 0..ns {
            for a in 0..na {
                let row = table.row(s, a);
                let carried: f64 = row.iter().zip(&lambda).map(|(p, l)| p * l).sum();
                g_pi[s * na + a] = disc * r_pi[s * na + a] + mu[s] * carried;
                next_lambda[s] += pi.prob(s, a) * carried;
                let w = mu[s] * pi.prob(s, a);
                if w != 0.0 {
                    // d P(s'|s,a,mu) / d mu(k), row-major over (s', k)
                    let jac = spec.kernel().next_state_probs_grad(s, a, mu);
                    for (sp, l) in lambda.iter().enumerate() {
                        if *l == 0.0 {
                            continue;
                        }
                        for k in 0..ns {
                            next_lambda[k] += w * l * jac[sp * ns + k];
                        }
                    }
                }
            }
        }
        let base = t * ns * na;
        for s in 0..ns {
            let row = &g_pi[s * na..(s + 1) * na];
            let probs = pi.row(s);
            let mean: f64 = row.iter().zip(probs).map(|(g, p)| g * p).sum();
            for a in 0..na {
                grad[base + s * na + a] = probs[a] * (row[a] - mean);
            }
        }
        lambda = next_lambda;
    }
    Ok((run.value, grad))
}

/// Result of maximising the reduced objective.
#[derive(Clone, Debug)]
pub struct AscentOutcome {
    pub scores: PolicyScores,
    pub value: f64,
    pub steps: usize,
    pub converged: bool,
    /// Objective after each accepted step (starting with the initial value).
    pub history: Vec<f64>,
}

const MAX_HALVINGS: usize = 20;

/// Gradient ascent on policy scores with step halving: a step is accepted only
/// if it does not decrease the objective, so the objective sequence is
/// non-decreasing.
pub fn maximize_reduced_objective(
    spec: &MfgSpec,
    mu0: &MeanField,
    objective: &dyn SocietalObjective,
    init: PolicyScores,
    opts: &MfsoOptions,
) -> Result<AscentOutcome> {
    opts.validate()?;
    let mut scores = init;
    let (mut value, mut grad) = reduced_objective_grad(spec, mu0, objective, &scores)?;
    let mut history = vec![value];
    let mut lr = opts.learning_rate;
    let max_lr = opts.learning_rate * 1e3;
    let mut converged = false;
    let mut steps = 0;
    while steps < opts.max_steps {
        let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if !gmax.is_finite() {
            return Err(Error::Divergence(format!(
                "reduced-objective gradient is not finite at step {steps}"
            )));
        }
        if gmax <= opts.grad_tol {
            converged = true;
            break;
        }
        steps += 1;
        let mut accepted = None;
        for halving in 0..=MAX_HALVINGS {
            let mut candidate = scores.clone();
            for (c, g) in candidate.values.iter_mut().zip(&grad) {
                *c += lr * g;
            }
            let cand_value = reduced_objective(spec, mu0, objective, &candidate)?;
            if cand_value >= value {
                accepted = Some((candidate, halving));
                break;
            }
            lr *= 0.5;
        }
        match accepted {
            Some((candidate, halvings)) => {
                let (v, g) = reduced_objective_grad(spec, mu0, objective, &candidate)?;
                scores = candidate;
                value = v;
                grad = g;
                history.push(value);
                if halvings == 0 {
                    lr = (lr * 1.5).min(max_lr);
                }
            }
            None => {
                // no ascent direction left at floating-point resolution
                converged = true;
                break;
            }
        }
    }
    Ok(AscentOutcome {
        scores,
        value,
        steps,
        converged,
        history,
    })
}

/// Mean field social optimum of a game with a ground-truth reward.
pub fn solve_mfso(spec: &MfgSpec, opts: &MfsoOptions) -> Result<EquilibriumResult> {
    let reward = spec.require_reward()?;
    let objective = IndividualRewardObjective(reward);
    let init = PolicyScores::zeros(spec.horizon(), spec.num_states(), spec.num_actions());
    let outcome =
        maximize_reduced_objective(spec, spec.initial_mean_field(), &objective, init, opts)?;
    finish_mfso(spec, &outcome, Some(reward))
}

pub(crate) fn finish_mfso(
    spec: &MfgSpec,
    outcome: &AscentOutcome,
    reward: Option<&dyn RewardOracle>,
) -> Result<EquilibriumResult> {
    let policy = outcome.scores.policy();
    let flow = propagate_flow(spec, &policy)?;
    let gap = match reward {
        Some(r) => Some(exploitability(spec, &flow, &policy, r)?),
        None => None,
    };
    Ok(EquilibriumResult {
        flow,
        policy,
        expected_return: outcome.value,
        exploitability: gap,
        iterations: outcome.steps,
        converged: outcome.converged,
        history: outcome.history.clone(),
    })
}

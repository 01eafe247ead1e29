//! Deterministic mean-field calculus: forward propagation of the population,
//! returns, and backward induction of action values.

use crate::error::{argument, contract, Error, Result};
use crate::model::{
    check_distribution, ActionValueTable, KernelTable, MeanField, MeanFieldFlow, MfgSpec,
    PerStepPolicy, RewardOracle, TimeVaryingPolicy, TransitionKernel,
};

/// Relative tolerance deciding which actions tie for the maximum.
pub const TIE_TOL: f64 = 1e-9;

/// One step of the McKean-Vlasov recursion:
/// `mu'(s') = sum_s mu(s) sum_a pi(a|s) P(s'|s,a,mu)`.
pub fn mkv_step(
    mu: &MeanField,
    pi: &PerStepPolicy,
    kernel: &dyn TransitionKernel,
) -> Result<MeanField> {
    if pi.num_states() != mu.num_states() {
        return Err(contract(format!(
            "policy covers {} states but the mean field has {}",
            pi.num_states(),
            mu.num_states()
        )));
    }
    let table = KernelTable::build(kernel, mu.num_states(), pi.num_actions(), mu.probs())?;
    mkv_step_with_table(mu.probs(), pi, &table)
}

pub(crate) fn mkv_step_with_table(
    mu: &[f64],
    pi: &PerStepPolicy,
    table: &KernelTable,
) -> Result<MeanField> {
    let n = mu.len();
    let mut next = vec![0.0; n];
    for (s, &mass) in mu.iter().enumerate() {
        if mass == 0.0 {
            continue;
        }
        for (a, &p) in pi.row(s).iter().enumerate() {
            let w = mass * p;
            if w == 0.0 {
                continue;
            }
            for (acc, q) in next.iter_mut().zip(table.row(s, a)) {
                *acc += w * q;
            }
        }
    }
    check_distribution(&next).map_err(|e| {
        Error::Divergence(format!("propagated mean field is not a distribution: {e}"))
    })?;
    Ok(MeanField::new(next).expect("validated above"))
}

/// Mean field flow induced when the whole population plays `policy` from the
/// game's initial mean field.
pub fn propagate_flow(spec: &MfgSpec, policy: &TimeVaryingPolicy) -> Result<MeanFieldFlow> {
    propagate_flow_from(spec, spec.initial_mean_field(), policy)
}

/// As [`propagate_flow`], starting from an arbitrary initial mean field.
pub fn propagate_flow_from(
    spec: &MfgSpec,
    mu0: &MeanField,
    policy: &TimeVaryingPolicy,
) -> Result<MeanFieldFlow> {
    spec.check_policy(policy)?;
    if mu0.num_states() != spec.num_states() {
        return Err(contract(
            "initial mean field has the wrong number of states",
        ));
    }
    let mut fields = Vec::with_capacity(spec.horizon() + 1);
    fields.push(mu0.clone());
    for t in 0..spec.horizon() {
        let next = mkv_step(&fields[t], policy.at(t), spec.kernel())?;
        fields.push(next);
    }
    MeanFieldFlow::new(fields)
}

/// Population-average one-step reward `sum_s mu(s) sum_a pi(a|s) r(s,a,mu)`.
pub fn societal_reward(
    mu: &MeanField,
    pi: &PerStepPolicy,
    reward: &dyn RewardOracle,
) -> Result<f64> {
    if pi.num_states() != mu.num_states() {
        return Err(contract(
            "policy and mean field disagree on the number of states",
        ));
    }
    let m = mu.probs();
    let mut total = 0.0;
    for (s, &mass) in m.iter().enumerate() {
        if mass == 0.0 {
            continue;
        }
        for (a, &p) in pi.row(s).iter().enumerate() {
            if p != 0.0 {
                total += mass * p * reward.reward(s, a, m);
            }
        }
    }
    Ok(total)
}

/// Discounted sum of societal rewards over `t < T`.
pub fn discounted_societal_sum(
    spec: &MfgSpec,
    flow: &MeanFieldFlow,
    policy: &TimeVaryingPolicy,
    reward: &dyn RewardOracle,
) -> Result<f64> {
    spec.check_flow(flow)?;
    spec.check_policy(policy)?;
    let mut total = 0.0;
    let mut discount = 1.0;
    for t in 0..spec.horizon() {
        total += discount * societal_reward(flow.at(t), policy.at(t), reward)?;
        discount *= spec.discount();
    }
    Ok(total)
}

/// Kernel tables evaluated along a flow, one per `t < T`.
pub(crate) fn kernel_tables(spec: &MfgSpec, flow: &MeanFieldFlow) -> Result<Vec<KernelTable>> {
    (0..spec.horizon())
        .map(|t| spec.kernel_table(flow.at(t).probs()))
        .collect()
}

/// `r(s, a, mu_t)` for `t < T`, laid out as `[t][s][a]`.
pub(crate) fn reward_table(
    spec: &MfgSpec,
    flow: &MeanFieldFlow,
    reward: &dyn RewardOracle,
) -> Result<Vec<f64>> {
    let (ns, na) = (spec.num_states(), spec.num_actions());
    let mut out = Vec::with_capacity(spec.horizon() * ns * na);
    for t in 0..spec.horizon() {
        let mu = flow.at(t).probs();
        for s in 0..ns {
            for a in 0..na {
                let r = reward.reward(s, a, mu);
                if !r.is_finite() {
                    return Err(Error::Divergence(format!(
                        "reward is not finite at (t={t}, s={s}, a={a})"
                    )));
                }
                out.push(r);
            }
        }
    }
    Ok(out)
}

/// Expected return of a representative agent that starts from the game's
/// initial mean field, plays `policy`, and faces the (possibly inconsistent)
/// population flow `flow`. Computed exactly on state-visitation distributions.
pub fn expected_return(
    spec: &MfgSpec,
    flow: &MeanFieldFlow,
    policy: &TimeVaryingPolicy,
    reward: &dyn RewardOracle,
) -> Result<f64> {
    spec.check_flow(flow)?;
    spec.check_policy(policy)?;
    let tables = kernel_tables(spec, flow)?;
    let rewards = reward_table(spec, flow, reward)?;
    Ok(visitation_return(spec, &tables, &rewards, policy))
}

fn visitation_return(
    spec: &MfgSpec,
    tables: &[KernelTable],
    rewards: &[f64],
    policy: &TimeVaryingPolicy,
) -> f64 {
    let (ns, na) = (spec.num_states(), spec.num_actions());
    let mut visit = spec.initial_mean_field().probs().to_vec();
    let mut total = 0.0;
    let mut discount = 1.0;
    for t in 0..spec.horizon() {
        let pi = policy.at(t);
        let mut next = vec![0.0; ns];
        let mut step = 0.0;
        for s in 0..ns {
            let mass = visit[s];
            if mass == 0.0 {
                continue;
            }
            for a in 0..na {
                let w = mass * pi.prob(s, a);
                if w == 0.0 {
                    continue;
                }
                step += w * rewards[(t * ns + s) * na + a];
                for (acc, q) in next.iter_mut().zip(tables[t].row(s, a)) {
                    *acc += w * q;
                }
            }
        }
        total += discount * step;
        discount *= spec.discount();
        visit = next;
    }
    total
}

/// Uniform distribution over the actions within [`TIE_TOL`] of the row maximum.
pub fn greedy_row(q: &[f64]) -> Vec<f64> {
    let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tol = TIE_TOL * max.abs().max(1.0);
    let winners = q.iter().filter(|&&v| v >= max - tol).count() as f64;
    q.iter()
        .map(|&v| if v >= max - tol { 1.0 / winners } else { 0.0 })
        .collect()
}

/// `exp(beta q_a) / sum_b exp(beta q_b)`, evaluated with max subtraction.
pub fn softmax_row(q: &[f64], beta: f64) -> Vec<f64> {
    let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = q.iter().map(|&v| (beta * (v - max)).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    out
}

/// Backward induction where the policy at every `(t, s)` is a function of
/// the action-value row, and values back up the expectation under that policy.
fn backward_with_rule(
    spec: &MfgSpec,
    flow: &MeanFieldFlow,
    reward: &dyn RewardOracle,
    rule: impl Fn(&[f64]) -> Vec<f64>,
) -> Result<(ActionValueTable, TimeVaryingPolicy)> {
    spec.check_flow(flow)?;
    let (ns, na, horizon) = (spec.num_states(), spec.num_actions(), spec.horizon());
    let tables = kernel_tables(spec, flow)?;
    let rewards = reward_table(spec, flow, reward)?;
    let mut q = ActionValueTable::zeros(horizon, ns, na);
    let mut steps = vec![PerStepPolicy::uniform(ns, na); horizon + 1];

    let terminal: Vec<f64> = (0..ns).flat_map(|_| rule(&vec![0.0; na])).collect();
    steps[horizon] = PerStepPolicy::new(ns, na, terminal)?;
    let mut next_values = vec![0.0; ns];
    for t in (0..horizon).rev() {
        let mut probs = Vec::with_capacity(ns * na);
        let mut values = vec![0.0; ns];
        for s in 0..ns {
            let row = q.row_mut(t, s);
            for (a, slot) in row.iter_mut().enumerate() {
                let cont: f64 = tables[t]
                    .row(s, a)
                    .iter()
                    .zip(&next_values)
                    .map(|(p, v)| p * v)
                    .sum();
                *slot = rewards[(t * ns + s) * na + a] + spec.discount() * cont;
            }
            let pi_row = rule(q.row(t, s));
            values[s] = pi_row.iter().zip(q.row(t, s)).map(|(p, v)| p * v).sum();
            probs.extend(pi_row);
        }
        steps[t] = PerStepPolicy::new(ns, na, probs)?;
        next_values = values;
    }
    Ok((q, TimeVaryingPolicy::new(steps)?))
}

/// Optimal action values against a fixed flow, with the greedy policy that
/// randomises uniformly over tied maximisers.
pub fn q_backward_optimal(
    spec: &MfgSpec,
    flow: &MeanFieldFlow,
    reward: &dyn RewardOracle,
) -> Result<(ActionValueTable, TimeVaryingPolicy)> {
    backward_with_rule(spec, flow, reward, greedy_row)
}

/// Action values and Boltzmann policy at inverse temperature `beta`, backing
/// up the expected value under the Boltzmann policy itself.
pub fn boltzmann_backward(
    spec: &MfgSpec,
    flow: &MeanFieldFlow,
    reward: &dyn RewardOracle,
    beta: f64,
) -> Result<(ActionValueTable, TimeVaryingPolicy)> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(argument(format!(
            "inverse temperature must be positive, got {beta}"
        )));
    }
    backward_with_rule(spec, flow, reward, |row| softmax_row(row, beta))
}

/// Gain of a best response over `policy` against the fixed flow `flow`.
pub fn exploitability(
    spec: &MfgSpec,
    flow: &MeanFieldFlow,
    policy: &TimeVaryingPolicy,
    reward: &dyn RewardOracle,
) -> Result<f64> {
    spec.check_policy(policy)?;
    let (_, best) = q_backward_optimal(spec, flow, reward)?;
    let tables = kernel_tables(spec, flow)?;
    let rewards = reward_table(spec, flow, reward)?;
    let best_value = visitation_return(spec, &tables, &rewards, &best);
    let value = visitation_return(spec, &tables, &rewards, policy);
    Ok(best_value - value)
}

//! Individual-level reward recovery from agent trajectories.
//!
//! The objective compares the discounted reward the demonstrations collect
//! with the value of a Boltzmann best response to the estimated flow:
//!
//! `L(theta) = E_demos[sum_t gamma^t r(s_t, a_t, mu_hat_t)] - J(mu_hat, pi_soft)`
//!
//! `L` is maximised by Adam. Its gradient needs the parameter derivatives of
//! the soft action values and policy, which are accumulated backwards in time
//! alongside the values themselves.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calculus::{kernel_tables, softmax_row};
use crate::demos::{estimate_mean_field_flow, DemoSet};
use crate::error::{argument, Error, Result};
use crate::model::{
    sample_categorical, ActionValueTable, KernelTable, MeanFieldFlow, MfgSpec, PerStepPolicy,
    TimeVaryingPolicy,
};
use crate::reward_model::{adam_step, AdamState, RewardArchitecture, RewardParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DynamicsMode {
    /// Expectations over next states use the full kernel.
    Exact,
    /// Expectations over next states in the gradient recursion average
    /// `mc_samples` sampled successors per `(t, s, a)`.
    MonteCarlo,
}

impl std::str::FromStr for DynamicsMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exact" => Ok(Self::Exact),
            "mc" | "monte_carlo" | "montecarlo" => Ok(Self::MonteCarlo),
            other => Err(argument(format!("unknown dynamics mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfirlOptions {
    pub beta: f64,
    pub epochs: usize,
    pub lr: f64,
    /// Recursion depth of the gradient tables; the tables of the previous
    /// epoch stand in beyond it.
    pub truncation: Option<usize>,
    pub dynamics_mode: DynamicsMode,
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for MfirlOptions {
    fn default() -> Self {
        Self {
            beta: 1.0,
            epochs: 500,
            lr: 1e-4,
            truncation: None,
            dynamics_mode: DynamicsMode::Exact,
            mc_samples: 32,
            seed: 0,
        }
    }
}

impl MfirlOptions {
    pub fn validate(&self, horizon: usize) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(argument("beta must be positive"));
        }
        if self.epochs == 0 {
            return Err(argument("epochs must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(argument("lr must be non-negative"));
        }
        if let Some(h) = self.truncation {
            if h == 0 || h > horizon {
                return Err(argument(format!(
                    "truncation depth must lie in 1..={horizon}, got {h}"
                )));
            }
        }
        if self.dynamics_mode == DynamicsMode::MonteCarlo && self.mc_samples == 0 {
            return Err(argument("mc_samples must be positive"));
        }
        Ok(())
    }
}

/// Parameter derivatives of the soft action values, policy and state values.
/// Every entry is a `d`-vector; index order is `[t][s][a]` (or `[t][s]`).
#[derive(Clone, Debug, PartialEq)]
pub struct GradientTables {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    dim: usize,
    grad_q: Vec<f64>,
    grad_pi: Vec<f64>,
    grad_v: Vec<f64>,
}

impl GradientTables {
    fn zeros(horizon: usize, num_states: usize, num_actions: usize, dim: usize) -> Self {
        let n = (horizon + 1) * num_states * num_actions * dim;
        Self {
            horizon,
            num_states,
            num_actions,
            dim,
            grad_q: vec![0.0; n],
            grad_pi: vec![0.0; n],
            grad_v: vec![0.0; (horizon + 1) * num_states * dim],
        }
    }

    fn sa_offset(&self, t: usize, s: usize, a: usize) -> usize {
        ((t * self.num_states + s) * self.num_actions + a) * self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// `d Q(t, s, a) / d theta`.
    pub fn grad_q(&self, t: usize, s: usize, a: usize) -> &[f64] {
        let o = self.sa_offset(t, s, a);
        &self.grad_q[o..o + self.dim]
    }

    /// `d pi_t(a | s) / d theta`.
    pub fn grad_pi(&self, t: usize, s: usize, a: usize) -> &[f64] {
        let o = self.sa_offset(t, s, a);
        &self.grad_pi[o..o + self.dim]
    }

    /// `d V(t, s) / d theta` with `V(t, s) = sum_a pi_t(a|s) Q(t, s, a)`.
    pub fn grad_v(&self, t: usize, s: usize) -> &[f64] {
        let o = (t * self.num_states + s) * self.dim;
        &self.grad_v[o..o + self.dim]
    }

    fn step_len(&self) -> usize {
        self.num_states * self.num_actions * self.dim
    }
}

/// Reward values and parameter gradients on the estimated flow, `[t][s][a]` for `t < T`.
struct RewardTables {
    values: Vec<f64>,
    grads: Vec<f64>,
    dim: usize,
}

fn reward_tables(
    spec: &MfgSpec,
    mu_hat: &MeanFieldFlow,
    params: &RewardParams,
) -> Result<RewardTables> {
    reward_tables_in(spec, mu_hat, params, Vec::new())
}

fn reward_tables_in(
    spec: &MfgSpec,
    mu_hat: &MeanFieldFlow,
    params: &RewardParams,
    mut grads: Vec<f64>,
) -> Result<RewardTables> {
    let (ns, na, horizon) = (spec.num_states(), spec.num_actions(), spec.horizon());
    let dim = params.dim();
    let mut values = Vec::with_capacity(horizon * ns * na);
    grads.clear();
    grads.reserve(horizon * ns * na * dim);
    for t in 0..horizon {
        let mu = mu_hat.at(t).probs();
        for s in 0..ns {
            for a in 0..na {
                let (v, g) = params.value_and_grad(s, a, mu);
                if !v.is_finite() || g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Divergence(format!(
                        "reward or its gradient is not finite at (t={t}, s={s}, a={a})"
                    )));
                }
                values.push(v);
                grads.extend(g);
            }
        }
    }
    Ok(RewardTables { values, grads, dim })
}

/// Discounted reward collected by the demonstrations, averaged over
/// trajectories, with its parameter gradient.
pub fn empirical_expert_term(
    spec: &MfgSpec,
    demos: &DemoSet,
    mu_hat: &MeanFieldFlow,
    params: &RewardParams,
) -> Result<(f64, Vec<f64>)> {
    if demos.is_empty() {
        return Err(argument("no demonstrations"));
    }
    demos.check_spec(spec)?;
    spec.check_flow(mu_hat)?;
    params.check_spec(spec)?;
    let rewards = reward_tables(spec, mu_hat, params)?;
    Ok(expert_term_from_tables(spec, demos, &rewards))
}

fn expert_term_from_tables(
    spec: &MfgSpec,
    demos: &DemoSet,
    rewards: &RewardTables,
) -> (f64, Vec<f64>) {
    let (ns, na, horizon) = (spec.num_states(), spec.num_actions(), spec.horizon());
    let dim = rewards.dim;
    // trajectories sharing (t, s, a) contribute identical terms
    let mut counts = vec![0usize; horizon * ns * na];
    for tr in &demos.trajectories {
        for t in 0..horizon {
            counts[(t * ns + tr.states[t]) * na + tr.actions[t]] += 1;
        }
    }
    let m = demos.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; dim];
    let mut discount = 1.0;
    for t in 0..horizon {
        for sa in 0..ns * na {
            let idx = t * ns * na + sa;
            if counts[idx] == 0 {
                continue;
            }
            let w = discount * counts[idx] as f64 / m;
            value += w * rewards.values[idx];
            for (g, r) in grad
                .iter_mut()
                .zip(&rewards.grads[idx * dim..(idx + 1) * dim])
            {
                *g += w * r;
            }
        }
        discount *= spec.discount();
    }
    (value, grad)
}

/// Soft action values, Boltzmann policy and their parameter derivatives
/// against the estimated flow.
#[derive(Clone, Debug)]
pub struct SoftBestResponse {
    pub q: ActionValueTable,
    pub policy: TimeVaryingPolicy,
    pub grads: GradientTables,
}

struct SoftValues {
    q: ActionValueTable,
    /// `pi_t(a|s)` flattened `[t][s][a]` for `t = 0..=T`
    pi: Vec<f64>,
    values: Vec<Vec<f64>>,
}

fn soft_values(
    spec: &MfgSpec,
    tables: &[KernelTable],
    rewards: &RewardTables,
    beta: f64,
) -> Result<SoftValues> {
    let (ns, na, horizon) = (spec.num_states(), spec.num_actions(), spec.horizon());
    let mut q = ActionValueTable::zeros(horizon, ns, na);
    let mut pi = vec![1.0 / na as f64; (horizon + 1) * ns * na];
    let mut values = vec![vec![0.0; ns]; horizon + 1];
    for t in (0..horizon).rev() {
        for s in 0..ns {
            let row = q.row_mut(t, s);
            for (a, slot) in row.iter_mut().enumerate() {
                let cont: f64 = tables[t]
                    .row(s, a)
                    .iter()
                    .zip(&values[t + 1])
                    .map(|(p, v)| p * v)
                    .sum();
                *slot = rewards.values[(t * ns + s) * na + a] + spec.discount() * cont;
                if !slot.is_finite() {
                    return Err(Error::Divergence(format!(
                        "soft action value is not finite at (t={t}, s={s}, a={a})"
                    )));
                }
            }
            let probs = softmax_row(q.row(t, s), beta);
            values[t][s] = probs.iter().zip(q.row(t, s)).map(|(p, v)| p * v).sum();
            let o = (t * ns + s) * na;
            pi[o..o + na].copy_from_slice(&probs);
        }
    }
    Ok(SoftValues { q, pi, values })
}

/// Next-state distributions used by the gradient recursion, `[t][s][a][s']`.
fn gradient_kernels(
    spec: &MfgSpec,
    tables: &[KernelTable],
    opts: &MfirlOptions,
    epoch: usize,
) -> Vec<Vec<f64>> {
    let (ns, na) = (spec.num_states(), spec.num_actions());
    match opts.dynamics_mode {
        DynamicsMode::Exact => tables
            .iter()
            .map(|tab| {
                (0..ns)
                    .flat_map(|s| (0..na).flat_map(move |a| tab.row(s, a).to_vec()))
                    .collect()
            })
            .collect(),
        DynamicsMode::MonteCarlo => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(epoch as u64);
            let k = opts.mc_samples as f64;
            tables
                .iter()
                .map(|tab| {
                    let mut out = vec![0.0; ns * na * ns];
                    for s in 0..ns {
                        for a in 0..na {
                            let row = tab.row(s, a);
                            let slot = &mut out[(s * na + a) * ns..(s * na + a + 1) * ns];
                            for _ in 0..opts.mc_samples {
                                slot[sample_categorical(row, &mut rng)] += 1.0;
                            }
                            slot.iter_mut().for_each(|x| *x /= k);
                        }
                    }
                    out
                })
                .collect()
        }
    }
}

/// One backward step of the gradient recursion at time `t`, given the value
/// gradients at `t + 1` (`|S| x d`). Writes the `Q`, policy and value
/// gradients at `t` into the output slices.
#[allow(clippy::too_many_arguments)]
fn gradient_step(
    spec: &MfgSpec,
    t: usize,
    soft: &SoftValues,
    rewards: &RewardTables,
    kernel: &[f64],
    beta: f64,
    next_gv: &[f64],
    gq: &mut [f64],
    gpi: &mut [f64],
    gv: &mut [f64],
) -> Result<()> {
    let (ns, na) = (spec.num_states(), spec.num_actions());
    let dim = rewards.dim;
    let gamma = spec.discount();
    for s in 0..ns {
        for a in 0..na {
            let idx = s * na + a;
            let out = &mut gq[idx * dim..(idx + 1) * dim];
            out.copy_from_slice(
                &rewards.grads[((t * ns) * na + idx) * dim..((t * ns) * na + idx + 1) * dim],
            );
            for (sp, &p) in kernel[idx * ns..(idx + 1) * ns].iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let w = gamma * p;
                for (o, g) in out.iter_mut().zip(&next_gv[sp * dim..(sp + 1) * dim]) {
                    *o += w * g;
                }
            }
        }
        // d pi(a|s) = pi(a|s) beta (dQ(a) - sum_b pi(b|s) dQ(b))
        let probs = &soft.pi[(t * ns + s) * na..(t * ns + s + 1) * na];
        let mut mean = vec![0.0; dim];
        for (a, &p) in probs.iter().enumerate() {
            for (m, g) in mean
                .iter_mut()
                .zip(&gq[(s * na + a) * dim..(s * na + a + 1) * dim])
            {
                *m += p * g;
            }
        }
        let v_out = &mut gv[s * dim..(s + 1) * dim];
        v_out.iter_mut().for_each(|x| *x = 0.0);
        for (a, &p) in probs.iter().enumerate() {
            let idx = s * na + a;
            let qv = soft.q.get(t, s, a);
            let dq = &gq[idx * dim..(idx + 1) * dim];
            let dpi = &mut gpi[idx * dim..(idx + 1) * dim];
            for k in 0..dim {
                dpi[k] = p * beta * (dq[k] - mean[k]);
                v_out[k] += qv * dpi[k] + p * dq[k];
            }
        }
        if v_out.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence(format!(
                "value gradient is not finite at (t={t}, s={s})"
            )));
        }
    }
    Ok(())
}

fn gradient_tables(
    spec: &MfgSpec,
    soft: &SoftValues,
    rewards: &RewardTables,
    kernels: &[Vec<f64>],
    opts: &MfirlOptions,
    cached: Option<&GradientTables>,
    spare: Option<GradientTables>,
) -> Result<GradientTables> {
    let (ns, na, horizon) = (spec.num_states(), spec.num_actions(), spec.horizon());
    let dim = rewards.dim;
    // every slot below T is overwritten and the T slices stay zero
    let mut out = match spare {
        Some(t) if (t.horizon, t.num_states, t.num_actions, t.dim) == (horizon, ns, na, dim) => t,
        _ => GradientTables::zeros(horizon, ns, na, dim),
    };
    let step = out.step_len();
    let vstep = ns * dim;
    match opts.truncation {
        None => {
            for t in (0..horizon).rev() {
                let (gq_head, _) = out.grad_q.split_at_mut((t + 1) * step);
                let (gpi_head, _) = out.grad_pi.split_at_mut((t + 1) * step);
                let (gv_head, gv_tail) = out.grad_v.split_at_mut((t + 1) * vstep);
                gradient_step(
                    spec,
                    t,
                    soft,
                    rewards,
                    &kernels[t],
                    opts.beta,
                    &gv_tail[..vstep],
                    &mut gq_head[t * step..],
                    &mut gpi_head[t * step..],
                    &mut gv_head[t * vstep..],
                )?;
            }
        }
        Some(depth) => {
            let mut gq = vec![0.0; step];
            let mut gpi = vec![0.0; step];
            let mut gv = vec![0.0; vstep];
            for t in (0..horizon).rev() {
                // unroll from the cut down to t
                let cut = (t + depth + 1).min(horizon);
                let mut next: Vec<f64> = if cut == horizon {
                    vec![0.0; vstep]
                } else {
                    match cached {
                        Some(prev) => prev.grad_v[cut * vstep..(cut + 1) * vstep].to_vec(),
                        None => vec![0.0; vstep],
                    }
                };
                for u in (t..cut).rev() {
                    gradient_step(
                        spec,
                        u,
                        soft,
                        rewards,
                        &kernels[u],
                        opts.beta,
                        &next,
                        &mut gq,
                        &mut gpi,
                        &mut gv,
                    )?;
                    std::mem::swap(&mut next, &mut gv);
                }
                out.grad_q[t * step..(t + 1) * step].copy_from_slice(&gq);
                out.grad_pi[t * step..(t + 1) * step].copy_from_slice(&gpi);
                out.grad_v[t * vstep..(t + 1) * vstep].copy_from_slice(&next);
            }
        }
    }
    Ok(out)
}

fn to_policy(spec: &MfgSpec, pi: &[f64]) -> Result<TimeVaryingPolicy> {
    let block = spec.num_states() * spec.num_actions();
    let steps = pi
        .chunks(block)
        .map(|c| PerStepPolicy::new(spec.num_states(), spec.num_actions(), c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    TimeVaryingPolicy::new(steps)
}

fn check_inputs(
    spec: &MfgSpec,
    mu_hat: &MeanFieldFlow,
    params: &RewardParams,
    opts: &MfirlOptions,
) -> Result<()> {
    opts.validate(spec.horizon())?;
    spec.check_flow(mu_hat)?;
    params.check_spec(spec)
}

/// Soft best response to `mu_hat` under `r_theta` together with its
/// parameter-gradient tables. `cached` supplies the previous epoch's tables
/// for truncated recursion and `epoch` selects the sampling stream in
/// Monte-Carlo mode.
pub fn soft_best_response_with_grads(
    spec: &MfgSpec,
    mu_hat: &MeanFieldFlow,
    params: &RewardParams,
    opts: &MfirlOptions,
    cached: Option<&GradientTables>,
    epoch: usize,
) -> Result<SoftBestResponse> {
    check_inputs(spec, mu_hat, params, opts)?;
    let tables = kernel_tables(spec, mu_hat)?;
    let rewards = reward_tables(spec, mu_hat, params)?;
    let soft = soft_values(spec, &tables, &rewards, opts.beta)?;
    let kernels = gradient_kernels(spec, &tables, opts, epoch);
    let grads = gradient_tables(spec, &soft, &rewards, &kernels, opts, cached, None)?;
    let policy = to_policy(spec, &soft.pi)?;
    Ok(SoftBestResponse {
        q: soft.q,
        policy,
        grads,
    })
}

/// Objective value, its gradient and the gradient tables produced on the way.
pub struct ObjectiveEval {
    pub value: f64,
    pub grad: Vec<f64>,
    pub expert_term: f64,
    pub soft_return: f64,
    pub tables: GradientTables,
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    spec: &MfgSpec,
    demos: &DemoSet,
    mu_hat: &MeanFieldFlow,
    params: &RewardParams,
    opts: &MfirlOptions,
    cached: Option<&GradientTables>,
    epoch: usize,
    scratch: &mut Scratch,
) -> Result<ObjectiveEval> {
    if demos.is_empty() {
        return Err(argument("no demonstrations"));
    }
    demos.check_spec(spec)?;
    check_inputs(spec, mu_hat, params, opts)?;
    let tables = kernel_tables(spec, mu_hat)?;
    let rewards = reward_tables_in(
        spec,
        mu_hat,
        params,
        std::mem::take(&mut scratch.reward_grads),
    )?;
    let (expert, expert_grad) = expert_term_from_tables(spec, demos, &rewards);
    let soft = soft_values(spec, &tables, &rewards, opts.beta)?;
    let kernels = gradient_kernels(spec, &tables, opts, epoch);
    let grads = gradient_tables(
        spec,
        &soft,
        &rewards,
        &kernels,
        opts,
        cached,
        scratch.tables.take(),
    )?;
    scratch.reward_grads = rewards.grads;

    let mu0 = mu_hat.at(0).probs();
    let soft_return: f64 = mu0.iter().zip(&soft.values[0]).map(|(m, v)| m * v).sum();
    let mut grad = expert_grad;
    for (s, &m) in mu0.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        for (g, v) in grad.iter_mut().zip(grads.grad_v(0, s)) {
            *g -= m * v;
        }
    }
    Ok(ObjectiveEval {
        value: expert - soft_return,
        grad,
        expert_term: expert,
        soft_return,
        tables: grads,
    })
}

/// Buffers recycled between epochs; the tables run to tens of megabytes for
/// the network reward.
#[derive(Default)]
struct Scratch {
    tables: Option<GradientTables>,
    reward_grads: Vec<f64>,
}

/// `L(theta)` and its gradient, without any truncation cache (first-epoch semantics).
pub fn objective_and_grad(
    spec: &MfgSpec,
    demos: &DemoSet,
    mu_hat: &MeanFieldFlow,
    params: &RewardParams,
    opts: &MfirlOptions,
) -> Result<(f64, Vec<f64>)> {
    let eval = evaluate(
        spec,
        demos,
        mu_hat,
        params,
        opts,
        None,
        0,
        &mut Scratch::default(),
    )?;
    Ok((eval.value, eval.grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub objective: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct MfirlOutcome {
    pub params: RewardParams,
    pub log: Vec<EpochLog>,
}

/// Trains from an explicit initial parameter vector.
pub fn mfirl_train_from(
    spec: &MfgSpec,
    demos: &DemoSet,
    init: RewardParams,
    opts: &MfirlOptions,
) -> Result<MfirlOutcome> {
    if demos.is_empty() {
        return Err(argument("no demonstrations"));
    }
    demos.check_spec(spec)?;
    opts.validate(spec.horizon())?;
    let mu_hat = estimate_mean_field_flow(demos)?;
    let mut params = init;
    let mut adam = AdamState::new(params.dim());
    let mut cache: Option<GradientTables> = None;
    let mut scratch = Scratch::default();
    let mut log = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let eval = evaluate(
            spec,
            demos,
            &mu_hat,
            &params,
            opts,
            cache.as_ref(),
            epoch,
            &mut scratch,
        )
        .map_err(|e| match e {
            Error::Divergence(msg) => Error::Divergence(format!("epoch {epoch}: {msg}")),
            other => other,
        })?;
        let grad_norm = eval.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        log.push(EpochLog {
            epoch,
            objective: eval.value,
            grad_norm,
        });
        adam_step(&mut params.theta, &eval.grad, &mut adam, opts.lr);
        if params.theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence(format!(
                "epoch {epoch}: parameters became non-finite"
            )));
        }
        if opts.truncation.is_some() {
            scratch.tables = cache.replace(eval.tables);
        } else {
            scratch.tables = Some(eval.tables);
        }
    }
    Ok(MfirlOutcome { params, log })
}

/// Recovers an individual reward from demonstrations. The game's own reward
/// (if any) is ignored.
pub fn mfirl_train(
    spec: &MfgSpec,
    demos: &DemoSet,
    arch: RewardArchitecture,
    opts: &MfirlOptions,
) -> Result<MfirlOutcome> {
    let init = RewardParams::init(arch, spec.num_states(), spec.num_actions(), opts.seed);
    mfirl_train_from(spec, demos, init, opts)
}

//! Core value types of a finite-state, finite-horizon mean field game.
//!
//! Time is indexed `t = 0..=T`. Mean field flows and policies both carry
//! `T + 1` entries; rewards are only collected for `t < T`.

use std::fmt;
use std::sync::Arc;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{argument, contract, Error, Result};

/// Tolerance used when checking that a vector lies on the probability simplex.
pub const SIMPLEX_TOL: f64 = 1e-9;

pub(crate) fn check_distribution(v: &[f64]) -> std::result::Result<(), String> {
    let mut sum = 0.0;
    for (i, &p) in v.iter().enumerate() {
        if !p.is_finite() {
            return Err(format!("entry {i} is not finite ({p})"));
        }
        if p < 0.0 {
            return Err(format!("entry {i} is negative ({p})"));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(format!("entries sum to {sum}, not 1"));
    }
    Ok(())
}

/// Draws an index from a categorical distribution given as a probability vector.
pub fn sample_categorical(probs: &[f64], rng: &mut dyn RngCore) -> usize {
    // 53 random bits mapped to [0, 1)
    let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// A distribution over states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MeanField(Vec<f64>);

impl MeanField {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(argument("mean field must have at least one state"));
        }
        check_distribution(&probs).map_err(|e| argument(format!("mean field: {e}")))?;
        Ok(Self(probs))
    }

    pub fn uniform(num_states: usize) -> Self {
        Self(vec![1.0 / num_states as f64; num_states])
    }

    pub fn point_mass(num_states: usize, state: usize) -> Self {
        let mut v = vec![0.0; num_states];
        v[state] = 1.0;
        Self(v)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn num_states(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for MeanField {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<MeanField> for Vec<f64> {
    fn from(m: MeanField) -> Self {
        m.0
    }
}

impl std::ops::Index<usize> for MeanField {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Mean fields for `t = 0..=T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MeanFieldFlow {
    fields: Vec<MeanField>,
}

impl MeanFieldFlow {
    pub fn new(fields: Vec<MeanField>) -> Result<Self> {
        if fields.len() < 2 {
            return Err(argument("a flow needs at least two time steps"));
        }
        let n = fields[0].num_states();
        if fields.iter().any(|f| f.num_states() != n) {
            return Err(contract(
                "mean fields in a flow disagree on the number of states",
            ));
        }
        Ok(Self { fields })
    }

    /// `T`, i.e. one less than the number of stored mean fields.
    pub fn horizon(&self) -> usize {
        self.fields.len() - 1
    }

    pub fn num_states(&self) -> usize {
        self.fields[0].num_states()
    }

    pub fn fields(&self) -> &[MeanField] {
        &self.fields
    }

    pub fn at(&self, t: usize) -> &MeanField {
        &self.fields[t]
    }

    /// Largest absolute entrywise difference to another flow of the same shape.
    pub fn max_abs_diff(&self, other: &MeanFieldFlow) -> f64 {
        self.fields
            .iter()
            .zip(&other.fields)
            .flat_map(|(a, b)| a.probs().iter().zip(b.probs()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

/// State-to-action distributions for a single time step, stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct PerStepPolicy {
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
}

impl PerStepPolicy {
    pub fn new(num_states: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(argument("policy needs at least one state and one action"));
        }
        if probs.len() != num_states * num_actions {
            return Err(contract(format!(
                "policy has {} entries, expected {}x{}",
                probs.len(),
                num_states,
                num_actions
            )));
        }
        for s in 0..num_states {
            check_distribution(&probs[s * num_actions..(s + 1) * num_actions])
                .map_err(|e| argument(format!("policy row {s}: {e}")))?;
        }
        Ok(Self {
            num_states,
            num_actions,
            probs,
        })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let num_states = rows.len();
        let num_actions = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != num_actions) {
            return Err(contract("policy rows have different lengths"));
        }
        Self::new(
            num_states,
            num_actions,
            rows.into_iter().flatten().collect(),
        )
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            probs: vec![1.0 / num_actions as f64; num_states * num_actions],
        }
    }

    /// Deterministic policy playing `actions[s]` in state `s`.
    pub fn deterministic(num_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * num_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= num_actions {
                return Err(argument(format!("action {a} out of range")));
            }
            probs[s * num_actions + a] = 1.0;
        }
        Self::new(actions.len(), num_actions, probs)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.num_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.num_actions..(s + 1) * self.num_actions]
    }

    /// Row-major `|S| x |A|` view.
    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }
}

impl TryFrom<Vec<Vec<f64>>> for PerStepPolicy {
    type Error = Error;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(rows)
    }
}

impl From<PerStepPolicy> for Vec<Vec<f64>> {
    fn from(p: PerStepPolicy) -> Self {
        p.probs.chunks(p.num_actions).map(<[f64]>::to_vec).collect()
    }
}

/// Per-step policies for `t = 0..=T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TimeVaryingPolicy {
    steps: Vec<PerStepPolicy>,
}

impl TimeVaryingPolicy {
    pub fn new(steps: Vec<PerStepPolicy>) -> Result<Self> {
        if steps.len() < 2 {
            return Err(argument("a time-varying policy needs at least two steps"));
        }
        let (s, a) = (steps[0].num_states, steps[0].num_actions);
        if steps
            .iter()
            .any(|p| p.num_states != s || p.num_actions != a)
        {
            return Err(contract("per-step policies disagree on their shape"));
        }
        Ok(Self { steps })
    }

    pub fn uniform(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        Self {
            steps: vec![PerStepPolicy::uniform(num_states, num_actions); horizon + 1],
        }
    }

    pub fn horizon(&self) -> usize {
        self.steps.len() - 1
    }

    pub fn steps(&self) -> &[PerStepPolicy] {
        &self.steps
    }

    pub fn at(&self, t: usize) -> &PerStepPolicy {
        &self.steps[t]
    }

    pub fn num_states(&self) -> usize {
        self.steps[0].num_states
    }

    pub fn num_actions(&self) -> usize {
        self.steps[0].num_actions
    }
}

/// `P(s' | s, a, mu)`.
///
/// Implementations must be deterministic functions of their arguments; all
/// randomness lives in [`TransitionKernel::sample`].
pub trait TransitionKernel: Send + Sync {
    /// Distribution over next states, length `|S|`.
    fn next_state_probs(&self, s: usize, a: usize, mu: &[f64]) -> Vec<f64>;

    /// Jacobian `d P(s'|s,a,mu) / d mu(k)`, row-major over `(s', k)`.
    ///
    /// The default uses central differences; environments override it with
    /// closed forms.
    fn next_state_probs_grad(&self, s: usize, a: usize, mu: &[f64]) -> Vec<f64> {
        central_jacobian(mu, |m| self.next_state_probs(s, a, m))
    }

    fn sample(&self, s: usize, a: usize, mu: &[f64], rng: &mut dyn RngCore) -> usize {
        sample_categorical(&self.next_state_probs(s, a, mu), rng)
    }
}

/// `r(s, a, mu)`. Rewards at the terminal step are zero by convention and are
/// never queried for `t = T`.
pub trait RewardOracle: Send + Sync {
    fn reward(&self, s: usize, a: usize, mu: &[f64]) -> f64;

    /// Gradient with respect to the mean field argument.
    fn reward_grad_mu(&self, s: usize, a: usize, mu: &[f64]) -> Vec<f64> {
        central_jacobian(mu, |m| vec![self.reward(s, a, m)])
    }

    fn reward_and_grad_mu(&self, s: usize, a: usize, mu: &[f64]) -> (f64, Vec<f64>) {
        (self.reward(s, a, mu), self.reward_grad_mu(s, a, mu))
    }
}

fn central_jacobian(mu: &[f64], f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    const H: f64 = 1e-6;
    let n = mu.len();
    let mut point = mu.to_vec();
    let mut cols = Vec::with_capacity(n);
    for k in 0..n {
        point[k] = mu[k] + H;
        let up = f(&point);
        point[k] = mu[k] - H;
        let down = f(&point);
        point[k] = mu[k];
        cols.push(
            up.iter()
                .zip(&down)
                .map(|(u, d)| (u - d) / (2.0 * H))
                .collect::<Vec<_>>(),
        );
    }
    let m = cols.first().map_or(0, Vec::len);
    let mut jac = vec![0.0; m * n];
    for (k, col) in cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            jac[i * n + k] = *v;
        }
    }
    jac
}

/// Definition of a finite mean field game.
#[derive(Clone)]
pub struct MfgSpec {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    discount: f64,
    initial_mean_field: MeanField,
    kernel: Arc<dyn TransitionKernel>,
    reward: Option<Arc<dyn RewardOracle>>,
}

impl fmt::Debug for MfgSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MfgSpec")
            .field("num_states", &self.num_states)
            .field("num_actions", &self.num_actions)
            .field("horizon", &self.horizon)
            .field("discount", &self.discount)
            .field("initial_mean_field", &self.initial_mean_field)
            .field("has_reward", &self.reward.is_some())
            .finish()
    }
}

impl MfgSpec {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        discount: f64,
        initial_mean_field: MeanField,
        kernel: Arc<dyn TransitionKernel>,
        reward: Option<Arc<dyn RewardOracle>>,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(argument("state and action counts must be positive"));
        }
        if horizon == 0 {
            return Err(argument("horizon must be at least 1"));
        }
        if !(discount > 0.0 && discount <= 1.0) {
            return Err(argument(format!("discount {discount} outside (0, 1]")));
        }
        if initial_mean_field.num_states() != num_states {
            return Err(contract(
                "initial mean field has the wrong number of states",
            ));
        }
        Ok(Self {
            num_states,
            num_actions,
            horizon,
            discount,
            initial_mean_field,
            kernel,
            reward,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn initial_mean_field(&self) -> &MeanField {
        &self.initial_mean_field
    }

    pub fn kernel(&self) -> &dyn TransitionKernel {
        self.kernel.as_ref()
    }

    pub fn reward(&self) -> Option<&dyn RewardOracle> {
        self.reward.as_deref()
    }

    /// The ground-truth reward, or an argument error when the game has none.
    pub fn require_reward(&self) -> Result<&dyn RewardOracle> {
        self.reward()
            .ok_or_else(|| argument("this game carries no ground-truth reward"))
    }

    pub fn with_horizon(&self, horizon: usize) -> Result<Self> {
        Self::new(
            self.num_states,
            self.num_actions,
            horizon,
            self.discount,
            self.initial_mean_field.clone(),
            self.kernel.clone(),
            self.reward.clone(),
        )
    }

    pub fn with_discount(&self, discount: f64) -> Result<Self> {
        Self::new(
            self.num_states,
            self.num_actions,
            self.horizon,
            discount,
            self.initial_mean_field.clone(),
            self.kernel.clone(),
            self.reward.clone(),
        )
    }

    pub fn with_initial_mean_field(&self, mu0: MeanField) -> Result<Self> {
        Self::new(
            self.num_states,
            self.num_actions,
            self.horizon,
            self.discount,
            mu0,
            self.kernel.clone(),
            self.reward.clone(),
        )
    }

    pub fn with_reward(&self, reward: Arc<dyn RewardOracle>) -> Self {
        Self {
            reward: Some(reward),
            ..self.clone()
        }
    }

    /// The same dynamics with the ground-truth reward removed.
    pub fn without_reward(&self) -> Self {
        Self {
            reward: None,
            ..self.clone()
        }
    }

    pub(crate) fn check_flow(&self, flow: &MeanFieldFlow) -> Result<()> {
        if flow.horizon() != self.horizon || flow.num_states() != self.num_states {
            return Err(contract(format!(
                "flow shape (T={}, |S|={}) does not match game (T={}, |S|={})",
                flow.horizon(),
                flow.num_states(),
                self.horizon,
                self.num_states
            )));
        }
        Ok(())
    }

    pub(crate) fn check_policy(&self, policy: &TimeVaryingPolicy) -> Result<()> {
        if policy.horizon() != self.horizon
            || policy.num_states() != self.num_states
            || policy.num_actions() != self.num_actions
        {
            return Err(contract(format!(
                "policy shape (T={}, |S|={}, |A|={}) does not match game (T={}, |S|={}, |A|={})",
                policy.horizon(),
                policy.num_states(),
                policy.num_actions(),
                self.horizon,
                self.num_states,
                self.num_actions
            )));
        }
        Ok(())
    }

    /// Evaluates and validates the kernel for every `(s, a)` at one mean field.
    pub fn kernel_table(&self, mu: &[f64]) -> Result<KernelTable> {
        KernelTable::build(self.kernel(), self.num_states, self.num_actions, mu)
    }
}

/// `P(. | s, a, mu)` for all `(s, a)` at a fixed `mu`, stored as `[s][a][s']`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelTable {
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
}

impl KernelTable {
    pub fn build(
        kernel: &dyn TransitionKernel,
        num_states: usize,
        num_actions: usize,
        mu: &[f64],
    ) -> Result<Self> {
        let mut probs = Vec::with_capacity(num_states * num_actions * num_states);
        for s in 0..num_states {
            for a in 0..num_actions {
                let row = kernel.next_state_probs(s, a, mu);
                if row.len() != num_states {
                    return Err(Error::KernelIntegrity {
                        state: s,
                        action: a,
                        reason: format!("returned {} entries, expected {num_states}", row.len()),
                    });
                }
                check_distribution(&row).map_err(|reason| Error::KernelIntegrity {
                    state: s,
                    action: a,
                    reason,
                })?;
                probs.extend_from_slice(&row);
            }
        }
        Ok(Self {
            num_states,
            num_actions,
            probs,
        })
    }

    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let n = self.num_states;
        let start = (s * self.num_actions + a) * n;
        &self.probs[start..start + n]
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }
}

/// Action values `Q(t, s, a)` for `t = 0..=T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionValueTable {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    values: Vec<f64>,
}

impl ActionValueTable {
    pub fn zeros(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        Self {
            horizon,
            num_states,
            num_actions,
            values: vec![0.0; (horizon + 1) * num_states * num_actions],
        }
    }

    fn offset(&self, t: usize, s: usize) -> usize {
        (t * self.num_states + s) * self.num_actions
    }

    pub fn get(&self, t: usize, s: usize, a: usize) -> f64 {
        self.values[self.offset(t, s) + a]
    }

    pub fn row(&self, t: usize, s: usize) -> &[f64] {
        let o = self.offset(t, s);
        &self.values[o..o + self.num_actions]
    }

    pub(crate) fn row_mut(&mut self, t: usize, s: usize) -> &mut [f64] {
        let o = self.offset(t, s);
        &mut self.values[o..o + self.num_actions]
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mean_field_rejects_bad_vectors() {
        assert!(MeanField::new(vec![0.5, 0.6]).is_err());
        assert!(MeanField::new(vec![-0.1, 1.1]).is_err());
        assert!(MeanField::new(vec![f64::NAN, 1.0]).is_err());
        assert!(MeanField::new(vec![]).is_err());
        assert!(MeanField::new(vec![0.25, 0.75]).is_ok());
    }

    #[test]
    fn policy_rows_must_be_distributions() {
        assert!(PerStepPolicy::new(2, 2, vec![0.5, 0.5, 0.2, 0.7]).is_err());
        assert!(PerStepPolicy::new(2, 2, vec![0.5, 0.5, 0.2]).is_err());
        let p = PerStepPolicy::from_rows(vec![vec![1.0, 0.0], vec![0.3, 0.7]]).unwrap();
        assert_eq!(p.prob(1, 1), 0.7);
        assert_eq!(p.row(0), &[1.0, 0.0]);
    }

    #[test]
    fn policy_serde_validates_rows() {
        let p: PerStepPolicy = serde_json::from_str("[[0.5,0.5],[1.0,0.0]]").unwrap();
        assert_eq!(p.num_states(), 2);
        assert!(serde_json::from_str::<PerStepPolicy>("[[0.5,0.6],[1.0,0.0]]").is_err());
        assert!(serde_json::from_str::<MeanField>("[0.5,0.6]").is_err());
    }

    #[test]
    fn categorical_sampling_respects_zero_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let i = sample_categorical(&[0.0, 0.3, 0.0, 0.7, 0.0], &mut rng);
            assert!(i == 1 || i == 3);
        }
    }

    #[test]
    fn flow_requires_consistent_shapes() {
        let a = MeanField::uniform(2);
        let b = MeanField::uniform(3);
        assert!(MeanFieldFlow::new(vec![a.clone(), b]).is_err());
        assert!(MeanFieldFlow::new(vec![a.clone()]).is_err());
        assert_eq!(MeanFieldFlow::new(vec![a.clone(), a]).unwrap().horizon(), 1);
    }
}

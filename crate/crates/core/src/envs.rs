//! Benchmark games: investment in product quality, malware spread, virus
//! infection, Rock-Paper-Scissors and Left-Right, each with its original and
//! perturbed ("new") dynamics. Also a seeded generator of synthetic games.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{argument, Error, Result};
use crate::model::{MeanField, MfgSpec, RewardOracle, TransitionKernel};

pub const DEFAULT_HORIZON: usize = 50;
pub const DEFAULT_DISCOUNT: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EnvName {
    Invest,
    Malware,
    Virus,
    Rps,
    Lr,
}

impl EnvName {
    pub const ALL: [EnvName; 5] = [
        EnvName::Invest,
        EnvName::Malware,
        EnvName::Virus,
        EnvName::Rps,
        EnvName::Lr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EnvName::Invest => "INVEST",
            EnvName::Malware => "MALWARE",
            EnvName::Virus => "VIRUS",
            EnvName::Rps => "RPS",
            EnvName::Lr => "LR",
        }
    }

    /// Whether demonstrations for this game come from the social optimum.
    pub fn is_cooperative(self) -> bool {
        matches!(self, EnvName::Virus | EnvName::Lr)
    }

    pub fn state_labels(self) -> Vec<String> {
        match self {
            EnvName::Invest | EnvName::Malware => (0..10).map(|s| s.to_string()).collect(),
            EnvName::Virus => vec!["S".into(), "I".into()],
            EnvName::Rps => vec!["R".into(), "P".into(), "S".into()],
            EnvName::Lr => vec!["C".into(), "L".into(), "R".into()],
        }
    }

    pub fn action_labels(self) -> Vec<String> {
        match self {
            EnvName::Invest => vec!["no-invest".into(), "invest".into()],
            EnvName::Malware => vec!["do-nothing".into(), "intervene".into()],
            EnvName::Virus => vec!["U".into(), "D".into()],
            EnvName::Rps => vec!["R".into(), "P".into(), "S".into()],
            EnvName::Lr => vec!["L".into(), "R".into()],
        }
    }
}

impl fmt::Display for EnvName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "INVEST" => Ok(EnvName::Invest),
            "MALWARE" => Ok(EnvName::Malware),
            "VIRUS" => Ok(EnvName::Virus),
            "RPS" => Ok(EnvName::Rps),
            "LR" => Ok(EnvName::Lr),
            other => Err(argument(format!("unknown environment '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EnvVariant {
    Original,
    New,
}

impl EnvVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvVariant::Original => "ORIGINAL",
            EnvVariant::New => "NEW",
        }
    }
}

impl fmt::Display for EnvVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "ORIGINAL" => Ok(EnvVariant::Original),
            "NEW" => Ok(EnvVariant::New),
            other => Err(argument(format!("unknown variant '{other}'"))),
        }
    }
}

/// `<mu> = sum_s s * mu(s)`.
fn average_state(mu: &[f64]) -> f64 {
    mu.iter().enumerate().map(|(s, p)| s as f64 * p).sum()
}

/// Law of `floor(x)` for `x` uniform on `[lo * n / den, hi * n / den)`, where
/// the bounds are given as integer multiples of `n / den`. Computed with
/// integer endpoints so half-integer boundaries are exact.
///
/// Returns `(k, probability)` pairs for every reachable integer `k`.
fn floor_of_uniform(n: u64, lo_num: u64, hi_num: u64, den: u64) -> Vec<(usize, f64)> {
    // x ranges over [lo_num * n / den, hi_num * n / den); scale by den.
    let lo = lo_num * n;
    let hi = hi_num * n;
    let width = (hi - lo) as f64;
    let mut out = Vec::new();
    let mut k = lo / den;
    while k * den < hi {
        let a = (k * den).max(lo);
        let b = ((k + 1) * den).min(hi);
        if b > a {
            out.push((k as usize, (b - a) as f64 / width));
        }
        k += 1;
    }
    out
}

const INVEST_STATES: usize = 10;

#[derive(Clone, Debug)]
struct InvestKernel {
    threshold: f64,
}

impl TransitionKernel for InvestKernel {
    fn next_state_probs(&self, s: usize, a: usize, mu: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; INVEST_STATES];
        if a == 0 {
            out[s] = 1.0;
            return out;
        }
        let n = (INVEST_STATES - s) as u64;
        // full improvement: floor(chi * n), chi ~ U(0, 1); halved otherwise.
        let law = if average_state(mu) < self.threshold {
            floor_of_uniform(n, 0, 1, 1)
        } else {
            floor_of_uniform(n, 0, 1, 2)
        };
        for (k, p) in law {
            out[s + k] += p;
        }
        out
    }

    fn next_state_probs_grad(&self, _s: usize, _a: usize, mu: &[f64]) -> Vec<f64> {
        // piecewise constant in mu
        vec![0.0; INVEST_STATES * mu.len()]
    }
}

#[derive(Clone, Debug)]
struct InvestReward {
    quality_weight: f64,
    crowd_cost: f64,
    invest_cost: f64,
}

impl RewardOracle for InvestReward {
    fn reward(&self, s: usize, a: usize, mu: &[f64]) -> f64 {
        self.quality_weight * s as f64 / 10.0
            - self.crowd_cost * average_state(mu)
            - self.invest_cost * a as f64
    }

    fn reward_grad_mu(&self, _s: usize, _a: usize, mu: &[f64]) -> Vec<f64> {
        (0..mu.len()).map(|k| -self.crowd_cost * k as f64).collect()
    }
}

#[derive(Clone, Debug)]
struct MalwareKernel {
    /// `chi ~ U(0.5, 1)` when set, `U(0, 1)` otherwise.
    half_floor: bool,
}

impl TransitionKernel for MalwareKernel {
    fn next_state_probs(&self, s: usize, a: usize, _mu: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; INVEST_STATES];
        if a == 1 {
            out[0] = 1.0;
            return out;
        }
        let n = (INVEST_STATES - s) as u64;
        let law = if self.half_floor {
            floor_of_uniform(n, 1, 2, 2)
        } else {
            floor_of_uniform(n, 0, 1, 1)
        };
        for (k, p) in law {
            out[s + k] += p;
        }
        out
    }

    fn next_state_probs_grad(&self, _s: usize, _a: usize, mu: &[f64]) -> Vec<f64> {
        vec![0.0; INVEST_STATES * mu.len()]
    }
}

#[derive(Clone, Debug)]
struct MalwareReward {
    risk: f64,
    intervene_cost: f64,
}

impl RewardOracle for MalwareReward {
    fn reward(&self, s: usize, a: usize, mu: &[f64]) -> f64 {
        -(self.risk + average_state(mu)) * s as f64 / 10.0 - self.intervene_cost * a as f64
    }

    fn reward_grad_mu(&self, s: usize, _a: usize, mu: &[f64]) -> Vec<f64> {
        (0..mu.len())
            .map(|k| -(k as f64) * s as f64 / 10.0)
            .collect()
    }
}

const SUSCEPTIBLE: usize = 0;
const INFECTED: usize = 1;
const GO_OUT: usize = 0;

#[derive(Clone, Debug)]
struct VirusKernel {
    /// Infection probability per unit of infected mass (0.9^2 or 0.8^2).
    contagion: f64,
    recovery: f64,
}

impl TransitionKernel for VirusKernel {
    fn next_state_probs(&self, s: usize, a: usize, mu: &[f64]) -> Vec<f64> {
        if s == INFECTED {
            return vec![self.recovery, 1.0 - self.recovery];
        }
        if a == GO_OUT {
            let p = (self.contagion * mu[INFECTED]).clamp(0.0, 1.0);
            return vec![1.0 - p, p];
        }
        vec![1.0, 0.0]
    }

    fn next_state_probs_grad(&self, s: usize, a: usize, _mu: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; 4];
        if s == SUSCEPTIBLE && a == GO_OUT {
            // rows are s' in {S, I}, columns mu(S), mu(I)
            g[1] = -self.contagion;
            g[3] = self.contagion;
        }
        g
    }
}

#[derive(Clone, Debug)]
struct VirusReward;

impl RewardOracle for VirusReward {
    fn reward(&self, s: usize, a: usize, _mu: &[f64]) -> f64 {
        let infected = if s == INFECTED { 1.0 } else { 0.0 };
        let distancing = if a == 1 { 1.0 } else { 0.0 };
        -infected - 0.5 * distancing
    }

    fn reward_grad_mu(&self, _s: usize, _a: usize, mu: &[f64]) -> Vec<f64> {
        vec![0.0; mu.len()]
    }
}

/// Next state equals the action index plus `offset`, optionally mixed with a
/// uniform draw over the reachable states.
#[derive(Clone, Debug)]
struct MoveKernel {
    num_states: usize,
    offset: usize,
    reachable: Vec<usize>,
    noise: f64,
}

impl TransitionKernel for MoveKernel {
    fn next_state_probs(&self, _s: usize, a: usize, _mu: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_states];
        out[a + self.offset] += 1.0 - self.noise;
        if self.noise > 0.0 {
            let share = self.noise / self.reachable.len() as f64;
            for &s in &self.reachable {
                out[s] += share;
            }
        }
        out
    }

    fn next_state_probs_grad(&self, _s: usize, _a: usize, mu: &[f64]) -> Vec<f64> {
        vec![0.0; self.num_states * mu.len()]
    }
}

/// Generalised Rock-Paper-Scissors payoff; depends only on the current state.
#[derive(Clone, Debug)]
struct RpsReward;

impl RpsReward {
    /// `r(s, mu) = sum_k coeff[s][k] mu(k)`.
    const COEFF: [[f64; 3]; 3] = [[0.0, -1.0, 2.0], [4.0, 0.0, -2.0], [-3.0, 6.0, 0.0]];
}

impl RewardOracle for RpsReward {
    fn reward(&self, s: usize, _a: usize, mu: &[f64]) -> f64 {
        Self::COEFF[s].iter().zip(mu).map(|(c, m)| c * m).sum()
    }

    fn reward_grad_mu(&self, s: usize, _a: usize, _mu: &[f64]) -> Vec<f64> {
        Self::COEFF[s].to_vec()
    }
}

const LR_LEFT: usize = 1;
const LR_RIGHT: usize = 2;

#[derive(Clone, Debug)]
struct LeftRightReward;

impl RewardOracle for LeftRightReward {
    fn reward(&self, s: usize, _a: usize, mu: &[f64]) -> f64 {
        match s {
            LR_LEFT => -mu[LR_LEFT],
            LR_RIGHT => -mu[LR_RIGHT],
            _ => 0.0,
        }
    }

    fn reward_grad_mu(&self, s: usize, _a: usize, mu: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; mu.len()];
        if s == LR_LEFT || s == LR_RIGHT {
            g[s] = -1.0;
        }
        g
    }
}

/// Builds one of the benchmark games with horizon 50 and discount 0.99.
pub fn make_env(name: EnvName, variant: EnvVariant) -> MfgSpec {
    let new = variant == EnvVariant::New;
    let (ns, na, mu0, kernel, reward): (
        usize,
        usize,
        MeanField,
        Arc<dyn TransitionKernel>,
        Arc<dyn RewardOracle>,
    ) = match name {
        EnvName::Invest => (
            INVEST_STATES,
            2,
            MeanField::uniform(INVEST_STATES),
            Arc::new(InvestKernel {
                threshold: if new { 5.0 } else { 4.0 },
            }),
            Arc::new(InvestReward {
                quality_weight: 0.3,
                crowd_cost: 0.2,
                invest_cost: 0.2,
            }),
        ),
        EnvName::Malware => (
            INVEST_STATES,
            2,
            MeanField::uniform(INVEST_STATES),
            Arc::new(MalwareKernel { half_floor: new }),
            Arc::new(MalwareReward {
                risk: 0.2,
                intervene_cost: 0.5,
            }),
        ),
        EnvName::Virus => (
            2,
            2,
            MeanField::uniform(2),
            Arc::new(VirusKernel {
                contagion: if new { 0.8 * 0.8 } else { 0.9 * 0.9 },
                recovery: 0.3,
            }),
            Arc::new(VirusReward),
        ),
        EnvName::Rps => (
            3,
            3,
            MeanField::uniform(3),
            Arc::new(MoveKernel {
                num_states: 3,
                offset: 0,
                reachable: vec![0, 1, 2],
                noise: if new { 0.2 } else { 0.0 },
            }),
            Arc::new(RpsReward),
        ),
        EnvName::Lr => (
            3,
            2,
            MeanField::new(vec![0.0, 0.5, 0.5]).expect("valid initial mean field"),
            Arc::new(MoveKernel {
                num_states: 3,
                offset: 1,
                reachable: vec![LR_LEFT, LR_RIGHT],
                noise: if new { 0.2 } else { 0.0 },
            }),
            Arc::new(LeftRightReward),
        ),
    };
    MfgSpec::new(
        ns,
        na,
        DEFAULT_HORIZON,
        DEFAULT_DISCOUNT,
        mu0,
        kernel,
        Some(reward),
    )
    .expect("benchmark games are well formed")
}

/// Concatenation of one-hot state, one-hot action and the mean field vector.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn feature_dim(num_states: usize, num_actions: usize) -> usize {
    2 * num_states + num_actions
}

pub fn encode_features(spec: &MfgSpec, s: usize, a: usize, mu: &[f64]) -> Result<FeatureVector> {
    if s >= spec.num_states() {
        return Err(argument(format!("state {s} out of range")));
    }
    if a >= spec.num_actions() {
        return Err(argument(format!("action {a} out of range")));
    }
    if mu.len() != spec.num_states() {
        return Err(argument("mean field has the wrong length"));
    }
    let mut v = Vec::with_capacity(feature_dim(spec.num_states(), spec.num_actions()));
    write_features(spec.num_states(), spec.num_actions(), s, a, mu, &mut v);
    Ok(FeatureVector(v))
}

pub(crate) fn write_features(
    num_states: usize,
    num_actions: usize,
    s: usize,
    a: usize,
    mu: &[f64],
    out: &mut Vec<f64>,
) {
    out.clear();
    out.extend((0..num_states).map(|i| if i == s { 1.0 } else { 0.0 }));
    out.extend((0..num_actions).map(|i| if i == a { 1.0 } else { 0.0 }));
    out.extend_from_slice(mu);
}

/// Machine-readable summary of an environment, used by the CLI.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnvDescription {
    pub name: EnvName,
    pub variant: EnvVariant,
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub discount: f64,
    pub cooperative: bool,
    pub states: Vec<String>,
    pub actions: Vec<String>,
    pub initial_mean_field: Vec<f64>,
    pub parameters: serde_json::Map<String, serde_json::Value>,
}

pub fn describe_env(name: EnvName, variant: EnvVariant) -> EnvDescription {
    use serde_json::json;
    let spec = make_env(name, variant);
    let new = variant == EnvVariant::New;
    let params = match name {
        EnvName::Invest => json!({
            "d": 0.3, "c": 0.2, "alpha": 0.2,
            "threshold_q": if new { 5.0 } else { 4.0 },
            "chi": "U(0,1)",
        }),
        EnvName::Malware => json!({
            "k": 0.2, "alpha": 0.5,
            "chi": if new { "U(0.5,1)" } else { "U(0,1)" },
        }),
        EnvName::Virus => json!({
            "infection_per_infected_mass": if new { 0.64 } else { 0.81 },
            "recovery": 0.3,
            "distancing_cost": 0.5,
            "infected_cost": 1.0,
        }),
        EnvName::Rps | EnvName::Lr => json!({
            "move_probability": if new { 0.8 } else { 1.0 },
            "random_move_probability": if new { 0.2 } else { 0.0 },
        }),
    };
    EnvDescription {
        name,
        variant,
        num_states: spec.num_states(),
        num_actions: spec.num_actions(),
        horizon: spec.horizon(),
        discount: spec.discount(),
        cooperative: name.is_cooperative(),
        states: name.state_labels(),
        actions: name.action_labels(),
        initial_mean_field: spec.initial_mean_field().probs().to_vec(),
        parameters: params.as_object().cloned().unwrap_or_default(),
    }
}

/// Kernel `P = (1 - mu(0)) K0 + mu(0) K1`, affine in the mean field.
#[derive(Clone, Debug)]
struct SyntheticKernel {
    num_states: usize,
    num_actions: usize,
    base: Vec<f64>,
    tilt: Vec<f64>,
}

impl SyntheticKernel {
    fn rows(&self, s: usize, a: usize) -> (&[f64], &[f64]) {
        let o = (s * self.num_actions + a) * self.num_states;
        (
            &self.base[o..o + self.num_states],
            &self.tilt[o..o + self.num_states],
        )
    }
}

impl TransitionKernel for SyntheticKernel {
    fn next_state_probs(&self, s: usize, a: usize, mu: &[f64]) -> Vec<f64> {
        let w = mu[0];
        let (k0, k1) = self.rows(s, a);
        k0.iter()
            .zip(k1)
            .map(|(x, y)| (1.0 - w) * x + w * y)
            .collect()
    }

    fn next_state_probs_grad(&self, s: usize, a: usize, mu: &[f64]) -> Vec<f64> {
        let n = mu.len();
        let (k0, k1) = self.rows(s, a);
        let mut g = vec![0.0; self.num_states * n];
        for sp in 0..self.num_states {
            g[sp * n] = k1[sp] - k0[sp];
        }
        g
    }
}

/// `r(s, a, mu) = base[s][a] + sum_k coupling[s][k] mu(k)`.
#[derive(Clone, Debug)]
struct SyntheticReward {
    num_states: usize,
    num_actions: usize,
    base: Vec<f64>,
    coupling: Vec<f64>,
}

impl RewardOracle for SyntheticReward {
    fn reward(&self, s: usize, a: usize, mu: &[f64]) -> f64 {
        let c = &self.coupling[s * self.num_states..(s + 1) * self.num_states];
        self.base[s * self.num_actions + a] + c.iter().zip(mu).map(|(x, m)| x * m).sum::<f64>()
    }

    fn reward_grad_mu(&self, s: usize, _a: usize, _mu: &[f64]) -> Vec<f64> {
        self.coupling[s * self.num_states..(s + 1) * self.num_states].to_vec()
    }
}

fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // sparse-ish rows so that some transitions are impossible
    let mut v: Vec<f64> = (0..n)
        .map(|_| {
            if rng.gen_bool(0.3) {
                0.0
            } else {
                rng.gen::<f64>()
            }
        })
        .collect();
    if v.iter().all(|&x| x == 0.0) {
        v[rng.gen_range(0..n)] = 1.0;
    }
    let z: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= z);
    v
}

/// A seeded random game with mean-field dependent dynamics and rewards.
pub fn synthetic_game(
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    discount: f64,
    seed: u64,
) -> Result<MfgSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = num_states * num_actions;
    let base: Vec<f64> = (0..rows)
        .flat_map(|_| random_distribution(&mut rng, num_states))
        .collect();
    let tilt: Vec<f64> = (0..rows)
        .flat_map(|_| random_distribution(&mut rng, num_states))
        .collect();
    let mu0 = MeanField::new(random_distribution(&mut rng, num_states))?;
    let reward = SyntheticReward {
        num_states,
        num_actions,
        base: (0..rows).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        coupling: (0..num_states * num_states)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
    };
    MfgSpec::new(
        num_states,
        num_actions,
        horizon,
        discount,
        mu0,
        Arc::new(SyntheticKernel {
            num_states,
            num_actions,
            base,
            tilt,
        }),
        Some(Arc::new(reward)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform10() -> Vec<f64> {
        vec![0.1; 10]
    }

    #[test]
    fn table_sizes() {
        let sizes = [
            (EnvName::Invest, 10, 2),
            (EnvName::Malware, 10, 2),
            (EnvName::Virus, 2, 2),
            (EnvName::Rps, 3, 3),
            (EnvName::Lr, 3, 2),
        ];
        for (name, s, a) in sizes {
            for variant in [EnvVariant::Original, EnvVariant::New] {
                let spec = make_env(name, variant);
                assert_eq!((spec.num_states(), spec.num_actions()), (s, a));
                assert_eq!(spec.horizon(), 50);
                assert_eq!(spec.discount(), 0.99);
            }
        }
        assert_eq!(
            make_env(EnvName::Lr, EnvVariant::Original)
                .initial_mean_field()
                .probs(),
            &[0.0, 0.5, 0.5]
        );
    }

    #[test]
    fn reward_examples() {
        let lr = make_env(EnvName::Lr, EnvVariant::Original);
        for a in 0..2 {
            assert_eq!(
                lr.require_reward().unwrap().reward(1, a, &[0.0, 0.5, 0.5]),
                -0.5
            );
        }
        let malware = make_env(EnvName::Malware, EnvVariant::Original);
        let r = malware.require_reward().unwrap().reward(9, 1, &uniform10());
        assert!((r + 4.73).abs() < 1e-12);
        let invest = make_env(EnvName::Invest, EnvVariant::Original);
        let mut at_zero = vec![0.0; 10];
        at_zero[0] = 1.0;
        let r = invest.require_reward().unwrap().reward(9, 0, &at_zero);
        assert!((r - 0.27).abs() < 1e-12);
    }

    #[test]
    fn malware_kernel_near_the_top() {
        let malware = make_env(EnvName::Malware, EnvVariant::Original);
        let p = malware.kernel().next_state_probs(8, 0, &uniform10());
        let mut expected = vec![0.0; 10];
        expected[8] = 0.5;
        expected[9] = 0.5;
        assert_eq!(p, expected);
        assert_eq!(
            malware.kernel().next_state_probs(9, 0, &uniform10())[9],
            1.0
        );
        assert_eq!(
            malware.kernel().next_state_probs(5, 1, &uniform10())[0],
            1.0
        );
    }

    #[test]
    fn floor_of_uniform_laws() {
        // floor(U(0,1) * 3 / 2): [0, 1.5) -> {0: 2/3, 1: 1/3}
        let law = floor_of_uniform(3, 0, 1, 2);
        assert_eq!(law.len(), 2);
        assert!((law[0].1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((law[1].1 - 1.0 / 3.0).abs() < 1e-15);
        // floor(U(0.5,1) * 3): [1.5, 3) -> {1: 1/3, 2: 2/3}
        let law = floor_of_uniform(3, 1, 2, 2);
        assert_eq!(law, vec![(1, 1.0 / 3.0), (2, 2.0 / 3.0)]);
        // floor(U(0,1) * 1 / 2) is always 0
        assert_eq!(floor_of_uniform(1, 0, 1, 2), vec![(0, 1.0)]);
    }

    #[test]
    fn invest_threshold_switches_law() {
        let spec = make_env(EnvName::Invest, EnvVariant::Original);
        let mut low = vec![0.0; 10];
        low[0] = 1.0;
        let mut high = vec![0.0; 10];
        high[9] = 1.0;
        let full = spec.kernel().next_state_probs(0, 1, &low);
        assert!(full.iter().all(|&p| (p - 0.1).abs() < 1e-15));
        let half = spec.kernel().next_state_probs(0, 1, &high);
        for (s, p) in half.iter().enumerate() {
            let expected = if s < 5 { 0.2 } else { 0.0 };
            assert!((p - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn features() {
        let lr = make_env(EnvName::Lr, EnvVariant::Original);
        let f = encode_features(&lr, 0, 0, &[0.0, 0.5, 0.5]).unwrap();
        assert_eq!(f.0, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.5, 0.5]);
        let virus = make_env(EnvName::Virus, EnvVariant::Original);
        let f = encode_features(&virus, 1, 1, &[1.0, 0.0]).unwrap();
        assert_eq!(f.0, vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
        let rps = make_env(EnvName::Rps, EnvVariant::Original);
        assert_eq!(
            encode_features(&rps, 2, 2, &[1.0, 0.0, 0.0])
                .unwrap()
                .0
                .len(),
            9
        );
        assert!(matches!(
            encode_features(&rps, 3, 0, &[1.0, 0.0, 0.0]),
            Err(Error::Argument(_))
        ));
        assert!(encode_features(&rps, 0, 3, &[1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn names_parse() {
        assert_eq!("lr".parse::<EnvName>().unwrap(), EnvName::Lr);
        assert_eq!("NEW".parse::<EnvVariant>().unwrap(), EnvVariant::New);
        assert!(matches!("pong".parse::<EnvName>(), Err(Error::Argument(_))));
        assert!("newer".parse::<EnvVariant>().is_err());
    }

    #[test]
    fn analytic_mean_field_gradients_match_differences() {
        let probe = [0.15, 0.05, 0.1, 0.2, 0.05, 0.1, 0.1, 0.05, 0.1, 0.1];
        for name in EnvName::ALL {
            let spec = make_env(name, EnvVariant::New);
            let mu: Vec<f64> = if spec.num_states() == 10 {
                probe.to_vec()
            } else {
                let mut m: Vec<f64> = probe[..spec.num_states()].to_vec();
                let z: f64 = m.iter().sum();
                m.iter_mut().for_each(|x| *x /= z);
                m
            };
            let reward = spec.require_reward().unwrap();
            for s in 0..spec.num_states() {
                for a in 0..spec.num_actions() {
                    let analytic = reward.reward_grad_mu(s, a, &mu);
                    for k in 0..mu.len() {
                        let mut up = mu.clone();
                        up[k] += 1e-6;
                        let mut down = mu.clone();
                        down[k] -= 1e-6;
                        let fd = (reward.reward(s, a, &up) - reward.reward(s, a, &down)) / 2e-6;
                        assert!((fd - analytic[k]).abs() < 1e-6, "{name} r grad");
                    }
                    if name != EnvName::Invest {
                        let analytic = spec.kernel().next_state_probs_grad(s, a, &mu);
                        for k in 0..mu.len() {
                            let mut up = mu.clone();
                            up[k] += 1e-6;
                            let mut down = mu.clone();
                            down[k] -= 1e-6;
                            let pu = spec.kernel().next_state_probs(s, a, &up);
                            let pd = spec.kernel().next_state_probs(s, a, &down);
                            for sp in 0..mu.len() {
                                let fd = (pu[sp] - pd[sp]) / 2e-6;
                                assert!((fd - analytic[sp * mu.len() + k]).abs() < 1e-6);
                            }
                        }
                    }
                }
            }
        }
    }
}

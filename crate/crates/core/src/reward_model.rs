//! Parameterised individual rewards `r_theta(s, a, mu)`, their parameter
//! gradients, and the Adam optimiser used by the trainers.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::envs::{feature_dim, write_features};
use crate::error::{argument, Error, Result};
use crate::mlp::Mlp;
use crate::model::{MeanField, MfgSpec, RewardOracle};

pub const HIDDEN_WIDTH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum RewardArchitecture {
    /// Inner product with the feature vector `[onehot(s), onehot(a), mu]`.
    Linear,
    /// Feature vector through two leaky-ReLU hidden layers to a scalar.
    Mlp,
}

impl std::str::FromStr for RewardArchitecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(Self::Linear),
            "mlp" => Ok(Self::Mlp),
            other => Err(argument(format!("unknown architecture '{other}'"))),
        }
    }
}

fn network(num_states: usize, num_actions: usize) -> Mlp {
    Mlp::new(vec![
        feature_dim(num_states, num_actions),
        HIDDEN_WIDTH,
        HIDDEN_WIDTH,
        1,
    ])
}

/// Parameters of an individual reward model for a game of fixed size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    pub architecture: RewardArchitecture,
    pub num_states: usize,
    pub num_actions: usize,
    pub theta: Vec<f64>,
}

impl RewardParams {
    pub fn dim_for(
        architecture: RewardArchitecture,
        num_states: usize,
        num_actions: usize,
    ) -> usize {
        match architecture {
            RewardArchitecture::Linear => feature_dim(num_states, num_actions),
            RewardArchitecture::Mlp => network(num_states, num_actions).num_params(),
        }
    }

    pub fn new(
        architecture: RewardArchitecture,
        num_states: usize,
        num_actions: usize,
        theta: Vec<f64>,
    ) -> Result<Self> {
        let d = Self::dim_for(architecture, num_states, num_actions);
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
            architecture,
            num_states,
            num_actions,
            theta,
        })
    }

    pub fn zeros(architecture: RewardArchitecture, num_states: usize, num_actions: usize) -> Self {
        let d = Self::dim_for(architecture, num_states, num_actions);
        Self::new(architecture, num_states, num_actions, vec![0.0; d]).expect("zeros are valid")
    }

    /// Zeros for the linear model, Glorot-uniform weights for the network.
    pub fn init(
        architecture: RewardArchitecture,
        num_states: usize,
        num_actions: usize,
        seed: u64,
    ) -> Self {
        match architecture {
            RewardArchitecture::Linear => Self::zeros(architecture, num_states, num_actions),
            RewardArchitecture::Mlp => Self {
                architecture,
                num_states,
                num_actions,
                theta: network(num_states, num_actions).init_params(seed),
            },
        }
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn check_spec(&self, spec: &MfgSpec) -> Result<()> {
        if spec.num_states() != self.num_states || spec.num_actions() != self.num_actions {
            return Err(Error::Contract(format!(
                "reward model is for |S|={}, |A|={} but the game has |S|={}, |A|={}",
                self.num_states,
                self.num_actions,
                spec.num_states(),
                spec.num_actions()
            )));
        }
        Ok(())
    }

    fn features(&self, s: usize, a: usize, mu: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(feature_dim(self.num_states, self.num_actions));
        write_features(self.num_states, self.num_actions, s, a, mu, &mut x);
        x
    }

    pub fn value(&self, s: usize, a: usize, mu: &[f64]) -> f64 {
        match self.architecture {
            RewardArchitecture::Linear => {
                // only three feature blocks are non-zero
                let (ns, na) = (self.num_states, self.num_actions);
                self.theta[s]
                    + self.theta[ns + a]
                    + self.theta[ns + na..]
                        .iter()
                        .zip(mu)
                        .map(|(w, m)| w * m)
                        .sum::<f64>()
            }
            RewardArchitecture::Mlp => network(self.num_states, self.num_actions)
                .forward(&self.theta, &self.features(s, a, mu)),
        }
    }

    /// Value and gradient w.r.t. every parameter.
    pub fn value_and_grad(&self, s: usize, a: usize, mu: &[f64]) -> (f64, Vec<f64>) {
        match self.architecture {
            RewardArchitecture::Linear => (self.value(s, a, mu), self.features(s, a, mu)),
            RewardArchitecture::Mlp => {
                let g = network(self.num_states, self.num_actions)
                    .backward(&self.theta, &self.features(s, a, mu));
                (g.value, g.params)
            }
        }
    }

    /// Gradient of the reward w.r.t. the mean field argument.
    pub fn grad_mu(&self, s: usize, a: usize, mu: &[f64]) -> Vec<f64> {
        self.value_and_grad_mu(s, a, mu).1
    }

    pub fn value_and_grad_mu(&self, s: usize, a: usize, mu: &[f64]) -> (f64, Vec<f64>) {
        let offset = self.num_states + self.num_actions;
        match self.architecture {
            RewardArchitecture::Linear => (self.value(s, a, mu), self.theta[offset..].to_vec()),
            RewardArchitecture::Mlp => {
                let (value, mut input) = network(self.num_states, self.num_actions)
                    .input_backward(&self.theta, &self.features(s, a, mu));
                (value, input.split_off(offset))
            }
        }
    }
}

fn check_query(
    params: &RewardParams,
    spec: &MfgSpec,
    s: usize,
    a: usize,
    mu: &MeanField,
) -> Result<()> {
    params.check_spec(spec)?;
    if s >= spec.num_states() || a >= spec.num_actions() || mu.num_states() != spec.num_states() {
        return Err(argument(format!("query (s={s}, a={a}) out of range")));
    }
    Ok(())
}

pub fn reward_forward(
    params: &RewardParams,
    spec: &MfgSpec,
    s: usize,
    a: usize,
    mu: &MeanField,
) -> Result<f64> {
    check_query(params, spec, s, a, mu)?;
    Ok(params.value(s, a, mu.probs()))
}

pub fn reward_grad(
    params: &RewardParams,
    spec: &MfgSpec,
    s: usize,
    a: usize,
    mu: &MeanField,
) -> Result<Vec<f64>> {
    check_query(params, spec, s, a, mu)?;
    Ok(params.value_and_grad(s, a, mu.probs()).1)
}

/// A learned reward plugged into the solvers as a ground-truth oracle.
#[derive(Clone, Debug)]
pub struct LearnedReward(pub RewardParams);

impl RewardOracle for LearnedReward {
    fn reward(&self, s: usize, a: usize, mu: &[f64]) -> f64 {
        self.0.value(s, a, mu)
    }

    fn reward_grad_mu(&self, s: usize, a: usize, mu: &[f64]) -> Vec<f64> {
        self.0.grad_mu(s, a, mu)
    }

    fn reward_and_grad_mu(&self, s: usize, a: usize, mu: &[f64]) -> (f64, Vec<f64>) {
        self.0.value_and_grad_mu(s, a, mu)
    }
}

/// First and second moment estimates of Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(dim: usize) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            step: 0,
        }
    }
}

/// One bias-corrected Adam step that *increases* the objective whose
/// gradient is `grad`.
pub fn adam_step(theta: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64) {
    assert_eq!(theta.len(), grad.len());
    assert_eq!(theta.len(), state.m.len());
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..theta.len() {
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * grad[i];
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        theta[i] += lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Persisted reward model (`reward.json`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardFile {
    /// `individual` for MFIRL rewards, `societal` for PLIRL rewards.
    pub kind: String,
    pub architecture: serde_json::Value,
    pub theta: Vec<f64>,
    pub num_states: usize,
    pub num_actions: usize,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

impl RewardFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn from_individual(params: &RewardParams, metadata: serde_json::Value) -> Self {
        Self {
            kind: "individual".into(),
            architecture: serde_json::to_value(params.architecture).expect("serialisable"),
            theta: params.theta.clone(),
            num_states: params.num_states,
            num_actions: params.num_actions,
            metadata,
        }
    }

    pub fn to_individual(&self) -> Result<RewardParams> {
        if self.kind != "individual" {
            return Err(argument(format!(
                "expected an individual reward, found '{}'",
                self.kind
            )));
        }
        let arch: RewardArchitecture = serde_json::from_value(self.architecture.clone())?;
        RewardParams::new(arch, self.num_states, self.num_actions, self.theta.clone())
    }
}

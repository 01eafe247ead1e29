//! Sampling-based counterparts of the exact calculus: trajectory rollouts and
//! finite-population simulation. Used to cross-check the deterministic
//! recursions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::calculus::kernel_tables;
use crate::error::{argument, Result};
use crate::model::{
    sample_categorical, MeanField, MeanFieldFlow, MfgSpec, RewardOracle, TimeVaryingPolicy,
};

/// Sample mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleMean {
    pub mean: f64,
    pub std_err: f64,
    pub samples: usize,
}

impl SampleMean {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            std_err: (var / n).sqrt(),
            samples: values.len(),
        }
    }
}

/// Monte-Carlo estimate of [`crate::calculus::expected_return`]: a single
/// agent is rolled out `episodes` times against the fixed flow.
pub fn rollout_return(
    spec: &MfgSpec,
    flow: &MeanFieldFlow,
    policy: &TimeVaryingPolicy,
    reward: &dyn RewardOracle,
    episodes: usize,
    seed: u64,
) -> Result<SampleMean> {
    if episodes == 0 {
        return Err(argument("need at least one episode"));
    }
    spec.check_flow(flow)?;
    spec.check_policy(policy)?;
    let tables = kernel_tables(spec, flow)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mu0 = spec.initial_mean_field().probs();
    let returns: Vec<f64> = (0..episodes)
        .map(|_| {
            let mut s = sample_categorical(mu0, &mut rng);
            let mut total = 0.0;
            let mut discount = 1.0;
            for t in 0..spec.horizon() {
                let a = sample_categorical(policy.at(t).row(s), &mut rng);
                total += discount * reward.reward(s, a, flow.at(t).probs());
                discount *= spec.discount();
                s = sample_categorical(tables[t].row(s, a), &mut rng);
            }
            total
        })
        .collect();
    Ok(SampleMean::from_values(&returns))
}

/// How simulated agents perceive the population when drawing transitions.
#[derive(Clone, Copy, Debug)]
pub enum Coupling<'a> {
    /// Transitions use the empirical distribution of the simulated agents.
    Empirical,
    /// Transitions use a fixed, externally supplied flow.
    Given(&'a MeanFieldFlow),
}

/// Simulates `agents` individuals all playing `policy` and returns the
/// empirical state distribution at every step.
pub fn simulate_population(
    spec: &MfgSpec,
    policy: &TimeVaryingPolicy,
    agents: usize,
    seed: u64,
    coupling: Coupling<'_>,
) -> Result<MeanFieldFlow> {
    if agents == 0 {
        return Err(argument("need at least one agent"));
    }
    spec.check_policy(policy)?;
    if let Coupling::Given(flow) = coupling {
        spec.check_flow(flow)?;
    }
    let ns = spec.num_states();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mu0 = spec.initial_mean_field().probs();
    let mut states: Vec<usize> = (0..agents)
        .map(|_| sample_categorical(mu0, &mut rng))
        .collect();
    let histogram = |states: &[usize]| {
        let mut h = vec![0.0; ns];
        for &s in states {
            h[s] += 1.0;
        }
        h.iter_mut().for_each(|x| *x /= agents as f64);
        h
    };
    let mut fields = vec![MeanField::new(histogram(&states))?];
    for t in 0..spec.horizon() {
        let perceived = match coupling {
            Coupling::Empirical => fields[t].probs().to_vec(),
            Coupling::Given(flow) => flow.at(t).probs().to_vec(),
        };
        let table = spec.kernel_table(&perceived)?;
        for s in states.iter_mut() {
            let a = sample_categorical(policy.at(t).row(*s), &mut rng);
            *s = sample_categorical(table.row(*s, a), &mut rng);
        }
        fields.push(MeanField::new(histogram(&states))?);
    }
    MeanFieldFlow::new(fields)
}

/// Total-variation distance `0.5 * sum |p - q|`.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Largest per-step total-variation distance between two flows.
pub fn max_flow_tv(a: &MeanFieldFlow, b: &MeanFieldFlow) -> f64 {
    a.fields()
        .iter()
        .zip(b.fields())
        .map(|(x, y)| total_variation(x.probs(), y.probs()))
        .fold(0.0, f64::max)
}

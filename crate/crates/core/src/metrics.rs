//! Deviation metrics between an expert and a learned equilibrium.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::model::{MeanFieldFlow, TimeVaryingPolicy};

/// Probability floor applied before taking log ratios.
pub const KL_FLOOR: f64 = 1e-10;

fn floored(p: &[f64]) -> Vec<f64> {
    let v: Vec<f64> = p.iter().map(|x| x.max(KL_FLOOR)).collect();
    let z: f64 = v.iter().sum();
    v.into_iter().map(|x| x / z).collect()
}

/// `KL(p || q)` after flooring both arguments at [`KL_FLOOR`] and renormalising.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "distributions must have equal length");
    let (p, q) = (floored(p), floored(q));
    p.iter()
        .zip(&q)
        .map(|(a, b)| a * (a / b).ln())
        .sum::<f64>()
        .max(0.0)
}

/// Cumulative KL divergence between the per-state action distributions of
/// two policies over every step `0..=T`.
pub fn dev_policy(expert: &TimeVaryingPolicy, learned: &TimeVaryingPolicy) -> Result<f64> {
    if expert.horizon() != learned.horizon()
        || expert.num_states() != learned.num_states()
        || expert.num_actions() != learned.num_actions()
    {
        return Err(contract("policies have different shapes"));
    }
    let mut total = 0.0;
    for (e, l) in expert.steps().iter().zip(learned.steps()) {
        for s in 0..e.num_states() {
            total += kl_divergence(e.row(s), l.row(s));
        }
    }
    Ok(total)
}

/// Cumulative KL divergence between two mean field flows over `0..=T`.
pub fn dev_mf(expert: &MeanFieldFlow, learned: &MeanFieldFlow) -> Result<f64> {
    if expert.horizon() != learned.horizon() || expert.num_states() != learned.num_states() {
        return Err(contract("flows have different shapes"));
    }
    Ok(expert
        .fields()
        .iter()
        .zip(learned.fields())
        .map(|(e, l)| kl_divergence(e.probs(), l.probs()))
        .sum())
}

/// One row of an evaluation sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub env: String,
    pub variant: String,
    pub algorithm: String,
    pub plays: usize,
    pub seed: u64,
    pub dev_policy: f64,
    pub dev_mf: f64,
    pub expected_return_learned: f64,
    pub expected_return_expert: f64,
}

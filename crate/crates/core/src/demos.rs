//! Expert demonstrations: sampling, JSONL persistence and the empirical
//! estimators consumed by the IRL trainers.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calculus::kernel_tables;
use crate::error::{argument, Error, Result};
use crate::model::{
    sample_categorical, MeanField, MeanFieldFlow, MfgSpec, PerStepPolicy, TimeVaryingPolicy,
};

/// One agent's states and actions for `t = 0..=T`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    #[serde(rename = "s")]
    pub states: Vec<usize>,
    #[serde(rename = "a")]
    pub actions: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoMeta {
    pub env: String,
    pub variant: String,
    pub horizon: usize,
    pub seed: u64,
    pub agents_per_play: usize,
    pub plays: usize,
    pub num_states: usize,
    pub num_actions: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DemoSet {
    pub meta: DemoMeta,
    pub trajectories: Vec<Trajectory>,
}

impl DemoSet {
    /// Checks counts, lengths and index ranges against the metadata.
    pub fn validate(&self) -> Result<()> {
        let m = &self.meta;
        let expected = m.plays * m.agents_per_play;
        if self.trajectories.len() != expected {
            return Err(Error::Integrity(format!(
                "metadata promises {} plays x {} agents = {expected} trajectories, found {}",
                m.plays,
                m.agents_per_play,
                self.trajectories.len()
            )));
        }
        for (j, tr) in self.trajectories.iter().enumerate() {
            if tr.states.len() != m.horizon + 1 || tr.actions.len() != m.horizon + 1 {
                return Err(Error::Integrity(format!(
                    "trajectory {j} has {} states and {} actions, expected {}",
                    tr.states.len(),
                    tr.actions.len(),
                    m.horizon + 1
                )));
            }
            if tr.states.iter().any(|&s| s >= m.num_states)
                || tr.actions.iter().any(|&a| a >= m.num_actions)
            {
                return Err(Error::Integrity(format!(
                    "trajectory {j} has an out-of-range index"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Demonstrations of the `k`-th game play only.
    pub fn play(&self, k: usize) -> Result<DemoSet> {
        if k >= self.meta.plays {
            return Err(argument(format!(
                "play {k} out of range ({} plays)",
                self.meta.plays
            )));
        }
        let n = self.meta.agents_per_play;
        Ok(DemoSet {
            meta: DemoMeta {
                plays: 1,
                ..self.meta.clone()
            },
            trajectories: self.trajectories[k * n..(k + 1) * n].to_vec(),
        })
    }

    /// The first `plays` game plays.
    pub fn first_plays(&self, plays: usize) -> Result<DemoSet> {
        if plays == 0 || plays > self.meta.plays {
            return Err(argument(format!(
                "cannot take {plays} of {} plays",
                self.meta.plays
            )));
        }
        Ok(DemoSet {
            meta: DemoMeta {
                plays,
                ..self.meta.clone()
            },
            trajectories: self.trajectories[..plays * self.meta.agents_per_play].to_vec(),
        })
    }

    pub(crate) fn check_spec(&self, spec: &MfgSpec) -> Result<()> {
        let m = &self.meta;
        if m.horizon != spec.horizon()
            || m.num_states != spec.num_states()
            || m.num_actions != spec.num_actions()
        {
            return Err(Error::Contract(format!(
                "demonstrations (T={}, |S|={}, |A|={}) do not match the game (T={}, |S|={}, |A|={})",
                m.horizon,
                m.num_states,
                m.num_actions,
                spec.horizon(),
                spec.num_states(),
                spec.num_actions()
            )));
        }
        Ok(())
    }
}

/// Labels recorded in the demo metadata.
#[derive(Clone, Debug, Default)]
pub struct DemoLabels {
    pub env: String,
    pub variant: String,
}

/// Samples `plays * agents` independent trajectories. Agents transition against
/// the given flow, so they do not perturb it. Trajectory `j` draws from its own
/// stream of a generator seeded by `seed`, so the output does not depend on
/// sampling order.
pub fn sample_trajectories(
    spec: &MfgSpec,
    flow: &MeanFieldFlow,
    policy: &TimeVaryingPolicy,
    plays: usize,
    agents: usize,
    seed: u64,
    labels: &DemoLabels,
) -> Result<DemoSet> {
    if plays == 0 || agents == 0 {
        return Err(argument("plays and agents must be positive"));
    }
    spec.check_flow(flow).map_err(|e| argument(e.to_string()))?;
    spec.check_policy(policy)
        .map_err(|e| argument(e.to_string()))?;
    let horizon = spec.horizon();
    let tables = kernel_tables(spec, flow)?;
    let mu0 = spec.initial_mean_field().probs();
    let trajectories = (0..plays * agents)
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(j as u64);
            let mut states = Vec::with_capacity(horizon + 1);
            let mut actions = Vec::with_capacity(horizon + 1);
            let mut s = sample_categorical(mu0, &mut rng);
            for t in 0..=horizon {
                let a = sample_categorical(policy.at(t).row(s), &mut rng);
                states.push(s);
                actions.push(a);
                if t < horizon {
                    s = sample_categorical(tables[t].row(s, a), &mut rng);
                }
            }
            Trajectory { states, actions }
        })
        .collect();
    Ok(DemoSet {
        meta: DemoMeta {
            env: labels.env.clone(),
            variant: labels.variant.clone(),
            horizon,
            seed,
            agents_per_play: agents,
            plays,
            num_states: spec.num_states(),
            num_actions: spec.num_actions(),
        },
        trajectories,
    })
}

fn state_counts(demos: &DemoSet) -> Vec<Vec<usize>> {
    let m = &demos.meta;
    let mut counts = vec![vec![0usize; m.num_states]; m.horizon + 1];
    for tr in &demos.trajectories {
        for (t, &s) in tr.states.iter().enumerate() {
            counts[t][s] += 1;
        }
    }
    counts
}

/// Frequency estimate of the mean field at every step.
pub fn estimate_mean_field_flow(demos: &DemoSet) -> Result<MeanFieldFlow> {
    if demos.is_empty() {
        return Err(argument("cannot estimate a flow from zero trajectories"));
    }
    let total = demos.len() as f64;
    let fields = state_counts(demos)
        .into_iter()
        .map(|row| MeanField::new(row.into_iter().map(|c| c as f64 / total).collect()))
        .collect::<Result<Vec<_>>>()?;
    MeanFieldFlow::new(fields)
}

/// Frequency estimate of the policy; rows of unvisited states are uniform.
pub fn estimate_empirical_policy(demos: &DemoSet) -> Result<TimeVaryingPolicy> {
    if demos.is_empty() {
        return Err(argument("cannot estimate a policy from zero trajectories"));
    }
    let m = &demos.meta;
    let (ns, na) = (m.num_states, m.num_actions);
    let mut counts = vec![vec![0usize; ns * na]; m.horizon + 1];
    for tr in &demos.trajectories {
        for (t, (&s, &a)) in tr.states.iter().zip(&tr.actions).enumerate() {
            counts[t][s * na + a] += 1;
        }
    }
    let steps = counts
        .into_iter()
        .map(|c| {
            let mut probs = Vec::with_capacity(ns * na);
            for s in 0..ns {
                let row = &c[s * na..(s + 1) * na];
                let n: usize = row.iter().sum();
                if n == 0 {
                    probs.extend(std::iter::repeat_n(1.0 / na as f64, na));
                } else {
                    probs.extend(row.iter().map(|&k| k as f64 / n as f64));
                }
            }
            PerStepPolicy::new(ns, na, probs)
        })
        .collect::<Result<Vec<_>>>()?;
    TimeVaryingPolicy::new(steps)
}

/// Population-level estimates of one set of demonstrations.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalEstimates {
    pub mean_field_flow: MeanFieldFlow,
    pub policy: TimeVaryingPolicy,
}

impl EmpiricalEstimates {
    pub fn from_demos(demos: &DemoSet) -> Result<Self> {
        Ok(Self {
            mean_field_flow: estimate_mean_field_flow(demos)?,
            policy: estimate_empirical_policy(demos)?,
        })
    }

    /// One estimate per game play: each play is a single sample of the
    /// population's flow and policy.
    pub fn per_play(demos: &DemoSet) -> Result<Vec<Self>> {
        (0..demos.meta.plays)
            .map(|k| Self::from_demos(&demos.play(k)?))
            .collect()
    }
}

pub fn save_demos(demos: &DemoSet, path: &Path) -> Result<()> {
    demos.validate()?;
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, &demos.meta)?;
    out.write_all(b"\n")?;
    for tr in &demos.trajectories {
        serde_json::to_writer(&mut out, tr)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_demos(path: &Path) -> Result<DemoSet> {
    let reader = BufReader::new(File::open(path)?);
    let mut meta: Option<DemoMeta> = None;
    let mut trajectories = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| Error::Parse {
            line: lineno,
            message: e.to_string(),
        };
        match meta {
            None => meta = Some(serde_json::from_str(&line).map_err(parse_err)?),
            Some(_) => trajectories.push(serde_json::from_str(&line).map_err(parse_err)?),
        }
    }
    let meta = meta.ok_or_else(|| Error::Integrity("demo file is empty".into()))?;
    let demos = DemoSet { meta, trajectories };
    demos.validate()?;
    Ok(demos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::propagate_flow;
    use crate::envs::{make_env, EnvName, EnvVariant};
    use crate::simulate::max_flow_tv;

    fn demo(states: Vec<Vec<usize>>, ns: usize) -> DemoSet {
        let horizon = states[0].len() - 1;
        let trajectories: Vec<Trajectory> = states
            .into_iter()
            .map(|s| Trajectory {
                actions: vec![0; s.len()],
                states: s,
            })
            .collect();
        DemoSet {
            meta: DemoMeta {
                env: "test".into(),
                variant: "original".into(),
                horizon,
                seed: 0,
                agents_per_play: trajectories.len(),
                plays: 1,
                num_states: ns,
                num_actions: 2,
            },
            trajectories,
        }
    }

    #[test]
    fn flow_estimate_counts_frequencies() {
        let d = demo(vec![vec![1, 0], vec![1, 1]], 3);
        let flow = estimate_mean_field_flow(&d).unwrap();
        assert_eq!(flow.at(0).probs(), &[0.0, 1.0, 0.0]);
        assert_eq!(flow.at(1).probs(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn unvisited_states_get_uniform_rows() {
        let d = demo(vec![vec![1, 0], vec![1, 1]], 3);
        let pi = estimate_empirical_policy(&d).unwrap();
        assert_eq!(pi.at(0).row(0), &[0.5, 0.5]);
        assert_eq!(pi.at(0).row(1), &[1.0, 0.0]);
    }

    #[test]
    fn empty_demos_are_rejected() {
        let mut d = demo(vec![vec![0, 0]], 2);
        d.trajectories.clear();
        assert!(matches!(
            estimate_mean_field_flow(&d),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            estimate_empirical_policy(&d),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn deterministic_game_has_two_distinct_trajectories() {
        let spec = make_env(EnvName::Lr, EnvVariant::Original)
            .with_horizon(6)
            .unwrap();
        let left = PerStepPolicy::deterministic(2, &[0, 0, 0]).unwrap();
        let policy = TimeVaryingPolicy::new(vec![left; 7]).unwrap();
        let flow = propagate_flow(&spec, &policy).unwrap();
        let d =
            sample_trajectories(&spec, &flow, &policy, 2, 50, 3, &DemoLabels::default()).unwrap();
        let mut distinct: Vec<&Trajectory> = d.trajectories.iter().collect();
        distinct.sort_by(|a, b| a.states.cmp(&b.states));
        distinct.dedup();
        assert_eq!(distinct.len(), 2);
        let pi_hat = estimate_empirical_policy(&d).unwrap();
        for t in 0..=6 {
            for s in 1..3 {
                if flow.at(t)[s] > 0.0 {
                    assert_eq!(pi_hat.at(t).row(s), &[1.0, 0.0]);
                }
            }
        }
    }

    #[test]
    fn flow_estimate_converges_to_the_flow() {
        let spec = make_env(EnvName::Virus, EnvVariant::Original)
            .with_horizon(10)
            .unwrap();
        let policy = TimeVaryingPolicy::uniform(10, 2, 2);
        let flow = propagate_flow(&spec, &policy).unwrap();
        let d = sample_trajectories(&spec, &flow, &policy, 1, 100_000, 1, &DemoLabels::default())
            .unwrap();
        assert!(max_flow_tv(&estimate_mean_field_flow(&d).unwrap(), &flow) <= 0.02);
        let pi_hat = estimate_empirical_policy(&d).unwrap();
        for t in 0..=10 {
            for s in 0..2 {
                if flow.at(t)[s] >= 0.05 {
                    let tv =
                        crate::simulate::total_variation(pi_hat.at(t).row(s), policy.at(t).row(s));
                    assert!(tv <= 0.03);
                }
            }
        }
    }

    #[test]
    fn save_load_round_trip_and_truncation() {
        let spec = make_env(EnvName::Rps, EnvVariant::Original)
            .with_horizon(4)
            .unwrap();
        let policy = TimeVaryingPolicy::uniform(4, 3, 3);
        let flow = propagate_flow(&spec, &policy).unwrap();
        let labels = DemoLabels {
            env: "RPS".into(),
            variant: "original".into(),
        };
        let d = sample_trajectories(&spec, &flow, &policy, 2, 5, 9, &labels).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demos.jsonl");
        save_demos(&d, &path).unwrap();
        assert_eq!(load_demos(&path).unwrap(), d);

        let text = std::fs::read_to_string(&path).unwrap();
        let truncated: Vec<&str> = text.lines().take(4).collect();
        std::fs::write(&path, truncated.join("\n")).unwrap();
        assert!(matches!(load_demos(&path), Err(Error::Integrity(_))));

        std::fs::write(
            &path,
            format!("{}\n{{\"s\": [0,\n", text.lines().next().unwrap()),
        )
        .unwrap();
        assert!(matches!(
            load_demos(&path),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn sampling_is_reproducible() {
        let spec = make_env(EnvName::Malware, EnvVariant::Original)
            .with_horizon(5)
            .unwrap();
        let policy = TimeVaryingPolicy::uniform(5, 10, 2);
        let flow = propagate_flow(&spec, &policy).unwrap();
        let a =
            sample_trajectories(&spec, &flow, &policy, 3, 10, 42, &DemoLabels::default()).unwrap();
        let b =
            sample_trajectories(&spec, &flow, &policy, 3, 10, 42, &DemoLabels::default()).unwrap();
        let c =
            sample_trajectories(&spec, &flow, &policy, 3, 10, 43, &DemoLabels::default()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(EmpiricalEstimates::per_play(&a).unwrap().len(), 3);
    }
}

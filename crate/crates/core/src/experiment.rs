//! The evaluation pipeline: expert on the original dynamics, demonstrations,
//! reward recovery, re-solve under the recovered reward on the requested
//! dynamics variant, and deviation metrics against the ground-truth social
//! optimum of that variant.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::calculus::{expected_return, exploitability};
use crate::demos::{sample_trajectories, DemoLabels, DemoSet, EmpiricalEstimates};
use crate::envs::{make_env, EnvName, EnvVariant};
use crate::error::{argument, Error, Result};
use crate::metrics::{dev_mf, dev_policy, MetricsReport};
use crate::mfirl::{mfirl_train, MfirlOptions};
use crate::model::MfgSpec;
use crate::plirl::{plirl_equilibrium, plirl_train, PlirlOptions, SocietalRewardModel};
use crate::reward_model::{LearnedReward, RewardArchitecture, RewardParams};
use crate::solvers::{
    solve_mfne_fixed_point, solve_mfso, EquilibriumResult, FixedPointOptions, MfsoOptions,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Mfirl,
    Plirl,
    /// The ground-truth reward stands in for a learned one.
    Oracle,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Mfirl => "mfirl",
            Algorithm::Plirl => "plirl",
            Algorithm::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mfirl" => Ok(Algorithm::Mfirl),
            "plirl" => Ok(Algorithm::Plirl),
            "oracle" => Ok(Algorithm::Oracle),
            other => Err(argument(format!("unknown algorithm '{other}'"))),
        }
    }
}

/// How the demonstrating expert is computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertSolver {
    /// Social optimum for cooperative games, fixed point otherwise.
    #[default]
    Auto,
    Mfso,
    Mfne,
}

impl ExpertSolver {
    pub fn as_str(self) -> &'static str {
        match self {
            ExpertSolver::Auto => "auto",
            ExpertSolver::Mfso => "mfso",
            ExpertSolver::Mfne => "mfne",
        }
    }

    pub fn resolve(self, env: EnvName) -> ExpertSolver {
        match self {
            ExpertSolver::Auto if env.is_cooperative() => ExpertSolver::Mfso,
            ExpertSolver::Auto => ExpertSolver::Mfne,
            other => other,
        }
    }
}

impl FromStr for ExpertSolver {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "auto" => Ok(ExpertSolver::Auto),
            "mfso" => Ok(ExpertSolver::Mfso),
            "mfne" => Ok(ExpertSolver::Mfne),
            other => Err(argument(format!("unknown expert solver '{other}'"))),
        }
    }
}

/// Fixed-point options used for experts of non-cooperative games: Boltzmann
/// best responses at `beta = 1` with half damping.
pub fn default_expert_fixed_point() -> FixedPointOptions {
    FixedPointOptions {
        max_iters: 2000,
        beta_soft: Some(1.0),
        damping: 0.5,
        ..FixedPointOptions::default()
    }
}

/// Solves for the expert of `spec`. A fixed point that fails to converge is
/// an error, since its pair is not an equilibrium.
pub fn solve_expert(
    spec: &MfgSpec,
    solver: ExpertSolver,
    env: EnvName,
    fixed_point: &FixedPointOptions,
    mfso: &MfsoOptions,
) -> Result<EquilibriumResult> {
    match solver.resolve(env) {
        ExpertSolver::Mfso => solve_mfso(spec, mfso),
        _ => {
            let res = solve_mfne_fixed_point(spec, fixed_point)?;
            if !res.converged {
                return Err(Error::Divergence(format!(
                    "expert fixed point did not converge in {} iterations (last mse {:e})",
                    res.iterations,
                    res.history.last().copied().unwrap_or(f64::NAN)
                )));
            }
            Ok(res)
        }
    }
}

/// Persisted expert (`expert.json`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertFile {
    pub env: EnvName,
    pub variant: EnvVariant,
    pub solver: ExpertSolver,
    pub horizon: usize,
    pub discount: f64,
    pub options: serde_json::Value,
    pub result: EquilibriumResult,
}

impl ExpertFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        file.spec()?.check_flow(&file.result.flow)?;
        Ok(file)
    }

    /// The game the expert was solved on.
    pub fn spec(&self) -> Result<MfgSpec> {
        make_env(self.env, self.variant)
            .with_horizon(self.horizon)?
            .with_discount(self.discount)
    }
}

mod arch_name {
    use super::RewardArchitecture;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(a: &RewardArchitecture, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(match a {
            RewardArchitecture::Linear => "linear",
            RewardArchitecture::Mlp => "mlp",
        })
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<RewardArchitecture, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn default_variants() -> Vec<EnvVariant> {
    vec![EnvVariant::Original]
}

fn default_agents() -> usize {
    100
}

fn default_architecture() -> RewardArchitecture {
    RewardArchitecture::Mlp
}

/// One sweep, stored as a single JSON document. Every omitted option takes
/// its library default; the per-row seed overrides the trainers' seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub envs: Vec<EnvName>,
    #[serde(default = "default_variants")]
    pub variants: Vec<EnvVariant>,
    pub algorithms: Vec<Algorithm>,
    pub plays: Vec<usize>,
    #[serde(default = "default_agents")]
    pub agents: usize,
    pub seeds: Vec<u64>,
    /// Overrides the games' default horizon.
    #[serde(default)]
    pub horizon: Option<usize>,
    #[serde(default)]
    pub expert: ExpertSolver,
    #[serde(default = "default_expert_fixed_point")]
    pub expert_fixed_point: FixedPointOptions,
    /// Used for the expert, the ground-truth reference and every re-solve.
    #[serde(default)]
    pub mfso: MfsoOptions,
    #[serde(default = "default_architecture", with = "arch_name")]
    pub architecture: RewardArchitecture,
    #[serde(default)]
    pub mfirl: MfirlOptions,
    #[serde(default)]
    pub plirl: PlirlOptions,
}

impl ExperimentConfig {
    pub fn new(
        envs: Vec<EnvName>,
        algorithms: Vec<Algorithm>,
        plays: Vec<usize>,
        seeds: Vec<u64>,
    ) -> Self {
        Self {
            envs,
            variants: default_variants(),
            algorithms,
            plays,
            agents: default_agents(),
            seeds,
            horizon: None,
            expert: ExpertSolver::Auto,
            expert_fixed_point: default_expert_fixed_point(),
            mfso: MfsoOptions::default(),
            architecture: default_architecture(),
            mfirl: MfirlOptions::default(),
            plirl: PlirlOptions::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.envs.is_empty()
            || self.variants.is_empty()
            || self.algorithms.is_empty()
            || self.plays.is_empty()
            || self.seeds.is_empty()
        {
            return Err(argument(
                "every sweep (envs, variants, algorithms, plays, seeds) must be nonempty",
            ));
        }
        if self.plays.contains(&0) || self.agents == 0 {
            return Err(argument("plays and agents must be positive"));
        }
        if self.horizon == Some(0) {
            return Err(argument("horizon must be positive"));
        }
        let horizon = self.horizon.unwrap_or(crate::envs::DEFAULT_HORIZON);
        self.mfirl.validate(horizon)?;
        Ok(())
    }

    fn spec(&self, env: EnvName, variant: EnvVariant) -> Result<MfgSpec> {
        let spec = make_env(env, variant);
        match self.horizon {
            Some(h) => spec.with_horizon(h),
            None => Ok(spec),
        }
    }

    /// Row keys in the order the sweep visits them.
    pub fn row_keys(&self) -> Vec<RowKey> {
        let mut keys = Vec::new();
        for &env in &self.envs {
            for &algorithm in &self.algorithms {
                for &plays in &self.plays {
                    for &seed in &self.seeds {
                        for &variant in &self.variants {
                            keys.push(RowKey {
                                env: env.as_str().into(),
                                variant: variant.as_str().into(),
                                algorithm: algorithm.as_str().into(),
                                plays,
                                seed,
                            });
                        }
                    }
                }
            }
        }
        keys
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RowKey {
    pub env: String,
    pub variant: String,
    pub algorithm: String,
    pub plays: usize,
    pub seed: u64,
}

/// One line of the results CSV. Metrics are NaN when `error` is nonempty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub env: String,
    pub variant: String,
    pub algorithm: String,
    pub plays: usize,
    pub seed: u64,
    pub dev_policy: f64,
    pub dev_mf: f64,
    pub return_learned: f64,
    pub return_expert: f64,
    pub error: String,
}

impl ResultRow {
    pub fn key(&self) -> RowKey {
        RowKey {
            env: self.env.clone(),
            variant: self.variant.clone(),
            algorithm: self.algorithm.clone(),
            plays: self.plays,
            seed: self.seed,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_empty()
    }

    pub fn return_gap(&self) -> f64 {
        (self.return_learned - self.return_expert).abs()
    }

    fn failed(key: &RowKey, error: &str) -> Self {
        Self {
            env: key.env.clone(),
            variant: key.variant.clone(),
            algorithm: key.algorithm.clone(),
            plays: key.plays,
            seed: key.seed,
            dev_policy: f64::NAN,
            dev_mf: f64::NAN,
            return_learned: f64::NAN,
            return_expert: f64::NAN,
            error: error.into(),
        }
    }

    pub fn report(&self) -> Option<MetricsReport> {
        self.is_ok().then(|| MetricsReport {
            env: self.env.clone(),
            variant: self.variant.clone(),
            algorithm: self.algorithm.clone(),
            plays: self.plays,
            seed: self.seed,
            dev_policy: self.dev_policy,
            dev_mf: self.dev_mf,
            expected_return_learned: self.return_learned,
            expected_return_expert: self.return_expert,
        })
    }
}

/// Extra per-row information that does not belong in the CSV.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RowDiagnostics {
    pub env: String,
    pub variant: String,
    pub algorithm: String,
    pub plays: usize,
    pub seed: u64,
    /// Last training objective (MFIRL) or margin (PLIRL).
    pub final_training_value: Option<f64>,
    /// Exploitability of the re-solved pair under the ground-truth reward.
    pub learned_exploitability: Option<f64>,
    /// Fixed point under the learned individual reward, against the
    /// ground-truth fixed point of the same variant.
    pub mfne_converged: Option<bool>,
    pub mfne_iterations: Option<usize>,
    pub mfne_dev_mf: Option<f64>,
    pub mfne_dev_policy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowOutcome {
    pub row: ResultRow,
    pub diagnostics: RowDiagnostics,
}

/// A recovered reward, ready to be re-solved.
#[derive(Clone, Debug)]
pub enum LearnedModel {
    Individual(RewardParams),
    Societal(SocietalRewardModel),
    /// The game's own reward.
    Truth,
}

/// Metrics of one re-solved pair against the ground-truth optimum.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub dev_policy: f64,
    pub dev_mf: f64,
    pub return_learned: f64,
    pub return_expert: f64,
    /// The social optimum under the learned reward.
    pub learned: EquilibriumResult,
}

/// Re-solves the social optimum of `spec`'s dynamics under `model` and scores
/// it against `truth` (the optimum under the game's own reward). Both returns
/// are measured with the game's own reward.
pub fn evaluate_learned(
    spec: &MfgSpec,
    truth: &EquilibriumResult,
    model: &LearnedModel,
    mfso: &MfsoOptions,
) -> Result<Evaluation> {
    let reward = spec.require_reward()?;
    let learned = match model {
        LearnedModel::Truth => solve_mfso(spec, mfso)?,
        LearnedModel::Individual(params) => {
            params.check_spec(spec)?;
            let mut res = solve_mfso(
                &spec.with_reward(Arc::new(LearnedReward(params.clone()))),
                mfso,
            )?;
            res.exploitability = Some(exploitability(spec, &res.flow, &res.policy, reward)?);
            res
        }
        LearnedModel::Societal(model) => plirl_equilibrium(model, spec, mfso)?,
    };
    Ok(Evaluation {
        dev_policy: dev_policy(&truth.policy, &learned.policy)?,
        dev_mf: dev_mf(&truth.flow, &learned.flow)?,
        return_learned: expected_return(spec, &learned.flow, &learned.policy, reward)?,
        return_expert: expected_return(spec, &truth.flow, &truth.policy, reward)?,
        learned,
    })
}

type Cached<T> = std::result::Result<T, String>;

/// Lazily computed, shared stages of a sweep.
struct Stages<'a> {
    config: &'a ExperimentConfig,
    experts: HashMap<EnvName, Cached<(MfgSpec, EquilibriumResult)>>,
    truths: HashMap<(EnvName, EnvVariant), Cached<(MfgSpec, EquilibriumResult)>>,
    truth_fixed_points: HashMap<(EnvName, EnvVariant), Cached<EquilibriumResult>>,
    demos: HashMap<(EnvName, u64), Cached<DemoSet>>,
}

impl<'a> Stages<'a> {
    fn new(config: &'a ExperimentConfig) -> Self {
        Self {
            config,
            experts: HashMap::new(),
            truths: HashMap::new(),
            truth_fixed_points: HashMap::new(),
            demos: HashMap::new(),
        }
    }

    fn expert(&mut self, env: EnvName) -> Cached<(MfgSpec, EquilibriumResult)> {
        let cfg = self.config;
        self.experts
            .entry(env)
            .or_insert_with(|| {
                let spec = cfg
                    .spec(env, EnvVariant::Original)
                    .map_err(|e| e.to_string())?;
                let res = solve_expert(&spec, cfg.expert, env, &cfg.expert_fixed_point, &cfg.mfso)
                    .map_err(|e| format!("expert: {e}"))?;
                Ok((spec, res))
            })
            .clone()
    }

    fn truth(&mut self, env: EnvName, variant: EnvVariant) -> Cached<(MfgSpec, EquilibriumResult)> {
        let cfg = self.config;
        self.truths
            .entry((env, variant))
            .or_insert_with(|| {
                let spec = cfg.spec(env, variant).map_err(|e| e.to_string())?;
                let res = solve_mfso(&spec, &cfg.mfso)
                    .map_err(|e| format!("ground-truth optimum: {e}"))?;
                Ok((spec, res))
            })
            .clone()
    }

    fn truth_fixed_point(
        &mut self,
        env: EnvName,
        variant: EnvVariant,
    ) -> Cached<EquilibriumResult> {
        let cfg = self.config;
        self.truth_fixed_points
            .entry((env, variant))
            .or_insert_with(|| {
                let spec = cfg.spec(env, variant).map_err(|e| e.to_string())?;
                solve_mfne_fixed_point(&spec, &cfg.expert_fixed_point).map_err(|e| e.to_string())
            })
            .clone()
    }

    /// Demos for the largest play count; smaller counts use a prefix.
    fn demos(&mut self, env: EnvName, seed: u64, plays: usize) -> Cached<DemoSet> {
        let max_plays = self.config.plays.iter().copied().max().unwrap_or(plays);
        let agents = self.config.agents;
        let expert = self.expert(env);
        let full = self
            .demos
            .entry((env, seed))
            .or_insert_with(|| {
                let (spec, res) = expert?;
                let labels = DemoLabels {
                    env: env.as_str().into(),
                    variant: EnvVariant::Original.as_str().into(),
                };
                sample_trajectories(
                    &spec,
                    &res.flow,
                    &res.policy,
                    max_plays,
                    agents,
                    seed,
                    &labels,
                )
                .map_err(|e| format!("sampling: {e}"))
            })
            .clone()?;
        full.first_plays(plays).map_err(|e| e.to_string())
    }

    fn learn(
        &mut self,
        env: EnvName,
        algorithm: Algorithm,
        plays: usize,
        seed: u64,
    ) -> Cached<(LearnedModel, f64)> {
        if algorithm == Algorithm::Oracle {
            return Ok((LearnedModel::Truth, f64::NAN));
        }
        let demos = self.demos(env, seed, plays)?;
        let (spec, _) = self.expert(env)?;
        let cfg = self.config;
        match algorithm {
            Algorithm::Mfirl => {
                let opts = MfirlOptions {
                    seed,
                    ..cfg.mfirl.clone()
                };
                let out = mfirl_train(&spec.without_reward(), &demos, cfg.architecture, &opts)
                    .map_err(|e| format!("mfirl: {e}"))?;
                let last = out.log.last().map_or(f64::NAN, |l| l.objective);
                Ok((LearnedModel::Individual(out.params), last))
            }
            Algorithm::Plirl => {
                let opts = PlirlOptions {
                    seed,
                    ..cfg.plirl.clone()
                };
                let estimates = EmpiricalEstimates::per_play(&demos).map_err(|e| e.to_string())?;
                let out = plirl_train(&estimates, &spec.without_reward(), &opts)
                    .map_err(|e| format!("plirl: {e}"))?;
                let last = out.log.last().map_or(f64::NAN, |l| l.margin);
                Ok((LearnedModel::Societal(out.model), last))
            }
            Algorithm::Oracle => unreachable!(),
        }
    }

    fn evaluate(
        &mut self,
        (model, last): &(LearnedModel, f64),
        env: EnvName,
        variant: EnvVariant,
        key: &RowKey,
    ) -> Cached<RowOutcome> {
        let (spec, truth) = self.truth(env, variant)?;
        let cfg = self.config;
        let eval = if matches!(model, LearnedModel::Truth) {
            // re-solving would repeat the reference computation exactly
            let reward = spec.require_reward().map_err(|e| e.to_string())?;
            let ret = expected_return(&spec, &truth.flow, &truth.policy, reward)
                .map_err(|e| e.to_string())?;
            Evaluation {
                dev_policy: dev_policy(&truth.policy, &truth.policy).map_err(|e| e.to_string())?,
                dev_mf: dev_mf(&truth.flow, &truth.flow).map_err(|e| e.to_string())?,
                return_learned: ret,
                return_expert: ret,
                learned: truth.clone(),
            }
        } else {
            evaluate_learned(&spec, &truth, model, &cfg.mfso)
                .map_err(|e| format!("re-solve: {e}"))?
        };
        let mut diagnostics = RowDiagnostics {
            env: key.env.clone(),
            variant: key.variant.clone(),
            algorithm: key.algorithm.clone(),
            plays: key.plays,
            seed: key.seed,
            final_training_value: last.is_finite().then_some(*last),
            learned_exploitability: eval.learned.exploitability,
            ..RowDiagnostics::default()
        };
        if let LearnedModel::Individual(params) = model {
            let learned_spec = spec.with_reward(Arc::new(LearnedReward(params.clone())));
            if let Ok(fp) = solve_mfne_fixed_point(&learned_spec, &cfg.expert_fixed_point) {
                if let Ok(reference) = self.truth_fixed_point(env, variant) {
                    diagnostics.mfne_dev_mf = dev_mf(&reference.flow, &fp.flow).ok();
                    diagnostics.mfne_dev_policy = dev_policy(&reference.policy, &fp.policy).ok();
                }
                diagnostics.mfne_converged = Some(fp.converged);
                diagnostics.mfne_iterations = Some(fp.iterations);
            }
        }
        Ok(RowOutcome {
            row: ResultRow {
                env: key.env.clone(),
                variant: key.variant.clone(),
                algorithm: key.algorithm.clone(),
                plays: key.plays,
                seed: key.seed,
                dev_policy: eval.dev_policy,
                dev_mf: eval.dev_mf,
                return_learned: eval.return_learned,
                return_expert: eval.return_expert,
                error: String::new(),
            },
            diagnostics,
        })
    }
}

/// Runs every row of the sweep not listed in `skip`, calling `on_row` as each
/// finishes. Failures are recorded in the row's `error` column; only an
/// error returned by `on_row` stops the sweep.
pub fn run_experiment_with(
    config: &ExperimentConfig,
    skip: &HashSet<RowKey>,
    mut on_row: impl FnMut(&RowOutcome) -> Result<()>,
) -> Result<Vec<RowOutcome>> {
    config.validate()?;
    let mut stages = Stages::new(config);
    let mut out = Vec::new();
    for &env in &config.envs {
        for &algorithm in &config.algorithms {
            for &plays in &config.plays {
                for &seed in &config.seeds {
                    let keys: Vec<(EnvVariant, RowKey)> = config
                        .variants
                        .iter()
                        .map(|&variant| {
                            (
                                variant,
                                RowKey {
                                    env: env.as_str().into(),
                                    variant: variant.as_str().into(),
                                    algorithm: algorithm.as_str().into(),
                                    plays,
                                    seed,
                                },
                            )
                        })
                        .filter(|(_, k)| !skip.contains(k))
                        .collect();
                    if keys.is_empty() {
                        continue;
                    }
                    let learned = stages.learn(env, algorithm, plays, seed);
                    for (variant, key) in keys {
                        let outcome = learned
                            .as_ref()
                            .map_err(|e| e.clone())
                            .and_then(|l| stages.evaluate(l, env, variant, &key))
                            .unwrap_or_else(|e| RowOutcome {
                                row: ResultRow::failed(&key, &e),
                                diagnostics: RowDiagnostics {
                                    env: key.env.clone(),
                                    variant: key.variant.clone(),
                                    algorithm: key.algorithm.clone(),
                                    plays,
                                    seed,
                                    ..RowDiagnostics::default()
                                },
                            });
                        on_row(&outcome)?;
                        out.push(outcome);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Runs the whole sweep in memory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RowOutcome>> {
    run_experiment_with(config, &HashSet::new(), |_| Ok(()))
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_error)?;
    reader
        .deserialize()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| Error::Parse {
                line: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Integrity(format!("{other:?}")),
    }
}

/// Diagnostics file written next to a results CSV.
pub fn diagnostics_path(csv_path: &Path) -> PathBuf {
    let mut name = csv_path.file_name().unwrap_or_default().to_os_string();
    name.push(".diagnostics.jsonl");
    csv_path.with_file_name(name)
}

/// Runs the sweep, appending each row to `csv_path` as it finishes and its
/// diagnostics to [`diagnostics_path`]. Rows already present in the CSV are
/// skipped, so an interrupted sweep resumes where it stopped. Returns the
/// rows computed by this call.
pub fn run_experiment_to_csv(
    config: &ExperimentConfig,
    csv_path: &Path,
) -> Result<Vec<RowOutcome>> {
    let fresh = !csv_path.exists() || std::fs::metadata(csv_path)?.len() == 0;
    let existing = if fresh {
        Vec::new()
    } else {
        read_results(csv_path)?
    };
    let skip: HashSet<RowKey> = existing.iter().map(ResultRow::key).collect();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(csv_path)?;
    let mut writer = csv::WriterBuilder::new()
        .has_headers(fresh)
        .from_writer(file);
    let mut diag = OpenOptions::new()
        .create(true)
        .append(true)
        .open(diagnostics_path(csv_path))?;
    run_experiment_with(config, &skip, |outcome| {
        writer.serialize(&outcome.row).map_err(csv_error)?;
        writer.flush()?;
        writeln!(diag, "{}", serde_json::to_string(&outcome.diagnostics)?)?;
        diag.flush()?;
        Ok(())
    })
}

/// Spread of one metric over the seeds of a group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub mean: f64,
    /// Sample standard deviation (`n - 1` denominator, 0 for one value).
    pub std: f64,
    /// Square of `std`.
    pub variance: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                median: f64::NAN,
                mean: f64::NAN,
                std: f64::NAN,
                variance: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let variance = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            median: median(values),
            mean,
            std: variance.sqrt(),
            variance,
        }
    }
}

/// Median with the midpoint convention for even counts; NaN for no values.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub env: String,
    pub variant: String,
    pub algorithm: String,
    pub plays: usize,
    pub runs: usize,
    pub errors: usize,
    pub dev_policy: Spread,
    pub dev_mf: Spread,
    pub return_learned: Spread,
    pub return_gap: Spread,
}

/// Aggregates successful rows over seeds, grouped by env, variant, algorithm
/// and play count.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, String, String, usize), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((
                r.env.clone(),
                r.variant.clone(),
                r.algorithm.clone(),
                r.plays,
            ))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((env, variant, algorithm, plays), rows)| {
            let ok: Vec<&&ResultRow> = rows.iter().filter(|r| r.is_ok()).collect();
            let pick = |f: &dyn Fn(&ResultRow) -> f64| {
                Spread::of(&ok.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            SummaryRow {
                env,
                variant,
                algorithm,
                plays,
                runs: ok.len(),
                errors: rows.len() - ok.len(),
                dev_policy: pick(&|r| r.dev_policy),
                dev_mf: pick(&|r| r.dev_mf),
                return_learned: pick(&|r| r.return_learned),
                return_gap: pick(&|r| r.return_gap()),
            }
        })
        .collect()
}

/// Writes the summary as a flat CSV with `<metric>_{median,mean,std,variance}` columns.
pub fn write_summary_csv(summary: &[SummaryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    let mut header: Vec<String> = ["env", "variant", "algorithm", "plays", "runs", "errors"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for m in ["dev_policy", "dev_mf", "return_learned", "return_gap"] {
        for stat in ["median", "mean", "std", "variance"] {
            header.push(format!("{m}_{stat}"));
        }
    }
    w.write_record(&header).map_err(csv_error)?;
    for s in summary {
        let mut rec = vec![
            s.env.clone(),
            s.variant.clone(),
            s.algorithm.clone(),
            s.plays.to_string(),
            s.runs.to_string(),
            s.errors.to_string(),
        ];
        for sp in [s.dev_policy, s.dev_mf, s.return_learned, s.return_gap] {
            rec.extend(
                [sp.median, sp.mean, sp.std, sp.variance]
                    .iter()
                    .map(|v| v.to_string()),
            );
        }
        w.write_record(&rec).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(algorithms: Vec<Algorithm>) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(vec![EnvName::Lr], algorithms, vec![1, 2], vec![0, 1]);
        cfg.horizon = Some(4);
        cfg.agents = 20;
        cfg.variants = vec![EnvVariant::Original, EnvVariant::New];
        cfg.mfso.max_steps = 300;
        cfg.mfirl.epochs = 5;
        cfg.architecture = RewardArchitecture::Linear;
        cfg.plirl.outer_epochs = 3;
        cfg.plirl.inner.max_steps = 20;
        cfg
    }

    #[test]
    fn oracle_rows_have_zero_deviation() {
        let rows = run_experiment(&tiny(vec![Algorithm::Oracle])).unwrap();
        assert_eq!(rows.len(), 8);
        for r in &rows {
            assert!(r.row.is_ok(), "{}", r.row.error);
            assert_eq!(r.row.dev_policy, 0.0);
            assert_eq!(r.row.dev_mf, 0.0);
            assert_eq!(r.row.return_gap(), 0.0);
        }
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{"envs":["RPS"],"algorithms":["mfirl"],"plays":[10],"seeds":[0],"architecture":"linear"}"#,
        )
        .unwrap();
        assert_eq!(cfg.agents, 100);
        assert_eq!(cfg.variants, vec![EnvVariant::Original]);
        assert_eq!(cfg.architecture, RewardArchitecture::Linear);
        assert_eq!(cfg.expert_fixed_point.beta_soft, Some(1.0));
        cfg.validate().unwrap();
        let back: ExperimentConfig =
            serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);

        let mut bad = cfg.clone();
        bad.seeds.clear();
        assert!(bad.validate().is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(
            r#"{"envs":["NOPE"],"algorithms":["mfirl"],"plays":[1],"seeds":[0]}"#
        )
        .is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(
            r#"{"envs":["LR"],"algorithms":["mfirl"],"plays":[1],"seeds":[0],"typo":1}"#
        )
        .is_err());
    }

    #[test]
    fn stage_failures_become_error_rows() {
        let mut cfg = tiny(vec![Algorithm::Mfirl]);
        cfg.expert = ExpertSolver::Mfne;
        cfg.envs = vec![EnvName::Rps];
        cfg.expert_fixed_point.max_iters = 1;
        let rows = run_experiment(&cfg).unwrap();
        assert_eq!(rows.len(), 8);
        assert!(rows.iter().all(|r| r.row.error.starts_with("expert:")));
        assert!(rows[0].row.dev_mf.is_nan());
    }

    #[test]
    fn summary_statistics() {
        let s = Spread::of(&[1.0, 2.0, 4.0, 7.0]);
        assert_eq!(s.median, 3.0);
        assert_eq!(s.mean, 3.5);
        assert!((s.variance - 7.0).abs() < 1e-12);
        assert!((s.std - 7f64.sqrt()).abs() < 1e-12);
        assert_eq!(Spread::of(&[2.0]).std, 0.0);
        assert!(median(&[]).is_nan());
    }
}

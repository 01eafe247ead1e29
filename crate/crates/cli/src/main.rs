use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use mfirl::demos::{load_demos, sample_trajectories, save_demos, DemoLabels, EmpiricalEstimates};
use mfirl::envs::{describe_env, make_env, EnvName, EnvVariant, DEFAULT_HORIZON};
use mfirl::experiment::{
    default_expert_fixed_point, evaluate_learned, read_results, run_experiment_to_csv,
    solve_expert, summarize, write_summary_csv, Algorithm, ExperimentConfig, ExpertFile,
    ExpertSolver, LearnedModel,
};
use mfirl::metrics::MetricsReport;
use mfirl::mfirl::{mfirl_train, DynamicsMode, MfirlOptions};
use mfirl::plirl::{plirl_train, PlirlOptions};
use mfirl::reward_model::{RewardArchitecture, RewardFile};
use mfirl::solvers::{solve_mfso, FixedPointOptions, MfsoOptions};
use mfirl::MfgSpec;

#[derive(Parser)]
#[command(
    name = "mfirl",
    version,
    about = "Mean field game solvers and reward recovery from demonstrations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect the built-in games.
    #[command(subcommand)]
    Env(EnvCommand),
    /// Solve for an expert equilibrium and save it as JSON.
    Expert(ExpertArgs),
    /// Sample demonstration trajectories from a saved expert.
    Sample(SampleArgs),
    /// Recover a reward from demonstrations.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Re-solve under a saved reward and compare with the ground-truth optimum.
    Eval(EvalArgs),
    /// Run a full sweep described by a JSON config.
    Experiment(ExperimentArgs),
}

#[derive(Subcommand)]
enum EnvCommand {
    List,
    Describe {
        #[arg(long)]
        env: EnvName,
        #[arg(long, default_value = "original")]
        variant: EnvVariant,
    },
}

#[derive(Args)]
struct ExpertArgs {
    #[arg(long)]
    env: EnvName,
    #[arg(long, default_value = "original")]
    variant: EnvVariant,
    /// auto picks mfso for cooperative games and mfne otherwise.
    #[arg(long, default_value = "auto")]
    solver: ExpertSolver,
    #[arg(long)]
    horizon: Option<usize>,
    /// Inverse temperature of the fixed point's Boltzmann best responses.
    #[arg(long, default_value_t = 1.0, conflicts_with = "greedy")]
    beta: f64,
    /// Use greedy best responses in the fixed point.
    #[arg(long)]
    greedy: bool,
    #[arg(long, default_value_t = 0.5)]
    damping: f64,
    #[arg(long, default_value_t = 2000)]
    max_iters: usize,
    #[arg(long, default_value_t = 5000)]
    mfso_steps: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    expert: PathBuf,
    #[arg(long)]
    plays: usize,
    #[arg(long, default_value_t = 100)]
    agents: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum TrainCommand {
    Mfirl(MfirlArgs),
    Plirl(PlirlArgs),
}

#[derive(Args)]
struct MfirlArgs {
    #[arg(long)]
    demos: PathBuf,
    #[arg(long)]
    env: EnvName,
    #[arg(long, default_value = "mlp")]
    arch: RewardArchitecture,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 500)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Truncation depth of the gradient recursion.
    #[arg(long)]
    trunc: Option<usize>,
    #[arg(long, default_value = "exact")]
    mode: DynamicsMode,
    #[arg(long, default_value_t = 32)]
    mc_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Training log CSV; defaults to the output path with a `.log.csv` suffix.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct PlirlArgs {
    #[arg(long)]
    demos: PathBuf,
    #[arg(long)]
    env: EnvName,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Ascent steps of the inner reduced-process solve.
    #[arg(long, default_value_t = 200)]
    inner_steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    reward: PathBuf,
    #[arg(long)]
    env: EnvName,
    #[arg(long, default_value = "original")]
    variant: EnvVariant,
    /// Defaults to the horizon recorded with the reward.
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, default_value_t = 5000)]
    mfso_steps: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn game(env: EnvName, variant: EnvVariant, horizon: Option<usize>) -> Result<MfgSpec> {
    let spec = make_env(env, variant);
    Ok(match horizon {
        Some(h) => spec.with_horizon(h)?,
        None => spec,
    })
}

fn log_path(out: &Path, log: Option<PathBuf>) -> PathBuf {
    log.unwrap_or_else(|| out.with_extension("log.csv"))
}

fn write_json(value: &impl serde::Serialize, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_env(cmd: EnvCommand) -> Result<()> {
    match cmd {
        EnvCommand::List => {
            for env in EnvName::ALL {
                let d = describe_env(env, EnvVariant::Original);
                println!(
                    "{:<8} |S|={:<3} |A|={} {}",
                    env.as_str(),
                    d.num_states,
                    d.num_actions,
                    if d.cooperative {
                        "cooperative"
                    } else {
                        "non-cooperative"
                    }
                );
            }
        }
        EnvCommand::Describe { env, variant } => write_json(&describe_env(env, variant), None)?,
    }
    Ok(())
}

fn cmd_expert(a: ExpertArgs) -> Result<()> {
    let spec = game(a.env, a.variant, a.horizon)?;
    let fixed_point = FixedPointOptions {
        max_iters: a.max_iters,
        damping: a.damping,
        beta_soft: (!a.greedy).then_some(a.beta),
        ..default_expert_fixed_point()
    };
    let mfso = MfsoOptions {
        max_steps: a.mfso_steps,
        ..MfsoOptions::default()
    };
    let solver = a.solver.resolve(a.env);
    let result = solve_expert(&spec, solver, a.env, &fixed_point, &mfso)?;
    let options = match solver {
        ExpertSolver::Mfso => serde_json::to_value(&mfso)?,
        _ => serde_json::to_value(&fixed_point)?,
    };
    eprintln!(
        "{} expert on {} {}: return {:.6}, exploitability {:.3e}, {} iterations",
        solver.as_str(),
        a.env,
        a.variant,
        result.expected_return,
        result.exploitability.unwrap_or(f64::NAN),
        result.iterations
    );
    ExpertFile {
        env: a.env,
        variant: a.variant,
        solver,
        horizon: spec.horizon(),
        discount: spec.discount(),
        options,
        result,
    }
    .save(&a.out)?;
    Ok(())
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let expert =
        ExpertFile::load(&a.expert).with_context(|| format!("loading {}", a.expert.display()))?;
    let spec = expert.spec()?;
    let labels = DemoLabels {
        env: expert.env.as_str().into(),
        variant: expert.variant.as_str().into(),
    };
    let demos = sample_trajectories(
        &spec,
        &expert.result.flow,
        &expert.result.policy,
        a.plays,
        a.agents,
        a.seed,
        &labels,
    )?;
    save_demos(&demos, &a.out)?;
    eprintln!("wrote {} trajectories to {}", demos.len(), a.out.display());
    Ok(())
}

/// The training game: dynamics of the demos' variant at their horizon, with
/// the reward removed.
fn training_game(env: EnvName, demos: &mfirl::demos::DemoSet) -> Result<MfgSpec> {
    if !demos.meta.env.is_empty() && !demos.meta.env.eq_ignore_ascii_case(env.as_str()) {
        bail!(
            "demos were sampled from {} but --env is {}",
            demos.meta.env,
            env
        );
    }
    let variant = if demos.meta.variant.is_empty() {
        EnvVariant::Original
    } else {
        demos.meta.variant.parse()?
    };
    Ok(game(env, variant, Some(demos.meta.horizon))?.without_reward())
}

fn cmd_train_mfirl(a: MfirlArgs) -> Result<()> {
    let demos = load_demos(&a.demos).with_context(|| format!("loading {}", a.demos.display()))?;
    let spec = training_game(a.env, &demos)?;
    let opts = MfirlOptions {
        beta: a.beta,
        epochs: a.epochs,
        lr: a.lr,
        truncation: a.trunc,
        dynamics_mode: a.mode,
        mc_samples: a.mc_samples,
        seed: a.seed,
    };
    let out = mfirl_train(&spec, &demos, a.arch, &opts)?;
    let mut log = String::from("epoch,objective,grad_norm\n");
    for e in &out.log {
        log.push_str(&format!("{},{},{}\n", e.epoch, e.objective, e.grad_norm));
    }
    std::fs::write(log_path(&a.out, a.log), log)?;
    let metadata = json!({
        "algorithm": "mfirl",
        "env": a.env,
        "variant": demos.meta.variant,
        "horizon": spec.horizon(),
        "demos_seed": demos.meta.seed,
        "plays": demos.meta.plays,
        "agents_per_play": demos.meta.agents_per_play,
        "options": opts,
    });
    RewardFile::from_individual(&out.params, metadata).save(&a.out)?;
    if let Some(last) = out.log.last() {
        eprintln!(
            "final objective {:.6}, gradient norm {:.3e}",
            last.objective, last.grad_norm
        );
    }
    Ok(())
}

fn cmd_train_plirl(a: PlirlArgs) -> Result<()> {
    let demos = load_demos(&a.demos).with_context(|| format!("loading {}", a.demos.display()))?;
    let spec = training_game(a.env, &demos)?;
    let opts = PlirlOptions {
        outer_epochs: a.epochs,
        outer_lr: a.lr,
        inner: MfsoOptions {
            max_steps: a.inner_steps,
            ..MfsoOptions::default()
        },
        seed: a.seed,
    };
    let estimates = EmpiricalEstimates::per_play(&demos)?;
    let out = plirl_train(&estimates, &spec, &opts)?;
    let mut log = String::from("epoch,expert_value,inner_value,margin\n");
    for e in &out.log {
        log.push_str(&format!(
            "{},{},{},{}\n",
            e.epoch, e.expert_value, e.inner_value, e.margin
        ));
    }
    std::fs::write(log_path(&a.out, a.log), log)?;
    let metadata = json!({
        "algorithm": "plirl",
        "env": a.env,
        "variant": demos.meta.variant,
        "horizon": spec.horizon(),
        "demos_seed": demos.meta.seed,
        "plays": demos.meta.plays,
        "agents_per_play": demos.meta.agents_per_play,
        "options": opts,
    });
    RewardFile::from_societal(&out.model, metadata).save(&a.out)?;
    if let Some(last) = out.log.last() {
        eprintln!("final margin {:.6}", last.margin);
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let file =
        RewardFile::load(&a.reward).with_context(|| format!("loading {}", a.reward.display()))?;
    let recorded = file
        .metadata
        .get("horizon")
        .and_then(|h| h.as_u64())
        .map(|h| h as usize);
    let spec = game(
        a.env,
        a.variant,
        a.horizon.or(recorded).or(Some(DEFAULT_HORIZON)),
    )?;
    let (algorithm, model) = match file.kind.as_str() {
        "individual" => (
            Algorithm::Mfirl,
            LearnedModel::Individual(file.to_individual()?),
        ),
        "societal" => (
            Algorithm::Plirl,
            LearnedModel::Societal(file.to_societal()?),
        ),
        other => bail!("unknown reward kind '{other}'"),
    };
    let mfso = MfsoOptions {
        max_steps: a.mfso_steps,
        ..MfsoOptions::default()
    };
    let truth = solve_mfso(&spec, &mfso)?;
    let eval = evaluate_learned(&spec, &truth, &model, &mfso)?;
    let meta = |k: &str| file.metadata.get(k).and_then(|v| v.as_u64()).unwrap_or(0);
    let report = MetricsReport {
        env: a.env.as_str().into(),
        variant: a.variant.as_str().into(),
        algorithm: algorithm.as_str().into(),
        plays: meta("plays") as usize,
        seed: meta("demos_seed"),
        dev_policy: eval.dev_policy,
        dev_mf: eval.dev_mf,
        expected_return_learned: eval.return_learned,
        expected_return_expert: eval.return_expert,
    };
    write_json(&report, a.out.as_deref())
}

fn summary_path(out: &Path) -> PathBuf {
    out.with_extension("summary.csv")
}

/// Returns whether every row in the results file is free of errors.
fn cmd_experiment(a: ExperimentArgs) -> Result<bool> {
    let config = ExperimentConfig::load(&a.config)
        .with_context(|| format!("loading {}", a.config.display()))?;
    let total = config.row_keys().len();
    let new_rows = run_experiment_to_csv(&config, &a.out)?;
    let rows = read_results(&a.out)?;
    write_summary_csv(&summarize(&rows), &summary_path(&a.out))?;
    let failed: Vec<_> = rows.iter().filter(|r| !r.is_ok()).collect();
    eprintln!(
        "{} rows computed, {} of {} present in {}, {} with errors",
        new_rows.len(),
        rows.len(),
        total,
        a.out.display(),
        failed.len()
    );
    for r in &failed {
        eprintln!(
            "  {} {} {} plays={} seed={}: {}",
            r.env, r.variant, r.algorithm, r.plays, r.seed, r.error
        );
    }
    Ok(failed.is_empty())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Env(c) => cmd_env(c)?,
        Command::Expert(a) => cmd_expert(a)?,
        Command::Sample(a) => cmd_sample(a)?,
        Command::Train(TrainCommand::Mfirl(a)) => cmd_train_mfirl(a)?,
        Command::Train(TrainCommand::Plirl(a)) => cmd_train_plirl(a)?,
        Command::Eval(a) => cmd_eval(a)?,
        Command::Experiment(a) => return cmd_experiment(a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

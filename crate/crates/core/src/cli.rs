//! Command-line front end: training, evaluation, prediction, parameter
//! counting and the sensitivity sweep.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::Rng as _;

use crate::envs::make_env;
use crate::error::{config_err, usage_err, Error, Result};
use crate::rng::{streams, substream};
use crate::trainer::predict::{predict_episode, rows_to_csv};
use crate::trainer::{
    accuracy, collect_trajectories, evaluate, load_agent, resume_training, run_sensitivity_sweep, run_training,
    Agent, Streams, TrainConfig,
};

#[derive(Debug, Parser)]
#[command(name = "vrmsac", version, about = "Recurrent latent models with soft actor-critic for POMDPs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an agent and write metrics.csv plus checkpoints.
    Train(TrainArgs),
    /// Evaluate a saved agent and print the mean return with its SEM.
    Eval(EvalArgs),
    /// Write open- and closed-loop model predictions for fresh episodes.
    Predict(PredictArgs),
    /// Print the number of trainable parameters of the configured agent.
    CountParams(ConfigArgs),
    /// Random search over model learning rate and sequence length.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// `key=value` overrides applied after the config file.
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory; must not exist yet unless resuming.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue the run stored in this directory.
    #[arg(long, conflicts_with = "out")]
    pub resume: Option<PathBuf>,
    /// New step total when resuming.
    #[arg(long, requires = "resume")]
    pub total_steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub episodes: usize,
    /// Seed for the evaluation episodes (defaults to the run seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Act with the policy mean instead of sampling.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub episodes: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Observed steps before closed-loop generation starts.
    #[arg(long, default_value_t = 20)]
    pub context: usize,
    /// Closed-loop steps generated after the context.
    #[arg(long, default_value_t = 50)]
    pub horizon: i64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value_t = 8)]
    pub trials: usize,
    /// Seed of the hyperparameter draws.
    #[arg(long, default_value_t = 0)]
    pub sweep_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Build a config from an optional file, a seed and `key=value` overrides.
pub fn load_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            TrainConfig::from_text(&text)?
        }
        None => TrainConfig::default(),
    };
    for o in &args.overrides {
        if !o.contains('=') {
            return config_err(format!("override `{o}` is not of the form key=value"));
        }
        cfg.set_line(o)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn default_out(cfg: &TrainConfig) -> PathBuf {
    PathBuf::from("runs").join(format!("{}_{}_{}_s{}", cfg.agent, cfg.env, cfg.variant, cfg.seed))
}

/// Create `dir` by renaming a fully created sibling, so a directory at the
/// final path always exists completely or not at all. An existing non-empty
/// directory is refused.
pub fn create_output_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        if fs::read_dir(dir)?.next().is_some() {
            return usage_err(format!("output directory {} is not empty", dir.display()));
        }
        return Ok(());
    }
    let name = dir
        .file_name()
        .ok_or_else(|| Error::Usage(format!("invalid output directory {}", dir.display())))?;
    let parent = match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent)?;
    let mut tmp_name = OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = parent.join(tmp_name);
    fs::create_dir(&tmp)?;
    fs::rename(&tmp, dir).map_err(|e| {
        let _ = fs::remove_dir(&tmp);
        Error::Io(e)
    })
}

fn eval_env_seed(seed: u64) -> u64 {
    substream(seed, &format!("cli-{}", streams::EVAL)).random()
}

fn train(args: &TrainArgs) -> Result<String> {
    if let Some(dir) = &args.resume {
        let s = resume_training(dir, args.total_steps)?;
        return Ok(format!("resumed run finished at step {} in {}", s.counters.steps, dir.display()));
    }
    let cfg = load_config(&args.config)?;
    cfg.validate_for_env()?;
    let out = args.out.clone().unwrap_or_else(|| default_out(&cfg));
    create_output_dir(&out)?;
    let s = run_training(&cfg, &out)?;
    let last = s
        .metrics
        .last()
        .map(|r| format!(", last return {:.2} ± {:.2}", r.avg_return, r.sem))
        .unwrap_or_default();
    Ok(format!("trained {} steps into {}{last}", s.counters.steps, out.display()))
}

fn eval(args: &EvalArgs) -> Result<String> {
    if args.episodes == 0 {
        return usage_err("--episodes must be at least 1");
    }
    let (cfg, agent) = load_agent(&args.checkpoint)?;
    let seed = args.seed.unwrap_or(cfg.seed);
    let mut env = make_env(cfg.env, cfg.variant, eval_env_seed(seed))?;
    let mut rngs = Streams::tagged(seed, "cli-eval/");
    let r = evaluate(&agent, &mut env, args.episodes, args.deterministic, &mut rngs)?;
    Ok(format!(
        "{:.4} ± {:.4} over {} episodes (success rate {:.3})",
        r.avg_return, r.sem, args.episodes, r.success_rate
    ))
}

fn predict(args: &PredictArgs) -> Result<String> {
    if args.episodes == 0 {
        return usage_err("--episodes must be at least 1");
    }
    let (cfg, agent) = load_agent(&args.checkpoint)?;
    let model = prediction_model(&agent)?;
    let seed = args.seed.unwrap_or(cfg.seed);
    let mut env = make_env(cfg.env, cfg.variant, eval_env_seed(seed))?;
    let mut rngs = Streams::tagged(seed, "cli-predict/");
    let trajectories = collect_trajectories(&agent, &mut env, args.episodes, &mut rngs)?;
    create_output_dir(&args.out)?;
    let mut open_rows = Vec::new();
    for (k, tr) in trajectories.iter().enumerate() {
        let p = predict_episode(model, tr, args.context, args.horizon, &mut rngs.vrm_kl)?;
        fs::write(args.out.join(format!("open_loop_{k}.csv")), rows_to_csv(&p.open_loop))?;
        fs::write(args.out.join(format!("closed_loop_{k}.csv")), rows_to_csv(&p.closed_loop))?;
        open_rows.extend(p.open_loop);
    }
    let acc = accuracy(&open_rows)?;
    Ok(format!(
        "open-loop mse {:.6}, observation variance {:.6}, ratio {:.4}",
        acc.mse,
        acc.observation_variance,
        acc.ratio()
    ))
}

fn prediction_model(agent: &Agent) -> Result<&crate::vrm::Vrm<f32>> {
    agent
        .prediction_model()
        .ok_or_else(|| Error::Usage(format!("agent kind {} has no recurrent model to predict with", agent.kind())))
}

fn count_params(args: &ConfigArgs) -> Result<String> {
    let cfg = load_config(args)?;
    Ok(Agent::new(&cfg)?.param_count().to_string())
}

fn sweep(args: &SweepArgs) -> Result<String> {
    let cfg = load_config(&args.config)?;
    cfg.validate_for_env()?;
    create_output_dir(&args.out)?;
    let results = run_sensitivity_sweep(&cfg, args.trials, args.sweep_seed, &args.out)?;
    let mut out = String::from("trial,lr_model,seq_len,batch_size,final_return");
    for (t, s) in &results {
        let ret = s.metrics.last().map_or(f64::NAN, |r| r.avg_return);
        out.push_str(&format!("\n{},{},{},{},{ret}", t.tag(), t.lr_model, t.seq_len, t.batch_size));
    }
    fs::write(args.out.join("sweep.csv"), format!("{out}\n"))?;
    Ok(out)
}

/// Run a parsed command and return what it prints on success.
pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::CountParams(a) => count_params(a),
        Command::Sweep(a) => sweep(a),
    }
}

/// Parse `argv`, run, print, and map failures to a nonzero exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(out) => {
            println!("{out}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

//! The interaction loop, evaluation, metrics and resumable checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;

use super::agent::{Agent, Learner, Streams};
use super::config::TrainConfig;
use super::schedule::{Counters, Schedule};
use crate::diffcore::Checkpoint;
use crate::envs::{make_env, Env, EnvSpec, StepOutcome};
use crate::error::{config_err, Error, Result};
use crate::replay::{ReplayBuffer, StepRecord};
use crate::rng::{get_rng, put_rng, substream, streams};
use crate::sac::RlMetrics;

pub const METRICS_HEADER: &str = "step,avg_return,sem,success_rate,elbo_fi,elbo_kl,j_v,j_q,j_pi,alpha";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RESUME_FILE: &str = "resume.ckpt";
pub const CONFIG_FILE: &str = "config.cfg";

/// What the loop needs from an environment.
pub trait Environment {
    fn spec(&self) -> &EnvSpec;
    fn reset(&mut self) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Result<StepOutcome>;
    /// Independent instance for evaluation, seeded by `seed`.
    fn eval_instance(&self, seed: u64) -> Result<Self>
    where
        Self: Sized;
    fn save_into(&self, _ck: &mut Checkpoint, _prefix: &str) {}
    fn load_from(&mut self, _ck: &Checkpoint, _prefix: &str) -> Result<()> {
        Ok(())
    }
}

impl Environment for Env {
    fn spec(&self) -> &EnvSpec {
        Env::spec(self)
    }

    fn reset(&mut self) -> Vec<f64> {
        Env::reset(self)
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        Env::step(self, action)
    }

    fn eval_instance(&self, seed: u64) -> Result<Self> {
        make_env(self.spec().name, self.spec().variant, seed)
    }

    fn save_into(&self, ck: &mut Checkpoint, prefix: &str) {
        put_rng(ck, &format!("{prefix}/reset_rng"), self.reset_rng());
    }

    fn load_from(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        self.set_reset_rng(get_rng(ck, &format!("{prefix}/reset_rng"))?);
        Ok(())
    }
}

/// Observation followed by the previous reward.
pub fn augment(obs: &[f64], prev_reward: f64) -> Vec<f64> {
    let mut x = obs.to_vec();
    x.push(prev_reward);
    x
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub returns: Vec<f64>,
    pub avg_return: f64,
    /// Standard error of the mean (sample standard deviation over `sqrt(n)`).
    pub sem: f64,
    pub success_rate: f64,
}

pub fn mean_sem(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Run full episodes without storing data or updating anything.
pub fn evaluate<E: Environment, L: Learner>(
    learner: &L,
    env: &mut E,
    episodes: usize,
    deterministic: bool,
    rngs: &mut Streams,
) -> Result<EvalResult> {
    let mut returns = Vec::with_capacity(episodes);
    let mut successes = 0usize;
    for _ in 0..episodes {
        let mut x = augment(&env.reset(), 0.0);
        let mut state = learner.initial_state();
        let mut ret = 0.0;
        loop {
            let a = learner.act(&mut state, &x, deterministic, rngs)?;
            let out = env.step(&a)?;
            ret += out.reward;
            if out.done {
                successes += usize::from(out.info.success);
                break;
            }
            x = augment(&out.obs, out.reward);
        }
        returns.push(ret);
    }
    let (avg_return, sem) = mean_sem(&returns);
    Ok(EvalResult {
        avg_return,
        sem,
        success_rate: if episodes == 0 { 0.0 } else { successes as f64 / episodes as f64 },
        returns,
    })
}

/// One `metrics.csv` row. Absent quantities (no such model, no update yet)
/// are written as 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub avg_return: f64,
    pub sem: f64,
    pub success_rate: f64,
    /// Negative ELBO per valid step (squared error for deterministic models).
    pub elbo_fi: f64,
    pub elbo_kl: f64,
    pub j_v: f64,
    pub j_q: f64,
    pub j_pi: f64,
    pub alpha: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.avg_return,
            self.sem,
            self.success_rate,
            self.elbo_fi,
            self.elbo_kl,
            self.j_v,
            self.j_q,
            self.j_pi,
            self.alpha
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let v: Vec<&str> = line.trim().split(',').collect();
        if v.len() != 10 {
            return config_err(format!("metrics row has {} fields, expected 10", v.len()));
        }
        let f = |i: usize| -> Result<f64> {
            let x: f64 = v[i].parse().map_err(|_| Error::Config(format!("bad metrics field `{}`", v[i])))?;
            if !x.is_finite() {
                return config_err(format!("non-finite metrics field `{}`", v[i]));
            }
            Ok(x)
        };
        Ok(MetricsRow {
            step: v[0].parse().map_err(|_| Error::Config(format!("bad step `{}`", v[0])))?,
            avg_return: f(1)?,
            sem: f(2)?,
            success_rate: f(3)?,
            elbo_fi: f(4)?,
            elbo_kl: f(5)?,
            j_v: f(6)?,
            j_q: f(7)?,
            j_pi: f(8)?,
            alpha: f(9)?,
        })
    }
}

/// Parse a whole `metrics.csv`, checking the header and step order.
pub fn read_metrics(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return config_err("metrics file header does not match");
    }
    let rows = lines.filter(|l| !l.trim().is_empty()).map(MetricsRow::from_csv).collect::<Result<Vec<_>>>()?;
    if rows.windows(2).any(|w| w[1].step <= w[0].step) {
        return config_err("metrics steps are not increasing");
    }
    Ok(rows)
}

struct Episode<S> {
    x: Vec<f64>,
    state: S,
    ret: f64,
}

/// Drives one run: acting, storage, scheduled updates and evaluation.
pub struct Trainer<E: Environment, L: Learner> {
    config: TrainConfig,
    schedule: Schedule,
    env: E,
    learner: L,
    buffer: ReplayBuffer,
    streams: Streams,
    counters: Counters,
    episode: Option<Episode<L::State>>,
    last_rl: RlMetrics,
    last_returns: Vec<f64>,
    metrics: Vec<MetricsRow>,
    out_dir: Option<PathBuf>,
}

impl<E: Environment, L: Learner> Trainer<E, L> {
    pub fn new(config: TrainConfig, env: E, learner: L) -> Result<Self> {
        config.validate()?;
        let spec = env.spec();
        let buffer = ReplayBuffer::new(spec.obs_dim + 1, spec.action_dim, config.buffer_capacity);
        Ok(Trainer {
            schedule: Schedule {
                step_start_rl: config.step_start_rl,
                kl_interval: config.kl_interval,
                rl_interval: config.rl_interval,
            },
            streams: Streams::new(config.seed),
            config,
            env,
            learner,
            buffer,
            counters: Counters::default(),
            episode: None,
            last_rl: RlMetrics::default(),
            last_returns: Vec::new(),
            metrics: Vec::new(),
            out_dir: None,
        })
    }

    /// Write `metrics.csv`, the resume file and snapshots under `dir`.
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), self.config.to_text())?;
        let metrics = dir.join(METRICS_FILE);
        if self.counters.steps == 0 || !metrics.exists() {
            fs::write(&metrics, format!("{METRICS_HEADER}\n"))?;
        }
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn learner(&self) -> &L {
        &self.learner
    }

    pub fn env(&self) -> &E {
        &self.env
    }

    pub fn metrics(&self) -> &[MetricsRow] {
        &self.metrics
    }

    /// Returns of training episodes finished so far.
    pub fn episode_returns(&self) -> &[f64] {
        &self.last_returns
    }

    pub fn is_finished(&self) -> bool {
        self.counters.steps >= self.config.total_steps
    }

    /// One environment step followed by whatever the schedule triggers.
    pub fn step(&mut self) -> Result<()> {
        if self.episode.is_none() {
            let obs = self.env.reset();
            self.episode = Some(Episode {
                x: augment(&obs, 0.0),
                state: self.learner.initial_state(),
                ret: 0.0,
            });
        }
        let ep = self.episode.as_mut().expect("episode ensured above");
        let a = self.learner.act(&mut ep.state, &ep.x, false, &mut self.streams)?;
        let out = self.env.step(&a)?;
        let a = self.env.spec().clip_action(&a);
        self.buffer.append(StepRecord::new(
            ep.x.clone(),
            a,
            out.reward,
            out.done,
            out.info.timeout,
        ))?;
        ep.ret += out.reward;
        ep.x = augment(&out.obs, out.reward);
        self.counters.steps += 1;
        if out.done {
            let ret = ep.ret;
            self.last_returns.push(ret);
            self.counters.episodes += 1;
            self.episode = None;
        }

        let t = self.counters.steps;
        let plan = self.schedule.plan(t);
        if plan.pretrain {
            let r = self.learner.pretrain(&self.buffer, &mut self.streams)?;
            self.counters.fi_updates += r.model_updates;
            self.counters.rl_pretrain_updates += r.rl_updates;
            if let Some(l) = r.final_loss {
                info!("step {t}: pre-training done, final model loss {l:.4}");
            }
        }
        if plan.kl_update && self.learner.kl_update(&self.buffer, &mut self.streams)?.is_some() {
            self.counters.kl_updates += 1;
        }
        if plan.rl_update {
            self.last_rl = self.learner.rl_update(&self.buffer, &mut self.streams)?;
            self.counters.rl_updates += 1;
        }
        if t % self.config.eval_interval == 0 {
            self.evaluation_point()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<&[MetricsRow]> {
        while !self.is_finished() {
            self.step()?;
        }
        Ok(&self.metrics)
    }

    /// Evaluate with streams and environment derived from the current step,
    /// leaving every training stream untouched.
    pub fn evaluate_now(&self) -> Result<MetricsRow> {
        let t = self.counters.steps;
        let tag = format!("{}-{t}/", streams::EVAL);
        let mut rngs = Streams::tagged(self.config.seed, &tag);
        let env_seed = rand::Rng::random(&mut substream(self.config.seed, &format!("{tag}env")));
        let mut env = self.env.eval_instance(env_seed)?;
        let eval = evaluate(
            &self.learner,
            &mut env,
            self.config.eval_episodes,
            self.config.eval_deterministic,
            &mut rngs,
        )?;
        let (fi, kl) = self.learner.model_losses(&self.buffer, &mut rngs)?;
        Ok(MetricsRow {
            step: t,
            avg_return: eval.avg_return,
            sem: eval.sem,
            success_rate: eval.success_rate,
            elbo_fi: fi.unwrap_or(0.0),
            elbo_kl: kl.unwrap_or(0.0),
            j_v: self.last_rl.j_v,
            j_q: self.last_rl.j_q,
            j_pi: self.last_rl.j_pi,
            alpha: if self.counters.rl_updates + self.counters.rl_pretrain_updates > 0 {
                self.last_rl.alpha
            } else {
                0.0
            },
        })
    }

    fn evaluation_point(&mut self) -> Result<()> {
        let row = self.evaluate_now()?;
        info!(
            "step {}: return {:.2} +- {:.2}, success {:.2}, alpha {:.4}",
            row.step, row.avg_return, row.sem, row.success_rate, row.alpha
        );
        self.metrics.push(row);
        if let Some(dir) = self.out_dir.clone() {
            let mut f = fs::OpenOptions::new().append(true).open(dir.join(METRICS_FILE))?;
            writeln!(f, "{}", row.to_csv())?;
            f.sync_all()?;
            self.checkpoint().write(&dir.join(RESUME_FILE))?;
            if self.config.snapshots {
                self.snapshot().write(&dir.join(format!("step_{:08}.ckpt", row.step)))?;
            }
        }
        Ok(())
    }

    /// Model-only checkpoint: config and learner.
    pub fn snapshot(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.put_bytes("config", self.config.to_text().as_bytes());
        ck.put_u64("step", self.counters.steps);
        self.learner.save_into(&mut ck, "agent");
        ck
    }

    /// Everything needed to continue the run.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = self.snapshot();
        ck.put_f64s("counters", &self.counters.to_array().map(|v| v as f64));
        let r = &self.last_rl;
        ck.put_f64s("last_rl", &[r.j_v, r.j_q, r.j_pi, r.j_alpha, r.alpha]);
        ck.put_f64s("episode_returns", &self.last_returns);
        self.streams.save_into(&mut ck, "streams");
        self.env.save_into(&mut ck, "env");
        self.buffer.save_into(&mut ck, "replay");
        ck
    }

    /// Continue from [`Trainer::checkpoint`]. An interrupted episode cannot be
    /// restored, so it is closed as a time-limit ending and a fresh one starts.
    pub fn restore(config: TrainConfig, mut env: E, mut learner: L, ck: &Checkpoint) -> Result<Self> {
        learner.load_from(ck, "agent")?;
        env.load_from(ck, "env")?;
        let mut t = Trainer::new(config, env, learner)?;
        let c = ck.get_f64s("counters")?;
        let c: [f64; 6] = c
            .try_into()
            .map_err(|_| Error::Checkpoint("`counters` has the wrong length".into()))?;
        t.counters = Counters::from_array(c.map(|v| v as u64));
        let r = ck.get_f64s("last_rl")?;
        if r.len() != 5 {
            return Err(Error::Checkpoint("`last_rl` has the wrong length".into()));
        }
        t.last_rl = RlMetrics {
            j_v: r[0],
            j_q: r[1],
            j_pi: r[2],
            j_alpha: r[3],
            alpha: r[4],
        };
        t.last_returns = ck.get_f64s("episode_returns")?;
        t.streams = Streams::load_from(ck, "streams")?;
        t.buffer = ReplayBuffer::load_from(ck, "replay", t.config.buffer_capacity)?;
        t.buffer.close_open_episode();
        Ok(t)
    }
}

/// Summary of a finished run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub counters: Counters,
    pub metrics: Vec<MetricsRow>,
    pub out_dir: PathBuf,
}

/// Train the configured agent on its environment, writing artifacts to `out_dir`.
pub fn run_training(config: &TrainConfig, out_dir: &Path) -> Result<RunSummary> {
    config.validate_for_env()?;
    let env = make_env(config.env, config.variant, config.seed)?;
    let agent = Agent::new(config)?;
    info!(
        "training {} on {} {} for {} steps ({} parameters)",
        config.agent,
        config.env,
        config.variant,
        config.total_steps,
        agent.param_count()
    );
    let mut trainer = Trainer::new(config.clone(), env, agent)?.with_output(out_dir)?;
    trainer.run()?;
    Ok(RunSummary {
        counters: trainer.counters(),
        metrics: trainer.metrics().to_vec(),
        out_dir: out_dir.to_path_buf(),
    })
}

/// Continue a run from `out_dir/resume.ckpt` until its configured total
/// (or `total_steps` if given).
pub fn resume_training(out_dir: &Path, total_steps: Option<u64>) -> Result<RunSummary> {
    let ck = Checkpoint::read(&out_dir.join(RESUME_FILE))?;
    let mut config = config_from_checkpoint(&ck)?;
    if let Some(n) = total_steps {
        config.total_steps = n;
    }
    let env = make_env(config.env, config.variant, config.seed)?;
    let agent = Agent::new(&config)?;
    let mut trainer = Trainer::restore(config, env, agent, &ck)?;
    // drop metrics rows written after the checkpoint
    let path = out_dir.join(METRICS_FILE);
    let step = trainer.counters().steps;
    let kept: Vec<MetricsRow> = match fs::read_to_string(&path) {
        Ok(text) => read_metrics(&text)?.into_iter().filter(|r| r.step <= step).collect(),
        Err(_) => Vec::new(),
    };
    let mut text = format!("{METRICS_HEADER}\n");
    for r in &kept {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    fs::write(&path, text)?;
    trainer.metrics = kept;
    let mut trainer = trainer.with_output(out_dir)?;
    info!("resuming at step {step}");
    trainer.run()?;
    Ok(RunSummary {
        counters: trainer.counters(),
        metrics: trainer.metrics().to_vec(),
        out_dir: out_dir.to_path_buf(),
    })
}

pub fn config_from_checkpoint(ck: &Checkpoint) -> Result<TrainConfig> {
    let text = std::str::from_utf8(ck.get_bytes("config")?)
        .map_err(|_| Error::Checkpoint("stored config is not UTF-8".into()))?;
    TrainConfig::from_text(text)
}

/// Rebuild the agent stored in a snapshot or resume checkpoint.
pub fn load_agent(path: &Path) -> Result<(TrainConfig, Agent)> {
    let ck = Checkpoint::read(path)?;
    let config = config_from_checkpoint(&ck)?;
    let mut agent = Agent::new(&config)?;
    agent.load_from(&ck, "agent")?;
    Ok((config, agent))
}

//! Flat `key = value` run configuration.

use std::fmt;
use std::str::FromStr;

use crate::envs::{EnvName, EnvSpec, PoVariant};
use crate::error::{config_err, Error, Result};

/// Which belief the controller sees and how the models are trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AgentKind {
    /// Pre-trained frozen model plus a keep-learning model.
    VrmSac,
    /// Controller on the augmented observation alone.
    SacMlp,
    /// Controller behind its own LSTM over raw observations.
    SacLstm,
    /// One model, pre-trained and then updated on the keep-learning cadence.
    SingleVrm,
    /// Only the pre-trained frozen model.
    FiOnly,
    /// Only the keep-learning model, no pre-training.
    KlOnly,
    /// Both models without latent noise, fitted by squared error.
    DeterministicModel,
}

impl AgentKind {
    pub const ALL: [AgentKind; 7] = [
        AgentKind::VrmSac,
        AgentKind::SacMlp,
        AgentKind::SacLstm,
        AgentKind::SingleVrm,
        AgentKind::FiOnly,
        AgentKind::KlOnly,
        AgentKind::DeterministicModel,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::VrmSac => "vrm-sac",
            AgentKind::SacMlp => "sac-mlp",
            AgentKind::SacLstm => "sac-lstm",
            AgentKind::SingleVrm => "single-vrm",
            AgentKind::FiOnly => "fi-only",
            AgentKind::KlOnly => "kl-only",
            AgentKind::DeterministicModel => "deterministic-model",
        }
    }

    /// Has a model that is pre-trained once and then frozen.
    pub fn has_fi(self) -> bool {
        matches!(self, AgentKind::VrmSac | AgentKind::FiOnly | AgentKind::DeterministicModel)
    }

    /// Has a model updated on the keep-learning cadence.
    pub fn has_kl(self) -> bool {
        matches!(
            self,
            AgentKind::VrmSac | AgentKind::SingleVrm | AgentKind::KlOnly | AgentKind::DeterministicModel
        )
    }

    /// The keep-learning model is also pre-trained (single-model ablation).
    pub fn pretrains_kl(self) -> bool {
        self == AgentKind::SingleVrm
    }

    pub fn deterministic_models(self) -> bool {
        self == AgentKind::DeterministicModel
    }

    pub fn is_baseline(self) -> bool {
        matches!(self, AgentKind::SacMlp | AgentKind::SacLstm)
    }

    pub fn model_count(self) -> usize {
        usize::from(self.has_fi()) + usize::from(self.has_kl())
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AgentKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown agent kind `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub env: EnvName,
    pub variant: PoVariant,
    pub agent: AgentKind,
    pub seed: u64,
    pub total_steps: u64,
    pub step_start_rl: u64,
    pub fi_epochs: u64,
    pub kl_interval: u64,
    pub rl_interval: u64,
    /// RL updates run at the start step for the baselines, mirroring the model
    /// pre-training budget.
    pub baseline_pretrain_updates: u64,
    pub gamma: f64,
    pub tau: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub lr_alpha: f64,
    pub lr_model: f64,
    pub seq_len: usize,
    pub batch_size: usize,
    pub burn_in_max: usize,
    pub buffer_capacity: usize,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub eval_deterministic: bool,
    /// Write a model snapshot at every evaluation point, not only the resume file.
    pub snapshots: bool,
    pub d_size: usize,
    pub z_size: usize,
    pub model_hidden: usize,
    pub feature_size: usize,
    pub rl_hidden: Vec<usize>,
    pub lstm_size: usize,
    /// Dimension override for parameter counting without an environment.
    pub obs_dim: Option<usize>,
    pub action_dim: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            env: EnvName::Pendulum,
            variant: PoVariant::Full,
            agent: AgentKind::VrmSac,
            seed: 0,
            total_steps: 50_000,
            step_start_rl: 1000,
            fi_epochs: 5000,
            kl_interval: 5,
            rl_interval: 1,
            baseline_pretrain_updates: 5000,
            gamma: 0.99,
            tau: 0.005,
            lr_actor: 3e-4,
            lr_critic: 3e-4,
            lr_alpha: 3e-4,
            lr_model: 8e-4,
            seq_len: 64,
            batch_size: 4,
            burn_in_max: 64,
            buffer_capacity: crate::replay::DEFAULT_CAPACITY,
            eval_interval: 2000,
            eval_episodes: 10,
            eval_deterministic: false,
            snapshots: true,
            d_size: 256,
            z_size: 64,
            model_hidden: 128,
            feature_size: 128,
            rl_hidden: vec![256, 256],
            lstm_size: 256,
            obs_dim: None,
            action_dim: None,
        }
    }
}

/// Every accepted key, in the order they are written back.
pub const KEYS: &[&str] = &[
    "env",
    "variant",
    "agent",
    "seed",
    "total_steps",
    "step_start_rl",
    "fi_epochs",
    "kl_interval",
    "rl_interval",
    "baseline_pretrain_updates",
    "gamma",
    "tau",
    "lr_actor",
    "lr_critic",
    "lr_alpha",
    "lr_model",
    "seq_len",
    "batch_size",
    "burn_in_max",
    "buffer_capacity",
    "eval_interval",
    "eval_episodes",
    "eval_deterministic",
    "snapshots",
    "d_size",
    "z_size",
    "model_hidden",
    "feature_size",
    "rl_hidden",
    "lstm_size",
    "obs_dim",
    "action_dim",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => config_err(format!("invalid boolean `{value}` for `{key}`")),
    }
}

/// Problem dimensions the networks are built for.
#[derive(Clone, Debug, PartialEq)]
pub struct Dims {
    /// Observation plus the previous reward.
    pub x_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
}

impl TrainConfig {
    /// Parse a config file body: `key = value` lines, `#` comments, blank lines.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            cfg.set_line(line).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one `key=value` override.
    pub fn set_line(&mut self, line: &str) -> Result<()> {
        let Some((k, v)) = line.split_once('=') else {
            return config_err(format!("expected `key = value`, got `{line}`"));
        };
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "env" => self.env = value.parse()?,
            "variant" => self.variant = value.parse()?,
            "agent" => self.agent = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            "total_steps" => self.total_steps = parse(key, value)?,
            "step_start_rl" => self.step_start_rl = parse(key, value)?,
            "fi_epochs" => self.fi_epochs = parse(key, value)?,
            "kl_interval" => self.kl_interval = parse(key, value)?,
            "rl_interval" => self.rl_interval = parse(key, value)?,
            "baseline_pretrain_updates" => self.baseline_pretrain_updates = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "lr_actor" => self.lr_actor = parse(key, value)?,
            "lr_critic" => self.lr_critic = parse(key, value)?,
            "lr_alpha" => self.lr_alpha = parse(key, value)?,
            "lr_model" => self.lr_model = parse(key, value)?,
            "seq_len" => self.seq_len = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "burn_in_max" => self.burn_in_max = parse(key, value)?,
            "buffer_capacity" => self.buffer_capacity = parse(key, value)?,
            "eval_interval" => self.eval_interval = parse(key, value)?,
            "eval_episodes" => self.eval_episodes = parse(key, value)?,
            "eval_deterministic" => self.eval_deterministic = parse_bool(key, value)?,
            "snapshots" => self.snapshots = parse_bool(key, value)?,
            "d_size" => self.d_size = parse(key, value)?,
            "z_size" => self.z_size = parse(key, value)?,
            "model_hidden" => self.model_hidden = parse(key, value)?,
            "feature_size" => self.feature_size = parse(key, value)?,
            "rl_hidden" => {
                self.rl_hidden = value
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "lstm_size" => self.lstm_size = parse(key, value)?,
            "obs_dim" => self.obs_dim = Some(parse(key, value)?),
            "action_dim" => self.action_dim = Some(parse(key, value)?),
            _ => return config_err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("step_start_rl", self.step_start_rl),
            ("kl_interval", self.kl_interval),
            ("rl_interval", self.rl_interval),
            ("eval_interval", self.eval_interval),
        ] {
            if v == 0 {
                return config_err(format!("`{name}` must be at least 1"));
            }
        }
        for (name, v) in [
            ("seq_len", self.seq_len),
            ("batch_size", self.batch_size),
            ("buffer_capacity", self.buffer_capacity),
            ("d_size", self.d_size),
            ("z_size", self.z_size),
            ("model_hidden", self.model_hidden),
            ("feature_size", self.feature_size),
            ("lstm_size", self.lstm_size),
        ] {
            if v == 0 {
                return config_err(format!("`{name}` must be positive"));
            }
        }
        if (self.buffer_capacity as u64) < self.step_start_rl {
            return config_err("`buffer_capacity` must hold at least `step_start_rl` steps");
        }
        if self.rl_hidden.is_empty() || self.rl_hidden.contains(&0) {
            return config_err("`rl_hidden` must list positive widths");
        }
        for (name, v) in [
            ("lr_actor", self.lr_actor),
            ("lr_critic", self.lr_critic),
            ("lr_alpha", self.lr_alpha),
            ("lr_model", self.lr_model),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return config_err(format!("`{name}` must be positive, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.tau) {
            return config_err("`gamma` and `tau` must lie in [0, 1]");
        }
        if self.obs_dim.is_some() != self.action_dim.is_some() {
            return config_err("`obs_dim` and `action_dim` must be given together");
        }
        if self.obs_dim == Some(0) || self.action_dim == Some(0) {
            return config_err("`obs_dim` and `action_dim` must be positive");
        }
        Ok(())
    }

    pub fn env_spec(&self) -> Result<EnvSpec> {
        EnvSpec::new(self.env, self.variant)
    }

    /// Dimensions for building networks. An explicit `obs_dim`/`action_dim`
    /// pair wins (with unit action bounds), which allows counting parameters
    /// for problems that have no environment here.
    pub fn dims(&self) -> Result<Dims> {
        if let (Some(o), Some(a)) = (self.obs_dim, self.action_dim) {
            return Ok(Dims {
                x_dim: o + 1,
                action_dim: a,
                action_low: vec![-1.0; a],
                action_high: vec![1.0; a],
            });
        }
        let spec = self.env_spec()?;
        Ok(Dims {
            x_dim: spec.obs_dim + 1,
            action_dim: spec.action_dim,
            action_low: spec.action_low.clone(),
            action_high: spec.action_high.clone(),
        })
    }

    /// Checks that only apply when an environment will actually be run.
    pub fn validate_for_env(&self) -> Result<EnvSpec> {
        self.validate()?;
        let spec = self.env_spec()?;
        if let (Some(o), Some(a)) = (self.obs_dim, self.action_dim) {
            if o != spec.obs_dim || a != spec.action_dim {
                return config_err(format!(
                    "obs_dim/action_dim ({o}, {a}) disagree with {} {} ({}, {})",
                    self.env, self.variant, spec.obs_dim, spec.action_dim
                ));
            }
        }
        Ok(spec)
    }

    /// Width of the vector the controller consumes.
    pub fn belief_dim(&self) -> Result<usize> {
        let d = self.dims()?;
        Ok(match self.agent {
            AgentKind::SacLstm => self.lstm_size,
            kind => d.x_dim + kind.model_count() * self.d_size,
        })
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let value = match *key {
                "env" => self.env.to_string(),
                "variant" => self.variant.to_string(),
                "agent" => self.agent.to_string(),
                "seed" => self.seed.to_string(),
                "total_steps" => self.total_steps.to_string(),
                "step_start_rl" => self.step_start_rl.to_string(),
                "fi_epochs" => self.fi_epochs.to_string(),
                "kl_interval" => self.kl_interval.to_string(),
                "rl_interval" => self.rl_interval.to_string(),
                "baseline_pretrain_updates" => self.baseline_pretrain_updates.to_string(),
                "gamma" => format!("{:?}", self.gamma),
                "tau" => format!("{:?}", self.tau),
                "lr_actor" => format!("{:?}", self.lr_actor),
                "lr_critic" => format!("{:?}", self.lr_critic),
                "lr_alpha" => format!("{:?}", self.lr_alpha),
                "lr_model" => format!("{:?}", self.lr_model),
                "seq_len" => self.seq_len.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "burn_in_max" => self.burn_in_max.to_string(),
                "buffer_capacity" => self.buffer_capacity.to_string(),
                "eval_interval" => self.eval_interval.to_string(),
                "eval_episodes" => self.eval_episodes.to_string(),
                "eval_deterministic" => self.eval_deterministic.to_string(),
                "snapshots" => self.snapshots.to_string(),
                "d_size" => self.d_size.to_string(),
                "z_size" => self.z_size.to_string(),
                "model_hidden" => self.model_hidden.to_string(),
                "feature_size" => self.feature_size.to_string(),
                "rl_hidden" => self.rl_hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(","),
                "lstm_size" => self.lstm_size.to_string(),
                "obs_dim" => match self.obs_dim {
                    Some(v) => v.to_string(),
                    None => continue,
                },
                "action_dim" => match self.action_dim {
                    Some(v) => v.to_string(),
                    None => continue,
                },
                _ => unreachable!("every key is listed"),
            };
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_follow_published_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!((c.step_start_rl, c.fi_epochs, c.kl_interval, c.rl_interval), (1000, 5000, 5, 1));
        assert_eq!((c.seq_len, c.batch_size, c.burn_in_max), (64, 4, 64));
        assert_eq!((c.lr_actor, c.lr_model, c.gamma, c.tau), (3e-4, 8e-4, 0.99, 0.005));
        assert_eq!(c.rl_hidden, vec![256, 256]);
    }

    #[test]
    fn parses_comments_and_overrides() {
        let c = TrainConfig::from_text("# pendulum\nenv = cartpole\nvariant=novel  # po\n\nagent = sac-lstm\nrl_hidden = 64, 32\n")
            .unwrap();
        assert_eq!((c.env, c.variant, c.agent), (EnvName::CartPole, PoVariant::NoVelocities, AgentKind::SacLstm));
        assert_eq!(c.rl_hidden, vec![64, 32]);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let e = TrainConfig::from_text("envv = pendulum").unwrap_err().to_string();
        assert!(e.contains("line 1") && e.contains("unknown key `envv`"), "{e}");
        assert!(TrainConfig::from_text("seed = -1").is_err());
        assert!(TrainConfig::from_text("kl_interval = 0").is_err());
        assert!(TrainConfig::from_text("agent = dreamer").is_err());
        assert!(TrainConfig::from_text("no equals sign").is_err());
        assert!(TrainConfig::from_text("obs_dim = 6").is_err());
    }

    #[test]
    fn belief_dims_per_kind() {
        let mut c = TrainConfig {
            variant: PoVariant::NoVelocities,
            ..TrainConfig::default()
        };
        let expect = [
            (AgentKind::VrmSac, 2 + 1 + 512),
            (AgentKind::SacMlp, 3),
            (AgentKind::SacLstm, 256),
            (AgentKind::SingleVrm, 3 + 256),
            (AgentKind::FiOnly, 3 + 256),
            (AgentKind::KlOnly, 3 + 256),
            (AgentKind::DeterministicModel, 3 + 512),
        ];
        for (kind, n) in expect {
            c.agent = kind;
            assert_eq!(c.belief_dim().unwrap(), n, "{kind}");
        }
    }

    #[test]
    fn dims_override_for_counting() {
        let c = TrainConfig::from_text("obs_dim = 6\naction_dim = 3").unwrap();
        let d = c.dims().unwrap();
        assert_eq!((d.x_dim, d.action_dim), (7, 3));
        assert!(c.validate_for_env().is_err());
    }

    proptest! {
        #[test]
        fn text_round_trip(seed in any::<u64>(), steps in 1u64..1_000_000, lr in 1e-6f64..1.0,
                           kind in 0usize..7, seq in 1usize..128, dims in proptest::option::of((1usize..40, 1usize..8))) {
            let mut c = TrainConfig {
                seed,
                total_steps: steps,
                lr_model: lr,
                agent: AgentKind::ALL[kind],
                seq_len: seq,
                ..TrainConfig::default()
            };
            if let Some((o, a)) = dims {
                c.obs_dim = Some(o);
                c.action_dim = Some(a);
            }
            prop_assert_eq!(TrainConfig::from_text(&c.to_text()).unwrap(), c);
        }
    }
}

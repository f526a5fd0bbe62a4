//! Deterministic control tasks with partially observable variants.
//!
//! Every environment exposes the same reset/step interface through [`Env`].
//! A [`PoVariant`] projects the raw observation onto a fixed index subset
//! (dropping velocities, or keeping only velocities).

mod cartpole;
mod pendulum;
mod seqreach;

use std::fmt;
use std::str::FromStr;

pub use cartpole::CartPole;
pub use pendulum::Pendulum;
pub use seqreach::{SeqReach, CONTACT_RADIUS, MIN_SEPARATION, REWARD_SCHEDULE};

use crate::error::{config_err, usage_err, Error, Result};
use crate::rng::{substream, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EnvName {
    Pendulum,
    CartPole,
    SeqReach,
}

impl EnvName {
    pub const ALL: [EnvName; 3] = [EnvName::Pendulum, EnvName::CartPole, EnvName::SeqReach];

    pub fn as_str(self) -> &'static str {
        match self {
            EnvName::Pendulum => "pendulum",
            EnvName::CartPole => "cartpole",
            EnvName::SeqReach => "seqreach",
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
        match s.to_ascii_lowercase().as_str() {
            "pendulum" => Ok(EnvName::Pendulum),
            "cartpole" => Ok(EnvName::CartPole),
            "seqreach" => Ok(EnvName::SeqReach),
            other => config_err(format!("unknown environment `{other}` (pendulum|cartpole|seqreach)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoVariant {
    Full,
    NoVelocities,
    VelocitiesOnly,
}

impl PoVariant {
    pub const ALL: [PoVariant; 3] = [PoVariant::Full, PoVariant::NoVelocities, PoVariant::VelocitiesOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            PoVariant::Full => "full",
            PoVariant::NoVelocities => "novel",
            PoVariant::VelocitiesOnly => "velonly",
        }
    }
}

impl fmt::Display for PoVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PoVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(PoVariant::Full),
            "novel" => Ok(PoVariant::NoVelocities),
            "velonly" => Ok(PoVariant::VelocitiesOnly),
            other => config_err(format!("unknown observation variant `{other}` (full|novel|velonly)")),
        }
    }
}

/// Static description of an (environment, variant) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub name: EnvName,
    pub variant: PoVariant,
    /// Dimension of the observation after the variant mask.
    pub obs_dim: usize,
    pub raw_obs_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub max_steps: usize,
}

impl EnvSpec {
    pub fn new(name: EnvName, variant: PoVariant) -> Result<Self> {
        let (raw, dof, bound, max_steps) = match name {
            EnvName::Pendulum => (3, 1, pendulum::MAX_TORQUE, 200),
            EnvName::CartPole => (4, 1, 1.0, 1000),
            EnvName::SeqReach => (12, 2, 1.0, 128),
        };
        let obs_dim = observed_indices(name, variant)?.len();
        Ok(EnvSpec {
            name,
            variant,
            obs_dim,
            raw_obs_dim: raw,
            action_dim: dof,
            action_low: vec![-bound; dof],
            action_high: vec![bound; dof],
            max_steps,
        })
    }

    /// Clip every component into the action box.
    pub fn clip_action(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(&a, (&lo, &hi))| if a.is_nan() { 0.5 * (lo + hi) } else { a.clamp(lo, hi) })
            .collect()
    }
}

/// Raw-observation indices kept by `variant`.
pub fn observed_indices(name: EnvName, variant: PoVariant) -> Result<&'static [usize]> {
    use EnvName::*;
    use PoVariant::*;
    const SEQ_ALL: [usize; 12] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11];
    match (name, variant) {
        // (cos th, sin th, th_dot)
        (Pendulum, Full) => Ok(&[0, 1, 2]),
        (Pendulum, NoVelocities) => Ok(&[0, 1]),
        (Pendulum, VelocitiesOnly) => Ok(&[2]),
        // (x, x_dot, th, th_dot)
        (CartPole, Full) => Ok(&[0, 1, 2, 3]),
        (CartPole, NoVelocities) => Ok(&[0, 2]),
        (CartPole, VelocitiesOnly) => Ok(&[1, 3]),
        (SeqReach, Full) => Ok(&SEQ_ALL),
        (SeqReach, v) => config_err(format!(
            "seqreach has no velocity components; variant `{v}` is not supported"
        )),
    }
}

/// Project a raw observation onto the components `variant` keeps.
pub fn apply_po_mask(name: EnvName, variant: PoVariant, raw: &[f64]) -> Result<Vec<f64>> {
    let idx = observed_indices(name, variant)?;
    if let Some(&max) = idx.iter().max() {
        if max >= raw.len() {
            return config_err(format!("raw observation of length {} too short for {name}", raw.len()));
        }
    }
    Ok(idx.iter().map(|&i| raw[i]).collect())
}

/// Side information of one transition.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepInfo {
    /// The episode ended only because the step limit was reached.
    pub timeout: bool,
    /// Sequential task completed (always false elsewhere).
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// Raw physics of one task, without step counting or masking.
pub trait Dynamics: Send {
    /// Fresh hidden state; returns the raw observation.
    fn reset(&mut self, rng: &mut Rng) -> Vec<f64>;
    /// Advance one step with an already clipped action.
    fn step(&mut self, action: &[f64]) -> RawStep;
    fn raw_observation(&self) -> Vec<f64>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawStep {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
    pub success: bool,
}

/// Stateful environment handle.
pub struct Env {
    spec: EnvSpec,
    dynamics: Box<dyn Dynamics>,
    rng: Rng,
    steps: usize,
    done: bool,
    started: bool,
}

/// Build an environment; `seed` drives every reset until reseeded.
pub fn make_env(name: EnvName, variant: PoVariant, seed: u64) -> Result<Env> {
    let spec = EnvSpec::new(name, variant)?;
    let dynamics: Box<dyn Dynamics> = match name {
        EnvName::Pendulum => Box::new(Pendulum::default()),
        EnvName::CartPole => Box::new(CartPole::default()),
        EnvName::SeqReach => Box::new(SeqReach::default()),
    };
    Ok(Env {
        spec,
        dynamics,
        rng: substream(seed, "env-reset"),
        steps: 0,
        done: true,
        started: false,
    })
}

impl Env {
    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Generator driving resets, for checkpointing.
    pub fn reset_rng(&self) -> &Rng {
        &self.rng
    }

    pub fn set_reset_rng(&mut self, rng: Rng) {
        self.rng = rng;
    }

    /// Start a new episode using the handle's own random stream.
    pub fn reset(&mut self) -> Vec<f64> {
        self.steps = 0;
        self.done = false;
        self.started = true;
        let raw = self.dynamics.reset(&mut self.rng);
        self.mask(&raw)
    }

    /// Reseed the reset stream, then [`Env::reset`].
    pub fn reset_with_seed(&mut self, seed: u64) -> Vec<f64> {
        self.rng = substream(seed, "env-reset");
        self.reset()
    }

    fn mask(&self, raw: &[f64]) -> Vec<f64> {
        apply_po_mask(self.spec.name, self.spec.variant, raw).expect("variant validated at construction")
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        if !self.started || self.done {
            return usage_err("step called on a finished episode; call reset first");
        }
        if action.len() != self.spec.action_dim {
            return Err(Error::Usage(format!(
                "action has {} components, {} expects {}",
                action.len(),
                self.spec.name,
                self.spec.action_dim
            )));
        }
        let a = self.spec.clip_action(action);
        let raw = self.dynamics.step(&a);
        self.steps += 1;
        let timeout = !raw.terminal && self.steps >= self.spec.max_steps;
        self.done = raw.terminal || timeout;
        Ok(StepOutcome {
            obs: self.mask(&raw.obs),
            reward: raw.reward,
            done: self.done,
            info: StepInfo {
                timeout,
                success: raw.success,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_dimensions() {
        let rows = [
            (EnvName::Pendulum, PoVariant::Full, 3, 1, 200),
            (EnvName::Pendulum, PoVariant::VelocitiesOnly, 1, 1, 200),
            (EnvName::Pendulum, PoVariant::NoVelocities, 2, 1, 200),
            (EnvName::CartPole, PoVariant::Full, 4, 1, 1000),
            (EnvName::CartPole, PoVariant::VelocitiesOnly, 2, 1, 1000),
            (EnvName::CartPole, PoVariant::NoVelocities, 2, 1, 1000),
            (EnvName::SeqReach, PoVariant::Full, 12, 2, 128),
        ];
        for (name, variant, obs, dof, max) in rows {
            let mut env = make_env(name, variant, 0).unwrap();
            let s = env.spec().clone();
            assert_eq!((s.obs_dim, s.action_dim, s.max_steps), (obs, dof, max), "{name} {variant}");
            assert_eq!(env.reset().len(), obs);
        }
        assert!(make_env(EnvName::SeqReach, PoVariant::NoVelocities, 0).is_err());
        assert!(make_env(EnvName::SeqReach, PoVariant::VelocitiesOnly, 0).is_err());
    }

    #[test]
    fn names_parse() {
        assert_eq!("pendulum".parse::<EnvName>().unwrap(), EnvName::Pendulum);
        assert_eq!("novel".parse::<PoVariant>().unwrap(), PoVariant::NoVelocities);
        assert!("hopper".parse::<EnvName>().is_err());
        assert!("partial".parse::<PoVariant>().is_err());
    }

    #[test]
    fn po_masks() {
        let raw = [0.6, 0.8, -3.0];
        assert_eq!(apply_po_mask(EnvName::Pendulum, PoVariant::NoVelocities, &raw).unwrap(), vec![0.6, 0.8]);
        assert_eq!(apply_po_mask(EnvName::Pendulum, PoVariant::VelocitiesOnly, &raw).unwrap(), vec![-3.0]);
        assert_eq!(apply_po_mask(EnvName::Pendulum, PoVariant::Full, &raw).unwrap(), raw.to_vec());
        let cart = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(apply_po_mask(EnvName::CartPole, PoVariant::NoVelocities, &cart).unwrap(), vec![1.0, 3.0]);
        assert_eq!(apply_po_mask(EnvName::CartPole, PoVariant::VelocitiesOnly, &cart).unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn step_after_done_is_usage_error() {
        let mut env = make_env(EnvName::Pendulum, PoVariant::Full, 1).unwrap();
        assert!(env.step(&[0.0]).is_err(), "step before reset");
        env.reset();
        let mut last = None;
        for _ in 0..200 {
            last = Some(env.step(&[0.0]).unwrap());
        }
        let last = last.unwrap();
        assert!(last.done && last.info.timeout);
        assert!(matches!(env.step(&[0.0]), Err(Error::Usage(_))));
    }

    #[test]
    fn same_seed_same_trajectory() {
        for name in EnvName::ALL {
            let run = |seed| {
                let mut env = make_env(name, PoVariant::Full, seed).unwrap();
                let mut obs = env.reset();
                let dof = env.spec().action_dim;
                for k in 0..50 {
                    let a: Vec<f64> = (0..dof).map(|j| ((k * 7 + j) as f64 * 0.37).sin()).collect();
                    let out = env.step(&a).unwrap();
                    obs.extend(out.obs);
                    obs.push(out.reward);
                    if out.done {
                        break;
                    }
                }
                obs
            };
            let a = run(3);
            let b = run(3);
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()), "{name}");
            assert_ne!(a, run(4), "{name}");
        }
    }

    #[test]
    fn reset_with_seed_is_reproducible() {
        let mut env = make_env(EnvName::SeqReach, PoVariant::Full, 0).unwrap();
        let a = env.reset_with_seed(17);
        env.reset();
        let b = env.reset_with_seed(17);
        assert_eq!(a, b);
    }

    #[test]
    fn out_of_bound_actions_are_clipped() {
        let spec = EnvSpec::new(EnvName::Pendulum, PoVariant::Full).unwrap();
        assert_eq!(spec.clip_action(&[5.0]), vec![2.0]);
        assert_eq!(spec.clip_action(&[-5.0]), vec![-2.0]);
        let mut a = make_env(EnvName::CartPole, PoVariant::Full, 2).unwrap();
        let mut b = make_env(EnvName::CartPole, PoVariant::Full, 2).unwrap();
        a.reset();
        b.reset();
        assert_eq!(a.step(&[50.0]).unwrap(), b.step(&[1.0]).unwrap());
    }
}

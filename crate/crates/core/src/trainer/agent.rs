//! The learner: optional recurrent models feeding a soft actor-critic.

use log::info;

use super::config::{AgentKind, Dims, TrainConfig};
use crate::diffcore::{Checkpoint, RecurrentState, Tensor};
use crate::error::{usage_err, Error, Result};
use crate::replay::{ReplayBuffer, SequenceBatch};
use crate::rng::{get_rng, put_rng, streams, substream, Rng};
use crate::sac::{Beliefs, RlMetrics, Sac, SacConfig, Transitions};
use crate::vrm::{Vrm, VrmConfig};

/// Random streams a learner draws from. Training owns one set; every
/// evaluation derives a fresh set so training streams never move.
#[derive(Clone, Debug)]
pub struct Streams {
    pub policy: Rng,
    pub vrm_fi: Rng,
    pub vrm_kl: Rng,
    pub replay: Rng,
    pub rl: Rng,
}

impl Streams {
    const NAMES: [&'static str; 5] = [streams::POLICY, streams::VRM_FI, streams::VRM_KL, streams::REPLAY, streams::RL];

    pub fn new(seed: u64) -> Self {
        Self::tagged(seed, "")
    }

    /// Streams named `{tag}/{name}`, independent of the training set.
    pub fn tagged(seed: u64, tag: &str) -> Self {
        let s = |name: &str| substream(seed, &format!("{tag}{name}"));
        Streams {
            policy: s(streams::POLICY),
            vrm_fi: s(streams::VRM_FI),
            vrm_kl: s(streams::VRM_KL),
            replay: s(streams::REPLAY),
            rl: s(streams::RL),
        }
    }

    fn all(&self) -> [&Rng; 5] {
        [&self.policy, &self.vrm_fi, &self.vrm_kl, &self.replay, &self.rl]
    }

    pub fn save_into(&self, ck: &mut Checkpoint, prefix: &str) {
        for (name, rng) in Self::NAMES.iter().zip(self.all()) {
            put_rng(ck, &format!("{prefix}/{name}"), rng);
        }
    }

    pub fn load_from(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let g = |name: &str| get_rng(ck, &format!("{prefix}/{name}"));
        Ok(Streams {
            policy: g(streams::POLICY)?,
            vrm_fi: g(streams::VRM_FI)?,
            vrm_kl: g(streams::VRM_KL)?,
            replay: g(streams::REPLAY)?,
            rl: g(streams::RL)?,
        })
    }
}

/// Updates performed at the start step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PretrainReport {
    pub model_updates: u64,
    pub rl_updates: u64,
    /// Loss of the last pre-training model update.
    pub final_loss: Option<f64>,
}

/// What the training loop needs from a learner. Acting state lives outside
/// the learner so evaluation can act without touching training episodes.
pub trait Learner {
    type State;

    fn initial_state(&self) -> Self::State;

    /// Observe augmented `x` (after the previous action) and pick the next action.
    fn act(&self, state: &mut Self::State, x: &[f64], deterministic: bool, rngs: &mut Streams) -> Result<Vec<f64>>;

    fn pretrain(&mut self, buffer: &ReplayBuffer, rngs: &mut Streams) -> Result<PretrainReport>;

    /// Keep-learning model update; `None` if this learner has no such model.
    fn kl_update(&mut self, buffer: &ReplayBuffer, rngs: &mut Streams) -> Result<Option<f64>>;

    fn rl_update(&mut self, buffer: &ReplayBuffer, rngs: &mut Streams) -> Result<RlMetrics>;

    /// Current model losses on one sampled batch, `(frozen, keep-learning)`.
    fn model_losses(&self, buffer: &ReplayBuffer, rngs: &mut Streams) -> Result<(Option<f64>, Option<f64>)>;

    /// Hash of every parameter group, for side-effect checks.
    fn hashes(&self) -> Vec<String>;

    fn save_into(&self, ck: &mut Checkpoint, prefix: &str);

    fn load_from(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()>;
}

/// Per-episode acting state of an [`Agent`].
#[derive(Clone, Debug)]
pub struct AgentState {
    pub fi: Option<RecurrentState<f32>>,
    pub kl: Option<RecurrentState<f32>>,
    pub encoder: Option<RecurrentState<f32>>,
    pub prev_action: Vec<f64>,
}

pub struct Agent {
    kind: AgentKind,
    dims: Dims,
    seq_len: usize,
    batch_size: usize,
    burn_in_max: usize,
    step_start_rl: u64,
    fi_epochs: u64,
    baseline_pretrain_updates: u64,
    fi: Option<Vrm<f32>>,
    kl: Option<Vrm<f32>>,
    sac: Sac<f32>,
}

fn vrm_config(config: &TrainConfig, dims: &Dims) -> VrmConfig {
    VrmConfig {
        d_size: config.d_size,
        z_size: config.z_size,
        hidden_size: config.model_hidden,
        feature_size: config.feature_size,
        lr: config.lr_model,
        deterministic: config.agent.deterministic_models(),
        ..VrmConfig::new(dims.x_dim, dims.action_dim)
    }
    .with_action_bounds(&dims.action_low, &dims.action_high)
}

/// Column-wise concatenation of equally tall tensors.
fn hcat(parts: &[&Tensor<f32>]) -> Tensor<f32> {
    let rows = parts[0].rows();
    let cols: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Tensor::zeros(rows, cols);
    for r in 0..rows {
        let mut c = 0;
        for p in parts {
            out.row_mut(r)[c..c + p.cols()].copy_from_slice(p.row(r));
            c += p.cols();
        }
    }
    out
}

impl Agent {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let dims = config.dims()?;
        let kind = config.agent;
        let init = |name: &str| substream(config.seed, &format!("{}-{name}", streams::INIT));
        let fi = match kind.has_fi() {
            true => Some(Vrm::new(vrm_config(config, &dims), &mut init(streams::VRM_FI))?),
            false => None,
        };
        let kl = match kind.has_kl() {
            true => Some(Vrm::new(vrm_config(config, &dims), &mut init(streams::VRM_KL))?),
            false => None,
        };
        let sac_config = SacConfig {
            hidden: config.rl_hidden.clone(),
            lr_actor: config.lr_actor,
            lr_critic: config.lr_critic,
            lr_alpha: config.lr_alpha,
            gamma: config.gamma,
            tau: config.tau,
            ..SacConfig::new(config.belief_dim()?, &dims.action_low, &dims.action_high)
        };
        let encoder = (kind == AgentKind::SacLstm).then_some(dims.x_dim);
        let sac = Sac::new(sac_config, encoder, &mut init(streams::RL))?;
        Ok(Agent {
            kind,
            dims,
            seq_len: config.seq_len,
            batch_size: config.batch_size,
            burn_in_max: config.burn_in_max,
            step_start_rl: config.step_start_rl,
            fi_epochs: config.fi_epochs,
            baseline_pretrain_updates: config.baseline_pretrain_updates,
            fi,
            kl,
            sac,
        })
    }

    pub fn kind(&self) -> AgentKind {
        self.kind
    }

    pub fn dims(&self) -> &Dims {
        &self.dims
    }

    pub fn fi(&self) -> Option<&Vrm<f32>> {
        self.fi.as_ref()
    }

    pub fn kl(&self) -> Option<&Vrm<f32>> {
        self.kl.as_ref()
    }

    pub fn sac(&self) -> &Sac<f32> {
        &self.sac
    }

    /// Model used for prediction diagnostics: keep-learning if present.
    pub fn prediction_model(&self) -> Option<&Vrm<f32>> {
        self.kl.as_ref().or(self.fi.as_ref())
    }

    pub fn param_count(&self) -> usize {
        self.fi.as_ref().map_or(0, Vrm::param_count) + self.kl.as_ref().map_or(0, Vrm::param_count) + self.sac.param_count()
    }

    /// Controller input: `x` followed by the hidden vectors of the models
    /// this agent kind includes, or the encoder features for the recurrent
    /// baseline.
    pub fn build_belief(&self, x: &[f64], state: &AgentState) -> Vec<f64> {
        if let Some(enc) = &state.encoder {
            return enc.hidden.to_f64();
        }
        let mut b = x.to_vec();
        for s in [&state.fi, &state.kl].into_iter().flatten() {
            b.extend(s.hidden.to_f64());
        }
        b
    }

    fn sample(&self, buffer: &ReplayBuffer, rng: &mut Rng) -> Result<SequenceBatch> {
        buffer.sample_sequences(self.batch_size, self.seq_len, self.burn_in_max, rng)
    }

    /// Time-major belief rows over `seq_len + 1` positions; model states are
    /// plain values, so no controller gradient reaches the models.
    fn batch_beliefs(&self, batch: &SequenceBatch, rngs: &mut Streams) -> Result<Tensor<f32>> {
        let xs = batch.vector_rows::<f32>(batch.seq_len + 1, self.dims.x_dim, |r| &r.x);
        let fi = match &self.fi {
            Some(m) => Some(m.hidden_sequence(batch, &mut rngs.vrm_fi)?),
            None => None,
        };
        let kl = match &self.kl {
            Some(m) => Some(m.hidden_sequence(batch, &mut rngs.vrm_kl)?),
            None => None,
        };
        let mut parts = vec![&xs];
        parts.extend(fi.as_ref());
        parts.extend(kl.as_ref());
        Ok(hcat(&parts))
    }

    fn check_buffer(&self, buffer: &ReplayBuffer) -> Result<()> {
        if (buffer.size() as u64) < self.step_start_rl.max(1) {
            return usage_err(format!(
                "pre-training needs at least {} stored steps, buffer holds {}",
                self.step_start_rl.max(1),
                buffer.size()
            ));
        }
        Ok(())
    }
}

impl Learner for Agent {
    type State = AgentState;

    fn initial_state(&self) -> AgentState {
        AgentState {
            fi: self.fi.as_ref().map(|m| m.zero_state(1)),
            kl: self.kl.as_ref().map(|m| m.zero_state(1)),
            encoder: self.sac.encoder().map(|e| e.zero_state(1)),
            prev_action: vec![0.0; self.dims.action_dim],
        }
    }

    fn act(&self, state: &mut AgentState, x: &[f64], deterministic: bool, rngs: &mut Streams) -> Result<Vec<f64>> {
        if x.len() != self.dims.x_dim {
            return Err(Error::Usage(format!("observation has {} values, expected {}", x.len(), self.dims.x_dim)));
        }
        if let (Some(m), Some(s)) = (&self.fi, &state.fi) {
            state.fi = Some(m.observe(s, x, &state.prev_action, &mut rngs.vrm_fi)?);
        }
        if let (Some(m), Some(s)) = (&self.kl, &state.kl) {
            state.kl = Some(m.observe(s, x, &state.prev_action, &mut rngs.vrm_kl)?);
        }
        if let (Some(e), Some(s)) = (self.sac.encoder(), &state.encoder) {
            state.encoder = Some(e.observe(s, x)?);
        }
        let belief = self.build_belief(x, state);
        let a = self.sac.select_action(&belief, deterministic, &mut rngs.policy)?;
        state.prev_action = a.clone();
        Ok(a)
    }

    fn pretrain(&mut self, buffer: &ReplayBuffer, rngs: &mut Streams) -> Result<PretrainReport> {
        self.check_buffer(buffer)?;
        let mut report = PretrainReport::default();
        if self.fi.is_some() || self.kind.pretrains_kl() {
            info!("pre-training for {} epochs on {} steps", self.fi_epochs, buffer.size());
        }
        if let Some(mut m) = self.fi.take() {
            for _ in 0..self.fi_epochs {
                let batch = self.sample(buffer, &mut rngs.replay)?;
                report.final_loss = Some(m.fit_step(&batch, &mut rngs.vrm_fi)?.loss);
                report.model_updates += 1;
            }
            m.freeze();
            self.fi = Some(m);
        }
        if self.kind.pretrains_kl() {
            let mut m = self.kl.take().expect("single-model kind has a keep-learning model");
            for _ in 0..self.fi_epochs {
                let batch = self.sample(buffer, &mut rngs.replay)?;
                report.final_loss = Some(m.fit_step(&batch, &mut rngs.vrm_kl)?.loss);
                report.model_updates += 1;
            }
            self.kl = Some(m);
        }
        if self.kind.is_baseline() {
            info!("pre-training the controller for {} updates", self.baseline_pretrain_updates);
            for _ in 0..self.baseline_pretrain_updates {
                self.rl_update(buffer, rngs)?;
                report.rl_updates += 1;
            }
        }
        Ok(report)
    }

    fn kl_update(&mut self, buffer: &ReplayBuffer, rngs: &mut Streams) -> Result<Option<f64>> {
        if self.kl.is_none() {
            return Ok(None);
        }
        let batch = self.sample(buffer, &mut rngs.replay)?;
        let m = self.kl.as_mut().expect("checked above");
        Ok(Some(m.fit_step(&batch, &mut rngs.vrm_kl)?.loss))
    }

    fn rl_update(&mut self, buffer: &ReplayBuffer, rngs: &mut Streams) -> Result<RlMetrics> {
        let batch = self.sample(buffer, &mut rngs.replay)?;
        let tr = Transitions::from_batch(&batch, self.sac.config());
        match self.sac.encoder() {
            Some(enc) => {
                let init = enc.burn_in(&batch)?;
                let beliefs = Beliefs::Encoded {
                    batch: &batch,
                    init: &init,
                };
                self.sac.rl_update(&beliefs, &tr, &mut rngs.rl)
            }
            None => {
                let rows = self.batch_beliefs(&batch, rngs)?;
                self.sac.rl_update(&Beliefs::Fixed(&rows), &tr, &mut rngs.rl)
            }
        }
    }

    fn model_losses(&self, buffer: &ReplayBuffer, rngs: &mut Streams) -> Result<(Option<f64>, Option<f64>)> {
        if buffer.is_empty() || (self.fi.is_none() && self.kl.is_none()) {
            return Ok((None, None));
        }
        let batch = self.sample(buffer, &mut rngs.replay)?;
        let loss = |m: &Vrm<f32>, rng: &mut Rng| -> Result<f64> {
            let init = m.burn_in_unroll(&batch, rng)?;
            let noise = m.draw_noise(rng, batch.batch_size(), batch.seq_len);
            Ok(m.elbo_loss(&batch, &init, &noise).loss)
        };
        let fi = match &self.fi {
            Some(m) => Some(loss(m, &mut rngs.vrm_fi)?),
            None => None,
        };
        let kl = match &self.kl {
            Some(m) => Some(loss(m, &mut rngs.vrm_kl)?),
            None => None,
        };
        Ok((fi, kl))
    }

    fn hashes(&self) -> Vec<String> {
        let mut out = Vec::new();
        out.extend(self.fi.as_ref().map(|m| format!("fi:{}", m.hash())));
        out.extend(self.kl.as_ref().map(|m| format!("kl:{}", m.hash())));
        out.push(format!("rl:{}", self.sac.hash()));
        out
    }

    fn save_into(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.put_bytes(&format!("{prefix}/kind"), self.kind.as_str().as_bytes());
        if let Some(m) = &self.fi {
            m.save_into(ck, &format!("{prefix}/fi"));
        }
        if let Some(m) = &self.kl {
            m.save_into(ck, &format!("{prefix}/kl"));
        }
        self.sac.save_into(ck, &format!("{prefix}/rl"));
    }

    fn load_from(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        let kind = std::str::from_utf8(ck.get_bytes(&format!("{prefix}/kind"))?).unwrap_or("?");
        if kind != self.kind.as_str() {
            return Err(Error::Checkpoint(format!("checkpoint holds a `{kind}` agent, expected `{}`", self.kind)));
        }
        // load into copies first so a failure leaves the agent untouched
        let mut new_fi = None;
        if let Some(m) = &self.fi {
            let mut c = Vrm::new(m.config().clone(), &mut substream(0, "scratch"))?;
            c.load_from(ck, &format!("{prefix}/fi"))?;
            new_fi = Some(c);
        }
        let mut new_kl = None;
        if let Some(m) = &self.kl {
            let mut c = Vrm::new(m.config().clone(), &mut substream(0, "scratch"))?;
            c.load_from(ck, &format!("{prefix}/kl"))?;
            new_kl = Some(c);
        }
        self.sac.load_from(ck, &format!("{prefix}/rl"))?;
        self.fi = new_fi;
        self.kl = new_kl;
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::envs::PoVariant;
    use crate::replay::StepRecord;

    /// Small widths so construction and updates are fast.
    pub(crate) fn tiny(kind: AgentKind) -> TrainConfig {
        TrainConfig {
            agent: kind,
            variant: PoVariant::NoVelocities,
            d_size: 6,
            z_size: 3,
            model_hidden: 5,
            feature_size: 4,
            rl_hidden: vec![8, 8],
            lstm_size: 7,
            seq_len: 8,
            batch_size: 2,
            burn_in_max: 4,
            step_start_rl: 30,
            fi_epochs: 3,
            baseline_pretrain_updates: 2,
            ..TrainConfig::default()
        }
    }

    fn filled_buffer(n: usize) -> ReplayBuffer {
        let mut b = ReplayBuffer::new(3, 1, 1000);
        let mut prev = 0.0;
        for t in 0..n {
            let ph = t as f64 * 0.3;
            let done = t % 20 == 19;
            b.append(StepRecord::new(vec![ph.cos(), ph.sin(), prev], vec![ph.sin()], -ph.cos(), done, done))
                .unwrap();
            prev = if done { 0.0 } else { -ph.cos() };
        }
        b
    }

    #[test]
    fn belief_lengths_match_formula() {
        for kind in AgentKind::ALL {
            let cfg = tiny(kind);
            let agent = Agent::new(&cfg).unwrap();
            let mut st = agent.initial_state();
            let mut rngs = Streams::new(0);
            agent.act(&mut st, &[0.1, 0.2, 0.0], false, &mut rngs).unwrap();
            let b = agent.build_belief(&[0.1, 0.2, 0.0], &st);
            assert_eq!(b.len(), cfg.belief_dim().unwrap(), "{kind}");
            let expect = match kind {
                AgentKind::SacLstm => 7,
                k => 3 + 6 * k.model_count(),
            };
            assert_eq!(b.len(), expect);
        }
    }

    #[test]
    fn rl_update_leaves_models_untouched() {
        let mut agent = Agent::new(&tiny(AgentKind::VrmSac)).unwrap();
        let buf = filled_buffer(60);
        let mut rngs = Streams::new(1);
        let fi = agent.fi().unwrap().hash();
        let kl = agent.kl().unwrap().hash();
        let rl = agent.sac().hash();
        for _ in 0..3 {
            agent.rl_update(&buf, &mut rngs).unwrap();
        }
        assert_eq!((agent.fi().unwrap().hash(), agent.kl().unwrap().hash()), (fi, kl));
        assert_ne!(agent.sac().hash(), rl);
    }

    #[test]
    fn pretrain_freezes_and_counts() {
        let buf = filled_buffer(60);
        for kind in AgentKind::ALL {
            let mut agent = Agent::new(&tiny(kind)).unwrap();
            let mut rngs = Streams::new(2);
            let r = agent.pretrain(&buf, &mut rngs).unwrap();
            let expect_models = 3 * (u64::from(kind.has_fi()) + u64::from(kind.pretrains_kl()));
            assert_eq!(r.model_updates, expect_models, "{kind}");
            assert_eq!(r.rl_updates, if kind.is_baseline() { 2 } else { 0 });
            if let Some(m) = agent.fi() {
                assert!(m.is_frozen());
                let h = m.hash();
                agent.kl_update(&buf, &mut rngs).unwrap();
                agent.rl_update(&buf, &mut rngs).unwrap();
                assert_eq!(agent.fi().unwrap().hash(), h);
            }
            assert_eq!(agent.kl_update(&buf, &mut rngs).unwrap().is_some(), kind.has_kl());
        }
    }

    #[test]
    fn zero_epochs_still_freezes() {
        let mut cfg = tiny(AgentKind::VrmSac);
        cfg.fi_epochs = 0;
        let mut agent = Agent::new(&cfg).unwrap();
        let h = agent.fi().unwrap().hash();
        agent.pretrain(&filled_buffer(60), &mut Streams::new(0)).unwrap();
        assert!(agent.fi().unwrap().is_frozen());
        assert_eq!(agent.fi().unwrap().hash(), h);
    }

    #[test]
    fn pretrain_needs_enough_data() {
        let mut agent = Agent::new(&tiny(AgentKind::VrmSac)).unwrap();
        assert!(agent.pretrain(&filled_buffer(10), &mut Streams::new(0)).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_kind_check() {
        let buf = filled_buffer(60);
        let mut agent = Agent::new(&tiny(AgentKind::VrmSac)).unwrap();
        let mut rngs = Streams::new(3);
        agent.pretrain(&buf, &mut rngs).unwrap();
        agent.rl_update(&buf, &mut rngs).unwrap();
        let mut ck = Checkpoint::new();
        agent.save_into(&mut ck, "agent");
        let mut other = Agent::new(&TrainConfig {
            seed: 9,
            ..tiny(AgentKind::VrmSac)
        })
        .unwrap();
        other.load_from(&ck, "agent").unwrap();
        assert_eq!(other.hashes(), agent.hashes());
        assert!(other.fi().unwrap().is_frozen());
        let mut wrong = Agent::new(&tiny(AgentKind::FiOnly)).unwrap();
        let before = wrong.hashes();
        assert!(wrong.load_from(&ck, "agent").is_err());
        assert_eq!(wrong.hashes(), before);
    }

    #[test]
    fn streams_round_trip() {
        let mut s = Streams::new(4);
        let _ = crate::rng::standard_normal(&mut s.replay);
        let mut ck = Checkpoint::new();
        s.save_into(&mut ck, "streams");
        let mut t = Streams::load_from(&ck, "streams").unwrap();
        assert_eq!(
            crate::rng::standard_normal(&mut s.replay),
            crate::rng::standard_normal(&mut t.replay)
        );
        assert_ne!(
            crate::rng::standard_normal(&mut Streams::tagged(4, "eval/").policy),
            crate::rng::standard_normal(&mut Streams::new(4).policy)
        );
    }
}

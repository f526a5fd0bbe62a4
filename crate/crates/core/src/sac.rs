//! Soft actor-critic on belief vectors: value network with a Polyak target,
//! twin Q networks, a tanh-squashed Gaussian policy and a learned entropy
//! temperature. An optional LSTM encoder turns raw observations into the
//! belief (the recurrent baseline).

use crate::diffcore::{
    Activation, Adam, BoundParams, Checkpoint, Graph, LstmCell, LstmVars, Mlp, ParamId, ParamStore, Real,
    RecurrentState, Tensor, Var,
};
use crate::error::{config_err, Error, Result};
use crate::replay::SequenceBatch;
use crate::rng::{normal_tensor, Rng};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Guard inside `log(1 - tanh(u)^2 + eps)`.
pub const SQUASH_EPS: f64 = 1e-6;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Clone, Debug, PartialEq)]
pub struct SacConfig {
    pub belief_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub hidden: Vec<usize>,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub lr_alpha: f64,
    pub gamma: f64,
    pub tau: f64,
    pub target_entropy: f64,
    pub init_log_alpha: f64,
}

impl SacConfig {
    pub fn new(belief_dim: usize, action_low: &[f64], action_high: &[f64]) -> Self {
        SacConfig {
            belief_dim,
            action_low: action_low.to_vec(),
            action_high: action_high.to_vec(),
            hidden: vec![256, 256],
            lr_actor: 3e-4,
            lr_critic: 3e-4,
            lr_alpha: 3e-4,
            gamma: 0.99,
            tau: 0.005,
            target_entropy: -(action_low.len() as f64),
            init_log_alpha: 0.0,
        }
    }

    pub fn action_dim(&self) -> usize {
        self.action_low.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.belief_dim == 0 || self.action_dim() == 0 || self.hidden.contains(&0) {
            return config_err("controller sizes must be positive");
        }
        if self.action_high.len() != self.action_low.len()
            || self.action_low.iter().zip(&self.action_high).any(|(l, h)| !(l.is_finite() && h.is_finite() && h > l))
        {
            return config_err("action bounds must be finite with low < high");
        }
        for (name, lr) in [("lr_actor", self.lr_actor), ("lr_critic", self.lr_critic), ("lr_alpha", self.lr_alpha)] {
            if !(lr.is_finite() && lr > 0.0) {
                return config_err(format!("{name} must be positive, got {lr}"));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.tau) {
            return config_err("gamma and tau must lie in [0, 1]");
        }
        Ok(())
    }

    fn mid(&self) -> Vec<f64> {
        self.action_low.iter().zip(&self.action_high).map(|(l, h)| 0.5 * (l + h)).collect()
    }

    fn half(&self) -> Vec<f64> {
        self.action_low.iter().zip(&self.action_high).map(|(l, h)| 0.5 * (h - l)).collect()
    }

    fn log_half_sum(&self) -> f64 {
        self.half().iter().map(|h| h.ln()).sum()
    }
}

/// Map a squashed action in `[-1, 1]` to the box.
pub fn bound_scale(squashed: &[f64], low: &[f64], high: &[f64]) -> Vec<f64> {
    squashed
        .iter()
        .zip(low.iter().zip(high))
        .map(|(&s, (&l, &h))| 0.5 * (l + h) + 0.5 * (h - l) * s)
        .collect()
}

// Loss pieces on graph values. Each takes per-sample `n x 1` columns and a
// `n x 1` validity mask, and averages over `denom` valid samples.

/// `0.5 (V - target)^2` with the target treated as a constant.
pub fn v_loss_graph<T: Real>(g: &mut Graph<T>, v: Var, target: Var, mask: Var, denom: f64) -> Var {
    let target = g.stop_gradient(target);
    let d = g.sub(v, target);
    let sq = g.square(d);
    let half = g.scale(sq, 0.5);
    g.masked_mean(half, mask, denom)
}

/// `min Q - alpha log pi`, the soft state value estimate.
pub fn soft_value_graph<T: Real>(g: &mut Graph<T>, min_q: Var, logp: Var, alpha: Var) -> Var {
    let ent = g.mul(logp, alpha);
    g.sub(min_q, ent)
}

/// `r + gamma (1 - done) V'(s')`, as a constant.
pub fn q_target_graph<T: Real>(g: &mut Graph<T>, reward: Var, not_done: Var, v_next: Var, gamma: f64) -> Var {
    let boot = g.mul(v_next, not_done);
    let boot = g.scale(boot, gamma);
    let y = g.add(reward, boot);
    g.stop_gradient(y)
}

pub fn q_loss_graph<T: Real>(g: &mut Graph<T>, q: Var, target: Var, mask: Var, denom: f64) -> Var {
    v_loss_graph(g, q, target, mask, denom)
}

/// `alpha log pi - Q`.
pub fn policy_loss_graph<T: Real>(g: &mut Graph<T>, logp: Var, min_q: Var, alpha: Var, mask: Var, denom: f64) -> Var {
    let ent = g.mul(logp, alpha);
    let l = g.sub(ent, min_q);
    g.masked_mean(l, mask, denom)
}

/// `-alpha (log pi + target_entropy)` with `log pi` treated as a constant.
pub fn alpha_loss_graph<T: Real>(
    g: &mut Graph<T>,
    log_alpha: Var,
    logp: Var,
    target_entropy: f64,
    mask: Var,
    denom: f64,
) -> Var {
    let alpha = g.exp(log_alpha);
    let lp = g.stop_gradient(logp);
    let shifted = g.offset(lp, target_entropy);
    let prod = g.mul(shifted, alpha);
    let l = g.neg(prod);
    g.masked_mean(l, mask, denom)
}

/// Graph handles for a batch of policy samples.
#[derive(Clone, Copy, Debug)]
pub struct PolicySample {
    pub mean: Var,
    pub log_std: Var,
    /// Pre-squash sample.
    pub u: Var,
    /// `tanh(u)`, the normalised action.
    pub squashed: Var,
    /// `n x 1` log density of the env-scale action.
    pub logp: Var,
}

/// Per-sample transition data, time-major, `n = seq_len * B` rows.
#[derive(Clone, Debug)]
pub struct Transitions<T> {
    pub batch_size: usize,
    pub seq_len: usize,
    /// Normalised actions in `[-1, 1]`.
    pub actions: Tensor<T>,
    pub rewards: Tensor<T>,
    /// `1 - done` where only non-timeout terminations count as done.
    pub not_done: Tensor<T>,
    /// Valid states (value, policy and temperature losses).
    pub state_mask: Tensor<T>,
    /// Valid transitions (Q losses).
    pub transition_mask: Tensor<T>,
}

impl<T: Real> Transitions<T> {
    pub fn from_batch(batch: &SequenceBatch, config: &SacConfig) -> Self {
        let mut actions = batch.vector_rows::<T>(batch.seq_len, config.action_dim(), |r| &r.a);
        let (mid, half) = (config.mid(), config.half());
        for r in 0..actions.rows() {
            for (v, (m, h)) in actions.row_mut(r).iter_mut().zip(mid.iter().zip(&half)) {
                *v = T::of(((v.as_f64() - m) / h).clamp(-1.0, 1.0));
            }
        }
        let state_mask = batch.step_mask::<T>();
        // rows past the end of a sequence were filled with zeros; restore them to
        // zero after normalisation so padding stays inert
        for r in 0..actions.rows() {
            if state_mask.get(r, 0) == T::zero() {
                actions.row_mut(r).fill(T::zero());
            }
        }
        Transitions {
            batch_size: batch.batch_size(),
            seq_len: batch.seq_len,
            actions,
            rewards: batch.scalar_rows(|r| r.reward),
            not_done: batch.scalar_rows(|r| if r.is_terminal() { 0.0 } else { 1.0 }),
            state_mask,
            transition_mask: batch.transition_mask(),
        }
    }

    pub fn rows(&self) -> usize {
        self.batch_size * self.seq_len
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RlMetrics {
    pub j_v: f64,
    pub j_q: f64,
    pub j_pi: f64,
    pub j_alpha: f64,
    pub alpha: f64,
}

impl RlMetrics {
    pub fn is_finite(&self) -> bool {
        [self.j_v, self.j_q, self.j_pi, self.j_alpha, self.alpha].iter().all(|v| v.is_finite())
    }
}

/// LSTM feeding raw observations to the controller (recurrent baseline).
pub struct Encoder<T> {
    store: ParamStore<T>,
    cell: LstmCell,
    adam: Adam<T>,
}

impl<T: Real> Encoder<T> {
    pub fn new(input: usize, hidden: usize, lr: f64, rng: &mut Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "encoder", input, hidden, rng)?;
        let adam = Adam::new(&store, lr);
        Ok(Encoder { store, cell, adam })
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn hidden_size(&self) -> usize {
        self.cell.hidden_size()
    }

    pub fn zero_state(&self, batch: usize) -> RecurrentState<T> {
        RecurrentState::zeros(batch, self.cell.hidden_size())
    }

    /// One acting step on a single observation.
    pub fn observe(&self, state: &RecurrentState<T>, x: &[f64]) -> Result<RecurrentState<T>> {
        crate::diffcore::lstm_step(&self.store, &self.cell, state, &Tensor::from_f64(1, x.len(), x))
    }

    /// Right-aligned gradient-free burn-in from zero states.
    pub fn burn_in(&self, batch: &SequenceBatch) -> Result<RecurrentState<T>> {
        let bsz = batch.batch_size();
        let k = batch.max_burn_in();
        let width = self.cell.input_size();
        let mut state = self.zero_state(bsz);
        for t in 0..k {
            let mut x = Tensor::zeros(bsz, width);
            let mut active = vec![false; bsz];
            for (j, s) in batch.sequences.iter().enumerate() {
                let off = k - s.burn_in.len();
                if t >= off {
                    active[j] = true;
                    for (o, &v) in x.row_mut(j).iter_mut().zip(&s.burn_in[t - off].x) {
                        *o = T::of(v);
                    }
                }
            }
            state = crate::diffcore::lstm_step(&self.store, &self.cell, &state, &x)?;
            for (j, &on) in active.iter().enumerate() {
                if !on {
                    state.hidden.row_mut(j).fill(T::zero());
                    state.cell.row_mut(j).fill(T::zero());
                }
            }
        }
        Ok(state)
    }

    /// Time-major hidden vectors over `seq_len + 1` positions.
    pub fn features_graph(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        batch: &SequenceBatch,
        init: &RecurrentState<T>,
    ) -> Var {
        let bsz = batch.batch_size();
        let steps = batch.seq_len + 1;
        let xs = batch.vector_rows::<T>(steps, self.cell.input_size(), |r| &r.x);
        let mut state = LstmVars::constant(g, init);
        let mut outs = Vec::with_capacity(steps);
        for t in 0..steps {
            let x = g.constant(xs.row_block(t * bsz, bsz));
            state = self.cell.forward(g, p, state, x);
            outs.push(state.hidden);
        }
        g.concat_rows(&outs)
    }
}

/// Where the controller's belief rows come from during an update.
pub enum Beliefs<'a, T> {
    /// Precomputed time-major rows over `seq_len + 1` positions.
    Fixed(&'a Tensor<T>),
    /// Computed by the controller's own encoder from the batch.
    Encoded { batch: &'a SequenceBatch, init: &'a RecurrentState<T> },
}

struct Bound {
    v: BoundParams,
    v_target: BoundParams,
    q: BoundParams,
    q_frozen: BoundParams,
    pi: BoundParams,
    alpha: BoundParams,
    encoder: Option<BoundParams>,
}

/// Graph handles of all four losses.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub j_v: Var,
    pub j_q: Var,
    pub j_pi: Var,
    pub j_alpha: Var,
    pub total: Var,
}

/// Gradients per parameter group, as returned by [`Sac::loss_and_grads`].
pub struct SacGrads<T> {
    pub v: Vec<Option<Tensor<T>>>,
    pub q: Vec<Option<Tensor<T>>>,
    pub pi: Vec<Option<Tensor<T>>>,
    pub alpha: Vec<Option<Tensor<T>>>,
    pub encoder: Option<Vec<Option<Tensor<T>>>>,
}

pub struct Sac<T> {
    config: SacConfig,
    v_store: ParamStore<T>,
    v_target: ParamStore<T>,
    v_net: Mlp,
    q_store: ParamStore<T>,
    q1: Mlp,
    q2: Mlp,
    pi_store: ParamStore<T>,
    pi_mean: Mlp,
    pi_log_std: Mlp,
    alpha_store: ParamStore<T>,
    log_alpha: ParamId,
    adam_v: Adam<T>,
    adam_q: Adam<T>,
    adam_pi: Adam<T>,
    adam_alpha: Adam<T>,
    encoder: Option<Encoder<T>>,
    updates: u64,
}

impl<T: Real> Sac<T> {
    /// `encoder_input` adds an LSTM of width `belief_dim` over raw inputs of that size.
    pub fn new(config: SacConfig, encoder_input: Option<usize>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (relu, lin) = (Activation::Relu, Activation::Linear);
        let b = config.belief_dim;
        let a = config.action_dim();
        let sizes = |inp: usize, out: usize| -> Vec<usize> {
            let mut s = vec![inp];
            s.extend(&config.hidden);
            s.push(out);
            s
        };
        let encoder = match encoder_input {
            Some(n) => Some(Encoder::new(n, b, config.lr_critic, rng)?),
            None => None,
        };
        let mut v_store = ParamStore::new();
        let v_net = Mlp::new(&mut v_store, "v", &sizes(b, 1), relu, lin, rng)?;
        let v_target = v_store.clone();
        let mut q_store = ParamStore::new();
        let q1 = Mlp::new(&mut q_store, "q1", &sizes(b + a, 1), relu, lin, rng)?;
        let q2 = Mlp::new(&mut q_store, "q2", &sizes(b + a, 1), relu, lin, rng)?;
        let mut pi_store = ParamStore::new();
        let pi_mean = Mlp::new(&mut pi_store, "pi_mean", &sizes(b, a), relu, lin, rng)?;
        let pi_log_std = Mlp::new(&mut pi_store, "pi_log_std", &sizes(b, a), relu, lin, rng)?;
        let mut alpha_store = ParamStore::new();
        let log_alpha = alpha_store.add("log_alpha", Tensor::scalar(T::of(config.init_log_alpha)))?;
        Ok(Sac {
            adam_v: Adam::new(&v_store, config.lr_critic),
            adam_q: Adam::new(&q_store, config.lr_critic),
            adam_pi: Adam::new(&pi_store, config.lr_actor),
            adam_alpha: Adam::new(&alpha_store, config.lr_alpha),
            config,
            v_store,
            v_target,
            v_net,
            q_store,
            q1,
            q2,
            pi_store,
            pi_mean,
            pi_log_std,
            alpha_store,
            log_alpha,
            encoder,
            updates: 0,
        })
    }

    pub fn config(&self) -> &SacConfig {
        &self.config
    }

    pub fn encoder(&self) -> Option<&Encoder<T>> {
        self.encoder.as_ref()
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn alpha(&self) -> f64 {
        self.alpha_store.get(self.log_alpha).get(0, 0).as_f64().exp()
    }

    pub fn v_store(&self) -> &ParamStore<T> {
        &self.v_store
    }

    pub fn v_target(&self) -> &ParamStore<T> {
        &self.v_target
    }

    pub fn q_store(&self) -> &ParamStore<T> {
        &self.q_store
    }

    pub fn pi_store(&self) -> &ParamStore<T> {
        &self.pi_store
    }

    /// Mutable access to every parameter group, for tests and tooling.
    pub fn stores_mut(&mut self) -> [&mut ParamStore<T>; 5] {
        [
            &mut self.v_store,
            &mut self.v_target,
            &mut self.q_store,
            &mut self.pi_store,
            &mut self.alpha_store,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.v_store.count_params()
            + self.v_target.count_params()
            + self.q_store.count_params()
            + self.pi_store.count_params()
            + self.alpha_store.count_params()
            + self.encoder.as_ref().map_or(0, |e| e.store.count_params())
    }

    /// Combined hash of every parameter group.
    pub fn hash(&self) -> String {
        let mut parts = vec![
            self.v_store.hash(),
            self.v_target.hash(),
            self.q_store.hash(),
            self.pi_store.hash(),
            self.alpha_store.hash(),
        ];
        if let Some(e) = &self.encoder {
            parts.push(e.store.hash());
        }
        parts.join(":")
    }

    fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound {
            v: self.v_store.bind(g, trainable),
            v_target: self.v_target.bind(g, false),
            q: self.q_store.bind(g, trainable),
            q_frozen: self.q_store.bind(g, false),
            pi: self.pi_store.bind(g, trainable),
            alpha: self.alpha_store.bind(g, trainable),
            encoder: self.encoder.as_ref().map(|e| e.store.bind(g, trainable)),
        }
    }

    /// Squashed-Gaussian sample and its log density; `noise = None` gives the mean action.
    pub fn policy_graph(&self, g: &mut Graph<T>, p: &BoundParams, s: Var, noise: Option<Var>) -> PolicySample {
        let mean = self.pi_mean.forward(g, p, s);
        let raw = self.pi_log_std.forward(g, p, s);
        let log_std = g.clamp(raw, LOG_STD_MIN, LOG_STD_MAX);
        let std = g.exp(log_std);
        let (u, eps_sq) = match noise {
            Some(eps) => {
                let scaled = g.mul(std, eps);
                let sq = g.square(eps);
                (g.add(mean, scaled), sq)
            }
            None => {
                let z = g.constant(Tensor::zeros(g.shape(mean).0, g.shape(mean).1));
                (mean, z)
            }
        };
        self.log_prob_graph(g, mean, log_std, u, eps_sq)
    }

    fn log_prob_graph(&self, g: &mut Graph<T>, mean: Var, log_std: Var, u: Var, eps_sq: Var) -> PolicySample {
        let k = self.config.action_dim() as f64;
        // log N(u; mean, std) = sum(-eps^2/2 - log std) - k/2 ln(2 pi)
        let half_sq = g.scale(eps_sq, -0.5);
        let per_dim = g.sub(half_sq, log_std);
        let gauss = g.sum_cols(per_dim);
        let squashed = g.tanh(u);
        let t2 = g.square(squashed);
        let one_minus = g.scale(t2, -1.0);
        let one_minus = g.offset(one_minus, 1.0 + SQUASH_EPS);
        let log_jac = g.ln(one_minus);
        let log_jac = g.sum_cols(log_jac);
        let lp = g.sub(gauss, log_jac);
        let logp = g.offset(lp, -k * HALF_LN_2PI - self.config.log_half_sum());
        PolicySample {
            mean,
            log_std,
            u,
            squashed,
            logp,
        }
    }

    fn q_pair(&self, g: &mut Graph<T>, p: &BoundParams, s: Var, a: Var) -> (Var, Var) {
        let inp = g.concat_cols(&[s, a]);
        (self.q1.forward(g, p, inp), self.q2.forward(g, p, inp))
    }

    /// Actions for a batch of beliefs; `noise = None` acts with the mean.
    pub fn act(&self, beliefs: &Tensor<T>, noise: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let (n, a) = (beliefs.rows(), self.config.action_dim());
        if beliefs.cols() != self.config.belief_dim || noise.is_some_and(|z| z.shape() != (n, a)) {
            return config_err(format!(
                "belief {:?} does not match controller input {}",
                beliefs.shape(),
                self.config.belief_dim
            ));
        }
        let mut g = Graph::new();
        let p = self.pi_store.bind(&mut g, false);
        let s = g.constant(beliefs.clone());
        let nv = noise.map(|z| g.constant(z.clone()));
        let ps = self.policy_graph(&mut g, &p, s, nv);
        let sq = g.value(ps.squashed);
        let mut out = Tensor::zeros(n, a);
        for r in 0..n {
            let row: Vec<f64> = sq.row(r).iter().map(|v| v.as_f64()).collect();
            let scaled = bound_scale(&row, &self.config.action_low, &self.config.action_high);
            for (o, v) in out.row_mut(r).iter_mut().zip(scaled) {
                *o = T::of(v);
            }
        }
        Ok(out)
    }

    /// Env-scale action for one belief.
    pub fn select_action(&self, belief: &[f64], deterministic: bool, rng: &mut Rng) -> Result<Vec<f64>> {
        if !belief.iter().all(|v| v.is_finite()) {
            return Err(Error::Usage("belief contains non-finite values".into()));
        }
        let b = Tensor::from_f64(1, belief.len(), belief);
        let noise = (!deterministic).then(|| normal_tensor(rng, 1, self.config.action_dim()));
        Ok(self.act(&b, noise.as_ref())?.to_f64())
    }

    /// Log density of the env-scale action `bound_scale(tanh(u))` given the pre-squash `u`.
    pub fn policy_log_prob(&self, belief: &[f64], u: &[f64]) -> Result<f64> {
        let a = self.config.action_dim();
        if belief.len() != self.config.belief_dim || u.len() != a {
            return config_err("policy_log_prob: dimension mismatch");
        }
        let mut g = Graph::new();
        let p = self.pi_store.bind(&mut g, false);
        let s = g.constant(Tensor::from_f64(1, belief.len(), belief));
        let mean = self.pi_mean.forward(&mut g, &p, s);
        let raw = self.pi_log_std.forward(&mut g, &p, s);
        let log_std = g.clamp(raw, LOG_STD_MIN, LOG_STD_MAX);
        let m = g.value(mean).to_f64();
        let ls = g.value(log_std).to_f64();
        let eps_sq: Vec<f64> = (0..a).map(|i| ((u[i] - m[i]) / ls[i].exp()).powi(2)).collect();
        let uv = g.constant(Tensor::from_f64(1, a, u));
        let ev = g.constant(Tensor::from_f64(1, a, &eps_sq));
        let ps = self.log_prob_graph(&mut g, mean, log_std, uv, ev);
        Ok(g.scalar(ps.logp).as_f64())
    }

    /// Mean and clamped log standard deviation of the pre-squash Gaussian.
    pub fn policy_params(&self, belief: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if belief.len() != self.config.belief_dim {
            return config_err("policy_params: dimension mismatch");
        }
        let mut g = Graph::new();
        let p = self.pi_store.bind(&mut g, false);
        let s = g.constant(Tensor::from_f64(1, belief.len(), belief));
        let mean = self.pi_mean.forward(&mut g, &p, s);
        let raw = self.pi_log_std.forward(&mut g, &p, s);
        let log_std = g.clamp(raw, LOG_STD_MIN, LOG_STD_MAX);
        Ok((g.value(mean).to_f64(), g.value(log_std).to_f64()))
    }

    /// Twin Q values and the value estimate for one belief and env-scale action.
    pub fn evaluate(&self, belief: &[f64], action: &[f64]) -> Result<(f64, f64, f64)> {
        let a = self.config.action_dim();
        if belief.len() != self.config.belief_dim || action.len() != a {
            return config_err("evaluate: dimension mismatch");
        }
        let norm: Vec<f64> = action
            .iter()
            .zip(self.config.mid().iter().zip(self.config.half()))
            .map(|(x, (m, h))| (x - m) / h)
            .collect();
        let mut g = Graph::new();
        let qp = self.q_store.bind(&mut g, false);
        let vp = self.v_store.bind(&mut g, false);
        let s = g.constant(Tensor::from_f64(1, belief.len(), belief));
        let av = g.constant(Tensor::from_f64(1, a, &norm));
        let (q1, q2) = self.q_pair(&mut g, &qp, s, av);
        let v = self.v_net.forward(&mut g, &vp, s);
        Ok((g.scalar(q1).as_f64(), g.scalar(q2).as_f64(), g.scalar(v).as_f64()))
    }

    fn belief_var(&self, g: &mut Graph<T>, bound: &Bound, beliefs: &Beliefs<'_, T>) -> Result<Var> {
        match (beliefs, &self.encoder, &bound.encoder) {
            (Beliefs::Fixed(t), None, _) => {
                if t.cols() != self.config.belief_dim {
                    return config_err(format!("belief width {} vs {}", t.cols(), self.config.belief_dim));
                }
                Ok(g.constant((*t).clone()))
            }
            (Beliefs::Encoded { batch, init }, Some(enc), Some(p)) => Ok(enc.features_graph(g, p, batch, init)),
            _ => config_err("belief source does not match the controller (encoder present/absent)"),
        }
    }

    /// All four losses from one batch and one set of policy noise (`n x a`).
    fn loss_graph(&self, g: &mut Graph<T>, bound: &Bound, s_all: Var, tr: &Transitions<T>, eps: &Tensor<T>) -> LossVars {
        let n = tr.rows();
        let b = tr.batch_size;
        let c = &self.config;
        let s = g.slice_rows(s_all, 0, n);
        let s_next = g.slice_rows(s_all, b, n);
        let s_det = g.stop_gradient(s);
        let state_mask = g.constant(tr.state_mask.clone());
        let trans_mask = g.constant(tr.transition_mask.clone());
        let n_states = tr.state_mask.sum().as_f64().max(1.0);
        let n_trans = tr.transition_mask.sum().as_f64().max(1.0);

        let eps = g.constant(eps.clone());
        let pol = self.policy_graph(g, &bound.pi, s_det, Some(eps));
        let log_alpha = bound.alpha.var(self.log_alpha);
        let alpha_now = g.stop_gradient(log_alpha);
        let alpha_now = g.exp(alpha_now);
        let (q1_new, q2_new) = self.q_pair(g, &bound.q_frozen, s_det, pol.squashed);
        let min_q_new = g.min(q1_new, q2_new);

        // value
        let v = self.v_net.forward(g, &bound.v, s);
        let v_target = soft_value_graph(g, min_q_new, pol.logp, alpha_now);
        let j_v = v_loss_graph(g, v, v_target, state_mask, n_states);

        // twin Q
        let a_replay = g.constant(tr.actions.clone());
        let (q1, q2) = self.q_pair(g, &bound.q, s, a_replay);
        let v_next = self.v_net.forward(g, &bound.v_target, s_next);
        let r = g.constant(tr.rewards.clone());
        let nd = g.constant(tr.not_done.clone());
        let y = q_target_graph(g, r, nd, v_next, c.gamma);
        let l1 = q_loss_graph(g, q1, y, trans_mask, n_trans);
        let l2 = q_loss_graph(g, q2, y, trans_mask, n_trans);
        let j_q = g.add(l1, l2);

        // policy and temperature
        let j_pi = policy_loss_graph(g, pol.logp, min_q_new, alpha_now, state_mask, n_states);
        let j_alpha = alpha_loss_graph(g, log_alpha, pol.logp, c.target_entropy, state_mask, n_states);

        let t1 = g.add(j_v, j_q);
        let t2 = g.add(j_pi, j_alpha);
        let total = g.add(t1, t2);
        LossVars {
            j_v,
            j_q,
            j_pi,
            j_alpha,
            total,
        }
    }

    fn metrics(&self, g: &Graph<T>, lv: &LossVars) -> RlMetrics {
        RlMetrics {
            j_v: g.scalar(lv.j_v).as_f64(),
            j_q: g.scalar(lv.j_q).as_f64(),
            j_pi: g.scalar(lv.j_pi).as_f64(),
            j_alpha: g.scalar(lv.j_alpha).as_f64(),
            alpha: self.alpha(),
        }
    }

    /// Loss values without any update.
    pub fn losses(&self, beliefs: &Beliefs<'_, T>, tr: &Transitions<T>, eps: &Tensor<T>) -> Result<RlMetrics> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let s_all = self.belief_var(&mut g, &bound, beliefs)?;
        let lv = self.loss_graph(&mut g, &bound, s_all, tr, eps);
        Ok(self.metrics(&g, &lv))
    }

    /// Loss values and the gradient of the summed losses for every group.
    pub fn loss_and_grads(
        &self,
        beliefs: &Beliefs<'_, T>,
        tr: &Transitions<T>,
        eps: &Tensor<T>,
    ) -> Result<(RlMetrics, SacGrads<T>)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, true);
        let s_all = self.belief_var(&mut g, &bound, beliefs)?;
        if g.shape(s_all).0 != (tr.seq_len + 1) * tr.batch_size {
            return config_err(format!(
                "belief rows {} do not cover seq_len + 1 positions of batch {}",
                g.shape(s_all).0,
                tr.batch_size
            ));
        }
        let lv = self.loss_graph(&mut g, &bound, s_all, tr, eps);
        let metrics = self.metrics(&g, &lv);
        let mut grads = g.backward(lv.total);
        let out = SacGrads {
            v: self.v_store.collect_grads(&mut grads, &bound.v),
            q: self.q_store.collect_grads(&mut grads, &bound.q),
            pi: self.pi_store.collect_grads(&mut grads, &bound.pi),
            alpha: self.alpha_store.collect_grads(&mut grads, &bound.alpha),
            encoder: match (&self.encoder, &bound.encoder) {
                (Some(e), Some(p)) => Some(e.store.collect_grads(&mut grads, p)),
                _ => None,
            },
        };
        Ok((metrics, out))
    }

    /// One update of every group (value, critics, policy, temperature, then the
    /// encoder if any) followed by a Polyak step of the target value network.
    pub fn rl_update(&mut self, beliefs: &Beliefs<'_, T>, tr: &Transitions<T>, rng: &mut Rng) -> Result<RlMetrics> {
        let eps = normal_tensor(rng, tr.rows(), self.config.action_dim());
        self.update_with(beliefs, tr, &eps)
    }

    /// [`Sac::rl_update`] with explicit policy noise.
    pub fn update_with(&mut self, beliefs: &Beliefs<'_, T>, tr: &Transitions<T>, eps: &Tensor<T>) -> Result<RlMetrics> {
        let (metrics, grads) = self.loss_and_grads(beliefs, tr, eps)?;
        let step = self.updates + 1;
        if !metrics.is_finite() {
            return Err(Error::Training {
                step,
                message: format!("non-finite controller loss: {metrics:?}"),
            });
        }
        let tag = |e: Error, group: &str| match e {
            Error::Training { message, .. } => Error::Training {
                step,
                message: format!("{group}: {message}"),
            },
            other => other,
        };
        self.adam_v.step(&mut self.v_store, &grads.v).map_err(|e| tag(e, "value"))?;
        self.adam_q.step(&mut self.q_store, &grads.q).map_err(|e| tag(e, "critic"))?;
        self.adam_pi.step(&mut self.pi_store, &grads.pi).map_err(|e| tag(e, "policy"))?;
        self.adam_alpha.step(&mut self.alpha_store, &grads.alpha).map_err(|e| tag(e, "temperature"))?;
        if let (Some(enc), Some(g)) = (self.encoder.as_mut(), grads.encoder.as_ref()) {
            enc.adam.step(&mut enc.store, g).map_err(|e| tag(e, "encoder"))?;
        }
        self.v_target.soft_update(&self.v_store, self.config.tau)?;
        self.updates = step;
        Ok(RlMetrics {
            alpha: self.alpha(),
            ..metrics
        })
    }

    pub fn save_into(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.put_store(&format!("{prefix}/v"), &self.v_store);
        ck.put_store(&format!("{prefix}/v_target"), &self.v_target);
        ck.put_store(&format!("{prefix}/q"), &self.q_store);
        ck.put_store(&format!("{prefix}/pi"), &self.pi_store);
        ck.put_store(&format!("{prefix}/alpha"), &self.alpha_store);
        ck.put_optimizer(&format!("{prefix}/adam_v"), &self.adam_v, &self.v_store);
        ck.put_optimizer(&format!("{prefix}/adam_q"), &self.adam_q, &self.q_store);
        ck.put_optimizer(&format!("{prefix}/adam_pi"), &self.adam_pi, &self.pi_store);
        ck.put_optimizer(&format!("{prefix}/adam_alpha"), &self.adam_alpha, &self.alpha_store);
        if let Some(e) = &self.encoder {
            ck.put_store(&format!("{prefix}/encoder"), &e.store);
            ck.put_optimizer(&format!("{prefix}/adam_encoder"), &e.adam, &e.store);
        }
        ck.put_u64(&format!("{prefix}/updates"), self.updates);
    }

    /// All-or-nothing restore.
    pub fn load_from(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        let mut v = self.v_store.clone();
        let mut vt = self.v_target.clone();
        let mut q = self.q_store.clone();
        let mut pi = self.pi_store.clone();
        let mut al = self.alpha_store.clone();
        ck.load_store(&format!("{prefix}/v"), &mut v)?;
        ck.load_store(&format!("{prefix}/v_target"), &mut vt)?;
        ck.load_store(&format!("{prefix}/q"), &mut q)?;
        ck.load_store(&format!("{prefix}/pi"), &mut pi)?;
        ck.load_store(&format!("{prefix}/alpha"), &mut al)?;
        let (mut av, mut aq, mut ap, mut aa) =
            (self.adam_v.clone(), self.adam_q.clone(), self.adam_pi.clone(), self.adam_alpha.clone());
        ck.load_optimizer(&format!("{prefix}/adam_v"), &mut av, &v)?;
        ck.load_optimizer(&format!("{prefix}/adam_q"), &mut aq, &q)?;
        ck.load_optimizer(&format!("{prefix}/adam_pi"), &mut ap, &pi)?;
        ck.load_optimizer(&format!("{prefix}/adam_alpha"), &mut aa, &al)?;
        let has_encoder = ck.contains(&format!("{prefix}/adam_encoder/step"));
        if has_encoder != self.encoder.is_some() {
            return Err(Error::Checkpoint(format!("controller under `{prefix}` differs in its encoder")));
        }
        let enc = match &self.encoder {
            Some(e) => {
                let mut s = e.store.clone();
                ck.load_store(&format!("{prefix}/encoder"), &mut s)?;
                let mut a = e.adam.clone();
                ck.load_optimizer(&format!("{prefix}/adam_encoder"), &mut a, &s)?;
                Some((s, a))
            }
            None => None,
        };
        let updates = ck.get_u64(&format!("{prefix}/updates"))?;
        self.v_store = v;
        self.v_target = vt;
        self.q_store = q;
        self.pi_store = pi;
        self.alpha_store = al;
        self.adam_v = av;
        self.adam_q = aq;
        self.adam_pi = ap;
        self.adam_alpha = aa;
        if let (Some(e), Some((s, a))) = (self.encoder.as_mut(), enc) {
            e.store = s;
            e.adam = a;
        }
        self.updates = updates;
        Ok(())
    }
}

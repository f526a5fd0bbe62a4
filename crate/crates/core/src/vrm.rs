//! Variational recurrent model: an action-conditioned VRNN whose LSTM state
//! summarises the observation history.
//!
//! Per step, with `h` the previous LSTM hidden vector and `a` the previous
//! (normalised) action:
//!
//! ```text
//! posterior  q(z | x, h, a)      prior  p(z | h, a)
//! decoder    p(x | z, h)         state  d' = LSTM(d; [z, f_x(x)])
//! ```
//!
//! Training minimises `KL(q || p) - log p(x | z, h)` averaged over valid steps.
//! The deterministic variant drops the posterior and all variances: `z` is the
//! prior mean and the decoder mean is trained with a squared error.

use crate::diffcore::{
    kl_diag_gaussians, kl_rows, log_density_rows, reparam_var, Activation, Adam, BoundParams, Checkpoint, GaussianHead, GaussianParams,
    GaussianVars, Graph, Linear, LstmCell, LstmVars, Mlp, ParamStore, Real, RecurrentState, Tensor, Var, VAR_FLOOR,
};
use crate::error::{config_err, usage_err, Result};
use crate::replay::SequenceBatch;
use crate::rng::{normal_tensor, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct VrmConfig {
    /// Observation plus previous reward.
    pub x_dim: usize,
    pub action_dim: usize,
    pub d_size: usize,
    pub z_size: usize,
    /// Width of the posterior, prior and decoder hidden layers.
    pub hidden_size: usize,
    /// Width of the observation feature layer feeding the LSTM.
    pub feature_size: usize,
    pub lr: f64,
    pub deterministic: bool,
    /// Actions are normalised as `(a - offset) / scale` before use.
    pub action_offset: Vec<f64>,
    pub action_scale: Vec<f64>,
}

impl VrmConfig {
    pub fn new(x_dim: usize, action_dim: usize) -> Self {
        VrmConfig {
            x_dim,
            action_dim,
            d_size: 256,
            z_size: 64,
            hidden_size: 128,
            feature_size: 128,
            lr: 0.0008,
            deterministic: false,
            action_offset: vec![0.0; action_dim],
            action_scale: vec![1.0; action_dim],
        }
    }

    /// Normalise actions from the box `[low, high]`.
    pub fn with_action_bounds(mut self, low: &[f64], high: &[f64]) -> Self {
        self.action_offset = low.iter().zip(high).map(|(l, h)| 0.5 * (l + h)).collect();
        self.action_scale = low.iter().zip(high).map(|(l, h)| 0.5 * (h - l)).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [self.x_dim, self.action_dim, self.d_size, self.z_size, self.hidden_size, self.feature_size];
        if sizes.contains(&0) {
            return config_err(format!("model sizes must be positive: {sizes:?}"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return config_err(format!("model learning rate must be positive, got {}", self.lr));
        }
        if self.action_offset.len() != self.action_dim
            || self.action_scale.len() != self.action_dim
            || self.action_scale.iter().any(|&s| !(s.is_finite() && s > 0.0))
        {
            return config_err("action normalisation must have one positive scale per action dimension");
        }
        Ok(())
    }
}

/// Gaussian head, or mean only for the deterministic variant.
#[derive(Clone, Debug)]
enum Head {
    Gaussian(GaussianHead),
    Mean(Linear),
}

impl Head {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, fan_in: usize, size: usize, det: bool, rng: &mut Rng) -> Result<Self> {
        Ok(if det {
            Head::Mean(Linear::new(store, &format!("{name}.mean"), fan_in, size, rng)?)
        } else {
            Head::Gaussian(GaussianHead::new(store, name, fan_in, size, rng)?)
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, f: Var) -> (Var, Option<Var>) {
        match self {
            Head::Gaussian(h) => {
                let gv = h.forward(g, p, f);
                (gv.mean, Some(gv.var))
            }
            Head::Mean(l) => (l.forward(g, p, f), None),
        }
    }
}

/// Graph handles for one model step over a batch.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    /// Absent for the deterministic variant.
    pub posterior: Option<GaussianVars>,
    pub prior_mean: Var,
    pub prior_var: Option<Var>,
    pub z: Var,
    pub decoder_mean: Var,
    pub decoder_var: Option<Var>,
    pub state: LstmVars,
}

/// Result of [`Vrm::infer_step`] for one batch row per entry.
#[derive(Clone, Debug)]
pub struct InferOutput<T> {
    pub posterior: Vec<GaussianParams<T>>,
    pub z: Tensor<T>,
    pub state: RecurrentState<T>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VrmMetrics {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub grad_norm: f64,
}

/// Graph handles of a training loss.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub loss: Var,
    pub recon: Var,
    pub kl: Var,
}

pub struct Vrm<T> {
    config: VrmConfig,
    store: ParamStore<T>,
    adam: Adam<T>,
    frozen: bool,
    posterior_hidden: Option<Mlp>,
    posterior_head: Option<Head>,
    prior_hidden: Mlp,
    prior_head: Head,
    features: Mlp,
    lstm: LstmCell,
    decoder_hidden: Mlp,
    decoder_head: Head,
}

impl<T: Real> Vrm<T> {
    pub fn new(config: VrmConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let det = c.deterministic;
        let tanh = Activation::Tanh;
        let mut store = ParamStore::new();
        let (posterior_hidden, posterior_head) = if det {
            (None, None)
        } else {
            let inp = c.x_dim + c.d_size + c.action_dim;
            let hid = Mlp::new(&mut store, "phi", &[inp, c.hidden_size], tanh, tanh, rng)?;
            let head = Head::new(&mut store, "phi.head", c.hidden_size, c.z_size, false, rng)?;
            (Some(hid), Some(head))
        };
        let prior_hidden = Mlp::new(&mut store, "prior", &[c.d_size + c.action_dim, c.hidden_size], tanh, tanh, rng)?;
        let prior_head = Head::new(&mut store, "prior.head", c.hidden_size, c.z_size, det, rng)?;
        let features = Mlp::new(&mut store, "fx", &[c.x_dim, c.feature_size], tanh, tanh, rng)?;
        let lstm = LstmCell::new(&mut store, "lstm", c.z_size + c.feature_size, c.d_size, rng)?;
        let decoder_hidden = Mlp::new(
            &mut store,
            "decoder",
            &[c.z_size + c.d_size, c.hidden_size, c.hidden_size],
            tanh,
            tanh,
            rng,
        )?;
        let decoder_head = Head::new(&mut store, "decoder.head", c.hidden_size, c.x_dim, det, rng)?;
        let adam = Adam::new(&store, c.lr);
        Ok(Vrm {
            config,
            store,
            adam,
            frozen: false,
            posterior_hidden,
            posterior_head,
            prior_hidden,
            prior_head,
            features,
            lstm,
            decoder_hidden,
            decoder_head,
        })
    }

    pub fn config(&self) -> &VrmConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    /// Direct parameter access for tests and tooling; bypasses the freeze flag.
    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn optimizer(&self) -> &Adam<T> {
        &self.adam
    }

    pub fn param_count(&self) -> usize {
        self.store.count_params()
    }

    pub fn hash(&self) -> String {
        self.store.hash()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_deterministic(&self) -> bool {
        self.config.deterministic
    }

    pub fn zero_state(&self, batch: usize) -> RecurrentState<T> {
        RecurrentState::zeros(batch, self.config.d_size)
    }

    /// Normalise env-scale action rows in place.
    pub fn normalize_actions(&self, a: &mut Tensor<T>) {
        let (off, scale) = (&self.config.action_offset, &self.config.action_scale);
        for r in 0..a.rows() {
            for (v, (o, s)) in a.row_mut(r).iter_mut().zip(off.iter().zip(scale)) {
                *v = T::of((v.as_f64() - o) / s);
            }
        }
    }

    fn action_row(&self, a: &[f64]) -> Result<Tensor<T>> {
        if a.len() != self.config.action_dim {
            return config_err(format!("action has {} entries, model expects {}", a.len(), self.config.action_dim));
        }
        let mut t = Tensor::from_f64(1, a.len(), a);
        self.normalize_actions(&mut t);
        Ok(t)
    }

    fn x_row(&self, x: &[f64]) -> Result<Tensor<T>> {
        if x.len() != self.config.x_dim {
            return config_err(format!("x has {} entries, model expects {}", x.len(), self.config.x_dim));
        }
        Ok(Tensor::from_f64(1, x.len(), x))
    }

    fn check_batch(&self, state: &RecurrentState<T>, x: Option<&Tensor<T>>, a: &Tensor<T>) -> Result<()> {
        let b = state.hidden.rows();
        let c = &self.config;
        let x_ok = x.is_none_or(|x| x.shape() == (b, c.x_dim));
        if state.hidden.cols() != c.d_size || state.cell.shape() != state.hidden.shape() || a.shape() != (b, c.action_dim) || !x_ok {
            return config_err(format!(
                "shape mismatch: state {:?}, x {:?}, a {:?} for model (x {}, a {}, d {})",
                state.hidden.shape(),
                x.map(|x| x.shape()),
                a.shape(),
                c.x_dim,
                c.action_dim,
                c.d_size
            ));
        }
        Ok(())
    }

    /// Bind parameters into `g`; `trainable = false` yields constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundParams {
        self.store.bind(g, trainable)
    }

    fn prior_graph(&self, g: &mut Graph<T>, p: &BoundParams, h: Var, a: Var) -> (Var, Option<Var>) {
        let inp = g.concat_cols(&[h, a]);
        let f = self.prior_hidden.forward(g, p, inp);
        self.prior_head.forward(g, p, f)
    }

    fn decoder_graph(&self, g: &mut Graph<T>, p: &BoundParams, z: Var, h: Var) -> (Var, Option<Var>) {
        let inp = g.concat_cols(&[z, h]);
        let f = self.decoder_hidden.forward(g, p, inp);
        self.decoder_head.forward(g, p, f)
    }

    fn advance(&self, g: &mut Graph<T>, p: &BoundParams, state: LstmVars, z: Var, x: Var) -> LstmVars {
        let fx = self.features.forward(g, p, x);
        let inp = g.concat_cols(&[z, fx]);
        self.lstm.forward(g, p, state, inp)
    }

    /// One inference step. `noise` (B x z) is required by the stochastic
    /// model; without it `z` is the posterior mean.
    pub fn step_graph(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        state: LstmVars,
        x: Var,
        a_prev: Var,
        noise: Option<Var>,
    ) -> StepVars {
        let (prior_mean, prior_var) = self.prior_graph(g, p, state.hidden, a_prev);
        let (posterior, z) = match (&self.posterior_hidden, &self.posterior_head) {
            (Some(hid), Some(head)) => {
                let inp = g.concat_cols(&[x, state.hidden, a_prev]);
                let f = hid.forward(g, p, inp);
                let (mean, var) = head.forward(g, p, f);
                let gv = GaussianVars {
                    mean,
                    var: var.expect("stochastic head has a variance"),
                };
                let z = match noise {
                    Some(n) => reparam_var(g, gv, n),
                    None => mean,
                };
                (Some(gv), z)
            }
            _ => (None, prior_mean),
        };
        let (decoder_mean, decoder_var) = self.decoder_graph(g, p, z, state.hidden);
        let state = self.advance(g, p, state, z, x);
        StepVars {
            posterior,
            prior_mean,
            prior_var,
            z,
            decoder_mean,
            decoder_var,
            state,
        }
    }

    /// Posterior, sampled latent and next state for a batch of rows.
    pub fn infer_step(
        &self,
        d_prev: &RecurrentState<T>,
        x: &Tensor<T>,
        a_prev: &Tensor<T>,
        noise: &Tensor<T>,
    ) -> Result<InferOutput<T>> {
        self.check_batch(d_prev, Some(x), a_prev)?;
        let b = x.rows();
        if !self.config.deterministic && noise.shape() != (b, self.config.z_size) {
            return config_err(format!("noise shape {:?}, expected ({b}, {})", noise.shape(), self.config.z_size));
        }
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let s = LstmVars::constant(&mut g, d_prev);
        let xv = g.constant(x.clone());
        let av = g.constant(a_prev.clone());
        let nv = (!self.config.deterministic).then(|| g.constant(noise.clone()));
        let out = self.step_graph(&mut g, &p, s, xv, av, nv);
        let posterior = match out.posterior {
            Some(gv) => (0..b).map(|r| gv.read_row(&g, r)).collect(),
            None => (0..b).map(|r| floored(g.value(out.prior_mean).row(r))).collect(),
        };
        Ok(InferOutput {
            posterior,
            z: g.value(out.z).clone(),
            state: out.state.read(&g),
        })
    }

    /// Single-row convenience for acting: raw x, env-scale previous action.
    pub fn observe(&self, d_prev: &RecurrentState<T>, x: &[f64], a_prev: &[f64], rng: &mut Rng) -> Result<RecurrentState<T>> {
        let x = self.x_row(x)?;
        let a = self.action_row(a_prev)?;
        let noise = normal_tensor(rng, 1, self.config.z_size);
        Ok(self.infer_step(d_prev, &x, &a, &noise)?.state)
    }

    pub fn prior_step(&self, d_prev: &RecurrentState<T>, a_prev: &Tensor<T>) -> Result<Vec<GaussianParams<T>>> {
        self.check_batch(d_prev, None, a_prev)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let h = g.constant(d_prev.hidden.clone());
        let a = g.constant(a_prev.clone());
        let (mean, var) = self.prior_graph(&mut g, &p, h, a);
        Ok(read_rows(&g, mean, var))
    }

    /// Gaussian over `x_t` given `z_t` and the previous hidden vector.
    pub fn decode(&self, z: &Tensor<T>, h_prev: &Tensor<T>) -> Result<Vec<GaussianParams<T>>> {
        let c = &self.config;
        if z.cols() != c.z_size || h_prev.cols() != c.d_size || z.rows() != h_prev.rows() {
            return config_err(format!("decode: z {:?}, h {:?}", z.shape(), h_prev.shape()));
        }
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let hv = g.constant(h_prev.clone());
        let (mean, var) = self.decoder_graph(&mut g, &p, zv, hv);
        Ok(read_rows(&g, mean, var))
    }

    /// Gradient-free unroll of every sequence's burn-in from a zero state.
    ///
    /// Sequences are right-aligned so all of them finish on the same step; a
    /// row stays at zero until its own burn-in begins. Noise is drawn per step
    /// as one `B x z` block.
    pub fn burn_in_unroll(&self, batch: &SequenceBatch, rng: &mut Rng) -> Result<RecurrentState<T>> {
        let bsz = batch.batch_size();
        let k = batch.max_burn_in();
        let mut state = self.zero_state(bsz);
        let c = &self.config;
        for t in 0..k {
            let mut x = Tensor::zeros(bsz, c.x_dim);
            let mut a = Tensor::zeros(bsz, c.action_dim);
            let mut active = vec![false; bsz];
            for (j, s) in batch.sequences.iter().enumerate() {
                let off = k - s.burn_in.len();
                if t < off {
                    continue;
                }
                active[j] = true;
                let i = t - off;
                let prev = if i == 0 { &s.lead_action } else { &s.burn_in[i - 1].a };
                copy_row(&mut x, j, &s.burn_in[i].x);
                copy_row(&mut a, j, prev);
            }
            self.normalize_actions(&mut a);
            let noise = normal_tensor(rng, bsz, c.z_size);
            let next = self.infer_step(&state, &x, &a, &noise)?.state;
            state = next;
            for (j, &on) in active.iter().enumerate() {
                if !on {
                    state.hidden.row_mut(j).fill(T::zero());
                    state.cell.row_mut(j).fill(T::zero());
                }
            }
        }
        Ok(state)
    }

    /// Unroll `steps` positions of the training segment (lookahead included
    /// when `steps = seq_len + 1`) inside `g`.
    pub fn unroll_graph(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        batch: &SequenceBatch,
        init: &RecurrentState<T>,
        steps: usize,
        noise: &[Tensor<T>],
    ) -> Vec<StepVars> {
        let bsz = batch.batch_size();
        let c = &self.config;
        let xs = batch.vector_rows::<T>(steps, c.x_dim, |r| &r.x);
        let mut prev_a = batch.prev_action_rows::<T>(steps, c.action_dim);
        self.normalize_actions(&mut prev_a);
        let mut state = LstmVars::constant(g, init);
        let mut out = Vec::with_capacity(steps);
        for t in 0..steps {
            let x = g.constant(xs.row_block(t * bsz, bsz));
            let a = g.constant(prev_a.row_block(t * bsz, bsz));
            let n = noise.get(t).map(|n| g.constant(n.clone()));
            let sv = self.step_graph(g, p, state, x, a, n);
            state = sv.state;
            out.push(sv);
        }
        out
    }

    /// Noise blocks for `steps` positions, drawn in time order.
    pub fn draw_noise(&self, rng: &mut Rng, batch: usize, steps: usize) -> Vec<Tensor<T>> {
        if self.config.deterministic {
            return Vec::new();
        }
        (0..steps).map(|_| normal_tensor(rng, batch, self.config.z_size)).collect()
    }

    /// Negative ELBO (or squared error for the deterministic variant),
    /// averaged over valid training steps.
    pub fn loss_graph(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        batch: &SequenceBatch,
        init: &RecurrentState<T>,
        noise: &[Tensor<T>],
    ) -> (LossVars, Vec<StepVars>) {
        let l = batch.seq_len;
        let bsz = batch.batch_size();
        let steps = self.unroll_graph(g, p, batch, init, l, noise);
        let xs = batch.vector_rows::<T>(l, self.config.x_dim, |r| &r.x);
        let mask = g.constant(batch.step_mask::<T>());
        let denom = batch.valid_steps().max(1) as f64;
        let mut recon_parts = Vec::with_capacity(l);
        let mut kl_parts = Vec::with_capacity(l);
        for (t, sv) in steps.iter().enumerate() {
            let x = g.constant(xs.row_block(t * bsz, bsz));
            match (sv.posterior, sv.decoder_var, sv.prior_var) {
                (Some(q), Some(dv), Some(pv)) => {
                    let dec = GaussianVars {
                        mean: sv.decoder_mean,
                        var: dv,
                    };
                    let lp = log_density_rows(g, dec, x);
                    recon_parts.push(g.neg(lp));
                    let prior = GaussianVars {
                        mean: sv.prior_mean,
                        var: pv,
                    };
                    kl_parts.push(kl_rows(g, q, prior));
                }
                _ => {
                    let diff = g.sub(sv.decoder_mean, x);
                    let sq = g.square(diff);
                    let se = g.sum_cols(sq);
                    recon_parts.push(g.scale(se, 1.0 / self.config.x_dim as f64));
                }
            }
        }
        let recon_rows = g.concat_rows(&recon_parts);
        let recon = g.masked_mean(recon_rows, mask, denom);
        let (loss, kl) = if kl_parts.is_empty() {
            let zero = g.constant(Tensor::scalar(T::zero()));
            (recon, zero)
        } else {
            let kl_rows_all = g.concat_rows(&kl_parts);
            let kl = g.masked_mean(kl_rows_all, mask, denom);
            (g.add(recon, kl), kl)
        };
        (LossVars { loss, recon, kl }, steps)
    }

    /// Loss value for fixed initial state and noise (no update).
    pub fn elbo_loss(&self, batch: &SequenceBatch, init: &RecurrentState<T>, noise: &[Tensor<T>]) -> VrmMetrics {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let (lv, _) = self.loss_graph(&mut g, &p, batch, init, noise);
        VrmMetrics {
            loss: g.scalar(lv.loss).as_f64(),
            recon: g.scalar(lv.recon).as_f64(),
            kl: g.scalar(lv.kl).as_f64(),
            grad_norm: 0.0,
        }
    }

    /// Loss and parameter gradients for fixed initial state and noise.
    pub fn loss_and_grads(
        &self,
        batch: &SequenceBatch,
        init: &RecurrentState<T>,
        noise: &[Tensor<T>],
    ) -> (VrmMetrics, Vec<Option<Tensor<T>>>) {
        let mut g = Graph::new();
        let p = self.bind(&mut g, true);
        let (lv, _) = self.loss_graph(&mut g, &p, batch, init, noise);
        let mut grads = g.backward(lv.loss);
        let metrics = VrmMetrics {
            loss: g.scalar(lv.loss).as_f64(),
            recon: g.scalar(lv.recon).as_f64(),
            kl: g.scalar(lv.kl).as_f64(),
            grad_norm: 0.0,
        };
        (metrics, self.store.collect_grads(&mut grads, &p))
    }

    fn update(&mut self, batch: &SequenceBatch, rng: &mut Rng) -> Result<VrmMetrics> {
        let init = self.burn_in_unroll(batch, rng)?;
        let noise = self.draw_noise(rng, batch.batch_size(), batch.seq_len);
        self.step_with(batch, &init, &noise)
    }

    /// One Adam step on the loss for a given initial state and noise.
    pub fn step_with(&mut self, batch: &SequenceBatch, init: &RecurrentState<T>, noise: &[Tensor<T>]) -> Result<VrmMetrics> {
        if self.frozen {
            return usage_err("cannot train a frozen model");
        }
        let (mut metrics, grads) = self.loss_and_grads(batch, init, noise);
        metrics.grad_norm = self.adam.step(&mut self.store, &grads)?;
        Ok(metrics)
    }

    /// One Adam step on the negative ELBO.
    pub fn train_step(&mut self, batch: &SequenceBatch, rng: &mut Rng) -> Result<VrmMetrics> {
        if self.frozen {
            return usage_err("cannot train a frozen model");
        }
        if self.config.deterministic {
            return usage_err("deterministic model is trained with mse_train_step");
        }
        self.update(batch, rng)
    }

    /// One Adam step on the one-step squared prediction error.
    pub fn mse_train_step(&mut self, batch: &SequenceBatch, rng: &mut Rng) -> Result<VrmMetrics> {
        if self.frozen {
            return usage_err("cannot train a frozen model");
        }
        if !self.config.deterministic {
            return usage_err("mse_train_step requires a deterministic model");
        }
        self.update(batch, rng)
    }

    /// Either training rule, matching the model variant.
    pub fn fit_step(&mut self, batch: &SequenceBatch, rng: &mut Rng) -> Result<VrmMetrics> {
        if self.config.deterministic {
            self.mse_train_step(batch, rng)
        } else {
            self.train_step(batch, rng)
        }
    }

    /// Hidden vectors for every training position plus the lookahead, as a
    /// time-major `((seq_len + 1) * B) x d` tensor. Gradient-free.
    pub fn hidden_sequence(&self, batch: &SequenceBatch, rng: &mut Rng) -> Result<Tensor<T>> {
        let init = self.burn_in_unroll(batch, rng)?;
        let steps = batch.seq_len + 1;
        let noise = self.draw_noise(rng, batch.batch_size(), steps);
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let out = self.unroll_graph(&mut g, &p, batch, &init, steps, &noise);
        let blocks: Vec<&Tensor<T>> = out.iter().map(|s| g.value(s.state.hidden)).collect();
        Ok(Tensor::vstack(&blocks))
    }

    /// One-step reconstructions along a recorded sequence: the prediction for
    /// `x_t` decodes `z_t` (posterior given `x_t`, or the prior mean for the
    /// deterministic variant) with the hidden vector before `x_t`.
    pub fn rollout_open_loop(
        &self,
        xs: &[Vec<f64>],
        actions: &[Vec<f64>],
        rng: &mut Rng,
    ) -> Result<Vec<GaussianParams<f64>>> {
        let mut state = self.zero_state(1);
        let mut out = Vec::with_capacity(xs.len());
        let zero_a = vec![0.0; self.config.action_dim];
        for (t, x) in xs.iter().enumerate() {
            let a_prev = if t == 0 { &zero_a } else { actions.get(t - 1).ok_or_else(too_few_actions)? };
            let mut g = Graph::new();
            let p = self.bind(&mut g, false);
            let s = LstmVars::constant(&mut g, &state);
            let xv = self.x_row(x)?;
            let xv = g.constant(xv);
            let av = self.action_row(a_prev)?;
            let av = g.constant(av);
            let noise = (!self.config.deterministic).then(|| g.constant(normal_tensor(rng, 1, self.config.z_size)));
            let sv = self.step_graph(&mut g, &p, s, xv, av, noise);
            out.push(to_f64(&read_rows(&g, sv.decoder_mean, sv.decoder_var)[0]));
            state = sv.state.read(&g);
        }
        Ok(out)
    }

    /// Consume a context with the inference model, then predict `horizon`
    /// further steps from the prior alone, feeding the predicted mean back
    /// as the next observation. `actions[t]` is the action taken after step
    /// `t`; the rollout needs `context.len() + horizon - 1` of them.
    pub fn rollout_closed_loop(
        &self,
        context: &[Vec<f64>],
        horizon: i64,
        actions: &[Vec<f64>],
        rng: &mut Rng,
    ) -> Result<Vec<GaussianParams<f64>>> {
        if horizon < 0 {
            return usage_err(format!("prediction horizon must be non-negative, got {horizon}"));
        }
        if context.is_empty() {
            return usage_err("closed-loop prediction needs at least one context step");
        }
        let horizon = horizon as usize;
        if horizon == 0 {
            return Ok(Vec::new());
        }
        if actions.len() + 1 < context.len() + horizon {
            return Err(too_few_actions());
        }
        let zero_a = vec![0.0; self.config.action_dim];
        let mut state = self.zero_state(1);
        for (t, x) in context.iter().enumerate() {
            let a_prev = if t == 0 { &zero_a } else { &actions[t - 1] };
            state = self.observe(&state, x, a_prev, rng)?;
        }
        let mut out = Vec::with_capacity(horizon);
        for k in 0..horizon {
            let a_prev = &actions[context.len() + k - 1];
            let mut g = Graph::new();
            let p = self.bind(&mut g, false);
            let s = LstmVars::constant(&mut g, &state);
            let av = self.action_row(a_prev)?;
            let av = g.constant(av);
            let (pm, pv) = self.prior_graph(&mut g, &p, s.hidden, av);
            let z = match pv {
                Some(var) => {
                    let n = g.constant(normal_tensor(rng, 1, self.config.z_size));
                    reparam_var(&mut g, GaussianVars { mean: pm, var }, n)
                }
                None => pm,
            };
            let (dm, dv) = self.decoder_graph(&mut g, &p, z, s.hidden);
            out.push(to_f64(&read_rows(&g, dm, dv)[0]));
            let next = self.advance(&mut g, &p, s, z, dm);
            state = next.read(&g);
        }
        Ok(out)
    }

    /// Average KL between posterior and prior over the valid steps of a batch,
    /// computed step by step with the value-level formula.
    pub fn kl_diagnostic(&self, batch: &SequenceBatch, init: &RecurrentState<T>, noise: &[Tensor<T>]) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let steps = self.unroll_graph(&mut g, &p, batch, init, batch.seq_len, noise);
        let mut total = 0.0;
        for (t, sv) in steps.iter().enumerate() {
            let (Some(q), Some(pv)) = (sv.posterior, sv.prior_var) else {
                return Ok(0.0);
            };
            for (j, s) in batch.sequences.iter().enumerate() {
                if t < s.steps.len() {
                    let qp = q.read_row(&g, j);
                    let pp = GaussianVars { mean: sv.prior_mean, var: pv }.read_row(&g, j);
                    total += kl_diag_gaussians(&qp, &pp)?;
                }
            }
        }
        Ok(total / batch.valid_steps().max(1) as f64)
    }

    pub fn save_into(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.put_store(&format!("{prefix}/params"), &self.store);
        ck.put_optimizer(&format!("{prefix}/adam"), &self.adam, &self.store);
        ck.put_u64(&format!("{prefix}/frozen"), self.frozen as u64);
        ck.put_u64(&format!("{prefix}/layout"), self.layout());
    }

    /// Parameter count tagged with the variant, to reject mismatched checkpoints.
    fn layout(&self) -> u64 {
        (self.param_count() as u64) << 1 | self.config.deterministic as u64
    }

    pub fn load_from(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        let frozen = ck.get_u64(&format!("{prefix}/frozen"))? != 0;
        // shape checks first so a size mismatch names the array
        let mut store = self.store.clone();
        ck.load_store(&format!("{prefix}/params"), &mut store)?;
        let mut adam = self.adam.clone();
        ck.load_optimizer(&format!("{prefix}/adam"), &mut adam, &store)?;
        if ck.get_u64(&format!("{prefix}/layout"))? != self.layout() {
            return Err(crate::Error::Checkpoint(format!("model under `{prefix}` has a different architecture")));
        }
        self.store = store;
        self.adam = adam;
        self.frozen = frozen;
        Ok(())
    }
}

fn too_few_actions() -> crate::Error {
    crate::Error::Usage("not enough actions for the requested rollout".into())
}

fn copy_row<T: Real>(t: &mut Tensor<T>, r: usize, src: &[f64]) {
    for (o, &v) in t.row_mut(r).iter_mut().zip(src) {
        *o = T::of(v);
    }
}

fn floored<T: Real>(mean: &[T]) -> GaussianParams<T> {
    GaussianParams::new(mean.to_vec(), vec![T::of(VAR_FLOOR); mean.len()]).expect("floored variance is valid")
}

fn read_rows<T: Real>(g: &Graph<T>, mean: Var, var: Option<Var>) -> Vec<GaussianParams<T>> {
    let rows = g.value(mean).rows();
    (0..rows)
        .map(|r| match var {
            Some(v) => GaussianVars { mean, var: v }.read_row(g, r),
            None => floored(g.value(mean).row(r)),
        })
        .collect()
}

fn to_f64<T: Real>(gp: &GaussianParams<T>) -> GaussianParams<f64> {
    GaussianParams::new(
        gp.mean().iter().map(|v| v.as_f64()).collect(),
        gp.var().iter().map(|v| v.as_f64()).collect(),
    )
    .expect("converted parameters stay valid")
}

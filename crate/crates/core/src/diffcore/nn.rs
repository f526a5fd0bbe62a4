//! Layers built from graph primitives: affine maps, MLPs, an LSTM cell and
//! diagonal Gaussian heads.

use super::gaussian::{GaussianParams, VAR_FLOOR};
use super::graph::{Activation, Graph, Var};
use super::params::{BoundParams, ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{config_err, Result};
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
    fan_in: usize,
    fan_out: usize,
}

impl Linear {
    /// Weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, zero bias.
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<Self> {
        let w = store.add_uniform(format!("{name}.w"), fan_in, fan_out, rng)?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, fan_out))?;
        Ok(Linear { w, b, fan_in, fan_out })
    }

    pub fn fan_in(&self) -> usize {
        self.fan_in
    }

    pub fn fan_out(&self) -> usize {
        self.fan_out
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> ParamId {
        self.b
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Var {
        g.linear(x, p.var(self.w), p.var(self.b))
    }
}

/// Fully connected stack; `hidden` applies between layers, `output` after the
/// last one.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
    hidden: Activation,
    output: Activation,
}

impl Mlp {
    /// `sizes` lists every width including input and output, e.g. `[3, 2, 1]`.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return config_err(format!("mlp `{name}`: invalid layer sizes {sizes:?}"));
        }
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Mlp { layers, hidden, output })
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Var {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, p, h);
            h = g.activate(h, if i == last { self.output } else { self.hidden });
        }
        h
    }
}

/// Deterministic forward pass of `mlp` on a single input vector.
pub fn mlp_forward<T: Real>(store: &ParamStore<T>, mlp: &Mlp, input: &[T]) -> Result<Vec<T>> {
    if input.len() != mlp.input_size() {
        return config_err(format!(
            "mlp input has {} entries, expected {}",
            input.len(),
            mlp.input_size()
        ));
    }
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let x = g.constant(Tensor::row_vector(input.to_vec()));
    let y = mlp.forward(&mut g, &p, x);
    Ok(g.value(y).data().to_vec())
}

/// Hidden and cell vectors of an LSTM, one row per sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState<T> {
    pub hidden: Tensor<T>,
    pub cell: Tensor<T>,
}

impl<T: Real> RecurrentState<T> {
    pub fn zeros(batch: usize, size: usize) -> Self {
        RecurrentState {
            hidden: Tensor::zeros(batch, size),
            cell: Tensor::zeros(batch, size),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.hidden.is_finite() && self.cell.is_finite()
    }
}

/// Graph handles of a [`RecurrentState`].
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub hidden: Var,
    pub cell: Var,
}

impl LstmVars {
    pub fn constant<T: Real>(g: &mut Graph<T>, s: &RecurrentState<T>) -> Self {
        LstmVars {
            hidden: g.constant(s.hidden.clone()),
            cell: g.constant(s.cell.clone()),
        }
    }

    pub fn read<T: Real>(&self, g: &Graph<T>) -> RecurrentState<T> {
        RecurrentState {
            hidden: g.value(self.hidden).clone(),
            cell: g.value(self.cell).clone(),
        }
    }

    pub fn detach<T: Real>(&self, g: &mut Graph<T>) -> Self {
        LstmVars {
            hidden: g.stop_gradient(self.hidden),
            cell: g.stop_gradient(self.cell),
        }
    }
}

/// Standard LSTM cell with gate order (input, forget, candidate, output).
#[derive(Clone, Debug)]
pub struct LstmCell {
    w: ParamId,
    b: ParamId,
    input: usize,
    hidden: usize,
}

impl LstmCell {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, input: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        if input == 0 || hidden == 0 {
            return config_err(format!("lstm `{name}`: sizes must be positive"));
        }
        // fan-in scaling over the concatenated [input, hidden] vector
        let w = store.add_uniform(format!("{name}.w"), input + hidden, 4 * hidden, rng)?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, 4 * hidden))?;
        Ok(LstmCell { w, b, input, hidden })
    }

    pub fn input_size(&self) -> usize {
        self.input
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> ParamId {
        self.b
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, state: LstmVars, x: Var) -> LstmVars {
        let h = self.hidden;
        let xin = g.concat_cols(&[x, state.hidden]);
        let gates = g.linear(xin, p.var(self.w), p.var(self.b));
        let i = g.slice_cols(gates, 0, h);
        let i = g.sigmoid(i);
        let f = g.slice_cols(gates, h, h);
        let f = g.sigmoid(f);
        let c_hat = g.slice_cols(gates, 2 * h, h);
        let c_hat = g.tanh(c_hat);
        let o = g.slice_cols(gates, 3 * h, h);
        let o = g.sigmoid(o);
        let keep = g.mul(f, state.cell);
        let write = g.mul(i, c_hat);
        let cell = g.add(keep, write);
        let squashed = g.tanh(cell);
        let hidden = g.mul(o, squashed);
        LstmVars { hidden, cell }
    }
}

/// One LSTM update outside any training graph.
pub fn lstm_step<T: Real>(store: &ParamStore<T>, cell: &LstmCell, state: &RecurrentState<T>, input: &Tensor<T>) -> Result<RecurrentState<T>> {
    if input.cols() != cell.input || state.hidden.cols() != cell.hidden || input.rows() != state.hidden.rows() {
        return config_err(format!(
            "lstm input {:?} / state {:?} do not match cell ({} -> {})",
            input.shape(),
            state.hidden.shape(),
            cell.input,
            cell.hidden
        ));
    }
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let s = LstmVars::constant(&mut g, state);
    let x = g.constant(input.clone());
    Ok(cell.forward(&mut g, &p, s, x).read(&g))
}

/// Graph handles of a diagonal Gaussian; `var` already includes the floor.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mean: Var,
    pub var: Var,
}

impl GaussianVars {
    /// Row `r` as plain parameters.
    pub fn read_row<T: Real>(&self, g: &Graph<T>, r: usize) -> GaussianParams<T> {
        GaussianParams::new(g.value(self.mean).row(r).to_vec(), g.value(self.var).row(r).to_vec())
            .expect("head output respects the variance floor")
    }
}

/// Linear mean, `softplus(.) + VAR_FLOOR` variance.
#[derive(Clone, Debug)]
pub struct GaussianHead {
    mean: Linear,
    var: Linear,
}

impl GaussianHead {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, fan_in: usize, size: usize, rng: &mut Rng) -> Result<Self> {
        Ok(GaussianHead {
            mean: Linear::new(store, &format!("{name}.mean"), fan_in, size, rng)?,
            var: Linear::new(store, &format!("{name}.var"), fan_in, size, rng)?,
        })
    }

    pub fn size(&self) -> usize {
        self.mean.fan_out
    }

    pub fn mean_layer(&self) -> &Linear {
        &self.mean
    }

    pub fn var_layer(&self) -> &Linear {
        &self.var
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, features: Var) -> GaussianVars {
        let mean = self.mean.forward(g, p, features);
        let logit = self.var.forward(g, p, features);
        let sp = g.softplus(logit);
        let var = g.offset(sp, VAR_FLOOR);
        GaussianVars { mean, var }
    }
}

/// Evaluate a head on one feature vector.
pub fn gaussian_head<T: Real>(store: &ParamStore<T>, head: &GaussianHead, features: &[T]) -> Result<GaussianParams<T>> {
    if features.len() != head.mean.fan_in {
        return config_err(format!(
            "gaussian head expects {} features, got {}",
            head.mean.fan_in,
            features.len()
        ));
    }
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let x = g.constant(Tensor::row_vector(features.to_vec()));
    let out = head.forward(&mut g, &p, x);
    Ok(out.read_row(&g, 0))
}

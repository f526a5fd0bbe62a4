use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng as _;
use sha2::{Digest, Sha256};

use super::graph::{Gradients, Graph, Var};
use super::tensor::{Real, Tensor};
use crate::error::{config_err, Result};
use crate::rng::Rng;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
struct Param<T> {
    name: String,
    value: Arc<Tensor<T>>,
}

/// Named learnable arrays of one network.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return config_err(format!("duplicate parameter name `{name}`"));
        }
        if !value.is_finite() {
            return config_err(format!("parameter `{name}` has non-finite entries"));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value: Arc::new(value),
        });
        Ok(ParamId(self.params.len() - 1))
    }

    /// Weight matrix with entries `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn add_uniform(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| T::of(rng.random_range(-bound..bound)))
            .collect();
        self.add(name, Tensor::from_vec(fan_in, fan_out, data))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|p| (p.name.as_str(), p.value.as_ref()))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalars.
    pub fn count_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    /// SHA-256 over names, shapes and raw bytes; equal hashes mean bitwise
    /// identical stores.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            h.update((p.value.rows() as u64).to_le_bytes());
            h.update((p.value.cols() as u64).to_le_bytes());
            buf.clear();
            for &v in p.value.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn check_compatible(&self, other: &ParamStore<T>) -> Result<()> {
        if self.params.len() != other.params.len() {
            return config_err(format!(
                "parameter stores differ in size ({} vs {})",
                self.params.len(),
                other.params.len()
            ));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return config_err(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                ));
            }
        }
        Ok(())
    }

    /// `self <- tau * online + (1 - tau) * self`, elementwise.
    pub fn soft_update(&mut self, online: &ParamStore<T>, tau: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&tau) {
            return config_err(format!("soft update fraction {tau} outside [0, 1]"));
        }
        self.check_compatible(online)?;
        let t = T::of(tau);
        let keep = T::one() - t;
        for (dst, src) in self.params.iter_mut().zip(&online.params) {
            if tau == 1.0 {
                dst.value = Arc::clone(&src.value);
                continue;
            }
            if tau == 0.0 {
                continue;
            }
            let d = Arc::make_mut(&mut dst.value);
            for (x, &y) in d.data_mut().iter_mut().zip(src.value.data()) {
                *x = t * y + keep * *x;
            }
        }
        Ok(())
    }

    /// Replace every array by the matching one in `other` (same names and
    /// shapes required).
    pub fn copy_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        self.check_compatible(other)?;
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.value = Arc::clone(&src.value);
        }
        Ok(())
    }

    /// Register every parameter as a leaf of `g`. Frozen bindings carry no
    /// gradient.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundParams {
        BoundParams {
            vars: self
                .params
                .iter()
                .map(|p| g.shared(Arc::clone(&p.value), trainable))
                .collect(),
        }
    }

    /// Gradients of `bound` in store order; `None` where nothing flowed.
    pub fn collect_grads(&self, grads: &mut Gradients<T>, bound: &BoundParams) -> Vec<Option<Tensor<T>>> {
        bound.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

/// Graph leaves of one [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

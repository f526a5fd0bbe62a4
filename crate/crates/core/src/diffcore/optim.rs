use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{config_err, Error, Result};

/// Global gradient-norm clip applied before every Adam step.
pub const GRAD_CLIP_NORM: f64 = 1000.0;

/// Adam moments for one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros = |store: &ParamStore<T>| -> Vec<Tensor<T>> {
            store
                .iter()
                .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
                .collect()
        };
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(store),
            v: zeros(store),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// Restore saved moments; shapes must line up with the current ones.
    pub fn restore(&mut self, step: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return config_err("optimizer moment count mismatch");
        }
        for (a, b) in self.m.iter().zip(&m).chain(self.v.iter().zip(&v)) {
            if a.shape() != b.shape() {
                return config_err(format!("optimizer moment shape {:?} vs {:?}", a.shape(), b.shape()));
            }
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One bias-corrected Adam update. Missing gradients count as zero.
    /// Returns the gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<f64> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return config_err(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            ));
        }
        let next = self.step + 1;
        let mut sq = 0.0;
        for (id, g) in store.ids().zip(grads) {
            if let Some(g) = g {
                if g.shape() != store.get(id).shape() {
                    return config_err(format!("gradient shape mismatch for `{}`", store.name(id)));
                }
                if !g.is_finite() {
                    return Err(Error::Training {
                        step: next,
                        message: format!("non-finite gradient for `{}`", store.name(id)),
                    });
                }
                sq += g.sq_norm();
            }
        }
        let norm = sq.sqrt();
        let clip = if norm > GRAD_CLIP_NORM { GRAD_CLIP_NORM / norm } else { 1.0 };

        self.step = next;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let one = T::one();
        let c1 = 1.0 - self.beta1.powi(next.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - self.beta2.powi(next.min(i32::MAX as u64) as i32);
        let step_size = T::of(self.lr / c1);
        let c2_sqrt = T::of(c2.sqrt());
        let eps = T::of(self.eps);
        let clip = T::of(clip);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            match &grads[k] {
                Some(g) => {
                    for ((mi, vi), &gi) in m.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                        let gi = gi * clip;
                        *mi = b1 * *mi + (one - b1) * gi;
                        *vi = b2 * *vi + (one - b2) * gi * gi;
                    }
                }
                None => {
                    m.iter_mut().for_each(|mi| *mi *= b1);
                    v.iter_mut().for_each(|vi| *vi *= b2);
                }
            }
            if m.iter().all(|&mi| mi == T::zero()) {
                continue;
            }
            let p = store.get_mut(id);
            for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m.iter()).zip(v.iter()) {
                *pi -= step_size * mi / (vi.sqrt() / c2_sqrt + eps);
            }
        }
        if !store.is_finite() {
            return Err(Error::Training {
                step: next,
                message: "parameters became non-finite".into(),
            });
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_f64(1, vals.len(), vals)).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store(&[1.0, -2.0, 0.5]);
        let mut opt = Adam::new(&s, 0.01);
        let g = Tensor::from_f64(1, 3, &[0.3, -7.0, 1e-3]);
        opt.step(&mut s, &[Some(g)]).unwrap();
        let w = s.by_name("w").unwrap().data();
        // bias-corrected ratio is g/|g| up to eps
        assert!((w[0] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((w[1] - (-2.0 + 0.01)).abs() < 1e-6);
        assert!((w[2] - (0.5 - 0.01)).abs() < 1e-4);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = store(&[1.0, 2.0]);
        let h = s.hash();
        let mut opt = Adam::new(&s, 0.1);
        for _ in 0..50 {
            opt.step(&mut s, &[Some(Tensor::zeros(1, 2))]).unwrap();
            opt.step(&mut s, &[None]).unwrap();
        }
        assert_eq!(h, s.hash());
    }

    #[test]
    fn non_finite_gradient_reports_step() {
        let mut s = store(&[1.0]);
        let mut opt = Adam::new(&s, 0.1);
        opt.step(&mut s, &[Some(Tensor::from_f64(1, 1, &[1.0]))]).unwrap();
        let err = opt.step(&mut s, &[Some(Tensor::from_f64(1, 1, &[f64::NAN]))]).unwrap_err();
        assert!(matches!(err, Error::Training { step: 2, .. }));
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let mut s = store(&[0.1, 0.2, 0.3]);
            let mut opt = Adam::new(&s, 0.003);
            for k in 0..100 {
                let g = Tensor::from_f64(1, 3, &[(k as f64).sin(), (k as f64 * 0.3).cos(), 0.01 * k as f64]);
                opt.step(&mut s, &[Some(g)]).unwrap();
            }
            s.hash()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn huge_gradients_are_clipped() {
        let mut s = store(&[0.0]);
        let mut opt = Adam::new(&s, 0.1);
        let norm = opt.step(&mut s, &[Some(Tensor::from_f64(1, 1, &[1e6]))]).unwrap();
        assert_eq!(norm, 1e6);
        assert!((s.by_name("w").unwrap().data()[0] + 0.1).abs() < 1e-9);
    }
}

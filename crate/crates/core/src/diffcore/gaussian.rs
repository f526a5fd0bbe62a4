//! Diagonal Gaussians: sampling, log densities and closed-form KL.

use std::f64::consts::PI;

use super::graph::{Graph, Var};
use super::nn::GaussianVars;
use super::tensor::Real;
use crate::error::{config_err, Result};

/// Lower bound added to every softplus variance output.
pub const VAR_FLOOR: f64 = 1e-5;

/// Mean and diagonal variance of equal length; variances strictly positive.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams<T> {
    mean: Vec<T>,
    var: Vec<T>,
}

impl<T: Real> GaussianParams<T> {
    pub fn new(mean: Vec<T>, var: Vec<T>) -> Result<Self> {
        if mean.len() != var.len() {
            return config_err(format!("gaussian mean has {} entries, variance {}", mean.len(), var.len()));
        }
        if var.iter().any(|&v| !(v > T::zero()) || !v.is_finite()) || mean.iter().any(|m| !m.is_finite()) {
            return config_err("gaussian parameters must be finite with positive variance");
        }
        Ok(GaussianParams { mean, var })
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn var(&self) -> &[T] {
        &self.var
    }
}

/// `mean + sqrt(var) * noise`.
pub fn reparam_sample<T: Real>(gp: &GaussianParams<T>, noise: &[T]) -> Result<Vec<T>> {
    if noise.len() != gp.len() {
        return config_err(format!("noise has {} entries, gaussian {}", noise.len(), gp.len()));
    }
    Ok(gp
        .mean
        .iter()
        .zip(&gp.var)
        .zip(noise)
        .map(|((&m, &v), &e)| m + v.sqrt() * e)
        .collect())
}

/// Sum over dimensions of the diagonal Gaussian log density.
pub fn gaussian_log_density<T: Real>(gp: &GaussianParams<T>, value: &[T]) -> Result<f64> {
    if value.len() != gp.len() {
        return config_err(format!("value has {} entries, gaussian {}", value.len(), gp.len()));
    }
    Ok(gp
        .mean
        .iter()
        .zip(&gp.var)
        .zip(value)
        .map(|((&m, &v), &x)| {
            let (m, v, x) = (m.as_f64(), v.as_f64(), x.as_f64());
            -0.5 * ((2.0 * PI * v).ln() + (x - m) * (x - m) / v)
        })
        .sum())
}

/// `KL(q || p)` summed over dimensions.
pub fn kl_diag_gaussians<T: Real>(q: &GaussianParams<T>, p: &GaussianParams<T>) -> Result<f64> {
    if q.len() != p.len() {
        return config_err(format!("kl between gaussians of size {} and {}", q.len(), p.len()));
    }
    Ok((0..q.len())
        .map(|i| {
            let (mq, vq) = (q.mean[i].as_f64(), q.var[i].as_f64());
            let (mp, vp) = (p.mean[i].as_f64(), p.var[i].as_f64());
            0.5 * (vp / vq).ln() + ((mq - mp) * (mq - mp) + vq) / (2.0 * vp) - 0.5
        })
        .sum())
}

/// Graph version of [`reparam_sample`]; `noise` should be a constant.
pub fn reparam_var<T: Real>(g: &mut Graph<T>, gv: GaussianVars, noise: Var) -> Var {
    let sd = g.sqrt(gv.var);
    let scaled = g.mul(sd, noise);
    g.add(scaled, gv.mean)
}

/// Per-row log density, `n x 1`.
pub fn log_density_rows<T: Real>(g: &mut Graph<T>, gv: GaussianVars, value: Var) -> Var {
    let diff = g.sub(value, gv.mean);
    let sq = g.square(diff);
    let maha = g.div(sq, gv.var);
    let logv = g.ln(gv.var);
    let inner = g.add(maha, logv);
    let inner = g.offset(inner, (2.0 * PI).ln());
    let s = g.sum_cols(inner);
    g.scale(s, -0.5)
}

/// Per-row `KL(q || p)`, `n x 1`.
pub fn kl_rows<T: Real>(g: &mut Graph<T>, q: GaussianVars, p: GaussianVars) -> Var {
    let ratio = g.div(p.var, q.var);
    let log_ratio = g.ln(ratio);
    let half_log = g.scale(log_ratio, 0.5);
    let diff = g.sub(q.mean, p.mean);
    let sq = g.square(diff);
    let num = g.add(sq, q.var);
    let frac = g.div(num, p.var);
    let frac = g.scale(frac, 0.5);
    let terms = g.add(half_log, frac);
    let terms = g.offset(terms, -0.5);
    g.sum_cols(terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use crate::rng::{standard_normal, substream};
    use proptest::prelude::*;

    fn gp(m: &[f64], v: &[f64]) -> GaussianParams<f64> {
        GaussianParams::new(m.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(GaussianParams::new(vec![0.0], vec![0.0]).is_err());
        assert!(GaussianParams::new(vec![0.0, 1.0], vec![1.0]).is_err());
        assert!(GaussianParams::new(vec![f64::NAN], vec![1.0]).is_err());
    }

    #[test]
    fn reparam_cases() {
        let g = gp(&[1.0, -2.0], &[4.0, 4.0]);
        assert_eq!(reparam_sample(&g, &[0.0, 0.0]).unwrap(), vec![1.0, -2.0]);
        assert_eq!(reparam_sample(&g, &[1.0, 1.0]).unwrap(), vec![3.0, 0.0]);
        assert!(reparam_sample(&g, &[1.0]).is_err());
    }

    #[test]
    fn reparam_gradient_flows_to_mean_and_variance_only() {
        let mut g = Graph::<f64>::new();
        let mean = g.variable(Tensor::from_f64(1, 2, &[0.5, -0.5]));
        let var = g.variable(Tensor::from_f64(1, 2, &[4.0, 0.25]));
        let noise = g.constant(Tensor::from_f64(1, 2, &[1.0, -2.0]));
        let s = reparam_var(&mut g, GaussianVars { mean, var }, noise);
        let l = g.sum(s);
        let grads = g.backward(l);
        assert_eq!(grads.get(mean).unwrap().data(), &[1.0, 1.0]);
        // d sqrt(v) e / dv = e / (2 sqrt v)
        let dv = grads.get(var).unwrap().data();
        assert!((dv[0] - 0.25).abs() < 1e-15 && (dv[1] + 2.0).abs() < 1e-15);
        assert!(grads.get(noise).is_none());
    }

    #[test]
    fn log_density_closed_forms() {
        let std_normal = gaussian_log_density(&gp(&[0.0], &[1.0]), &[0.0]).unwrap();
        assert!((std_normal + 0.918_938_533_204_672_7).abs() < 1e-12);
        let at_mean = gaussian_log_density(&gp(&[2.5], &[0.3]), &[2.5]).unwrap();
        assert!((at_mean + 0.5 * (2.0 * PI * 0.3).ln()).abs() < 1e-12);
        let a = gaussian_log_density(&gp(&[0.1], &[0.7]), &[1.0]).unwrap();
        let b = gaussian_log_density(&gp(&[-0.4], &[2.0]), &[0.3]).unwrap();
        let ab = gaussian_log_density(&gp(&[0.1, -0.4], &[0.7, 2.0]), &[1.0, 0.3]).unwrap();
        assert!((a + b - ab).abs() < 1e-12);
    }

    #[test]
    fn kl_closed_forms() {
        let p = gp(&[0.3, -1.0], &[0.5, 2.0]);
        assert!(kl_diag_gaussians(&p, &p).unwrap().abs() < 1e-15);
        let kl = kl_diag_gaussians(&gp(&[1.0], &[1.0]), &gp(&[0.0], &[1.0])).unwrap();
        assert!((kl - 0.5).abs() < 1e-15);
        let kl = kl_diag_gaussians(&gp(&[0.0], &[1.0]), &gp(&[0.0], &[4.0])).unwrap();
        assert!((kl - (2f64.ln() + 0.125 - 0.5)).abs() < 1e-12);
        assert!((kl - 0.318_147).abs() < 1e-6);
    }

    #[test]
    fn graph_versions_match_value_versions() {
        let q = gp(&[0.2, -0.3, 1.1], &[0.4, 1.3, 0.05]);
        let p = gp(&[-0.5, 0.1, 0.9], &[2.0, 0.7, 0.3]);
        let x = [0.0, 0.5, 1.0];
        let mut g = Graph::<f64>::new();
        let qv = GaussianVars {
            mean: g.constant(Tensor::from_f64(1, 3, q.mean())),
            var: g.constant(Tensor::from_f64(1, 3, q.var())),
        };
        let pv = GaussianVars {
            mean: g.constant(Tensor::from_f64(1, 3, p.mean())),
            var: g.constant(Tensor::from_f64(1, 3, p.var())),
        };
        let xv = g.constant(Tensor::from_f64(1, 3, &x));
        let kl = kl_rows(&mut g, qv, pv);
        let ld = log_density_rows(&mut g, qv, xv);
        assert!((g.scalar(kl) - kl_diag_gaussians(&q, &p).unwrap()).abs() < 1e-12);
        assert!((g.scalar(ld) - gaussian_log_density(&q, &x).unwrap()).abs() < 1e-12);
    }

    /// Scalar formula written from the density definitions, independent of the
    /// implementation above.
    fn oracle_kl(mq: f64, sq: f64, mp: f64, sp: f64) -> f64 {
        (sp / sq).ln() + (sq * sq + (mq - mp).powi(2)) / (2.0 * sp * sp) - 0.5
    }

    fn oracle_log_density(m: f64, s: f64, x: f64) -> f64 {
        let z = (x - m) / s;
        -(s * (2.0 * PI).sqrt()).ln() - 0.5 * z * z
    }

    proptest! {
        #[test]
        fn one_dimensional_oracles_agree(
            mq in -3.0f64..3.0, sq in 0.05f64..3.0,
            mp in -3.0f64..3.0, sp in 0.05f64..3.0,
            x in -5.0f64..5.0,
        ) {
            let q = gp(&[mq], &[sq * sq]);
            let p = gp(&[mp], &[sp * sp]);
            let kl = kl_diag_gaussians(&q, &p).unwrap();
            prop_assert!(kl >= -1e-9);
            prop_assert!((kl - oracle_kl(mq, sq, mp, sp)).abs() <= 1e-10 * (1.0 + kl.abs()));
            let ld = gaussian_log_density(&q, &[x]).unwrap();
            prop_assert!((ld - oracle_log_density(mq, sq, x)).abs() <= 1e-10 * (1.0 + ld.abs()));
        }
    }

    #[test]
    fn kl_matches_monte_carlo_on_a_few_pairs() {
        let mut rng = substream(11, "kl-mc");
        for _ in 0..5 {
            let mq = 2.0 * standard_normal(&mut rng);
            let mp = 2.0 * standard_normal(&mut rng);
            let sq = (0.5 * standard_normal(&mut rng)).exp();
            let sp = (0.5 * standard_normal(&mut rng)).exp();
            let q = gp(&[mq], &[sq * sq]);
            let p = gp(&[mp], &[sp * sp]);
            let n = 200_000;
            let mut acc = 0.0;
            for _ in 0..n {
                let z = mq + sq * standard_normal(&mut rng);
                acc += oracle_log_density(mq, sq, z) - oracle_log_density(mp, sp, z);
            }
            let mc = acc / n as f64;
            let kl = kl_diag_gaussians(&q, &p).unwrap();
            assert!((mc - kl).abs() < 0.05 * kl.max(0.2), "mc {mc} vs kl {kl}");
        }
    }
}

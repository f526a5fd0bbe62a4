use std::f64::consts::PI;

use rand::Rng as _;

use super::{Dynamics, RawStep};
use crate::rng::Rng;

pub const MAX_TORQUE: f64 = 2.0;
pub const MAX_SPEED: f64 = 8.0;
const G: f64 = 10.0;
const MASS: f64 = 1.0;
const LENGTH: f64 = 1.0;
const DT: f64 = 0.05;

/// Torque-limited swing-up pendulum; angle 0 is upright.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Pendulum {
    pub theta: f64,
    pub theta_dot: f64,
}

/// Wrap an angle into `[-pi, pi)`.
pub fn wrap_angle(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

impl Pendulum {
    pub fn reward(theta: f64, theta_dot: f64, torque: f64) -> f64 {
        let th = wrap_angle(theta);
        -(th * th + 0.1 * theta_dot * theta_dot + 0.001 * torque * torque)
    }
}

impl Dynamics for Pendulum {
    fn reset(&mut self, rng: &mut Rng) -> Vec<f64> {
        self.theta = rng.random_range(-PI..PI);
        self.theta_dot = rng.random_range(-1.0..1.0);
        self.raw_observation()
    }

    fn step(&mut self, action: &[f64]) -> RawStep {
        let u = action[0].clamp(-MAX_TORQUE, MAX_TORQUE);
        let reward = Self::reward(self.theta, self.theta_dot, u);
        let acc = 3.0 * G / (2.0 * LENGTH) * self.theta.sin() + 3.0 / (MASS * LENGTH * LENGTH) * u;
        self.theta_dot = (self.theta_dot + acc * DT).clamp(-MAX_SPEED, MAX_SPEED);
        self.theta += self.theta_dot * DT;
        RawStep {
            obs: self.raw_observation(),
            reward,
            terminal: false,
            success: false,
        }
    }

    fn raw_observation(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.theta_dot]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn upright_at_rest_earns_zero() {
        let mut p = Pendulum::default();
        let out = p.step(&[0.0]);
        assert_eq!(out.reward, 0.0);
        assert_eq!(p, Pendulum::default());
    }

    #[test]
    fn reward_bounds_and_reset_ranges() {
        let lower = -(PI * PI + 0.1 * 64.0 + 0.001 * 4.0);
        let mut rng = substream(5, "p");
        let mut p = Pendulum::default();
        for ep in 0..20 {
            let x0 = p.reset(&mut rng);
            assert!(x0[0].abs() <= 1.0 && x0[1].abs() <= 1.0 && x0[2].abs() <= 1.0);
            for k in 0..200 {
                let u = if (k + ep) % 3 == 0 { 2.0 } else { -2.0 };
                let r = p.step(&[u]).reward;
                assert!((lower..=0.0).contains(&r), "{r}");
                assert!(p.theta_dot.abs() <= MAX_SPEED);
            }
        }
    }

    #[test]
    fn one_euler_step_by_hand() {
        let mut p = Pendulum {
            theta: 0.5,
            theta_dot: 1.0,
        };
        p.step(&[1.0]);
        let acc = 15.0 * 0.5f64.sin() + 3.0;
        let td = 1.0 + acc * 0.05;
        assert!((p.theta_dot - td).abs() < 1e-15);
        assert!((p.theta - (0.5 + td * 0.05)).abs() < 1e-15);
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(-0.25) + 0.25).abs() < 1e-15);
    }
}

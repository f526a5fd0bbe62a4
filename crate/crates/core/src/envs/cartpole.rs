use rand::Rng as _;

use super::{Dynamics, RawStep};
use crate::rng::Rng;

const GRAVITY: f64 = 9.8;
const CART_MASS: f64 = 1.0;
const POLE_MASS: f64 = 0.1;
const TOTAL_MASS: f64 = CART_MASS + POLE_MASS;
const HALF_LENGTH: f64 = 0.5;
const POLE_MASS_LENGTH: f64 = POLE_MASS * HALF_LENGTH;
const FORCE_MAG: f64 = 10.0;
const TAU: f64 = 0.02;
pub const THETA_LIMIT: f64 = 12.0 * 2.0 * std::f64::consts::PI / 360.0;
pub const X_LIMIT: f64 = 2.4;

/// Cart-pole balancing with a continuous force in `[-1, 1] * 10 N`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CartPole {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
}

impl CartPole {
    fn out_of_bounds(&self) -> bool {
        self.x.abs() > X_LIMIT || self.theta.abs() > THETA_LIMIT
    }
}

impl Dynamics for CartPole {
    fn reset(&mut self, rng: &mut Rng) -> Vec<f64> {
        self.x = rng.random_range(-0.05..0.05);
        self.x_dot = rng.random_range(-0.05..0.05);
        self.theta = rng.random_range(-0.05..0.05);
        self.theta_dot = rng.random_range(-0.05..0.05);
        self.raw_observation()
    }

    fn step(&mut self, action: &[f64]) -> RawStep {
        let force = FORCE_MAG * action[0].clamp(-1.0, 1.0);
        let (sin, cos) = self.theta.sin_cos();
        let temp = (force + POLE_MASS_LENGTH * self.theta_dot * self.theta_dot * sin) / TOTAL_MASS;
        let theta_acc =
            (GRAVITY * sin - cos * temp) / (HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos * cos / TOTAL_MASS));
        let x_acc = temp - POLE_MASS_LENGTH * theta_acc * cos / TOTAL_MASS;
        self.x += TAU * self.x_dot;
        self.x_dot += TAU * x_acc;
        self.theta += TAU * self.theta_dot;
        self.theta_dot += TAU * theta_acc;
        RawStep {
            obs: self.raw_observation(),
            reward: 1.0,
            terminal: self.out_of_bounds(),
            success: false,
        }
    }

    fn raw_observation(&self) -> Vec<f64> {
        vec![self.x, self.x_dot, self.theta, self.theta_dot]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{make_env, EnvName, PoVariant};

    #[test]
    fn survival_reward_and_termination() {
        let mut c = CartPole::default();
        let out = c.step(&[0.0]);
        assert_eq!(out.reward, 1.0);
        assert!(!out.terminal);
        // pushing one way forever eventually drops the pole
        let mut steps = 0;
        loop {
            steps += 1;
            let out = c.step(&[1.0]);
            assert_eq!(out.reward, 1.0);
            if out.terminal {
                break;
            }
            assert!(steps < 1000);
        }
    }

    #[test]
    fn balanced_cart_is_an_equilibrium() {
        let mut c = CartPole::default();
        for _ in 0..1000 {
            c.step(&[0.0]);
        }
        assert_eq!(c, CartPole::default());
    }

    #[test]
    fn perfect_policy_collects_max_steps() {
        // simple PD controller on the full state
        let mut env = make_env(EnvName::CartPole, PoVariant::Full, 9).unwrap();
        let mut obs = env.reset();
        let mut ret = 0.0;
        loop {
            let u = 2.0 * obs[2] + 0.5 * obs[3] + 0.05 * obs[0] + 0.1 * obs[1];
            let out = env.step(&[u * 10.0]).unwrap();
            ret += out.reward;
            obs = out.obs;
            if out.done {
                assert!(out.info.timeout);
                break;
            }
        }
        assert_eq!(ret, 1000.0);
    }
}

use std::f64::consts::PI;

use rand::Rng as _;

use super::{Dynamics, RawStep};
use crate::rng::Rng;

/// Arena is `[-HALF_EXTENT, HALF_EXTENT]^2`.
pub const HALF_EXTENT: f64 = 1.0;
pub const CONTACT_RADIUS: f64 = 0.08;
/// Minimum distance between the robot and any target, and between targets, at reset.
pub const MIN_SEPARATION: f64 = 0.4;
/// Reward for reaching targets 1, 2 and 3, in that order.
pub const REWARD_SCHEDULE: [f64; 3] = [0.1, 0.3, 1.0];
const WHEEL_SPEED: f64 = 0.05;
const TURN_RATE: f64 = 0.5;

/// Differential-drive robot that must touch three targets in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SeqReach {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub targets: [[f64; 2]; 3],
    /// Number of targets already reached.
    pub reached: usize,
}

impl SeqReach {
    fn contact(&self, k: usize) -> bool {
        let [tx, ty] = self.targets[k];
        (tx - self.x).hypot(ty - self.y) < CONTACT_RADIUS
    }
}

impl Dynamics for SeqReach {
    fn reset(&mut self, rng: &mut Rng) -> Vec<f64> {
        let margin = HALF_EXTENT - CONTACT_RADIUS;
        'outer: loop {
            let mut pts = [[0.0; 2]; 4];
            for p in pts.iter_mut() {
                *p = [rng.random_range(-margin..margin), rng.random_range(-margin..margin)];
            }
            for i in 0..4 {
                for j in 0..i {
                    if (pts[i][0] - pts[j][0]).hypot(pts[i][1] - pts[j][1]) < MIN_SEPARATION {
                        continue 'outer;
                    }
                }
            }
            self.x = pts[0][0];
            self.y = pts[0][1];
            self.targets = [pts[1], pts[2], pts[3]];
            break;
        }
        self.heading = rng.random_range(-PI..PI);
        self.reached = 0;
        self.raw_observation()
    }

    fn step(&mut self, action: &[f64]) -> RawStep {
        let left = action[0].clamp(-1.0, 1.0);
        let right = action[1].clamp(-1.0, 1.0);
        let v = WHEEL_SPEED * 0.5 * (left + right);
        self.heading = super::pendulum::wrap_angle(self.heading + TURN_RATE * (right - left));
        self.x = (self.x + v * self.heading.cos()).clamp(-HALF_EXTENT, HALF_EXTENT);
        self.y = (self.y + v * self.heading.sin()).clamp(-HALF_EXTENT, HALF_EXTENT);
        let mut reward = 0.0;
        if self.reached < 3 && self.contact(self.reached) {
            reward = REWARD_SCHEDULE[self.reached];
            self.reached += 1;
        }
        let success = self.reached == 3;
        RawStep {
            obs: self.raw_observation(),
            reward,
            terminal: success,
            success,
        }
    }

    /// Per target: body-frame offset, distance and bearing.
    fn raw_observation(&self) -> Vec<f64> {
        let (s, c) = self.heading.sin_cos();
        let mut out = Vec::with_capacity(12);
        for &[tx, ty] in &self.targets {
            let (dx, dy) = (tx - self.x, ty - self.y);
            let bx = c * dx + s * dy;
            let by = -s * dx + c * dy;
            out.extend([bx, by, dx.hypot(dy), by.atan2(bx)]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn at_origin(targets: [[f64; 2]; 3]) -> SeqReach {
        SeqReach {
            targets,
            ..Default::default()
        }
    }

    #[test]
    fn reset_respects_separation() {
        let mut rng = substream(1, "s");
        let mut env = SeqReach::default();
        for _ in 0..200 {
            env.reset(&mut rng);
            let mut pts = vec![[env.x, env.y]];
            pts.extend(env.targets);
            for i in 0..4 {
                assert!(pts[i][0].abs() <= HALF_EXTENT && pts[i][1].abs() <= HALF_EXTENT);
                for j in 0..i {
                    let d = (pts[i][0] - pts[j][0]).hypot(pts[i][1] - pts[j][1]);
                    assert!(d >= MIN_SEPARATION);
                }
            }
        }
    }

    #[test]
    fn body_frame_observation() {
        let mut env = at_origin([[0.5, 0.0], [0.0, 0.5], [-0.5, 0.0]]);
        env.heading = PI / 2.0;
        let obs = env.raw_observation();
        assert_eq!(obs.len(), 12);
        // facing +y: a target on +x sits to the right (negative body y)
        assert!((obs[0] - 0.0).abs() < 1e-12 && (obs[1] + 0.5).abs() < 1e-12);
        assert!((obs[2] - 0.5).abs() < 1e-12 && (obs[3] + PI / 2.0).abs() < 1e-12);
        assert!((obs[4] - 0.5).abs() < 1e-12 && obs[5].abs() < 1e-12 && obs[7].abs() < 1e-12);
    }

    #[test]
    fn straight_drive_and_turn() {
        let mut env = at_origin([[0.9, 0.9], [-0.9, 0.9], [-0.9, -0.9]]);
        env.step(&[1.0, 1.0]);
        assert!((env.x - 0.05).abs() < 1e-15 && env.y == 0.0 && env.heading == 0.0);
        env.step(&[-1.0, 1.0]);
        assert!((env.heading - 1.0).abs() < 1e-15);
        assert!((env.x - 0.05).abs() < 1e-15);
    }

    #[test]
    fn out_of_order_contact_earns_nothing() {
        // second target right ahead, first one far away
        let mut env = at_origin([[-0.9, -0.9], [0.1, 0.0], [0.9, 0.9]]);
        let out = env.step(&[1.0, 1.0]);
        assert!(env.contact(1));
        assert_eq!(out.reward, 0.0);
        assert_eq!(env.reached, 0);
    }

    #[test]
    fn ordered_visits_pay_schedule_and_succeed() {
        let mut env = at_origin([[0.1, 0.0], [0.3, 0.0], [0.5, 0.0]]);
        let mut rewards = Vec::new();
        let mut success = false;
        for _ in 0..20 {
            let out = env.step(&[1.0, 1.0]);
            if out.reward > 0.0 {
                rewards.push(out.reward);
            }
            if out.terminal {
                success = out.success;
                break;
            }
        }
        assert_eq!(rewards, REWARD_SCHEDULE.to_vec());
        assert!(success);
        assert!((rewards.iter().sum::<f64>() - 1.4).abs() < 1e-12);
    }

    #[test]
    fn robot_stays_in_arena() {
        let mut env = at_origin([[0.9, 0.9], [-0.9, 0.9], [-0.9, -0.9]]);
        for _ in 0..100 {
            env.step(&[1.0, 1.0]);
        }
        assert_eq!(env.x, HALF_EXTENT);
    }
}

//! Update cadence of the training loop.

/// When each learner component is updated. `t` counts completed environment
/// steps, so the first step is `t = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Schedule {
    pub step_start_rl: u64,
    pub kl_interval: u64,
    pub rl_interval: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepPlan {
    /// Pre-train (and freeze) models before any other update at this step.
    pub pretrain: bool,
    pub kl_update: bool,
    pub rl_update: bool,
}

impl Schedule {
    pub fn plan(&self, t: u64) -> StepPlan {
        let after = t > self.step_start_rl;
        let since = t.saturating_sub(self.step_start_rl);
        StepPlan {
            pretrain: t == self.step_start_rl,
            kl_update: after && since % self.kl_interval == 0,
            rl_update: after && since % self.rl_interval == 0,
        }
    }

    /// Closed-form update counts after `total` steps.
    pub fn expected_counts(&self, total: u64) -> (u64, u64) {
        let since = total.saturating_sub(self.step_start_rl);
        (since / self.kl_interval, since / self.rl_interval)
    }
}

/// Running totals of everything the schedule triggered.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub steps: u64,
    pub episodes: u64,
    /// Pre-training updates of models (both the frozen and, for the
    /// single-model ablation, the keep-learning one).
    pub fi_updates: u64,
    pub kl_updates: u64,
    pub rl_updates: u64,
    /// RL updates spent at the start step by the baselines.
    pub rl_pretrain_updates: u64,
}

impl Counters {
    pub const FIELDS: [&'static str; 6] =
        ["steps", "episodes", "fi_updates", "kl_updates", "rl_updates", "rl_pretrain_updates"];

    pub fn to_array(&self) -> [u64; 6] {
        [
            self.steps,
            self.episodes,
            self.fi_updates,
            self.kl_updates,
            self.rl_updates,
            self.rl_pretrain_updates,
        ]
    }

    pub fn from_array(a: [u64; 6]) -> Self {
        Counters {
            steps: a[0],
            episodes: a[1],
            fi_updates: a[2],
            kl_updates: a[3],
            rl_updates: a[4],
            rl_pretrain_updates: a[5],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const PAPER: Schedule = Schedule {
        step_start_rl: 1000,
        kl_interval: 5,
        rl_interval: 1,
    };

    #[test]
    fn nothing_before_start_and_pretrain_exactly_once() {
        for t in 1..1000 {
            assert_eq!(PAPER.plan(t), StepPlan::default());
        }
        assert_eq!(
            PAPER.plan(1000),
            StepPlan {
                pretrain: true,
                ..StepPlan::default()
            }
        );
        assert!(PAPER.plan(1001).rl_update && !PAPER.plan(1001).kl_update);
        assert!(PAPER.plan(1005).kl_update);
        assert!((1..20_000).filter(|&t| PAPER.plan(t).pretrain).count() == 1);
    }

    #[test]
    fn eleven_thousand_steps() {
        let (kl, rl) = (1..=11_000).fold((0, 0), |(k, r), t| {
            let p = PAPER.plan(t);
            (k + u64::from(p.kl_update), r + u64::from(p.rl_update))
        });
        assert_eq!((kl, rl), (2000, 10_000));
        assert_eq!(PAPER.expected_counts(11_000), (2000, 10_000));
    }

    proptest! {
        #[test]
        fn counts_match_closed_form(total in 0u64..5000, start in 0u64..1200, kl in 1u64..9, rl in 1u64..4) {
            let s = Schedule { step_start_rl: start, kl_interval: kl, rl_interval: rl };
            let (k, r) = (1..=total).fold((0, 0), |(k, r), t| {
                let p = s.plan(t);
                (k + u64::from(p.kl_update), r + u64::from(p.rl_update))
            });
            prop_assert_eq!((k, r), s.expected_counts(total));
        }
    }
}

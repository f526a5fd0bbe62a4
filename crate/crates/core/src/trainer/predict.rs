//! Open- and closed-loop prediction of held-out episodes by a trained model.

use std::fmt::Write as _;

use super::agent::{Agent, Learner, Streams};
use super::run::{augment, Environment};
use crate::diffcore::GaussianParams;
use crate::error::{usage_err, Result};
use crate::rng::Rng;
use crate::vrm::Vrm;

pub const PREDICTION_HEADER: &str = "step,dim,truth,prediction_mean,prediction_var";

/// An episode as the model sees it: augmented observations and the actions taken.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub xs: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
}

/// Roll the agent's policy without learning, recording what it saw and did.
pub fn collect_trajectories<E: Environment>(
    agent: &Agent,
    env: &mut E,
    episodes: usize,
    rngs: &mut Streams,
) -> Result<Vec<Trajectory>> {
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut tr = Trajectory {
            xs: Vec::new(),
            actions: Vec::new(),
        };
        let mut x = augment(&env.reset(), 0.0);
        let mut state = agent.initial_state();
        loop {
            let a = agent.act(&mut state, &x, false, rngs)?;
            let out = env.step(&a)?;
            tr.xs.push(x);
            tr.actions.push(env.spec().clip_action(&a));
            if out.done {
                break;
            }
            x = augment(&out.obs, out.reward);
        }
        out.push(tr);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub step: usize,
    pub dim: usize,
    pub truth: f64,
    pub mean: f64,
    pub var: f64,
}

pub fn rows_to_csv(rows: &[PredictionRow]) -> String {
    let mut s = format!("{PREDICTION_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.step, r.dim, r.truth, r.mean, r.var);
    }
    s
}

fn rows(first_step: usize, truth: &[Vec<f64>], pred: &[GaussianParams<f64>]) -> Vec<PredictionRow> {
    let mut out = Vec::new();
    for (k, (x, p)) in truth.iter().zip(pred).enumerate() {
        for (d, &v) in x.iter().enumerate() {
            out.push(PredictionRow {
                step: first_step + k,
                dim: d,
                truth: v,
                mean: p.mean()[d],
                var: p.var()[d],
            });
        }
    }
    out
}

/// Predictions for one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodePrediction {
    pub open_loop: Vec<PredictionRow>,
    pub closed_loop: Vec<PredictionRow>,
}

/// Open-loop rows cover every step; closed-loop rows start after `context`
/// steps and run for up to `horizon` steps.
pub fn predict_episode(
    model: &Vrm<f32>,
    tr: &Trajectory,
    context: usize,
    horizon: i64,
    rng: &mut Rng,
) -> Result<EpisodePrediction> {
    let open = model.rollout_open_loop(&tr.xs, &tr.actions, rng)?;
    let open_loop = rows(0, &tr.xs, &open);
    let closed_loop = if context == 0 || context >= tr.xs.len() {
        Vec::new()
    } else {
        let h = horizon.min((tr.xs.len() - context) as i64);
        let pred = model.rollout_closed_loop(&tr.xs[..context], h, &tr.actions, rng)?;
        rows(context, &tr.xs[context..], &pred)
    };
    Ok(EpisodePrediction { open_loop, closed_loop })
}

/// Open-loop error against the spread of the observations themselves.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AccuracyReport {
    /// Mean squared error of the predicted mean over all steps and dims.
    pub mse: f64,
    /// Per-dimension population variance of the observations, averaged over dims.
    pub observation_variance: f64,
}

impl AccuracyReport {
    pub fn ratio(&self) -> f64 {
        self.mse / self.observation_variance
    }
}

pub fn accuracy(rows: &[PredictionRow]) -> Result<AccuracyReport> {
    if rows.is_empty() {
        return usage_err("no prediction rows to score");
    }
    let dims = rows.iter().map(|r| r.dim).max().unwrap_or(0) + 1;
    let mut sum = vec![0.0; dims];
    let mut sq = vec![0.0; dims];
    let mut n = vec![0usize; dims];
    let mut err = 0.0;
    for r in rows {
        sum[r.dim] += r.truth;
        sq[r.dim] += r.truth * r.truth;
        n[r.dim] += 1;
        err += (r.mean - r.truth).powi(2);
    }
    let var = (0..dims)
        .map(|d| {
            let m = sum[d] / n[d] as f64;
            sq[d] / n[d] as f64 - m * m
        })
        .sum::<f64>()
        / dims as f64;
    Ok(AccuracyReport {
        mse: err / rows.len() as f64,
        observation_variance: var,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: usize, dim: usize, truth: f64, mean: f64) -> PredictionRow {
        PredictionRow {
            step,
            dim,
            truth,
            mean,
            var: 1.0,
        }
    }

    #[test]
    fn accuracy_by_hand() {
        // dim 0 truths 1, 3 (variance 1); dim 1 truths 0, 0 (variance 0)
        let rows = [row(0, 0, 1.0, 2.0), row(0, 1, 0.0, 0.0), row(1, 0, 3.0, 3.0), row(1, 1, 0.0, 1.0)];
        let a = accuracy(&rows).unwrap();
        assert_eq!(a.mse, 0.5);
        assert_eq!(a.observation_variance, 0.5);
        assert_eq!(a.ratio(), 1.0);
        assert!(accuracy(&[]).is_err());
    }

    #[test]
    fn csv_layout() {
        let s = rows_to_csv(&[row(3, 1, 0.5, 0.25)]);
        assert_eq!(s, "step,dim,truth,prediction_mean,prediction_var\n3,1,0.5,0.25,1\n");
    }
}

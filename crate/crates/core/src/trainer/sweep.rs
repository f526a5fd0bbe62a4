//! Random search over model learning rate and sequence length.

use std::path::Path;

use log::info;
use rand::seq::IndexedRandom;

use super::config::TrainConfig;
use super::run::{run_training, RunSummary};
use crate::error::{usage_err, Result};
use crate::rng::{streams, substream};

pub const LR_CHOICES: [f64; 4] = [0.0004, 0.0006, 0.0008, 0.001];
pub const SEQ_LEN_CHOICES: [usize; 3] = [16, 32, 64];
/// Sequences per batch times sequence length.
pub const SAMPLES_PER_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub index: usize,
    pub lr_model: f64,
    pub seq_len: usize,
    pub batch_size: usize,
    pub config: TrainConfig,
}

impl Trial {
    pub fn tag(&self) -> String {
        format!("trial{:02}_lr{}_seq{}", self.index, self.lr_model, self.seq_len)
    }
}

/// Draw `trials` configurations; each keeps `batch_size * seq_len = 256`.
pub fn draw_trials(base: &TrainConfig, trials: usize, sweep_seed: u64) -> Result<Vec<Trial>> {
    if trials == 0 {
        return usage_err("a sweep needs at least one trial");
    }
    let mut rng = substream(sweep_seed, streams::SWEEP);
    (0..trials)
        .map(|index| {
            let lr_model = *LR_CHOICES.choose(&mut rng).expect("non-empty");
            let seq_len = *SEQ_LEN_CHOICES.choose(&mut rng).expect("non-empty");
            let batch_size = SAMPLES_PER_BATCH / seq_len;
            let config = TrainConfig {
                lr_model,
                seq_len,
                batch_size,
                seed: base.seed.wrapping_add(index as u64),
                ..base.clone()
            };
            config.validate()?;
            Ok(Trial {
                index,
                lr_model,
                seq_len,
                batch_size,
                config,
            })
        })
        .collect()
}

/// Run every trial in its own tagged subdirectory of `out_dir`.
pub fn run_sensitivity_sweep(
    base: &TrainConfig,
    trials: usize,
    sweep_seed: u64,
    out_dir: &Path,
) -> Result<Vec<(Trial, RunSummary)>> {
    let mut out = Vec::new();
    for trial in draw_trials(base, trials, sweep_seed)? {
        info!("sweep {}", trial.tag());
        let summary = run_training(&trial.config, &out_dir.join(trial.tag()))?;
        out.push((trial, summary));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_size_keeps_sample_count() {
        let trials = draw_trials(&TrainConfig::default(), 40, 1).unwrap();
        for t in &trials {
            assert_eq!(t.batch_size * t.seq_len, 256);
            assert!(LR_CHOICES.contains(&t.lr_model));
            assert_eq!((t.config.seq_len, t.config.batch_size), (t.seq_len, t.batch_size));
        }
        let s16 = trials.iter().find(|t| t.seq_len == 16).unwrap();
        assert_eq!(s16.batch_size, 16);
        let s64 = trials.iter().find(|t| t.seq_len == 64).unwrap();
        assert_eq!(s64.batch_size, 4);
    }

    #[test]
    fn reproducible_under_sweep_seed() {
        let a = draw_trials(&TrainConfig::default(), 8, 5).unwrap();
        let b = draw_trials(&TrainConfig::default(), 8, 5).unwrap();
        let c = draw_trials(&TrainConfig::default(), 8, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(draw_trials(&TrainConfig::default(), 0, 5).is_err());
    }
}

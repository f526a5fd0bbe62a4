//! Training orchestration: the interaction loop and its update cadence,
//! agent construction for every ablation and baseline, evaluation,
//! prediction diagnostics and the hyperparameter sweep.

pub mod agent;
pub mod config;
pub mod predict;
pub mod run;
pub mod schedule;
pub mod sweep;

pub use agent::{Agent, AgentState, Learner, PretrainReport, Streams};
pub use config::{AgentKind, Dims, TrainConfig};
pub use predict::{accuracy, collect_trajectories, predict_episode, AccuracyReport, PredictionRow, Trajectory};
pub use run::{
    evaluate, load_agent, mean_sem, read_metrics, resume_training, run_training, Environment, EvalResult, MetricsRow,
    RunSummary, Trainer, METRICS_HEADER,
};
pub use schedule::{Counters, Schedule, StepPlan};
pub use sweep::{draw_trials, run_sensitivity_sweep, Trial};

//! Trainable agents: per-agent utilities mixed by VDN or QMIX and trained
//! on λ-return targets, and a clipped-surrogate actor-critic whose critic
//! regresses the same returns.

mod actor_critic;
pub mod checkpoint;
mod mixer;
mod run;
mod utility;
mod value_mix;

pub use actor_critic::{AcLearner, AcStats, CriticNet, PolicyNet};
pub use mixer::Mixer;
pub use run::{evaluate, run_episode, train_run, EpisodeOutcome, Learner, MetricRecord, RunOutput};
pub use utility::{masked_argmax, UtilityNet};
pub use value_mix::{AgentMemory, EpsilonSchedule, PaddedBatch, TargetBatch, ValueMixLearner};

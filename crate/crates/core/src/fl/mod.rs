//! Federated fine-tuning of a LoRA-adapted linear classifier.

pub mod client;
pub mod config;
pub mod model;
pub mod run;
pub mod server;
pub mod task;

pub use client::{local_train, ClientState, LocalUpdate, Optimizer, TrainMode};
pub use config::{FLRunConfig, PrivacyConfig, Protocol, ProtocolConfig, ResolvedPrivacy, TrainingConfig};
pub use model::{accuracy, merge, probabilities, sample_loss, Sample};
pub use run::{run_experiment, train_federated, RoundLog, RunOutput};
pub use server::{
    fedlora_aggregate, fedlora_round, fedpower_aggregate, fedpower_round, ffalora_aggregate, ffalora_round,
    RoundContext, ServerOutcome, ServerPrivacy,
};
pub use task::{Dataset, SyntheticTask, TaskConfig};

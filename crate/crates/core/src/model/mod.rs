//! Toy token classifier with token pruning, local training and evaluation.

pub mod data;
pub mod encoder;
pub mod flops;
pub mod gradcheck;
pub mod params;
pub mod tem;
pub mod train;

pub use data::{synth_partition, Dataset, Partition, PartitionSpec, Sample};
pub use encoder::{forward, loss_and_grad, Example, ForwardCache};
pub use flops::{flops_estimate, FlopsBreakdown};
pub use params::{ParamVector, ToyEncoderConfig};
pub use tem::{
    retention_ratio, scorer_registry, select_tokens, token_scores, L2Magnitude, RetentionSchedule, TokenScorer,
};
pub use train::{evaluate, local_train, Evaluation, TrainHyper, TrainOutcome, TrainTrace};

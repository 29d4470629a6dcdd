//! State-value learning: encoding, network, datasets and the greedy policy.

pub mod dataset;
pub mod encoding;
pub mod net;
pub mod policy;

pub use dataset::{build_value_dataset, dedup, generate_labels, LabelKind, LabelRecord, ValueDataConfig, ValueDataset};
pub use encoding::{encode, Encoding, ENCODING_DIM};
pub use net::{NetError, TrainConfig, TrainReport, ValueNet};
pub use policy::{
    discover_instances, explore_rollout, greedy_policy_step, greedy_rollout, run_training_loop, sample_primitive_set, CompletionOracle,
    ConstantValue, PolicyError, RoundMetrics, StateValue, TrainingOutcome,
};

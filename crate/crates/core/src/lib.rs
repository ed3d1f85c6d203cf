//! Structured filter pruning driven by parameter magnitude, relevance, or a
//! weighted combination of both, with a split-learning cost model and an
//! experiment runner.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiments;
pub mod layer;
pub mod network;
pub mod optim;
pub mod pruning;
pub mod relevance;
pub mod splitsim;
pub mod tensor;
pub mod training;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use data::{load_idx, synth_dataset, DataSource, Dataset, LabeledImages, SynthSpec};
pub use error::{Error, Result};
pub use layer::{backprop_layer, softmax_cross_entropy, ConvGeometry, Layer, LayerKind, ParamGrads, Params};
pub use network::{ChannelMap, Network, Trace};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use pruning::{combine, normalize, plan_prune, NormScope, PrunePlan, ScoreTable, Technique};
pub use relevance::{propagate_relevance, seed_output_relevance, RelevanceRecord};
pub use splitsim::{cut_payload, epoch_time, time_to_accuracy, ComputeModel, EpochTimeBreakdown, LinkModel, SplitModels, TimeToAccuracy, Workload};
pub use tensor::{col2im, im2col, matmul, Gradient, Tensor};
pub use training::{evaluate, run_protocol, MetricsLog, Phase, ProtocolOutcome, TrainConfig, TrainState};

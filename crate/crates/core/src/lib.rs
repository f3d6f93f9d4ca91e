//! Reinforcement fine-tuning for query-based recommendation on a synthetic
//! attribute world: shaped rewards, segment-aware advantages, an online
//! curriculum and a clipped group-relative trainer for a log-linear policy.

pub mod advantage;
pub mod curriculum;
pub mod embedding;
pub mod error;
pub mod graph;
pub mod objective;
pub mod policy;
pub mod reward;
pub mod seed;
pub mod synth;
pub mod trainer;

pub use advantage::{GroupAdvantages, PenaltyWeight, SegmentedResponse};
pub use curriculum::{CurriculumState, EpochDataset};
pub use embedding::{EmbeddingTable, MfConfig, Provenance};
pub use error::{Error, Result};
pub use graph::{Attribute, Catalog, InteractionGraph, ItemId, RelationVocab};
pub use policy::{Decoding, LogLinearPolicy, PolicySpec, QueryContext, Response};
pub use reward::{CandidateSet, RewardWeights, ShapedReward};
pub use synth::{Category, CategoryMix, QueryInstance, SynthConfig, World};
pub use trainer::{Environment, EvalReport, TrainerConfig, TrainerState, TrainingOutcome};

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` rejects NaN on purpose.

//! Sparse autoencoders whose sparsifying activation is a token–feature match
//! allocation: Token Choice (TopK), Feature Choice with Zipf-shaped budgets,
//! and Mutual Choice.

pub mod checkpoint;
pub mod compare;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod optimizer;
pub mod sparsifiers;
pub mod tracking;
pub mod train;
pub mod zipf;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use compare::{compare_runs, CompareRow};
pub use config::{PolicyChoice, Recipe, RunConfig};
pub use error::{ErrorKind, Result, SaeError};
pub use eval::EvalReport;
pub use losses::{AuxSets, LossReport, LossWeights};
pub use model::{ForwardTrace, Gradients, SaeParams, ThresholdTable};
pub use sparsifiers::{
    AffinityMatrix, AllocationPolicy, Criterion, PolicyKind, SparsityMask, TieBreak,
};
pub use tracking::{FeatureDensityStats, FeatureHealth};
pub use train::{run_train, train, StepRecord, TrainInputs, TrainOutcome, TrainReport};
pub use zipf::{FeatureBudgets, ZipfFit, ZipfParams};

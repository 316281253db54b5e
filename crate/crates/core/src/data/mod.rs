//! Activation data: synthetic generation with ground truth, the `SAEACT01`
//! file format, and buffered shuffling.

mod format;
mod shuffle;
mod synthetic;

pub use format::{
    read_activations, write_activations, ActivationStore, Dtype, FORMAT_VERSION, MAGIC,
};
pub use shuffle::{shuffle_stream, BatchCycler, ShuffleStream};
pub use synthetic::{generate_synthetic, ActiveCount, GroundTruth, SyntheticSpec};

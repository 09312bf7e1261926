//! Datasets, synthetic generators, image dequantization and checkpoints.

mod checkpoint;
mod dataset;
mod images;
mod synth;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC};
pub use dataset::{
    load_dataset, parse_dataset, save_dataset, ColumnKind, ColumnSpec, Covariate, CovariateValues, Dataset,
    Provenance, Schema,
};
pub use images::{
    bit_depth_for, dequantize, dequantize_dataset, load_integer_images, pgm_bytes, square_side, to_byte, write_pgm,
};
pub use synth::{synth_conditional_mixture, ContinuousCovariateSpec, MixtureSpec};

//! Data generation, training, and evaluation harness for the pose model.

pub mod augment;
pub mod cli;
pub mod coco;
pub mod dataset;
pub mod synth;
pub mod train;

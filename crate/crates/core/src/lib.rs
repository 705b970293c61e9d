pub mod config;
pub mod dataset;
pub mod features;
pub mod fusion;
pub mod geo;
pub mod gsc;
pub mod metrics;
pub mod pipeline;
pub mod signal;
pub mod stats;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod zeroshot;

//! Data synthesis, image I/O, metrics, training and the check suites.

pub mod data;
pub mod haze;
pub mod image;
pub mod metrics;
pub mod suites;
pub mod train;

pub use haze::{apply_haze, synth_pairs, HazeParams, HazeRanges, Pair, Transmission};
pub use metrics::{psnr, ssim, PSNR_CAP};
pub use train::{evaluate, train, EvalReport, TrainSpec};

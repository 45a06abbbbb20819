//! Unsupervised anomaly detection in 3D volumes via disentangled
//! anatomy/appearance representations and edge-guided pseudo-healthy
//! restoration.
//!
//! The crate is organized as:
//! - [`vol`]: dense volume containers, filters and bit-exact I/O
//! - [`autodiff`]: minimal reverse-mode tensor engine
//! - [`nets`]: the five small 3D networks and their forward passes
//! - [`edges`]: binary edge extraction from class maps
//! - [`losses`]: training objectives and their weighted total
//! - [`trainer`]: joint training loop, Adam, checkpoints, grid search
//! - [`anomaly`]: pseudo-healthy reconstruction, hybrid scoring, post-processing
//! - [`metrics`]: pooled average precision, Dice, region error reports
//! - [`phantom`]: synthetic paired-modality volumes with lesion ground truth
//! - [`prep`]: histogram standardization and intensity clipping
//! - [`manifest`]: on-disk dataset index

pub mod anomaly;
pub mod autodiff;
pub mod edges;
pub mod losses;
pub mod metrics;
pub mod manifest;
pub mod nets;
pub mod phantom;
pub mod prep;
pub mod trainer;
pub mod ssim;
pub mod vol;

//! Event recognition in long laparoscopy videos.
//!
//! The crate covers the whole training and inference path for four binary
//! event detectors (abdominal access, bleeding, coagulation/transection and
//! needle passing): annotation ingestion, clip tiling and frame sampling,
//! offline augmentation, a hybrid backbone/temporal-head classifier,
//! training, metrics and sliding-window timelines.

pub mod augment;
pub mod clip;
pub mod dataset;
pub mod evaluation;
pub mod network;
pub mod seed;
pub mod synthetic;
pub mod timeline;
pub mod training;

//! Diverse and discriminative representation learning for low-resource,
//! cross-subject sensor activity recognition.
//!
//! The crate trains a small CNN from scratch on windowed multi-channel
//! sensor data under a composite objective: activity classification,
//! an augmentation-type self-supervision task, a divergence term keeping
//! original and augmented feature distributions apart, and a supervised
//! contrastive term, all evaluated under leave-one-group-out protocols
//! with low-resource subsampling.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod optim;
pub mod report;
pub mod rng;
pub mod selfcheck;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;

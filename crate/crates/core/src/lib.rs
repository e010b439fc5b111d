//! Class-incremental segmentation with a small query-based mask transformer.
//!
//! Queries are initialised by copying the feature points that score highest
//! against learned class prototypes ([`qpa`]); a KL term keeps the feature
//! points chosen by the previous stage consistent ([`csl`]); and stored query
//! vectors are replayed through the decoder FFN to rehearse old classes
//! without images ([`vq_bank`]).

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod csl;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod panoptic;
pub mod par;
pub mod qpa;
pub mod storage;
pub mod tensor;
pub mod vq_bank;

pub use error::{Error, Result};

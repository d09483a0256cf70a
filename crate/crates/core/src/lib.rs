//! Hub-and-spoke contrastive embedding engine.
//!
//! Per-modality MLP encoders are trained into one joint space using only
//! (hub, spoke) pairs and a symmetric InfoNCE objective. Spokes that never
//! saw each other during training end up aligned through the hub, which the
//! [`evaluation`] module measures: zero-shot prototype classification,
//! cross-modal retrieval, few-shot probes and embedding arithmetic.
//!
//! The crate is `no_std` and only needs `alloc`. File formats and the
//! command line live in the companion `bind` crate.

#![no_std]

extern crate alloc;

pub mod contrastive;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod numerics;
pub mod optim;
pub mod report;
pub mod rng;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
pub use numerics::Matrix;
pub use rng::Stream;
pub use report::MetricsReport;

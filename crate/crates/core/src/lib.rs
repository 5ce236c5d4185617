//! Triple-sequence cross-domain sequential recommendation.
//!
//! Jointly models a user's source, target, and chronologically mixed
//! behavior sequences: three sequence encoders, cross-domain attention
//! over their hidden states, contrastive objectives tying the three
//! representations together, and leave-one-out ranking evaluation.
//! Everything runs on an in-crate f64 tensor engine with reverse-mode
//! autodiff, so analytic gradients are verifiable against central finite
//! differences end to end.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod forward;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tca;
pub mod tcl;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tape::{Activation, Gradients, Tape, Var};
pub use tensor::Tensor;

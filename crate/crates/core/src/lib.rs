//! Dual-branch masked autoencoder pre-training for paired RGB and event
//! camera data, with fusion reconstruction and contrastive alignment.

pub mod data;
pub mod decoders;
pub mod encoders;
pub mod error;
pub mod graph;
pub mod harness;
pub mod masking;
pub mod mcl;
pub mod mfrm;
pub mod model;
pub mod nn;

pub use error::{Error, Result};

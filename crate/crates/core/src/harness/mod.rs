//! Training, checkpointing, evaluation, and verification around the model.

pub mod attention;
pub mod checkpoint;
pub mod optim;
pub mod probe;
pub mod train;
pub mod verify;

pub mod autograd;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod nets;
pub mod objective;
pub mod optim;
pub mod physics;
pub mod solver;
pub mod transfer;

pub use error::{Error, Result};

pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod enhancement;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod noise_model;
pub mod optim;
pub mod signal;
pub mod speech_prior;
pub mod train;

pub use error::{Error, Result};

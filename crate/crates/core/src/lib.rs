pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod logic;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod reasoner;
pub mod rules;
pub mod train;
pub mod vae;

pub use error::{Error, Result};

pub mod agents;
pub mod arch;
pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod distributed;
pub mod envs;
pub mod error;
pub mod nn;
pub mod ofenet;
pub mod replay;

pub use error::{Error, Result};

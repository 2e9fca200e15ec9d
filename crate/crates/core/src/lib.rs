pub mod custom;
pub mod diagnostics;
pub mod error;
pub mod netutil;
pub mod oracle;
pub mod policies;
pub mod problem;
pub mod relaxation;
pub mod simulator;
pub mod solver;

pub use error::{Error, Result};

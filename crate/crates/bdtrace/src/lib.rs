//! Birth-death processes as time-changed Feller Brownian motions.

pub mod approx;
pub mod bd_core;
pub mod cli;
pub mod config;
pub mod error;
pub mod pathsim;
pub mod quad;
pub mod resolvent;
pub mod rng;
pub mod timechange;
pub mod verify;

pub use error::{Error, Result};

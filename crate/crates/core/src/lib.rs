//! Multi-level adaptive feature selection for anchor-free detection.

pub mod afsm;
pub mod boxloss;
pub mod datakit;
pub mod error;
pub mod fsio;
pub mod gradcheck;
pub mod infereval;
pub mod numkit;
pub mod seed;
pub mod sweep;
pub mod traincore;

pub use error::{Error, Result};

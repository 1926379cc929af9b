pub mod battery;
pub mod config;
pub mod dagger;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod expert;
pub mod par;
pub mod policy;

pub use error::{Error, Result};

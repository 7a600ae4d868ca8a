//! Laboratory for comparing implicit and explicit in-context learners.

pub mod error;
pub mod eval;
pub mod models;
pub mod numeric;
pub mod tasks;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};

//! Four-choice question answering over long multi-camera recordings.

pub mod cells;
pub mod engine;
pub mod error;
pub mod gateway;
pub mod kg;
pub mod lane;
pub mod query;
pub mod retrieval;
pub mod sva;
pub mod text;
pub mod tmkg;

pub use error::{Error, GatewayError, Result};

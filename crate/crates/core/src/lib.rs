pub mod analytics;
pub mod error;
pub mod event;
pub mod geo;
pub mod ingest;
pub mod par;
pub mod pipeline;
pub mod store;
pub mod synth;
pub mod tac;
pub mod viz;

pub use error::{Error, ErrorClass, Result};

pub mod error;
pub mod data;
pub mod decode;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod pipeline;

pub use error::{Error, Result};

pub mod adapters;
pub mod backbone;
pub mod data;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod pipeline;
pub mod routing;
pub mod store;

pub use error::{Error, Result};

pub mod checkpoint;
pub mod clips;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod numeric;
pub mod query;
pub mod synth;
pub mod tan;
pub mod temporal_map;
pub mod train;

pub use error::{Result, TanError};

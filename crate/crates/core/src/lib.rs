pub mod aggregate;
pub mod attack;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod explain;
pub mod heatmap;
pub mod model;
pub mod segment;
pub mod tensor;

pub use error::{Error, Result};

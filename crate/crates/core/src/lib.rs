pub mod data;
pub mod error;
pub mod federation;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod seeds;
pub mod snapshot;
pub mod tape;
pub mod tensor;
pub mod weighting;

pub use error::{Error, Result};
pub use tape::{NodeId, Tape};
pub use tensor::DenseArray;

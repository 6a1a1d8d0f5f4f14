pub mod checkpoint;
pub mod corpus;
pub mod decoder;
pub mod error;
pub mod io;
pub mod layers;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod trainer;
pub mod vocab;

pub use error::{FaeError, Result};
pub use linalg::{Matrix, SeededRng, Vector};

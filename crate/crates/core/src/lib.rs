//! Query-adaptive deep weighted hashing.
//!
//! A feature network feeds two heads: a sigmoid hash layer whose outputs are
//! thresholded into binary codes, and a softmax classifier. A non-negative
//! class-by-bit weight matrix is trained with a weighted triplet loss; at
//! query time the predicted class probabilities mix its rows into per-bit
//! weights for a weighted Hamming ranking.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod index;
pub mod loss;
pub mod model;
pub mod trainer;

pub use dataset::{Dataset, MultiHot};
pub use error::{Error, Result};
pub use model::ModelParams;

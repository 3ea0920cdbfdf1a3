//! Siamese spatial/temporal attention over convolutional GRUs for matching
//! variable-length image sequences.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gmm;
pub mod gradcheck;
pub mod network;
pub mod params;
pub mod pooling;
pub mod recurrent;
pub mod siamese;
pub mod training;

pub use error::{Error, Result};
pub use seqattn_tensor as tensor;

//! Co-occurrent matching for weakly supervised class activation maps.
//!
//! A small encoder/classifier trained on image pairs that share a class.
//! Two matching stages sit between the encoder and the pooled classifier
//! head: a spectral fg/bg split across the pair that boosts co-occurring
//! regions, and a top-k propagation step inside each feature map.

pub mod data;
pub mod error;
pub mod feature;
pub mod harness;
pub mod inter_match;
pub mod intra_match;
pub mod netpbm;
pub mod network;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use feature::FeatureMap;
pub use rng::RngStream;
pub use tensor::{MatchIndex, Tensor};

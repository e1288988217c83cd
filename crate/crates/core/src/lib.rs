//! Crowdsourced vector-map fusion.
//!
//! Several noisy per-trip vector maps of one scene go in; a trip-aware
//! transformer predicts a single fused vector map. Training uses
//! hierarchical (instance, then point) bipartite matching and a four-term
//! loss; evaluation uses Chamfer-distance average precision.

pub mod error;
pub mod geometry;
pub mod io;
pub mod loss;
pub mod matcher;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

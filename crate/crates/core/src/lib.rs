//! Multi-agent skill discovery from offline trajectories.
//!
//! Skills are learned by vector-quantized auto-encoders over fixed-horizon
//! trajectory segments, either with per-subgroup-size ("3D") codebooks or
//! with a two-level bottom/top codebook and an attention aggregator. A
//! learned grouping function partitions agents into subgroups and is trained
//! with PPO against the negative reconstruction loss. The frozen skills then
//! serve as the action space of a hierarchical MAPPO learner.

pub mod cli;
pub mod dataset;
pub mod env;
pub mod error;
pub mod grouper;
pub mod mappo;
pub mod nn;
pub mod rng;
pub mod runtime;
pub mod vq;

pub use error::{Error, Result};

//! Vector-quantized skill discovery: 3D codebooks, hierarchical codebooks
//! with an attention aggregator, and the co-training loop with the grouper.

mod aggregator;
mod codebook;
mod model;
mod train;

pub use aggregator::Aggregator;
pub use codebook::{nearest, quantize, table_name_3d, Codebook3D, HierCodebooks, QuantizationResult, Quantized, UsageTracker, BTM_NAME, TOP_NAME};
pub use model::{parse_sizes, Codebooks, DiscoveryConfig, LossGraph, LossReport, Method, SkillModel, SubgroupCodes, Terms};
pub use train::{train_3d, train_hier, Discovery, EpochStats, EvalSummary, TrainReport};

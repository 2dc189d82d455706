//! Differentiable cell search: the dense cell topology, architecture logits,
//! the weight-sharing supernet, first-order bilevel optimization and the
//! discretization of logits into a genotype.

mod arch;
mod genotype;
mod ops;
mod search;
mod supernet;

pub use arch::{
    cell_plan, num_edges, reduction_positions, ArchParams, CellPlan, CellTopology, STEM_MULTIPLIER,
};
pub use genotype::{
    derive_genotype, read_genotype, write_genotype, Genotype, GenotypeFile, NodeInputs, Provenance,
};
pub use ops::CandidateOp;
pub use search::{bilevel_epoch, count_correct, Batch, BilevelOptimizers, EpochStats};
pub use supernet::{
    build_supernet, MixedOp, Preprocess, SearchCell, Supernet, SupernetConfig, SupernetLayers,
};

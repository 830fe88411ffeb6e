//! DSM modularization toolkit.
//!
//! The crate is split along the stages of an experiment:
//!
//! - [`model`]: DSM cases, partitions, case-file I/O and synthetic instances.
//! - [`metrics`]: TotalCost, clustering efficiency, Gap% and run aggregation.
//! - [`reference`]: simulated annealing reference and an exhaustive oracle.
//! - [`prompting`]: prompt rendering for the LLM optimization loop.
//! - [`gateway`]: chat-completion backends (HTTP and deterministic mocks).
//! - [`optimizer`]: the iterative propose/validate/evaluate/update loop.
//! - [`harness`]: experiment grids, ablations, CSV and SVG reports.

pub mod gateway;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod optimizer;
pub mod prompting;
pub mod reference;
pub mod seeds;

pub use metrics::{
    aggregate, clustering_efficiency, gap_percent, total_cost, Aggregate, CostParams,
};
pub use model::{
    canonicalize, generate_random_case, load_case, random_partition, singleton_partition,
    DsmCase, DsmEdge, DsmNode, DsmType, NodeId, Partition, SolutionRecord,
};

//! Periodic multigraph networks for crystal property prediction.
//!
//! The crate is organized around the pipeline:
//!
//! - [`lattice`] — exact periodic geometry (fractional/Cartesian
//!   conversions, minimum-image displacements, cell transforms).
//! - [`graph`] — the four expert graph topologies built under periodic
//!   boundary conditions.
//! - [`autodiff`] — a small reverse-mode tape shared by every numeric path.
//! - [`model`] — expert forward passes, learned fusion, readout and
//!   checkpointing.
//! - [`train`] — deterministic desk-scale trainer, evaluation and
//!   fusion-weight reporting.
//! - [`data`] — JSON-lines structure ingestion and synthetic dataset
//!   generation with closed-form targets.
//! - [`invariance`] — independent oracles and scenario constructions for
//!   the invariance and connectivity claims.

pub mod autodiff;
pub mod data;
pub mod graph;
pub mod invariance;
pub mod lattice;
pub mod model;
pub mod train;

pub use graph::{
    build_atomistic_graph, build_cell_graph, build_multiscale_graph, build_similarity_graph,
    shift_bounds, GraphError, GraphKind, PeriodicEdge, PeriodicGraph, ShiftBounds,
};
pub use lattice::{
    apply_cell_transform, build_supercell, cart_to_frac, frac_to_cart, min_image_displacement,
    random_unimodular, wrap_to_cell, AtomSite, CrystalStructure, LatticeError, LatticeMatrix,
    ShiftVector, UnimodularTransform,
};
pub use model::{
    AugmentationPolicy, ExpertFlags, ForwardOutput, LayerState, ModelConfig, ModelError,
    PrismModel, PrismParams, StaticGraphs,
};

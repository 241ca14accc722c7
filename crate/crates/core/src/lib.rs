//! Detection, localization and repair of artifacts in atomic force
//! microscopy height maps.
//!
//! The crate is organized as a pipeline of pure stages operating on
//! [`HeightMap`] and [`BitMask`]: classification, mask generation,
//! mask-aware flattening, inpainting and evaluation.

pub mod classify;
pub mod flatten;
pub mod grid;
pub(crate) mod linalg;
pub mod maskgen;
pub mod metrics;
pub mod restore;
pub mod spm_io;
pub(crate) mod stats;
pub mod synth;

pub use grid::{
    connected_components, gradient_magnitude, neighborhood_stats, BBox, BitMask, ComponentStats,
    Connectivity, GridError, HeightMap, MaskStage, Orientation, ScalarField, WindowStats,
};

//! Tagged-cine myocardial strain estimation on synthetic phantoms.
//!
//! The library covers the full desk-scale pipeline: an analytic tagged-MR
//! phantom generator, landmark-grid geometry and Green strain, image
//! preprocessing, a reverse-mode tensor engine with the layers two small
//! networks need, an annulus localizer and landmark tracker with training
//! loops, a block-matching registration baseline, and agreement statistics.

pub mod baseline;
pub mod error;
pub mod geometry;
pub mod image;
pub mod io;
pub mod models;
pub mod nn;
pub mod phantom;
pub mod preprocess;
pub mod rng;
pub mod stats;
pub mod strain;

pub use error::{Error, Result};
pub use geometry::{
    build_grid, map_coords, map_grid, AnnulusSpec, BoundingBox, LandmarkGrid, LandmarkSequence,
    MapDirection, Orientation, Point2, LANDMARK_COUNT, RING_COUNT, SPOKE_COUNT,
};
pub use strain::{
    circ_strain, green_strain, radial_strain, slice_strain, strain_curve, strain_error,
    SliceStrain, StrainCurve,
};

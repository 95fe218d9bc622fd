//! Multi-modal deformable image registration toolkit built around a
//! differentiable correlation-ratio similarity measure.
//!
//! The crate is organized around six pieces:
//!
//! - [`grid`]: volumetric containers, MetaImage I/O, synthetic phantoms
//! - [`parzen`]: Gaussian soft-binning shared by the similarity measures
//! - [`similarity`]: correlation ratio and mutual information with
//!   analytic per-voxel gradients
//! - [`transform`]: warping, gradient chaining, affine fields and the
//!   diffusion regularizer
//! - [`metrics`]: Dice overlap and Jacobian-based deformation quality
//! - [`driver`]: the coarse-to-fine registration optimizer plus the
//!   landscape and lambda sweep studies
//!
//! Displacements are everywhere expressed in voxel units; all arithmetic
//! is f64 and sequential, so identical inputs give bitwise-identical
//! outputs.

pub mod driver;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod parzen;
pub mod similarity;
pub mod transform;

pub use error::{Error, Result};
pub use grid::{Dims, DisplacementField, LabelVolume, Volume};

//! Intrinsic decomposition of colored point clouds.
//!
//! Splits the observed per-point color `I` of a point cloud into albedo `A`
//! and shade `S` with `I = A ⊙ S`. The crate carries every algorithmic piece
//! and no I/O:
//!
//! * [`cloud`]: point cloud and ground-truth triplet types, normalization.
//! * [`scene`]: procedural outdoor scenes, sun presets, BVH shadow rays and
//!   area-weighted triplet sampling.
//! * [`projection`]: orthographic point splatting over a hemisphere of views
//!   and the per-direction luminance map built from it.
//! * [`autodiff`]: a reverse-mode tape, Adam and finite-difference checks.
//! * [`model`]: the two-stage decomposition network and its base variant,
//!   loss suite and training loop.
//! * [`baselines`]: identity baselines and a graph Retinex.
//! * [`eval`]: metrics, pair-annotation f1 and colored ICP registration.
//! * [`apps`]: relighting and albedo editing.
//!
//! File formats, configuration and the command line live in the `ipcd` crate.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod apps;
pub mod autodiff;
pub mod baselines;
pub mod cloud;
pub mod error;
pub mod eval;
pub mod knn;
pub mod math;
pub mod model;
pub mod projection;
pub mod scene;

pub use cloud::{IntrinsicTriplet, NormalizationTransform, PointCloud};
pub use error::{Error, Result};
pub use math::{Rgb, Vec3};

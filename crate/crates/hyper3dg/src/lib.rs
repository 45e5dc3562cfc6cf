//! Desk-scale text-to-3D refinement pipeline: 3D Gaussian clouds optimized by
//! DDIM-inversion diffusion guidance and periodically smoothed by a patch-level
//! hypergraph convolution.
//!
//! The crate is organized along the data flow:
//!
//! * [`gs`] — Gaussian cloud representation, synthetic initialization, attribute matrix.
//! * [`ply`] — binary PLY persistence for clouds.
//! * [`camera`] — pose types and randomized view sampling.
//! * [`render`] — CPU EWA splatting renderer with analytic gradients for
//!   color / opacity / position.
//! * [`patchify`] — seeded K-Means over positions and per-patch attribute means.
//! * [`featurize`] — patch image descriptors (built-in and external-process extractors).
//! * [`hypergraph`] — KNN hypergraph construction and the normalized hypergraph
//!   convolution (plus a plain-GCN ablation path).
//! * [`guidance`] — DDIM schedule/inversion and the interval-score gradient.
//! * [`pipeline`] — the optimization loop tying everything together.

pub mod camera;
pub mod error;
pub mod featurize;
pub mod gs;
pub mod guidance;
pub mod hypergraph;
pub mod patchify;
pub mod pipeline;
pub mod ply;
pub mod render;

pub use error::{Error, Result};

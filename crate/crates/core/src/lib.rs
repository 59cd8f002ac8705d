//! Divergence-free velocity fields built from matrix-valued Wendland kernels,
//! Lagrangian advection of 3D Gaussian primitives, orthographic splatting and
//! a sliding-window inverse solver that recovers a time-varying incompressible
//! flow from rendered multi-frame observations.
//!
//! The crate is organized bottom-up:
//!
//! * [`rbf_kernel`]: the scalar Wendland C4 profile and the matrix kernel built from it.
//! * [`dfk_field`]: weighted kernel sums, neighbor grid, finite-difference operators.
//! * [`gaussians`]: the smoke representation.
//! * [`render2d`]: orthographic splatting with front-to-back blending, SSIM and image losses.
//! * [`advection`]: explicit Runge-Kutta transport of primitive centers.
//! * [`adjoint`]: reverse-mode gradients through rollout, splatting and losses.
//! * [`sliding_window`]: warm-up, sliding phase, optimizer and checkpoints.
//! * [`metrics`]: divergence, masked velocity errors, PSNR and re-simulation scoring.
//! * [`scenes`]: synthetic ground-truth generation.

pub mod adjoint;
pub mod advection;
pub mod dfk_field;
pub mod error;
pub mod gaussians;
pub mod geometry;
pub mod io;
pub mod metrics;
mod physics;
pub mod rbf_kernel;
pub mod render2d;
pub mod scenes;
pub mod sliding_window;

pub use adjoint::{GradientReport, Group, ParameterSet, WindowSpec};
pub use advection::{AdvectionConfig, Scheme, Trajectory};
pub use dfk_field::{AnalyticField, AnalyticKind, DfkField, NodeLayout, TimeVaryingField, VelocityField};
pub use error::{Error, Result};
pub use gaussians::{GaussianCloud, GaussianPrimitive, InflowRegion};
pub use geometry::{Aabb, Mat3, Vec3};
pub use rbf_kernel::{KernelNode, RadialDerivatives};
pub use metrics::{EvalGrid, VelocityErrors};
pub use render2d::{Image, ObservationSet, OrthoCamera, ViewAxis};
pub use scenes::{GtField, SceneBundle};
pub use sliding_window::{LossWeights, Reconstruction, ReconstructionProblem, RunConfig};



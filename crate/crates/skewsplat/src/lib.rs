//! Differentiable splatting with skew-normal primitives.
//!
//! The crate is organized along the pipeline:
//!
//! - [`snkernel`]: primitive parameterization, skew-normal density, sampling
//! - [`camera`]: camera model, local affine projection, 2D footprints, tiling
//! - [`rasterizer`]: tile-scheduled signed-opacity alpha blending
//! - [`gradients`]: analytic backward pass down to raw parameters
//! - [`optimizer`]: BCD schedule, Adam, SGHMC, parameter routing
//! - [`harness`]: 1D square-wave study, synthetic scene fitting, metrics
//! - [`io`]: scene/camera/checkpoint files, PNG and float dumps
//! - [`verify`]: self-contained numerical verification suites

pub mod camera;
pub mod error;
pub mod gradients;
pub mod harness;
pub mod io;
pub mod optimizer;
pub mod rasterizer;
pub mod snkernel;
pub mod verify;

pub use error::SplatError;

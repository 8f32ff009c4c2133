//! Volumetric light transport through media with a spatially varying index of
//! refraction, and the inverse problem of recovering that index field from
//! posed images.
//!
//! Rays curve toward the gradient of the index of refraction (IoR). Inside a
//! designated axis-aligned box the ray state follows the Hamiltonian system
//! dp/ds = v/n, dv/ds = ∇n; outside the box transport is classic straight-ray
//! emission-absorption. The solver exposes three gradient paths (constant-memory
//! adjoint, recorded reverse mode, finite differences) so the IoR grid can be
//! optimized against multi-view images with checked gradients.

pub mod fields;
pub mod imageio;
pub mod odesolve;
pub mod recon;
pub mod scene;
pub mod transport;
pub mod validate;

pub mod cli;

/// 3-vectors are `f64` throughout; grids store `f32` but all arithmetic and
/// gradient accumulation is 64-bit.
pub type Vec3 = nalgebra::Vector3<f64>;

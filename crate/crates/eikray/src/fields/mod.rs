//! Differentiable volumetric fields: voxel grids with trilinear interpolation
//! and sparse parameter VJPs, softplus-mapped IoR fields, emission/absorption
//! backends, Gaussian band-limiting, and a forward-only MLP field.

pub mod ea;
pub mod grid;
pub mod ior;
pub mod mlp;
pub mod smooth;

pub use ea::{BackdropPlane, BackdropSet, ConstantEa, EaSource, GridEa, LearnableEa, MaskedEa, Texture};
pub use grid::{GradEntries, GradSink, GridField};
pub use ior::{softplus, softplus_inv, ConstantIor, GaussianBlob, IorField, LuneburgLens, Refractive};
pub use mlp::{mlp_field_eval, mlp_field_gradient, MlpParams};
pub use smooth::{bake_masked_grid, gaussian_smooth, progression_kernels, BakedLevel, SmoothingKernel};

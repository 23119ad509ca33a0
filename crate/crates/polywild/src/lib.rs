//! Numerical convex integration for the gradient flow ∂ₜu = div DF(Du) with polyconvex F on
//! 2x2 matrices: five-branch configurations, nested laminates in space-time, cube-tree
//! subsolutions and the staged refinement that drives them towards wild weak solutions.

pub mod antidiv;
pub mod chain;
pub mod config;
pub mod driver;
pub mod energy;
pub mod fields;
pub mod mat;
pub mod oscillate;
pub mod quadrature;
pub mod refine;
pub mod scalar;

/// Double-precision 2x2 matrix.
pub type Mat = mat::Mat2<f64>;
/// Double-precision state point (A, B).
pub type State = mat::StatePoint<f64>;
/// Double-precision polyconvex energy.
pub type Energy = energy::PolyconvexEnergy<f64>;

pub use chain::chain_coefficients;
pub use config::{barycentric_expand, ConfigBundle, Expansion, Membership, T5Fiber};

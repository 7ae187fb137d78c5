//! Kernel Stein discrepancies for distributions on the circle, the torus and SO(3).

pub mod criticism;
pub mod efficiency;
pub mod error;
pub mod gof;
pub mod kernel;
pub mod manifold;
pub mod model;
pub mod optimize;
pub mod sampling;
pub mod stein;

pub use error::{MksdError, Result};
pub use kernel::{ManifoldKernel, MultiIndexDeriv};
pub use manifold::{ChartPoint, Manifold, RotationMatrix};
pub use model::{BivariateVonMises, Density};
pub use stein::{SteinKernel, SteinOrder};

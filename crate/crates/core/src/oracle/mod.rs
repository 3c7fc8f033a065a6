//! Geometric multigrid on Poisson problems and its correspondence with linear-mode blocks.

mod correspondence;
mod poisson;

pub use correspondence::*;
pub use poisson::*;

//! Multi-traversal Gaussian splatting: scene graph, differentiable
//! rasterizer, losses, optimization, initialization, and data I/O.

pub mod appearance;
pub mod camera;
pub mod error;
pub mod gaussian;
pub mod init;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod raster;
pub mod real;
pub mod scene;
pub mod sh;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;

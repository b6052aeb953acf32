//! Query-based generalizable Gaussian feature splatting.
//!
//! A multiview RGBD encoder produces a single scene latent; surface points
//! unprojected from the input depth maps query that latent for per-point
//! Gaussian parameters, and the resulting cloud is splatted into color and
//! semantic-feature images at a novel viewpoint.

pub mod encoder;
pub mod geom;
pub mod gradcheck;
pub mod hse;
pub mod losses;
pub mod model;
pub mod nnkit;
pub mod par;
pub mod qgfs;
pub mod raster;
pub mod scenes;
pub mod trainer;

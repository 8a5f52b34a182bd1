//! Differentiable SDF volume rendering over camera-frustum grids.
//!
//! The crate is layered bottom-up: [`grid`] and [`autodiff`] provide dense
//! tensors and a reverse-mode tape; [`geometry`] and [`fields`] describe
//! cameras, lattices and signed-distance scenes; [`lifting`] and [`render`]
//! build and composite frustum fields; [`losses`] and [`fit`] optimize them.

pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod fields;
pub mod fit;
pub mod geometry;
pub mod gradcheck;
pub mod grid;
pub mod io;
pub mod lifting;
pub mod losses;
pub mod optim;
pub mod params;
pub mod render;
pub mod scene;

pub use error::{Error, Result};
pub use grid::{Grid, Real};

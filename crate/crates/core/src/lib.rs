//! Neural parametric leaf model.
//!
//! Leaves are represented by a flat base shape, decoded from a shape latent
//! code through a 2D signed distance field, and a 3D deformation, decoded from a
//! deformation latent code as rigid transforms of control points that are
//! blended onto the base mesh with learned skinning weights.

pub mod engine;
pub mod io;
pub mod deform;
pub mod error;
pub mod fitting;
pub mod losses;
pub mod mesh;
pub mod registration;
pub mod sdf;
pub mod shape;
pub mod spatial;
pub mod training;

pub use error::{Error, Result};

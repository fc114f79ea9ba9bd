//! Binary masks, 2D signed distance fields and 3D distance volumes.

mod field;
mod mask;
mod volume;

pub use field::{
    jump_flood_sdf, sample_training_points, sdf_to_soft_mask, threshold_soft_mask, truncate_sdf, SdfGrid2D, SdfSample,
};
pub use mask::Mask2D;
pub use volume::{backproject_to_grid, GridFrame, SdfGrid3D};

//! 3D scalar volumes with physical metadata, preprocessing and patch
//! extraction.
//!
//! Array layout convention: `Array3` indexed `[z, y, x]` so that `x` is the
//! fastest-varying (contiguous) axis, matching the on-disk order of the
//! supported file formats. Metadata vectors (`spacing_mm`, `origin_mm`,
//! `dims`) are always given in `(x, y, z)` order.

mod grid;
mod preprocess;
mod transform;
pub mod io;

pub use grid::{PatchCube, VolumeGrid};
pub use preprocess::{
    clip_normalize, extract_patch, preprocess, resample_isotropic, HU_CLIP_MAX, HU_CLIP_MIN,
};
pub use transform::{flip_axis, rot90_z, zoom_patch, Axis3, GridTransform};

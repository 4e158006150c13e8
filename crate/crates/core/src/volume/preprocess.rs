//! Volume standardization: isotropic resampling, HU clipping/normalization,
//! and patch extraction.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::volume::{PatchCube, VolumeGrid};

/// Lower HU clip bound.
pub const HU_CLIP_MIN: f64 = -1000.0;
/// Upper HU clip bound.
pub const HU_CLIP_MAX: f64 = 600.0;

fn round_half_up(v: f64) -> usize {
    (v + 0.5).floor().max(1.0) as usize
}

/// Resamples a volume to 1 mm isotropic spacing with trilinear interpolation.
///
/// Output dimension on each axis is `round(dim * spacing)` (half-up). The
/// origin is preserved. A volume already at unit spacing is returned as a
/// bit-exact copy.
pub fn resample_isotropic<F: Scalar>(v: &VolumeGrid<F>) -> Result<VolumeGrid<F>> {
    // VolumeGrid validates spacing at construction; re-check here so raw
    // callers get the documented error rather than garbage geometry.
    if v.spacing_mm().iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidMetadata(format!(
            "non-positive spacing {:?}",
            v.spacing_mm()
        )));
    }
    if v.is_isotropic_unit() {
        return Ok(v.clone());
    }

    let in_dims = v.dims();
    let sp = v.spacing_mm();
    let out_dims = [
        round_half_up(in_dims[0] as f64 * sp[0]),
        round_half_up(in_dims[1] as f64 * sp[1]),
        round_half_up(in_dims[2] as f64 * sp[2]),
    ];

    let src = v.data();
    let mut out = Array3::<F>::zeros((out_dims[2], out_dims[1], out_dims[0]));
    let max_idx = [
        in_dims[0] as isize - 1,
        in_dims[1] as isize - 1,
        in_dims[2] as isize - 1,
    ];

    // Per output voxel: continuous source index i_mm / spacing, clamped to
    // the source grid, blended over the 8 surrounding voxel centers.
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut fr = [0f64; 3];
    for z in 0..out_dims[2] {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[0] {
                let pos = [x as f64 / sp[0], y as f64 / sp[1], z as f64 / sp[2]];
                for a in 0..3 {
                    let f = pos[a].floor();
                    let l = (f as isize).clamp(0, max_idx[a]);
                    let h = (l + 1).min(max_idx[a]);
                    lo[a] = l as usize;
                    hi[a] = h as usize;
                    fr[a] = (pos[a] - f).clamp(0.0, 1.0);
                }
                let mut acc = 0.0f64;
                for (cz, wz) in [(lo[2], 1.0 - fr[2]), (hi[2], fr[2])] {
                    if wz == 0.0 {
                        continue;
                    }
                    for (cy, wy) in [(lo[1], 1.0 - fr[1]), (hi[1], fr[1])] {
                        if wy == 0.0 {
                            continue;
                        }
                        for (cx, wx) in [(lo[0], 1.0 - fr[0]), (hi[0], fr[0])] {
                            if wx == 0.0 {
                                continue;
                            }
                            acc += wz * wy * wx * src[[cz, cy, cx]].into_f64();
                        }
                    }
                }
                out[[z, y, x]] = F::of_f64(acc);
            }
        }
    }

    Ok(VolumeGrid::from_raw(
        out,
        [1.0, 1.0, 1.0],
        v.origin_mm(),
        v.normalized(),
    ))
}

/// Clips HU values to `[-1000, 600]` and linearly rescales them to `[0, 1]`.
///
/// Errors if the volume is already normalized.
pub fn clip_normalize<F: Scalar>(v: &VolumeGrid<F>) -> Result<VolumeGrid<F>> {
    if v.normalized() {
        return Err(Error::AlreadyNormalized);
    }
    let lo = F::of_f64(HU_CLIP_MIN);
    let hi = F::of_f64(HU_CLIP_MAX);
    let span = F::of_f64(HU_CLIP_MAX - HU_CLIP_MIN);
    let data = v.data().mapv(|h| {
        let c = if h < lo {
            lo
        } else if h > hi {
            hi
        } else {
            h
        };
        (c - lo) / span
    });
    Ok(v.with_data(data, true))
}

/// Full standardization: isotropic resampling followed by clip/normalize.
pub fn preprocess<F: Scalar>(v: &VolumeGrid<F>) -> Result<VolumeGrid<F>> {
    clip_normalize(&resample_isotropic(v)?)
}

/// Extracts a cubic patch of `side` voxels centered at the voxel nearest to
/// `center_mm`. Regions outside the volume are zero-padded (normalized air).
///
/// Requires a normalized, 1 mm isotropic volume; errors if the center lies
/// outside the volume bounds.
pub fn extract_patch<F: Scalar>(
    v: &VolumeGrid<F>,
    center_mm: [f64; 3],
    side: usize,
) -> Result<PatchCube<F>> {
    if !v.normalized() {
        return Err(Error::NotNormalized);
    }
    if !v.is_isotropic_unit() {
        return Err(Error::NotIsotropic);
    }
    if side == 0 {
        return Err(Error::InvalidConfig("patch side must be >= 1".into()));
    }
    let center_vox = v.nearest_voxel(center_mm)?;
    let dims = v.dims();
    let half = (side / 2) as isize;

    let mut start = [0isize; 3];
    let mut padding = [[0usize; 2]; 3];
    for a in 0..3 {
        start[a] = center_vox[a] as isize - half;
        let end = start[a] + side as isize;
        padding[a][0] = (-start[a]).max(0) as usize;
        padding[a][1] = (end - dims[a] as isize).max(0) as usize;
    }

    let mut data = Array3::<F>::zeros((side, side, side));
    let src = v.data();
    for pz in padding[2][0]..side - padding[2][1] {
        let sz = (start[2] + pz as isize) as usize;
        for py in padding[1][0]..side - padding[1][1] {
            let sy = (start[1] + py as isize) as usize;
            for px in padding[0][0]..side - padding[0][1] {
                let sx = (start[0] + px as isize) as usize;
                data[[pz, py, px]] = src[[sz, sy, sx]];
            }
        }
    }

    let snapped_center = v.voxel_center_mm(center_vox[0], center_vox[1], center_vox[2]);
    let origin = [
        v.origin_mm()[0] + start[0] as f64,
        v.origin_mm()[1] + start[1] as f64,
        v.origin_mm()[2] + start[2] as f64,
    ];
    Ok(PatchCube::from_parts(data, side, snapped_center, origin, padding))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;

    use crate::seeding::rng_for;

    fn hu_volume(dims_xyz: [usize; 3], spacing: [f64; 3], mut fill: impl FnMut(usize, usize, usize) -> f32) -> VolumeGrid<f32> {
        let mut data = Array3::<f32>::zeros((dims_xyz[2], dims_xyz[1], dims_xyz[0]));
        for z in 0..dims_xyz[2] {
            for y in 0..dims_xyz[1] {
                for x in 0..dims_xyz[0] {
                    data[[z, y, x]] = fill(x, y, z);
                }
            }
        }
        VolumeGrid::new(data, spacing, [0.0; 3], false).unwrap()
    }

    #[test]
    fn resample_doubles_dims_at_two_mm_spacing() {
        let v = hu_volume([64, 64, 64], [2.0, 2.0, 2.0], |x, _, _| x as f32);
        let r = resample_isotropic(&v).unwrap();
        assert_eq!(r.dims(), [128, 128, 128]);
        assert_eq!(r.spacing_mm(), [1.0, 1.0, 1.0]);
    }

    #[test]
    fn resample_unit_spacing_is_bit_exact_identity() {
        let mut rng = rng_for(1, "resample-id", &[]);
        let v = hu_volume([9, 7, 5], [1.0, 1.0, 1.0], |_, _, _| rng.gen_range(-1000.0..600.0));
        let r = resample_isotropic(&v).unwrap();
        assert_eq!(r.data(), v.data());
    }

    #[test]
    fn resample_preserves_constants() {
        let v = hu_volume([10, 12, 8], [0.7, 1.3, 2.1], |_, _, _| -273.5);
        let r = resample_isotropic(&v).unwrap();
        for &val in r.data() {
            assert!((val - -273.5).abs() < 1e-3, "constant not preserved: {val}");
        }
        assert_eq!(r.dims(), [7, 16, 17]);
    }

    #[test]
    fn clip_normalize_matches_bounds() {
        let v = hu_volume([4, 1, 1], [1.0; 3], |x, _, _| match x {
            0 => -1000.0,
            1 => 600.0,
            2 => -200.0,
            _ => -1500.0,
        });
        let n = clip_normalize(&v).unwrap();
        assert_eq!(n.value_at(0, 0, 0), 0.0);
        assert_eq!(n.value_at(1, 0, 0), 1.0);
        assert_eq!(n.value_at(2, 0, 0), 0.5);
        assert_eq!(n.value_at(3, 0, 0), 0.0);
        assert!(n.normalized());
    }

    #[test]
    fn clip_normalize_twice_errors() {
        let v = hu_volume([2, 2, 2], [1.0; 3], |_, _, _| 0.0);
        let n = clip_normalize(&v).unwrap();
        assert!(matches!(clip_normalize(&n), Err(Error::AlreadyNormalized)));
    }

    #[test]
    fn clip_normalize_is_monotone() {
        let mut rng = rng_for(2, "normalize-monotone", &[]);
        for _ in 0..200 {
            let a: f64 = rng.gen_range(-2000.0..1000.0);
            let b: f64 = rng.gen_range(-2000.0..1000.0);
            let (a, b) = if a <= b { (a, b) } else { (b, a) };
            let v = hu_volume([2, 1, 1], [1.0; 3], |x, _, _| if x == 0 { a as f32 } else { b as f32 });
            let n = clip_normalize(&v).unwrap();
            assert!(n.value_at(0, 0, 0) <= n.value_at(1, 0, 0));
        }
    }

    #[test]
    fn interior_patch_has_no_padding_and_matches_source() {
        let v = hu_volume([48, 48, 48], [1.0; 3], |x, y, z| (x + 10 * y + 100 * z) as f32);
        let n = clip_normalize(&v).unwrap();
        let p = extract_patch(&n, [24.0, 24.0, 24.0], 32).unwrap();
        assert_eq!(p.padded_voxel_count(), 0);
        for z in 0..32 {
            for y in 0..32 {
                for x in 0..32 {
                    assert_eq!(p.data()[[z, y, x]], n.value_at(x + 8, y + 8, z + 8));
                }
            }
        }
    }

    #[test]
    fn corner_patch_pads_seven_eighths() {
        let v = hu_volume([64, 64, 64], [1.0; 3], |_, _, _| 100.0);
        let n = clip_normalize(&v).unwrap();
        let p = extract_patch(&n, [0.0, 0.0, 0.0], 32).unwrap();
        // Brute-force count of in-bounds voxels.
        let mut padded = 0usize;
        for z in -16i64..16 {
            for y in -16i64..16 {
                for x in -16i64..16 {
                    if x < 0 || y < 0 || z < 0 {
                        padded += 1;
                    }
                }
            }
        }
        assert_eq!(p.padded_voxel_count(), padded);
        assert_eq!(padded, 32 * 32 * 32 * 7 / 8);
    }

    #[test]
    fn full_volume_patch_is_identity() {
        let mut rng = rng_for(3, "patch-full", &[]);
        let v = hu_volume([32, 32, 32], [1.0; 3], |_, _, _| rng.gen_range(-1000.0..600.0));
        let n = clip_normalize(&v).unwrap();
        let p = extract_patch(&n, [16.0, 16.0, 16.0], 32).unwrap();
        assert_eq!(p.data(), n.data());
        assert_eq!(p.padded_voxel_count(), 0);
    }

    #[test]
    fn patch_center_out_of_bounds_errors() {
        let v = hu_volume([16, 16, 16], [1.0; 3], |_, _, _| 0.0);
        let n = clip_normalize(&v).unwrap();
        assert!(matches!(
            extract_patch(&n, [40.0, 0.0, 0.0], 8),
            Err(Error::OutOfBounds(..))
        ));
    }

    #[test]
    fn patch_requires_normalized_isotropic_input() {
        let hu = hu_volume([16, 16, 16], [1.0; 3], |_, _, _| 0.0);
        assert!(matches!(
            extract_patch(&hu, [8.0; 3], 8),
            Err(Error::NotNormalized)
        ));
        let aniso = hu_volume([16, 16, 16], [2.0, 1.0, 1.0], |_, _, _| 0.0);
        let aniso_norm = clip_normalize(&aniso).unwrap();
        assert!(matches!(
            extract_patch(&aniso_norm, [8.0; 3], 8),
            Err(Error::NotIsotropic)
        ));
    }
}

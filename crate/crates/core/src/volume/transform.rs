//! Axis-aligned grid transforms used for data augmentation.
//!
//! Each transform comes in two coupled halves: a voxel-array permutation (or
//! resampling, for zoom) and the matching map on patch-local coordinates so
//! annotations can be transformed jointly with the data.

use ndarray::Array3;

use crate::num::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis3 {
    X,
    Y,
    Z,
}

/// Rotates the `(x, y)` plane by `k * 90` degrees. Cubic input required.
pub fn rot90_z<T: Clone>(a: &Array3<T>, k: usize) -> Array3<T> {
    let s = a.shape()[0];
    assert!(a.shape().iter().all(|&d| d == s), "rot90_z requires a cube");
    let k = k % 4;
    if k == 0 {
        return a.clone();
    }
    let mut out = Array3::from_shape_fn((s, s, s), |(z, y, x)| a[[z, y, x]].clone());
    for _ in 0..k {
        let prev = out;
        out = Array3::from_shape_fn((s, s, s), |(z, y, x)| prev[[z, x, s - 1 - y]].clone());
    }
    out
}

/// Mirrors a cube along one axis.
pub fn flip_axis<T: Clone>(a: &Array3<T>, axis: Axis3) -> Array3<T> {
    let s = a.shape()[0];
    assert!(a.shape().iter().all(|&d| d == s), "flip_axis requires a cube");
    Array3::from_shape_fn((s, s, s), |(z, y, x)| match axis {
        Axis3::X => a[[z, y, s - 1 - x]].clone(),
        Axis3::Y => a[[z, s - 1 - y, x]].clone(),
        Axis3::Z => a[[s - 1 - z, y, x]].clone(),
    })
}

/// Rescales a cubic patch about its center by `factor` (>1 zooms in).
/// Samples falling outside the source are zero (normalized air).
pub fn zoom_patch<F: Scalar>(a: &Array3<F>, factor: f64) -> Array3<F> {
    assert!(factor > 0.0 && factor.is_finite());
    let s = a.shape()[0];
    assert!(a.shape().iter().all(|&d| d == s), "zoom_patch requires a cube");
    let c = (s as f64 - 1.0) / 2.0;
    Array3::from_shape_fn((s, s, s), |(z, y, x)| {
        let src = [
            c + (x as f64 - c) / factor,
            c + (y as f64 - c) / factor,
            c + (z as f64 - c) / factor,
        ];
        trilinear_zero_pad(a, src)
    })
}

fn trilinear_zero_pad<F: Scalar>(a: &Array3<F>, p: [f64; 3]) -> F {
    let s = a.shape()[0] as isize;
    let mut acc = 0.0f64;
    let fl = [p[0].floor(), p[1].floor(), p[2].floor()];
    let fr = [p[0] - fl[0], p[1] - fl[1], p[2] - fl[2]];
    for (dz, wz) in [(0isize, 1.0 - fr[2]), (1, fr[2])] {
        for (dy, wy) in [(0isize, 1.0 - fr[1]), (1, fr[1])] {
            for (dx, wx) in [(0isize, 1.0 - fr[0]), (1, fr[0])] {
                let w = wz * wy * wx;
                if w == 0.0 {
                    continue;
                }
                let (ix, iy, iz) = (fl[0] as isize + dx, fl[1] as isize + dy, fl[2] as isize + dz);
                if ix < 0 || iy < 0 || iz < 0 || ix >= s || iy >= s || iz >= s {
                    continue; // zero padding
                }
                acc += w * a[[iz as usize, iy as usize, ix as usize]].into_f64();
            }
        }
    }
    F::of_f64(acc)
}

/// Affine map on patch-local voxel-center coordinates, with the induced
/// diameter scale. Composable; mirrors the data transforms above.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridTransform {
    pub linear: [[f64; 3]; 3],
    pub offset: [f64; 3],
    pub scale: f64,
}

impl GridTransform {
    pub fn identity() -> Self {
        Self {
            linear: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            offset: [0.0; 3],
            scale: 1.0,
        }
    }

    /// Matches [`rot90_z`] on a cube of `side` voxels: one step maps
    /// `(x, y, z) -> (y, side-1-x, z)`.
    pub fn rot90_z(k: usize, side: usize) -> Self {
        let mut t = Self::identity();
        let m = side as f64 - 1.0;
        for _ in 0..k % 4 {
            let step = GridTransform {
                linear: [[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
                offset: [0.0, m, 0.0],
                scale: 1.0,
            };
            t = t.then(&step);
        }
        t
    }

    /// Matches [`flip_axis`] on a cube of `side` voxels.
    pub fn flip(axis: Axis3, side: usize) -> Self {
        let m = side as f64 - 1.0;
        let mut t = Self::identity();
        let a = match axis {
            Axis3::X => 0,
            Axis3::Y => 1,
            Axis3::Z => 2,
        };
        t.linear[a][a] = -1.0;
        t.offset[a] = m;
        t
    }

    /// Matches [`zoom_patch`] on a cube of `side` voxels: points move away
    /// from the center by `factor`, diameters scale by `factor`.
    pub fn zoom(factor: f64, side: usize) -> Self {
        let c = (side as f64 - 1.0) / 2.0;
        GridTransform {
            linear: [[factor, 0.0, 0.0], [0.0, factor, 0.0], [0.0, 0.0, factor]],
            offset: [c * (1.0 - factor), c * (1.0 - factor), c * (1.0 - factor)],
            scale: factor,
        }
    }

    pub fn apply_point(&self, p: [f64; 3]) -> [f64; 3] {
        let mut out = self.offset;
        for r in 0..3 {
            for c in 0..3 {
                out[r] += self.linear[r][c] * p[c];
            }
        }
        out
    }

    /// `self` followed by `other`.
    pub fn then(&self, other: &GridTransform) -> GridTransform {
        let mut linear = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                for k in 0..3 {
                    linear[r][c] += other.linear[r][k] * self.linear[k][c];
                }
            }
        }
        let offset = other.apply_point(self.offset);
        GridTransform {
            linear,
            offset,
            scale: self.scale * other.scale,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn marker_cube(s: usize) -> Array3<f32> {
        Array3::from_shape_fn((s, s, s), |(z, y, x)| (x + 10 * y + 100 * z) as f32)
    }

    #[test]
    fn rot90_four_times_is_identity() {
        let a = marker_cube(6);
        assert_eq!(rot90_z(&a, 4), a);
    }

    #[test]
    fn rot90_point_map_matches_data_map() {
        let s = 8;
        let a = marker_cube(s);
        for k in 0..4 {
            let rotated = rot90_z(&a, k);
            let t = GridTransform::rot90_z(k, s);
            for &(x, y, z) in &[(0usize, 0usize, 0usize), (3, 1, 5), (7, 7, 7), (2, 6, 4)] {
                let p = t.apply_point([x as f64, y as f64, z as f64]);
                let (px, py, pz) = (p[0].round() as usize, p[1].round() as usize, p[2].round() as usize);
                assert_eq!(rotated[[pz, py, px]], a[[z, y, x]], "k={k} point ({x},{y},{z})");
            }
        }
    }

    #[test]
    fn flip_point_map_matches_data_map() {
        let s = 5;
        let a = marker_cube(s);
        for axis in [Axis3::X, Axis3::Y, Axis3::Z] {
            let flipped = flip_axis(&a, axis);
            let t = GridTransform::flip(axis, s);
            let p = t.apply_point([1.0, 2.0, 3.0]);
            let (px, py, pz) = (p[0].round() as usize, p[1].round() as usize, p[2].round() as usize);
            assert_eq!(flipped[[pz, py, px]], a[[3, 2, 1]]);
        }
    }

    #[test]
    fn zoom_identity_factor_preserves_values() {
        let a = marker_cube(6);
        let z = zoom_patch(&a, 1.0);
        for (va, vz) in a.iter().zip(z.iter()) {
            assert!((va - vz).abs() < 1e-4);
        }
    }

    #[test]
    fn zoom_scales_distances_about_center() {
        let s = 9usize;
        let t = GridTransform::zoom(1.5, s);
        let c = (s as f64 - 1.0) / 2.0;
        let p = t.apply_point([c + 2.0, c, c]);
        assert!((p[0] - (c + 3.0)).abs() < 1e-12);
        assert!((p[1] - c).abs() < 1e-12);
        assert_eq!(t.scale, 1.5);
    }

    #[test]
    fn composition_applies_left_to_right() {
        let s = 8;
        let t = GridTransform::rot90_z(1, s).then(&GridTransform::flip(Axis3::X, s));
        let a = marker_cube(s);
        let b = flip_axis(&rot90_z(&a, 1), Axis3::X);
        let p = t.apply_point([2.0, 3.0, 4.0]);
        let (px, py, pz) = (p[0].round() as usize, p[1].round() as usize, p[2].round() as usize);
        assert_eq!(b[[pz, py, px]], a[[4, 3, 2]]);
    }
}

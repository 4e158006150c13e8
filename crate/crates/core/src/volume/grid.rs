use ndarray::Array3;

use crate::error::{Error, Result};
use crate::num::Scalar;

/// A 3D scalar image with physical voxel spacing and origin.
///
/// Values are Hounsfield units until [`clip_normalize`](super::clip_normalize)
/// maps them into `[0, 1]` and sets the `normalized` flag.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid<F: Scalar> {
    data: Array3<F>,
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
    normalized: bool,
}

impl<F: Scalar> VolumeGrid<F> {
    /// Builds a volume, validating the metadata invariants. If `normalized`
    /// is set, all values must already lie in `[0, 1]`.
    pub fn new(
        data: Array3<F>,
        spacing_mm: [f64; 3],
        origin_mm: [f64; 3],
        normalized: bool,
    ) -> Result<Self> {
        if data.shape().iter().any(|&d| d == 0) {
            return Err(Error::InvalidMetadata(format!(
                "volume dims must be >= 1 on each axis, got {:?}",
                data.shape()
            )));
        }
        if spacing_mm.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidMetadata(format!(
                "spacing components must be strictly positive, got {spacing_mm:?}"
            )));
        }
        if origin_mm.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidMetadata(format!(
                "origin must be finite, got {origin_mm:?}"
            )));
        }
        if normalized {
            let zero = F::zero();
            let one = F::one();
            if data.iter().any(|&v| v < zero || v > one || v.is_nan()) {
                return Err(Error::InvalidMetadata(
                    "normalized volume contains values outside [0, 1]".into(),
                ));
            }
        }
        Ok(Self {
            data,
            spacing_mm,
            origin_mm,
            normalized,
        })
    }

    /// Internal constructor for values known valid by construction.
    pub(crate) fn from_raw(
        data: Array3<F>,
        spacing_mm: [f64; 3],
        origin_mm: [f64; 3],
        normalized: bool,
    ) -> Self {
        debug_assert!(data.shape().iter().all(|&d| d >= 1));
        Self {
            data,
            spacing_mm,
            origin_mm,
            normalized,
        }
    }

    pub fn data(&self) -> &Array3<F> {
        &self.data
    }

    pub fn into_data(self) -> Array3<F> {
        self.data
    }

    /// Dimensions in `(x, y, z)` order.
    pub fn dims(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[2], s[1], s[0]]
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn origin_mm(&self) -> [f64; 3] {
        self.origin_mm
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    pub fn is_isotropic_unit(&self) -> bool {
        self.spacing_mm.iter().all(|&s| s == 1.0)
    }

    /// Physical position (mm) of the voxel center at integer index `(x, y, z)`.
    pub fn voxel_center_mm(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        [
            self.origin_mm[0] + x as f64 * self.spacing_mm[0],
            self.origin_mm[1] + y as f64 * self.spacing_mm[1],
            self.origin_mm[2] + z as f64 * self.spacing_mm[2],
        ]
    }

    /// Continuous voxel index of a physical point (mm).
    pub fn mm_to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin_mm[0]) / self.spacing_mm[0],
            (p[1] - self.origin_mm[1]) / self.spacing_mm[1],
            (p[2] - self.origin_mm[2]) / self.spacing_mm[2],
        ]
    }

    /// Nearest voxel index to a physical point, or an out-of-bounds error.
    pub fn nearest_voxel(&self, p: [f64; 3]) -> Result<[usize; 3]> {
        let v = self.mm_to_voxel(p);
        let dims = self.dims();
        let mut out = [0usize; 3];
        for a in 0..3 {
            let r = v[a].round();
            if r < 0.0 || r >= dims[a] as f64 {
                return Err(Error::OutOfBounds(p[0], p[1], p[2]));
            }
            out[a] = r as usize;
        }
        Ok(out)
    }

    pub fn value_at(&self, x: usize, y: usize, z: usize) -> F {
        self.data[[z, y, x]]
    }

    pub(crate) fn with_data(&self, data: Array3<F>, normalized: bool) -> Self {
        Self {
            data,
            spacing_mm: self.spacing_mm,
            origin_mm: self.origin_mm,
            normalized,
        }
    }
}

/// A cubic sub-volume of a normalized, isotropic [`VolumeGrid`].
///
/// Detection works on 128-voxel cubes, re-identification and classification
/// on 32-voxel cubes. Out-of-bounds regions are zero-padded and the padding
/// extent per axis is recorded.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchCube<F: Scalar> {
    data: Array3<F>,
    side: usize,
    /// Physical center of the patch (snapped to the nearest source voxel).
    center_mm: [f64; 3],
    /// Physical position of the patch voxel `(0, 0, 0)`.
    origin_mm: [f64; 3],
    /// Zero-padded voxel counts per axis (`[low, high]` for x, y, z).
    padding: [[usize; 2]; 3],
}

impl<F: Scalar> PatchCube<F> {
    pub(crate) fn from_parts(
        data: Array3<F>,
        side: usize,
        center_mm: [f64; 3],
        origin_mm: [f64; 3],
        padding: [[usize; 2]; 3],
    ) -> Self {
        debug_assert_eq!(data.shape(), [side, side, side]);
        Self {
            data,
            side,
            center_mm,
            origin_mm,
            padding,
        }
    }

    pub fn data(&self) -> &Array3<F> {
        &self.data
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn center_mm(&self) -> [f64; 3] {
        self.center_mm
    }

    pub fn origin_mm(&self) -> [f64; 3] {
        self.origin_mm
    }

    pub fn padding(&self) -> [[usize; 2]; 3] {
        self.padding
    }

    pub fn padded_voxel_count(&self) -> usize {
        let total = self.side * self.side * self.side;
        let interior: usize = (0..3)
            .map(|a| self.side - self.padding[a][0] - self.padding[a][1])
            .product();
        total - interior
    }

    /// Requires the patch side to match the given stage input size.
    pub fn expect_side(&self, side: usize, context: &str) -> Result<()> {
        if self.side != side {
            return Err(Error::shape(
                context,
                format!("{side}^3 patch"),
                format!("{}^3 patch", self.side),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn rejects_non_positive_spacing() {
        let data = Array3::<f32>::zeros((4, 4, 4));
        let err = VolumeGrid::new(data, [1.0, 0.0, 1.0], [0.0; 3], false);
        assert!(matches!(err, Err(Error::InvalidMetadata(_))));
    }

    #[test]
    fn rejects_out_of_range_normalized_values() {
        let mut data = Array3::<f32>::zeros((2, 2, 2));
        data[[0, 0, 0]] = 1.5;
        let err = VolumeGrid::new(data, [1.0; 3], [0.0; 3], true);
        assert!(matches!(err, Err(Error::InvalidMetadata(_))));
    }

    #[test]
    fn dims_are_xyz_ordered() {
        let data = Array3::<f32>::zeros((2, 3, 4)); // [z, y, x]
        let v = VolumeGrid::new(data, [1.0; 3], [0.0; 3], false).unwrap();
        assert_eq!(v.dims(), [4, 3, 2]);
    }

    #[test]
    fn voxel_mm_round_trip() {
        let data = Array3::<f32>::zeros((8, 8, 8));
        let v = VolumeGrid::new(data, [0.5, 2.0, 1.0], [10.0, -4.0, 0.0], false).unwrap();
        let p = v.voxel_center_mm(3, 1, 5);
        assert_eq!(p, [11.5, -2.0, 5.0]);
        assert_eq!(v.mm_to_voxel(p), [3.0, 1.0, 5.0]);
        assert_eq!(v.nearest_voxel(p).unwrap(), [3, 1, 5]);
    }

    #[test]
    fn nearest_voxel_out_of_bounds_errors() {
        let data = Array3::<f32>::zeros((4, 4, 4));
        let v = VolumeGrid::new(data, [1.0; 3], [0.0; 3], false).unwrap();
        assert!(matches!(
            v.nearest_voxel([-1.0, 0.0, 0.0]),
            Err(Error::OutOfBounds(..))
        ));
        assert!(matches!(
            v.nearest_voxel([0.0, 0.0, 3.6]),
            Err(Error::OutOfBounds(..))
        ));
    }
}

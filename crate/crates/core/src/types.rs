//! Domain types shared across pipeline stages.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Three-way nodule malignancy category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MalignancyClass {
    Benign,
    Suspicious,
    Malignant,
}

impl MalignancyClass {
    pub const ALL: [MalignancyClass; 3] = [
        MalignancyClass::Benign,
        MalignancyClass::Suspicious,
        MalignancyClass::Malignant,
    ];

    pub fn index(self) -> usize {
        match self {
            MalignancyClass::Benign => 0,
            MalignancyClass::Suspicious => 1,
            MalignancyClass::Malignant => 2,
        }
    }

    /// Binary cancer label: suspicious and malignant count as cancer.
    pub fn is_cancer(self) -> bool {
        !matches!(self, MalignancyClass::Benign)
    }
}

/// A ground-truth nodule at one timepoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoduleAnnotation {
    /// Index of the generating seed within its phantom pair.
    pub id: u32,
    pub center_mm: [f64; 3],
    pub diameter_mm: f64,
    pub class_label: MalignancyClass,
}

impl NoduleAnnotation {
    pub fn radius_mm(&self) -> f64 {
        self.diameter_mm / 2.0
    }
}

/// A detected nodule candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateNodule {
    pub center_mm: [f64; 3],
    pub diameter_mm: f64,
    pub probability: f64,
}

impl CandidateNodule {
    pub fn new(center_mm: [f64; 3], diameter_mm: f64, probability: f64) -> Result<Self> {
        if !(diameter_mm > 0.0) || !diameter_mm.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "candidate diameter must be positive, got {diameter_mm}"
            )));
        }
        if !(0.0..=1.0).contains(&probability) {
            return Err(Error::InvalidConfig(format!(
                "candidate probability must be in [0,1], got {probability}"
            )));
        }
        Ok(Self {
            center_mm,
            diameter_mm,
            probability,
        })
    }
}

/// A ground-truth correspondence between the two timepoints of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthMatch {
    pub t1_index: usize,
    pub t2_index: usize,
    pub growth_mm: f64,
}

/// A binary 3D mask over some voxel grid, indexed `[z, y, x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    voxels: Array3<bool>,
}

impl BinaryMask {
    pub fn new(voxels: Array3<bool>) -> Self {
        Self { voxels }
    }

    pub fn voxels(&self) -> &Array3<bool> {
        &self.voxels
    }

    pub fn shape(&self) -> &[usize] {
        self.voxels.shape()
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.iter().all(|&v| !v)
    }

    /// Intersection-over-union. Two empty masks have IoU 1 (they are equal
    /// as sets); empty against non-empty gives 0.
    pub fn iou(&self, other: &BinaryMask) -> Result<f64> {
        self.check_same_shape(other)?;
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in self.voxels.iter().zip(other.voxels.iter()) {
            inter += usize::from(a && b);
            union += usize::from(a || b);
        }
        if union == 0 {
            return Ok(1.0);
        }
        Ok(inter as f64 / union as f64)
    }

    /// Dice coefficient, 1 for two empty masks.
    pub fn dice(&self, other: &BinaryMask) -> Result<f64> {
        self.check_same_shape(other)?;
        let mut inter = 0usize;
        let mut total = 0usize;
        for (&a, &b) in self.voxels.iter().zip(other.voxels.iter()) {
            inter += usize::from(a && b);
            total += usize::from(a) + usize::from(b);
        }
        if total == 0 {
            return Ok(1.0);
        }
        Ok(2.0 * inter as f64 / total as f64)
    }

    fn check_same_shape(&self, other: &BinaryMask) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "mask comparison",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(())
    }
}

/// Geometry of a voxel grid without its data; used to render ground-truth
/// masks on full volumes or on patch grids. Dims in `(x, y, z)` order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
}

impl GridGeometry {
    pub fn voxel_center_mm(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        [
            self.origin_mm[0] + x as f64 * self.spacing_mm[0],
            self.origin_mm[1] + y as f64 * self.spacing_mm[1],
            self.origin_mm[2] + z as f64 * self.spacing_mm[2],
        ]
    }
}

impl<F: crate::num::Scalar> From<&crate::volume::VolumeGrid<F>> for GridGeometry {
    fn from(v: &crate::volume::VolumeGrid<F>) -> Self {
        GridGeometry {
            dims: v.dims(),
            spacing_mm: v.spacing_mm(),
            origin_mm: v.origin_mm(),
        }
    }
}

impl<F: crate::num::Scalar> From<&crate::volume::PatchCube<F>> for GridGeometry {
    fn from(p: &crate::volume::PatchCube<F>) -> Self {
        GridGeometry {
            dims: [p.side(); 3],
            spacing_mm: [1.0; 3],
            origin_mm: p.origin_mm(),
        }
    }
}

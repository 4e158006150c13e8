//! Synthetic longitudinal CT phantom generator.
//!
//! Produces paired (T1, T2) HU volumes with fully known nodule ground truth:
//! air shell, parenchyma with low-frequency texture, vessel-like tubes,
//! Gaussian noise, and sphere or lobulated nodules rendered with a 1-voxel
//! partial-volume transition. All randomness derives from the spec seed, so
//! identical specs produce bit-identical volumes.
//!
//! Anatomy (texture waves, vessels, nodule shapes) is shared between the two
//! timepoints; only nodule size/position evolution and the noise realization
//! differ. Background streams never look at nodule labels, which keeps air
//! statistics independent of class by construction.

mod corpus;
mod render;

pub use corpus::{
    generate_corpus, load_corpus_manifest, load_pair_manifest, CorpusManifest, CorpusPairEntry,
    CorpusProfile, PairManifest, SplitKind,
};
pub use render::{ground_truth_mask, rater_jitter_masks};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::types::{GroundTruthMatch, MalignancyClass, NoduleAnnotation};
use crate::volume::VolumeGrid;

/// Background tissue model, in Hounsfield units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundModel {
    pub air_hu: f64,
    pub parenchyma_hu: f64,
    /// Amplitude of the slow parenchyma texture variation.
    pub parenchyma_band_hu: f64,
    pub vessel_hu: f64,
    pub vessel_count: usize,
    pub vessel_radius_mm: [f64; 2],
    pub noise_sigma_hu: f64,
    /// Air shell thickness around the volume.
    pub air_margin_mm: f64,
}

impl Default for BackgroundModel {
    fn default() -> Self {
        Self {
            air_hu: -1000.0,
            parenchyma_hu: -800.0,
            parenchyma_band_hu: 60.0,
            vessel_hu: 0.0,
            vessel_count: 8,
            vessel_radius_mm: [0.8, 2.0],
            noise_sigma_hu: 20.0,
            air_margin_mm: 4.0,
        }
    }
}

/// Nodule surface model. Lobulated shapes perturb the radius with a fixed
/// degree-2 real-harmonic basis; `chord_scale` renormalizes the shape so its
/// maximum central chord equals the nominal diameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoduleShape {
    Sphere,
    Lobulated { coeffs: [f64; 5], chord_scale: f64 },
}

/// Degree-2 real harmonic basis evaluated at a unit direction.
pub(crate) fn harmonic_basis(u: [f64; 3]) -> [f64; 5] {
    let (x, y, z) = (u[0], u[1], u[2]);
    [
        3.0 * x * y,
        3.0 * y * z,
        3.0 * x * z,
        1.5 * (x * x - y * y),
        0.5 * (3.0 * z * z - 1.0),
    ]
}

/// Deterministic quasi-uniform unit directions (spherical Fibonacci lattice).
pub(crate) fn fibonacci_directions(n: usize) -> Vec<[f64; 3]> {
    let golden = (1.0 + 5f64.sqrt()) / 2.0;
    (0..n)
        .map(|i| {
            let t = (i as f64 + 0.5) / n as f64;
            let z = 1.0 - 2.0 * t;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = 2.0 * std::f64::consts::PI * (i as f64) / golden;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}

impl NoduleShape {
    /// Builds a lobulated shape from harmonic coefficients, normalizing the
    /// maximum central chord to the nominal diameter.
    pub fn lobulated(coeffs: [f64; 5]) -> Self {
        let dirs = fibonacci_directions(512);
        let mut max_chord = 0f64;
        for d in &dirs {
            let f = |u: [f64; 3]| {
                let b = harmonic_basis(u);
                let mut s = 1.0;
                for i in 0..5 {
                    s += coeffs[i] * b[i];
                }
                s.max(0.3)
            };
            let chord = f(*d) + f([-d[0], -d[1], -d[2]]);
            max_chord = max_chord.max(chord);
        }
        NoduleShape::Lobulated {
            coeffs,
            chord_scale: 2.0 / max_chord,
        }
    }

    /// Radius along unit direction `u` for a nodule of nominal radius `r0`.
    pub fn radius_at(&self, r0: f64, u: [f64; 3]) -> f64 {
        match self {
            NoduleShape::Sphere => r0,
            NoduleShape::Lobulated { coeffs, chord_scale } => {
                let b = harmonic_basis(u);
                let mut s = 1.0;
                for i in 0..5 {
                    s += coeffs[i] * b[i];
                }
                r0 * chord_scale * s.max(0.3)
            }
        }
    }

    /// Largest radius over all directions; used for bounds checks.
    pub fn max_radius(&self, r0: f64) -> f64 {
        match self {
            NoduleShape::Sphere => r0,
            NoduleShape::Lobulated { .. } => {
                let dirs = fibonacci_directions(256);
                dirs.iter()
                    .map(|&u| self.radius_at(r0, u))
                    .fold(0.0, f64::max)
            }
        }
    }
}

/// Which timepoint of a pair to address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Timepoint {
    T1,
    T2,
}

/// A nodule's full longitudinal ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoduleSeed {
    pub center_mm_t1: [f64; 3],
    pub center_mm_t2: [f64; 3],
    pub diameter_mm_t1: f64,
    pub diameter_mm_t2: f64,
    pub shape: NoduleShape,
    pub intensity_hu: f64,
    pub class_label: MalignancyClass,
}

impl NoduleSeed {
    /// Ground-truth growth: T2 diameter minus T1 diameter, signed.
    pub fn growth_mm(&self) -> f64 {
        self.diameter_mm_t2 - self.diameter_mm_t1
    }

    pub fn center_mm(&self, tp: Timepoint) -> [f64; 3] {
        match tp {
            Timepoint::T1 => self.center_mm_t1,
            Timepoint::T2 => self.center_mm_t2,
        }
    }

    pub fn diameter_mm(&self, tp: Timepoint) -> f64 {
        match tp {
            Timepoint::T1 => self.diameter_mm_t1,
            Timepoint::T2 => self.diameter_mm_t2,
        }
    }

    pub fn annotation(&self, id: u32, tp: Timepoint) -> NoduleAnnotation {
        NoduleAnnotation {
            id,
            center_mm: self.center_mm(tp),
            diameter_mm: self.diameter_mm(tp),
            class_label: self.class_label,
        }
    }
}

/// Full description of one longitudinal phantom pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// Volume dimensions in voxels, `(x, y, z)`.
    pub volume_dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub background: BackgroundModel,
    pub nodules: Vec<NoduleSeed>,
    pub seed: u64,
}

impl PhantomSpec {
    /// Validates the spec invariants: diameters within `[5, 30]` mm, every
    /// nodule fully inside the parenchyma at both timepoints, and no two
    /// nodules overlapping at either timepoint.
    pub fn validate(&self) -> Result<()> {
        let extent = [
            self.volume_dims[0] as f64 * self.spacing_mm[0],
            self.volume_dims[1] as f64 * self.spacing_mm[1],
            self.volume_dims[2] as f64 * self.spacing_mm[2],
        ];
        let margin = self.background.air_margin_mm;
        for (i, n) in self.nodules.iter().enumerate() {
            for tp in [Timepoint::T1, Timepoint::T2] {
                let d = n.diameter_mm(tp);
                if !(5.0..=30.0).contains(&d) {
                    return Err(Error::InvalidPhantomSpec(format!(
                        "nodule {i} diameter {d} mm outside [5, 30]"
                    )));
                }
                let r = n.shape.max_radius(d / 2.0);
                let c = n.center_mm(tp);
                for a in 0..3 {
                    if c[a] - r < margin || c[a] + r > extent[a] - margin {
                        return Err(Error::InvalidPhantomSpec(format!(
                            "nodule {i} does not fit inside the parenchyma at {tp:?}"
                        )));
                    }
                }
            }
            for j in 0..i {
                let m = &self.nodules[j];
                for tp in [Timepoint::T1, Timepoint::T2] {
                    let (a, b) = (n.center_mm(tp), m.center_mm(tp));
                    let dist = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
                    let min_dist = n.shape.max_radius(n.diameter_mm(tp) / 2.0)
                        + m.shape.max_radius(m.diameter_mm(tp) / 2.0);
                    if dist < min_dist {
                        return Err(Error::InvalidPhantomSpec(format!(
                            "nodules {j} and {i} overlap at {tp:?}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Output of [`generate_pair`].
#[derive(Debug, Clone)]
pub struct PhantomPair<F: Scalar> {
    pub t1: VolumeGrid<F>,
    pub t2: VolumeGrid<F>,
    pub annotations_t1: Vec<NoduleAnnotation>,
    pub annotations_t2: Vec<NoduleAnnotation>,
    pub matches: Vec<GroundTruthMatch>,
}

/// Renders both timepoints of a phantom pair in HU.
pub fn generate_pair<F: Scalar>(spec: &PhantomSpec) -> Result<PhantomPair<F>> {
    spec.validate()?;
    let t1 = render::render_volume(spec, Timepoint::T1)?;
    let t2 = render::render_volume(spec, Timepoint::T2)?;
    let annotations_t1: Vec<_> = spec
        .nodules
        .iter()
        .enumerate()
        .map(|(i, n)| n.annotation(i as u32, Timepoint::T1))
        .collect();
    let annotations_t2: Vec<_> = spec
        .nodules
        .iter()
        .enumerate()
        .map(|(i, n)| n.annotation(i as u32, Timepoint::T2))
        .collect();
    let matches = spec
        .nodules
        .iter()
        .enumerate()
        .map(|(i, n)| GroundTruthMatch {
            t1_index: i,
            t2_index: i,
            growth_mm: n.growth_mm(),
        })
        .collect();
    Ok(PhantomPair {
        t1,
        t2,
        annotations_t1,
        annotations_t2,
        matches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::GridGeometry;

    fn sphere_spec(d1: f64, d2: f64) -> PhantomSpec {
        PhantomSpec {
            volume_dims: [64, 64, 64],
            spacing_mm: [1.0; 3],
            background: BackgroundModel::default(),
            nodules: vec![NoduleSeed {
                center_mm_t1: [32.0, 32.0, 32.0],
                center_mm_t2: [33.0, 31.0, 32.0],
                diameter_mm_t1: d1,
                diameter_mm_t2: d2,
                shape: NoduleShape::Sphere,
                intensity_hu: 0.0,
                class_label: MalignancyClass::Malignant,
            }],
            seed: 99,
        }
    }

    #[test]
    fn growth_is_stored_by_construction() {
        let pair = generate_pair::<f32>(&sphere_spec(10.0, 13.0)).unwrap();
        assert_eq!(pair.matches.len(), 1);
        assert!((pair.matches[0].growth_mm - 3.0).abs() < 1e-12);
        assert_eq!(pair.annotations_t1[0].diameter_mm, 10.0);
        assert_eq!(pair.annotations_t2[0].diameter_mm, 13.0);
    }

    #[test]
    fn same_spec_same_seed_is_bit_identical() {
        let spec = sphere_spec(8.0, 11.0);
        let a = generate_pair::<f32>(&spec).unwrap();
        let b = generate_pair::<f32>(&spec).unwrap();
        assert_eq!(a.t1.data(), b.t1.data());
        assert_eq!(a.t2.data(), b.t2.data());
    }

    #[test]
    fn sphere_mask_volume_close_to_analytic() {
        let spec = sphere_spec(10.0, 13.0);
        let geom = GridGeometry {
            dims: [64, 64, 64],
            spacing_mm: [1.0; 3],
            origin_mm: [0.0; 3],
        };
        let mask = ground_truth_mask(&spec.nodules[0], Timepoint::T1, &geom).unwrap();
        let analytic = 4.0 / 3.0 * std::f64::consts::PI * 125.0;
        let rel = (mask.count() as f64 - analytic).abs() / analytic;
        assert!(rel < 0.05, "relative volume error {rel}");
    }

    #[test]
    fn sphere_mask_feret_diameter_matches() {
        let spec = sphere_spec(10.0, 13.0);
        let geom = GridGeometry {
            dims: [64, 64, 64],
            spacing_mm: [1.0; 3],
            origin_mm: [0.0; 3],
        };
        let mask = ground_truth_mask(&spec.nodules[0], Timepoint::T1, &geom).unwrap();
        // Brute-force max pairwise distance within each axial slice.
        let mut feret = 0f64;
        let v = mask.voxels();
        let s = v.shape();
        for z in 0..s[0] {
            let mut pts = Vec::new();
            for y in 0..s[1] {
                for x in 0..s[2] {
                    if v[[z, y, x]] {
                        pts.push((x as f64, y as f64));
                    }
                }
            }
            for i in 0..pts.len() {
                for j in i + 1..pts.len() {
                    let d = ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt();
                    feret = feret.max(d);
                }
            }
        }
        assert!((feret - 10.0).abs() <= 1.0, "axial Feret {feret}");
    }

    #[test]
    fn nodule_fully_outside_grid_errors() {
        let spec = sphere_spec(10.0, 13.0);
        let geom = GridGeometry {
            dims: [16, 16, 16],
            spacing_mm: [1.0; 3],
            origin_mm: [100.0, 100.0, 100.0],
        };
        assert!(matches!(
            ground_truth_mask(&spec.nodules[0], Timepoint::T1, &geom),
            Err(Error::OutOfBounds(..))
        ));
    }

    #[test]
    fn overlapping_nodules_are_rejected() {
        let mut spec = sphere_spec(10.0, 13.0);
        let mut second = spec.nodules[0].clone();
        second.center_mm_t1 = [36.0, 32.0, 32.0];
        second.center_mm_t2 = [37.0, 31.0, 32.0];
        spec.nodules.push(second);
        assert!(matches!(
            generate_pair::<f32>(&spec),
            Err(Error::InvalidPhantomSpec(_))
        ));
    }

    #[test]
    fn out_of_range_diameter_is_rejected() {
        let spec = sphere_spec(4.0, 13.0);
        assert!(matches!(
            generate_pair::<f32>(&spec),
            Err(Error::InvalidPhantomSpec(_))
        ));
    }

    #[test]
    fn jitter_masks_overlap_but_differ() {
        let spec = sphere_spec(10.0, 13.0);
        let geom = GridGeometry {
            dims: [32, 32, 32],
            spacing_mm: [1.0; 3],
            origin_mm: [16.0, 16.0, 16.0],
        };
        let masks = rater_jitter_masks(
            &spec.nodules[0],
            Timepoint::T1,
            &geom,
            4,
            &corpus::JitterParams::default(),
            977,
        )
        .unwrap();
        assert_eq!(masks.len(), 4);
        for i in 0..4 {
            for j in i + 1..4 {
                let iou = masks[i].iou(&masks[j]).unwrap();
                assert!(iou < 1.0, "masks {i},{j} identical");
                assert!(iou > 0.5, "masks {i},{j} IoU {iou} too low");
            }
        }
    }

    #[test]
    fn lobulated_chord_is_normalized() {
        let shape = NoduleShape::lobulated([0.05, -0.03, 0.04, 0.02, -0.05]);
        let dirs = fibonacci_directions(512);
        let r0 = 6.0;
        let mut max_chord = 0f64;
        for d in &dirs {
            let c = shape.radius_at(r0, *d) + shape.radius_at(r0, [-d[0], -d[1], -d[2]]);
            max_chord = max_chord.max(c);
        }
        assert!((max_chord - 2.0 * r0).abs() < 1e-9);
    }
}

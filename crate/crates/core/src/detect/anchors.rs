//! Anchor grid, target assignment and box encoding.
//!
//! Anchors live at the head grid cells (stride 2 over the input patch): cell
//! `(ix, iy, iz)` has its center at `(2*i + 0.5)` in patch-local mm, one
//! anchor per configured diameter. Offsets are encoded relative to the
//! anchor: `dx = (gt_x - anchor_x) / d_a`, `dd = ln(gt_d / d_a)`.

use crate::detect::DetectorConfig;
use crate::types::NoduleAnnotation;

/// Anchor-grid geometry for one patch side.
#[derive(Debug, Clone)]
pub struct AnchorLayout {
    pub grid: usize,
    pub stride: usize,
    pub anchors_mm: Vec<f64>,
}

/// Per-anchor labels and regression targets for one patch.
///
/// Flat anchor index: `a * grid^3 + (iz * grid + iy) * grid + ix`, matching
/// the flattening order of the head tensor.
#[derive(Debug, Clone)]
pub struct DetectionTargets {
    pub layout: AnchorLayout,
    /// 1 positive, 0 negative, -1 ignore.
    pub labels: Vec<i8>,
    /// `(dx, dy, dz, dd)`; meaningful only where `labels == 1`.
    pub reg: Vec<[f64; 4]>,
}

impl AnchorLayout {
    pub fn new(config: &DetectorConfig, patch_side: usize) -> Self {
        Self {
            grid: config.head_grid(patch_side),
            stride: config.head_stride(),
            anchors_mm: config.anchors_mm.clone(),
        }
    }

    pub fn n_cells(&self) -> usize {
        self.grid * self.grid * self.grid
    }

    pub fn n_anchors(&self) -> usize {
        self.anchors_mm.len() * self.n_cells()
    }

    /// Patch-local mm center of cell `(ix, iy, iz)`.
    pub fn cell_center(&self, ix: usize, iy: usize, iz: usize) -> [f64; 3] {
        let s = self.stride as f64;
        [
            (ix as f64 + 0.5) * s - 0.5,
            (iy as f64 + 0.5) * s - 0.5,
            (iz as f64 + 0.5) * s - 0.5,
        ]
    }

    pub fn flat_index(&self, a: usize, ix: usize, iy: usize, iz: usize) -> usize {
        a * self.n_cells() + (iz * self.grid + iy) * self.grid + ix
    }

    /// Decodes a predicted offset back to patch-local mm center and diameter.
    pub fn decode(&self, a: usize, ix: usize, iy: usize, iz: usize, offsets: [f64; 4]) -> ([f64; 3], f64) {
        let c = self.cell_center(ix, iy, iz);
        let d_a = self.anchors_mm[a];
        (
            [
                c[0] + offsets[0] * d_a,
                c[1] + offsets[1] * d_a,
                c[2] + offsets[2] * d_a,
            ],
            d_a * offsets[3].exp(),
        )
    }

    /// Assigns labels and regression targets given patch-local annotations.
    ///
    /// An anchor is positive when its cell center lies within the nearest
    /// annotation's radius and the diameter ratio is within the configured
    /// bounds; anchors within `ignore_margin * radius` that are not positive
    /// are ignored; everything else is negative.
    pub fn assign(
        &self,
        annotations: &[NoduleAnnotation],
        ratio_bounds: [f64; 2],
        ignore_margin: f64,
    ) -> DetectionTargets {
        let n = self.n_anchors();
        let mut labels = vec![0i8; n];
        let mut reg = vec![[0f64; 4]; n];
        if !annotations.is_empty() {
            for iz in 0..self.grid {
                for iy in 0..self.grid {
                    for ix in 0..self.grid {
                        let c = self.cell_center(ix, iy, iz);
                        // Nearest annotation by center distance.
                        let (ann, dist) = annotations
                            .iter()
                            .map(|ann| {
                                let d = ((ann.center_mm[0] - c[0]).powi(2)
                                    + (ann.center_mm[1] - c[1]).powi(2)
                                    + (ann.center_mm[2] - c[2]).powi(2))
                                .sqrt();
                                (ann, d)
                            })
                            .min_by(|a, b| a.1.total_cmp(&b.1))
                            .unwrap();
                        let r = ann.radius_mm();
                        for (a, &d_a) in self.anchors_mm.iter().enumerate() {
                            let idx = self.flat_index(a, ix, iy, iz);
                            let ratio = ann.diameter_mm / d_a;
                            if dist <= r && ratio >= ratio_bounds[0] && ratio <= ratio_bounds[1] {
                                labels[idx] = 1;
                                reg[idx] = [
                                    (ann.center_mm[0] - c[0]) / d_a,
                                    (ann.center_mm[1] - c[1]) / d_a,
                                    (ann.center_mm[2] - c[2]) / d_a,
                                    (ann.diameter_mm / d_a).ln(),
                                ];
                            } else if dist <= r * ignore_margin {
                                labels[idx] = -1;
                            }
                        }
                    }
                }
            }
        }
        DetectionTargets {
            layout: self.clone(),
            labels,
            reg,
        }
    }
}

impl DetectionTargets {
    pub fn positives(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == 1).then_some(i))
            .collect()
    }

    pub fn negatives(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == 0).then_some(i))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::MalignancyClass;

    fn ann(center: [f64; 3], d: f64) -> NoduleAnnotation {
        NoduleAnnotation {
            id: 0,
            center_mm: center,
            diameter_mm: d,
            class_label: MalignancyClass::Benign,
        }
    }

    fn layout() -> AnchorLayout {
        let mut cfg = DetectorConfig::desk(0);
        cfg.patch_side = 32;
        AnchorLayout::new(&cfg, 32)
    }

    #[test]
    fn encode_decode_round_trip() {
        let l = layout();
        let target = ann([13.2, 9.7, 21.4], 12.5);
        let t = l.assign(&[target.clone()], [0.5, 2.0], 1.5);
        let pos = t.positives();
        assert!(!pos.is_empty(), "annotation must receive a positive anchor");
        for idx in pos {
            let a = idx / l.n_cells();
            let cell = idx % l.n_cells();
            let (iz, rem) = (cell / (l.grid * l.grid), cell % (l.grid * l.grid));
            let (iy, ix) = (rem / l.grid, rem % l.grid);
            let (center, d) = l.decode(a, ix, iy, iz, t.reg[idx]);
            for k in 0..3 {
                assert!((center[k] - target.center_mm[k]).abs() < 1e-9);
            }
            assert!((d - target.diameter_mm).abs() < 1e-9);
        }
    }

    #[test]
    fn every_in_range_nodule_gets_a_positive_anchor() {
        let l = layout();
        for &d in &[5.0, 7.3, 11.0, 19.0, 29.0] {
            let t = l.assign(&[ann([15.3, 16.8, 14.1], d)], [0.5, 2.0], 1.5);
            assert!(!t.positives().is_empty(), "no positive for d={d}");
        }
    }

    #[test]
    fn ignore_band_sits_between_positive_and_negative() {
        let l = layout();
        let a = ann([16.5, 16.5, 16.5], 10.0);
        let t = l.assign(&[a.clone()], [0.5, 2.0], 1.5);
        for iz in 0..l.grid {
            for iy in 0..l.grid {
                for ix in 0..l.grid {
                    let c = l.cell_center(ix, iy, iz);
                    let dist = ((c[0] - a.center_mm[0]).powi(2)
                        + (c[1] - a.center_mm[1]).powi(2)
                        + (c[2] - a.center_mm[2]).powi(2))
                    .sqrt();
                    for anc in 0..l.anchors_mm.len() {
                        let lab = t.labels[l.flat_index(anc, ix, iy, iz)];
                        let ratio = a.diameter_mm / l.anchors_mm[anc];
                        if dist <= 5.0 && (0.5..=2.0).contains(&ratio) {
                            assert_eq!(lab, 1);
                        } else if dist <= 7.5 {
                            assert_eq!(lab, -1, "dist {dist} anchor {anc}");
                        } else {
                            assert_eq!(lab, 0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn empty_annotations_are_all_negative() {
        let l = layout();
        let t = l.assign(&[], [0.5, 2.0], 1.5);
        assert!(t.labels.iter().all(|&l| l == 0));
    }
}

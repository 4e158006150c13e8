//! Whole-volume inference: overlapping tiles, anchor decoding, non-maximum
//! suppression on sphere-approximated candidates.

use ndarray::{Array3, ArrayD, IxDyn};

use crate::detect::{AnchorLayout, DetectorModel};
use crate::error::{Error, Result};
use crate::nn::Graph;
use crate::num::Scalar;
use crate::seeding::rng_for;
use crate::types::{CandidateNodule, NoduleAnnotation};
use crate::volume::VolumeGrid;

/// Tile start offsets covering `dim` with `side`-voxel tiles overlapping by
/// `overlap` (clamped so the last tile ends at the volume edge).
pub fn tile_origins(dim: usize, side: usize, overlap: usize) -> Vec<usize> {
    if dim <= side {
        return vec![0];
    }
    let step = side.saturating_sub(overlap).max(1);
    let mut out = Vec::new();
    let mut start = 0usize;
    loop {
        out.push(start.min(dim - side));
        if start + side >= dim {
            break;
        }
        start += step;
    }
    out.dedup();
    out
}

/// Volume of a sphere-sphere intersection over their union.
pub fn sphere_iou(c1: [f64; 3], d1: f64, c2: [f64; 3], d2: f64) -> f64 {
    let (r1, r2) = (d1 / 2.0, d2 / 2.0);
    let dist = ((c1[0] - c2[0]).powi(2) + (c1[1] - c2[1]).powi(2) + (c1[2] - c2[2]).powi(2)).sqrt();
    let vol = |r: f64| 4.0 / 3.0 * std::f64::consts::PI * r.powi(3);
    let (v1, v2) = (vol(r1), vol(r2));
    let inter = if dist >= r1 + r2 {
        0.0
    } else if dist <= (r1 - r2).abs() {
        vol(r1.min(r2))
    } else {
        let sum = r1 + r2;
        std::f64::consts::PI * (sum - dist).powi(2)
            * (dist * dist + 2.0 * dist * sum - 3.0 * (r1 - r2).powi(2))
            / (12.0 * dist)
    };
    inter / (v1 + v2 - inter)
}

/// Ground-truth hit criterion: the candidate center lies within the
/// annotation's radius.
pub fn hit_test(candidate: &CandidateNodule, annotation: &NoduleAnnotation) -> bool {
    let d = ((candidate.center_mm[0] - annotation.center_mm[0]).powi(2)
        + (candidate.center_mm[1] - annotation.center_mm[1]).powi(2)
        + (candidate.center_mm[2] - annotation.center_mm[2]).powi(2))
    .sqrt();
    d <= annotation.radius_mm()
}

/// Crops a `side`-cube starting at voxel `origin`, zero-padding past the
/// volume bounds.
fn crop_at_origin<F: Scalar>(v: &VolumeGrid<F>, origin: [usize; 3], side: usize) -> Array3<F> {
    let dims = v.dims();
    let mut out = Array3::<F>::zeros((side, side, side));
    let src = v.data();
    for z in 0..side.min(dims[2].saturating_sub(origin[2])) {
        for y in 0..side.min(dims[1].saturating_sub(origin[1])) {
            for x in 0..side.min(dims[0].saturating_sub(origin[0])) {
                out[[z, y, x]] = src[[origin[2] + z, origin[1] + y, origin[0] + x]];
            }
        }
    }
    out
}

struct RawCandidate {
    center_mm: [f64; 3],
    diameter_mm: f64,
    probability: f64,
}

fn canonical_order(a: &RawCandidate, b: &RawCandidate) -> std::cmp::Ordering {
    b.probability
        .total_cmp(&a.probability)
        .then(a.center_mm[2].total_cmp(&b.center_mm[2]))
        .then(a.center_mm[1].total_cmp(&b.center_mm[1]))
        .then(a.center_mm[0].total_cmp(&b.center_mm[0]))
        .then(a.diameter_mm.total_cmp(&b.diameter_mm))
}

/// Runs the detector over a preprocessed volume and returns at most `top_k`
/// candidates sorted by descending probability.
///
/// The volume is covered with overlapping tiles; each anchor is reported by
/// the unique tile covering it most centrally, so results do not depend on
/// tile processing order. Candidates then pass greedy NMS at the configured
/// sphere-IoU threshold.
pub fn detect<F: Scalar>(
    model: &DetectorModel<F>,
    volume: &VolumeGrid<F>,
    top_k: usize,
) -> Result<Vec<CandidateNodule>> {
    if top_k == 0 {
        return Err(Error::InvalidConfig("top_k must be >= 1".into()));
    }
    if !volume.normalized() {
        return Err(Error::NotNormalized);
    }
    if !volume.is_isotropic_unit() {
        return Err(Error::NotIsotropic);
    }
    let cfg = &model.config;
    let side = cfg.patch_side;
    let dims = volume.dims();
    let origins_x = tile_origins(dims[0], side, cfg.tile_overlap);
    let origins_y = tile_origins(dims[1], side, cfg.tile_overlap);
    let origins_z = tile_origins(dims[2], side, cfg.tile_overlap);
    let layout = AnchorLayout::new(cfg, side);

    // A point is owned by the tile whose center is nearest (ties to the
    // lower origin), independently per axis.
    let owner = |origins: &[usize], p: f64| -> usize {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, &o) in origins.iter().enumerate() {
            let c = o as f64 + side as f64 / 2.0;
            let d = (p - c).abs();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    };

    let mut all: Vec<RawCandidate> = Vec::new();
    for (tzi, &oz) in origins_z.iter().enumerate() {
        for (tyi, &oy) in origins_y.iter().enumerate() {
            for (txi, &ox) in origins_x.iter().enumerate() {
                let tile = crop_at_origin(volume, [ox, oy, oz], side);
                let mut g = Graph::<F>::new(false, rng_for(0, "detect", &[]));
                let flat: Vec<F> = tile.iter().copied().collect();
                let x = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, side, side, side]), flat).unwrap());
                let bound = model.bind_frozen(&mut g);
                let head = bound.forward(&mut g, x);
                let hv = g.value(head);

                let grid = layout.grid;
                let mut tile_cands: Vec<RawCandidate> = Vec::new();
                for a in 0..layout.anchors_mm.len() {
                    for iz in 0..grid {
                        for iy in 0..grid {
                            for ix in 0..grid {
                                let cell = layout.cell_center(ix, iy, iz);
                                // Ownership check in volume voxel coordinates.
                                let px = ox as f64 + cell[0];
                                let py = oy as f64 + cell[1];
                                let pz = oz as f64 + cell[2];
                                if owner(&origins_x, px) != txi
                                    || owner(&origins_y, py) != tyi
                                    || owner(&origins_z, pz) != tzi
                                {
                                    continue;
                                }
                                let logit = hv[[a * 5, iz, iy, ix]].into_f64();
                                let prob = 1.0 / (1.0 + (-logit).exp());
                                let offsets = [
                                    hv[[a * 5 + 1, iz, iy, ix]].into_f64(),
                                    hv[[a * 5 + 2, iz, iy, ix]].into_f64(),
                                    hv[[a * 5 + 3, iz, iy, ix]].into_f64(),
                                    hv[[a * 5 + 4, iz, iy, ix]].into_f64(),
                                ];
                                let (local, diameter) = layout.decode(a, ix, iy, iz, offsets);
                                let origin = volume.origin_mm();
                                tile_cands.push(RawCandidate {
                                    center_mm: [
                                        origin[0] + ox as f64 + local[0],
                                        origin[1] + oy as f64 + local[1],
                                        origin[2] + oz as f64 + local[2],
                                    ],
                                    diameter_mm: diameter,
                                    probability: prob,
                                });
                            }
                        }
                    }
                }
                tile_cands.sort_by(canonical_order);
                tile_cands.truncate(cfg.pre_nms_per_tile);
                all.extend(tile_cands);
            }
        }
    }

    all.sort_by(canonical_order);

    // Greedy NMS on sphere IoU.
    let mut kept: Vec<RawCandidate> = Vec::new();
    for cand in all {
        if kept.len() >= top_k {
            break;
        }
        let suppressed = kept
            .iter()
            .any(|k| sphere_iou(k.center_mm, k.diameter_mm, cand.center_mm, cand.diameter_mm) > cfg.nms_iou);
        if !suppressed {
            kept.push(cand);
        }
    }

    kept.into_iter()
        .map(|c| CandidateNodule::new(c.center_mm, c.diameter_mm, c.probability))
        .collect()
}

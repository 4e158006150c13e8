//! Voxel rendering of phantom volumes and ground-truth masks.

use ndarray::Array3;
use rand::Rng;

use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::phantom::corpus::JitterParams;
use crate::phantom::{harmonic_basis, NoduleSeed, PhantomSpec, Timepoint};
use crate::seeding::rng_for;
use crate::types::{BinaryMask, GridGeometry};
use crate::volume::VolumeGrid;

struct TextureWave {
    k: [f64; 3],
    phase: f64,
    amplitude: f64,
}

struct Vessel {
    a: [f64; 3],
    b: [f64; 3],
    radius: f64,
}

fn sample_waves(spec: &PhantomSpec, rng: &mut impl Rng) -> Vec<TextureWave> {
    (0..4)
        .map(|_| {
            let wavelength = rng.gen_range(15.0..40.0);
            let dir = random_unit(rng);
            let k = 2.0 * std::f64::consts::PI / wavelength;
            TextureWave {
                k: [dir[0] * k, dir[1] * k, dir[2] * k],
                phase: rng.gen_range(0.0..2.0 * std::f64::consts::PI),
                amplitude: spec.background.parenchyma_band_hu / 4.0,
            }
        })
        .collect()
}

fn random_unit(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n2: f64 = v.iter().map(|x| x * x).sum();
        if n2 > 1e-3 && n2 <= 1.0 {
            let n = n2.sqrt();
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn sample_vessels(spec: &PhantomSpec, rng: &mut impl Rng) -> Vec<Vessel> {
    let extent = volume_extent(spec);
    let m = spec.background.air_margin_mm;
    (0..spec.background.vessel_count)
        .map(|_| {
            let mut point = |_: usize| -> [f64; 3] {
                [
                    rng.gen_range(m..extent[0] - m),
                    rng.gen_range(m..extent[1] - m),
                    rng.gen_range(m..extent[2] - m),
                ]
            };
            let a = point(0);
            let b = point(1);
            let radius = rng.gen_range(spec.background.vessel_radius_mm[0]..spec.background.vessel_radius_mm[1]);
            Vessel { a, b, radius }
        })
        .collect()
}

fn volume_extent(spec: &PhantomSpec) -> [f64; 3] {
    [
        spec.volume_dims[0] as f64 * spec.spacing_mm[0],
        spec.volume_dims[1] as f64 * spec.spacing_mm[1],
        spec.volume_dims[2] as f64 * spec.spacing_mm[2],
    ]
}

fn dist_point_segment(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2: f64 = ab.iter().map(|x| x * x).sum();
    let t = if len2 == 0.0 {
        0.0
    } else {
        ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0)
    };
    let q = [a[0] + t * ab[0], a[1] + t * ab[1], a[2] + t * ab[2]];
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
}

/// Renders one timepoint of a phantom pair into an HU volume.
pub(crate) fn render_volume<F: Scalar>(spec: &PhantomSpec, tp: Timepoint) -> Result<VolumeGrid<F>> {
    let dims = spec.volume_dims;
    let extent = volume_extent(spec);
    let bg = &spec.background;

    // Anatomy stream is shared across timepoints; noise stream is not.
    let mut anatomy_rng = rng_for(spec.seed, "phantom-anatomy", &[]);
    let waves = sample_waves(spec, &mut anatomy_rng);
    let vessels = sample_vessels(spec, &mut anatomy_rng);
    let tp_idx = match tp {
        Timepoint::T1 => 1u64,
        Timepoint::T2 => 2u64,
    };
    let mut noise_rng = rng_for(spec.seed, "phantom-noise", &[tp_idx]);

    let mut data = Array3::<f64>::zeros((dims[2], dims[1], dims[0]));

    // Parenchyma with texture, air shell.
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = [
                    x as f64 * spec.spacing_mm[0],
                    y as f64 * spec.spacing_mm[1],
                    z as f64 * spec.spacing_mm[2],
                ];
                let in_shell = (0..3).any(|a| p[a] < bg.air_margin_mm || p[a] > extent[a] - bg.air_margin_mm);
                let value = if in_shell {
                    bg.air_hu
                } else {
                    let mut v = bg.parenchyma_hu;
                    for w in &waves {
                        v += w.amplitude * (w.k[0] * p[0] + w.k[1] * p[1] + w.k[2] * p[2] + w.phase).cos();
                    }
                    v
                };
                data[[z, y, x]] = value;
            }
        }
    }

    // Vessels (shared anatomy), bounded-box blend.
    for v in &vessels {
        let lo = [
            (v.a[0].min(v.b[0]) - v.radius - 1.0).max(0.0),
            (v.a[1].min(v.b[1]) - v.radius - 1.0).max(0.0),
            (v.a[2].min(v.b[2]) - v.radius - 1.0).max(0.0),
        ];
        let hi = [
            (v.a[0].max(v.b[0]) + v.radius + 1.0).min(extent[0] - 1.0),
            (v.a[1].max(v.b[1]) + v.radius + 1.0).min(extent[1] - 1.0),
            (v.a[2].max(v.b[2]) + v.radius + 1.0).min(extent[2] - 1.0),
        ];
        let vox_lo = [
            (lo[0] / spec.spacing_mm[0]) as usize,
            (lo[1] / spec.spacing_mm[1]) as usize,
            (lo[2] / spec.spacing_mm[2]) as usize,
        ];
        let vox_hi = [
            ((hi[0] / spec.spacing_mm[0]).ceil() as usize).min(dims[0] - 1),
            ((hi[1] / spec.spacing_mm[1]).ceil() as usize).min(dims[1] - 1),
            ((hi[2] / spec.spacing_mm[2]).ceil() as usize).min(dims[2] - 1),
        ];
        for z in vox_lo[2]..=vox_hi[2] {
            for y in vox_lo[1]..=vox_hi[1] {
                for x in vox_lo[0]..=vox_hi[0] {
                    let p = [
                        x as f64 * spec.spacing_mm[0],
                        y as f64 * spec.spacing_mm[1],
                        z as f64 * spec.spacing_mm[2],
                    ];
                    let d = dist_point_segment(p, v.a, v.b);
                    let alpha = (0.5 - (d - v.radius)).clamp(0.0, 1.0);
                    if alpha > 0.0 {
                        let cur = data[[z, y, x]];
                        data[[z, y, x]] = cur * (1.0 - alpha) + bg.vessel_hu * alpha;
                    }
                }
            }
        }
    }

    // Nodules.
    for n in &spec.nodules {
        render_nodule_blend(&mut data, spec, n, tp);
    }

    // Independent per-voxel noise, drawn in a fixed voxel order.
    if bg.noise_sigma_hu > 0.0 {
        for v in data.iter_mut() {
            let e: f64 = f64::standard_normal(&mut noise_rng);
            *v += bg.noise_sigma_hu * e;
        }
    }

    let out = data.mapv(|v| F::of_f64(v));
    Ok(VolumeGrid::from_raw(out, spec.spacing_mm, [0.0; 3], false))
}

fn render_nodule_blend(data: &mut Array3<f64>, spec: &PhantomSpec, n: &NoduleSeed, tp: Timepoint) {
    let c = n.center_mm(tp);
    let r0 = n.diameter_mm(tp) / 2.0;
    let rmax = n.shape.max_radius(r0) + 1.5;
    let dims = spec.volume_dims;
    let lo = [
        (((c[0] - rmax) / spec.spacing_mm[0]).floor().max(0.0)) as usize,
        (((c[1] - rmax) / spec.spacing_mm[1]).floor().max(0.0)) as usize,
        (((c[2] - rmax) / spec.spacing_mm[2]).floor().max(0.0)) as usize,
    ];
    let hi = [
        (((c[0] + rmax) / spec.spacing_mm[0]).ceil() as usize).min(dims[0] - 1),
        (((c[1] + rmax) / spec.spacing_mm[1]).ceil() as usize).min(dims[1] - 1),
        (((c[2] + rmax) / spec.spacing_mm[2]).ceil() as usize).min(dims[2] - 1),
    ];
    for z in lo[2]..=hi[2] {
        for y in lo[1]..=hi[1] {
            for x in lo[0]..=hi[0] {
                let p = [
                    x as f64 * spec.spacing_mm[0],
                    y as f64 * spec.spacing_mm[1],
                    z as f64 * spec.spacing_mm[2],
                ];
                let alpha = nodule_alpha(n, c, r0, p);
                if alpha > 0.0 {
                    let cur = data[[z, y, x]];
                    data[[z, y, x]] = cur * (1.0 - alpha) + n.intensity_hu * alpha;
                }
            }
        }
    }
}

/// Partial-volume weight of a nodule at point `p`: 1 inside, 0 outside, with
/// a 1 mm linear transition across the surface.
fn nodule_alpha(n: &NoduleSeed, center: [f64; 3], r0: f64, p: [f64; 3]) -> f64 {
    let v = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
    let rr = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if rr < 1e-9 {
        return 1.0;
    }
    let u = [v[0] / rr, v[1] / rr, v[2] / rr];
    let rad = n.shape.radius_at(r0, u);
    (0.5 - (rr - rad)).clamp(0.0, 1.0)
}

/// Voxel indicator of the analytic nodule surface at one timepoint: a voxel
/// belongs to the mask iff its center lies inside the surface. Errors if the
/// nodule lies entirely outside the grid.
pub fn ground_truth_mask(n: &NoduleSeed, tp: Timepoint, geom: &GridGeometry) -> Result<BinaryMask> {
    mask_with_perturbation(n, tp, geom, |_| 0.0)
}

/// Emits `k` perturbed masks per nodule, emulating multi-reader boundary
/// variability: each mask dilates or erodes the surface by one random offset
/// plus a smooth directional perturbation.
pub fn rater_jitter_masks(
    n: &NoduleSeed,
    tp: Timepoint,
    geom: &GridGeometry,
    k: usize,
    jitter: &JitterParams,
    seed: u64,
) -> Result<Vec<BinaryMask>> {
    if k == 0 {
        return Err(Error::InvalidConfig("jitter mask count must be >= 1".into()));
    }
    jitter.validate()?;
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let mut rng = rng_for(seed, "rater-jitter", &[i as u64]);
        let delta: f64 = rng.gen_range(-jitter.dilate_mm..=jitter.dilate_mm);
        let mut coeffs = [0f64; 5];
        for c in &mut coeffs {
            *c = rng.gen_range(-jitter.surface_mm..=jitter.surface_mm);
        }
        out.push(mask_with_perturbation(n, tp, geom, |u| {
            let b = harmonic_basis(u);
            let mut s = delta;
            for i in 0..5 {
                s += coeffs[i] * b[i];
            }
            s
        })?);
    }
    Ok(out)
}

fn mask_with_perturbation(
    n: &NoduleSeed,
    tp: Timepoint,
    geom: &GridGeometry,
    radial_offset_mm: impl Fn([f64; 3]) -> f64,
) -> Result<BinaryMask> {
    let c = n.center_mm(tp);
    let r0 = n.diameter_mm(tp) / 2.0;
    let rmax = n.shape.max_radius(r0) + 2.0;
    // Grid extent spanned by voxel centers.
    let mut overlaps = true;
    for a in 0..3 {
        let first = geom.origin_mm[a];
        let last = geom.origin_mm[a] + (geom.dims[a] as f64 - 1.0) * geom.spacing_mm[a];
        if c[a] + rmax < first || c[a] - rmax > last {
            overlaps = false;
        }
    }
    if !overlaps {
        return Err(Error::OutOfBounds(c[0], c[1], c[2]));
    }
    let (nx, ny, nz) = (geom.dims[0], geom.dims[1], geom.dims[2]);
    let mut mask = Array3::from_elem((nz, ny, nx), false);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = geom.voxel_center_mm(x, y, z);
                let v = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
                let rr = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                let inside = if rr < 1e-9 {
                    true
                } else {
                    let u = [v[0] / rr, v[1] / rr, v[2] / rr];
                    let rad = (n.shape.radius_at(r0, u) + radial_offset_mm(u)).max(0.0);
                    rr <= rad
                };
                mask[[z, y, x]] = inside;
            }
        }
    }
    Ok(BinaryMask::new(mask))
}

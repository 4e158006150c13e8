//! Corpus generation: many phantom pairs on disk with a split manifest.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{
    generate_pair, ground_truth_mask, BackgroundModel, NoduleSeed, NoduleShape, PhantomSpec,
    Timepoint,
};
use crate::seeding::{rng_for, subseed};
use crate::types::{GridGeometry, GroundTruthMatch, MalignancyClass, NoduleAnnotation};
use crate::volume::io::{write_mask, write_volume};

pub const CORPUS_SCHEMA_VERSION: u32 = 1;

/// Rater-jitter model: per mask, one dilation/erosion offset drawn from
/// `[-dilate_mm, dilate_mm]` plus a smooth surface perturbation with
/// amplitude `surface_mm`. Capped at 1.5 mm, half the inter-reader diameter
/// variability the model emulates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterParams {
    pub dilate_mm: f64,
    pub surface_mm: f64,
}

impl Default for JitterParams {
    fn default() -> Self {
        Self {
            dilate_mm: 0.35,
            surface_mm: 0.1,
        }
    }
}

impl JitterParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.5).contains(&self.dilate_mm) || !(0.0..=1.5).contains(&self.surface_mm) {
            return Err(Error::InvalidConfig(
                "jitter amplitudes must lie in [0, 1.5] mm".into(),
            ));
        }
        Ok(())
    }
}

/// Sampling profile for corpus generation. The default targets a T1 diameter
/// distribution of 10.73 +/- 3.80 mm and growth of 2.89 +/- 4.35 mm, with
/// growth >= 2 mm forcing a lobulated, malignant nodule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusProfile {
    pub volume_dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub background: BackgroundModel,
    /// Inclusive range of nodules per non-empty pair.
    pub nodules_per_pair: [usize; 2],
    /// Fraction of pairs rendered without any nodule (detector negatives).
    pub empty_pair_fraction: f64,
    pub t1_diameter_mean_mm: f64,
    pub t1_diameter_sd_mm: f64,
    pub growth_mean_mm: f64,
    pub growth_sd_mm: f64,
    pub diameter_range_mm: [f64; 2],
    /// Growth at or above this threshold makes a nodule malignant.
    pub malignant_growth_threshold_mm: f64,
    pub drift_sd_mm: f64,
    pub lobulation_amp_suspicious: f64,
    pub lobulation_amp_malignant: f64,
    /// Mean nodule intensity per class (benign, suspicious, malignant), HU.
    pub intensity_mean_hu: [f64; 3],
    pub intensity_sd_hu: f64,
    pub intensity_clamp_hu: [f64; 2],
    /// Number of jittered reader masks per nodule.
    pub rater_count: usize,
    pub jitter: JitterParams,
    /// Train/val/test ratios.
    pub split_ratios: [f64; 3],
    /// Side of the per-nodule mask patches written to disk.
    pub mask_patch_side: usize,
}

impl Default for CorpusProfile {
    fn default() -> Self {
        Self {
            volume_dims: [64, 64, 64],
            spacing_mm: [1.0; 3],
            background: BackgroundModel::default(),
            nodules_per_pair: [1, 2],
            empty_pair_fraction: 0.1,
            t1_diameter_mean_mm: 10.73,
            t1_diameter_sd_mm: 3.80,
            growth_mean_mm: 2.89,
            growth_sd_mm: 4.35,
            diameter_range_mm: [5.0, 30.0],
            malignant_growth_threshold_mm: 2.0,
            drift_sd_mm: 1.0,
            lobulation_amp_suspicious: 0.06,
            lobulation_amp_malignant: 0.12,
            intensity_mean_hu: [-60.0, 0.0, 60.0],
            intensity_sd_hu: 15.0,
            intensity_clamp_hu: [-100.0, 100.0],
            rater_count: 4,
            jitter: JitterParams::default(),
            split_ratios: [0.6, 0.2, 0.2],
            mask_patch_side: 32,
        }
    }
}

impl CorpusProfile {
    pub fn validate(&self) -> Result<()> {
        if self.nodules_per_pair[0] > self.nodules_per_pair[1] || self.nodules_per_pair[1] == 0 {
            return Err(Error::InvalidConfig("bad nodules_per_pair range".into()));
        }
        if !(0.0..=1.0).contains(&self.empty_pair_fraction) {
            return Err(Error::InvalidConfig("empty_pair_fraction must be in [0,1]".into()));
        }
        let rs: f64 = self.split_ratios.iter().sum();
        if (rs - 1.0).abs() > 1e-9 || self.split_ratios.iter().any(|&r| r < 0.0) {
            return Err(Error::InvalidConfig("split ratios must be >= 0 and sum to 1".into()));
        }
        if self.diameter_range_mm[0] < 5.0 || self.diameter_range_mm[1] > 30.0 {
            return Err(Error::InvalidConfig("diameter range must stay within [5, 30] mm".into()));
        }
        self.jitter.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

/// Per-pair manifest written next to the pair's volumes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub nodules: Vec<NoduleSeed>,
    pub annotations_t1: Vec<NoduleAnnotation>,
    pub annotations_t2: Vec<NoduleAnnotation>,
    pub matches: Vec<GroundTruthMatch>,
    pub labels: Vec<MalignancyClass>,
    /// Relative paths of the per-nodule mask patches, `[t1, t2]` per nodule.
    pub mask_files: Vec<[String; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusPairEntry {
    pub dir: String,
    pub seed: u64,
    pub split: SplitKind,
    pub n_nodules: usize,
}

/// Root manifest of a generated corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub n_pairs: usize,
    pub profile: CorpusProfile,
    pub pairs: Vec<CorpusPairEntry>,
}

impl CorpusManifest {
    pub fn pairs_in(&self, split: SplitKind) -> impl Iterator<Item = (usize, &CorpusPairEntry)> {
        self.pairs
            .iter()
            .enumerate()
            .filter(move |(_, p)| p.split == split)
    }
}

fn truncated_normal(rng: &mut impl Rng, mean: f64, sd: f64, range: [f64; 2]) -> f64 {
    for _ in 0..1000 {
        let e: f64 = f64::standard_normal(rng);
        let v = mean + sd * e;
        if v >= range[0] && v <= range[1] {
            return v;
        }
    }
    mean.clamp(range[0], range[1])
}

use crate::num::Scalar as _;

/// Samples the nodule set for one pair. Retries placement until the set fits
/// without overlap; falls back to fewer nodules on persistent failure.
fn sample_nodules(profile: &CorpusProfile, rng: &mut impl Rng) -> Vec<NoduleSeed> {
    if rng.gen_bool(profile.empty_pair_fraction) {
        return Vec::new();
    }
    let mut count = rng.gen_range(profile.nodules_per_pair[0]..=profile.nodules_per_pair[1]);
    let extent = [
        profile.volume_dims[0] as f64 * profile.spacing_mm[0],
        profile.volume_dims[1] as f64 * profile.spacing_mm[1],
        profile.volume_dims[2] as f64 * profile.spacing_mm[2],
    ];
    loop {
        'attempt: for _ in 0..50 {
            let mut seeds: Vec<NoduleSeed> = Vec::with_capacity(count);
            for _ in 0..count {
                let d1 = truncated_normal(
                    rng,
                    profile.t1_diameter_mean_mm,
                    profile.t1_diameter_sd_mm,
                    profile.diameter_range_mm,
                );
                // Feasible growth range keeping d2 within bounds. Truncating a
                // normal on an asymmetric window would bias the mean, so the
                // window is symmetrized around the target growth mean.
                let g_lo = profile.diameter_range_mm[0] - d1;
                let g_hi = profile.diameter_range_mm[1] - d1;
                let mu = profile.growth_mean_mm;
                let w = (g_hi - mu).min(mu - g_lo);
                let g = if w > 0.0 {
                    truncated_normal(rng, mu, profile.growth_sd_mm, [mu - w, mu + w])
                } else {
                    rng.gen_range(g_lo..=g_hi)
                };
                let d2 = d1 + g;
                let growth = d2 - d1;
                let (class, shape) = if growth >= profile.malignant_growth_threshold_mm {
                    (MalignancyClass::Malignant, lobulated(rng, profile.lobulation_amp_malignant))
                } else if rng.gen_bool(0.5) {
                    (MalignancyClass::Benign, NoduleShape::Sphere)
                } else {
                    (
                        MalignancyClass::Suspicious,
                        lobulated(rng, profile.lobulation_amp_suspicious),
                    )
                };
                let e: f64 = f64::standard_normal(rng);
                let intensity = (profile.intensity_mean_hu[class.index()] + profile.intensity_sd_hu * e)
                    .clamp(profile.intensity_clamp_hu[0], profile.intensity_clamp_hu[1]);

                let drift = [
                    profile.drift_sd_mm * f64::standard_normal(rng),
                    profile.drift_sd_mm * f64::standard_normal(rng),
                    profile.drift_sd_mm * f64::standard_normal(rng),
                ];
                let rmax = shape.max_radius(d1.max(d2) / 2.0);
                let pad = profile.background.air_margin_mm
                    + rmax
                    + drift.iter().fold(0.0f64, |m, d| m.max(d.abs()))
                    + 1.0;
                if extent.iter().any(|&e| e <= 2.0 * pad) {
                    continue 'attempt;
                }
                let mut placed = false;
                let mut c1 = [0.0; 3];
                'placement: for _ in 0..30 {
                    for a in 0..3 {
                        c1[a] = rng.gen_range(pad..extent[a] - pad);
                    }
                    let c2 = [c1[0] + drift[0], c1[1] + drift[1], c1[2] + drift[2]];
                    for prev in &seeds {
                        for (ca, cb, ra, rb) in [
                            (c1, prev.center_mm_t1, rmax, prev.shape.max_radius(prev.diameter_mm_t1 / 2.0)),
                            (c2, prev.center_mm_t2, rmax, prev.shape.max_radius(prev.diameter_mm_t2 / 2.0)),
                        ] {
                            let dist = ((ca[0] - cb[0]).powi(2)
                                + (ca[1] - cb[1]).powi(2)
                                + (ca[2] - cb[2]).powi(2))
                            .sqrt();
                            if dist < ra + rb + 2.0 {
                                continue 'placement;
                            }
                        }
                    }
                    seeds.push(NoduleSeed {
                        center_mm_t1: c1,
                        center_mm_t2: [c1[0] + drift[0], c1[1] + drift[1], c1[2] + drift[2]],
                        diameter_mm_t1: d1,
                        diameter_mm_t2: d2,
                        shape,
                        intensity_hu: intensity,
                        class_label: class,
                    });
                    placed = true;
                    break;
                }
                if !placed {
                    continue 'attempt;
                }
            }
            return seeds;
        }
        if count > 1 {
            count -= 1;
        } else {
            // A single nodule always fits in any reasonable volume; give up
            // on this pair rather than loop forever on a degenerate profile.
            return Vec::new();
        }
    }
}

fn lobulated(rng: &mut impl Rng, amp: f64) -> NoduleShape {
    let mut coeffs = [0f64; 5];
    for c in &mut coeffs {
        *c = rng.gen_range(-amp..=amp);
    }
    NoduleShape::lobulated(coeffs)
}

/// Builds the `PhantomSpec` for pair `index` of a corpus. Pure function of
/// `(seed, index, profile)`.
pub fn pair_spec(profile: &CorpusProfile, corpus_seed: u64, index: usize) -> PhantomSpec {
    let pair_seed = subseed(corpus_seed, "pair", &[index as u64]);
    let mut rng = rng_for(pair_seed, "sample-nodules", &[]);
    let nodules = sample_nodules(profile, &mut rng);
    PhantomSpec {
        volume_dims: profile.volume_dims,
        spacing_mm: profile.spacing_mm,
        background: profile.background.clone(),
        nodules,
        seed: pair_seed,
    }
}

/// Mask patch geometry around a nodule center: `side`^3 voxels at 1 mm,
/// snapped to the volume voxel grid like patch extraction.
pub fn mask_patch_geometry(center_mm: [f64; 3], side: usize) -> GridGeometry {
    let half = (side / 2) as f64;
    let snapped = [center_mm[0].round(), center_mm[1].round(), center_mm[2].round()];
    GridGeometry {
        dims: [side; 3],
        spacing_mm: [1.0; 3],
        origin_mm: [snapped[0] - half, snapped[1] - half, snapped[2] - half],
    }
}

/// Generates `n_pairs` phantom pairs under `out_dir` with a split manifest.
/// Refuses to overwrite an existing directory unless `overwrite` is set.
pub fn generate_corpus(
    out_dir: impl AsRef<Path>,
    n_pairs: usize,
    profile: &CorpusProfile,
    seed: u64,
    overwrite: bool,
) -> Result<CorpusManifest> {
    let out_dir = out_dir.as_ref();
    if n_pairs == 0 {
        return Err(Error::InvalidConfig("n_pairs must be >= 1".into()));
    }
    profile.validate()?;
    if out_dir.exists() {
        if !overwrite {
            return Err(Error::RefusingOverwrite(out_dir.to_path_buf()));
        }
        fs::remove_dir_all(out_dir)?;
    }
    fs::create_dir_all(out_dir)?;

    // Split assignment: shuffled indices, floor allocation, remainder to test.
    let mut order: Vec<usize> = (0..n_pairs).collect();
    let mut split_rng = rng_for(seed, "split", &[]);
    order.shuffle(&mut split_rng);
    let n_train = (n_pairs as f64 * profile.split_ratios[0]).floor() as usize;
    let n_val = (n_pairs as f64 * profile.split_ratios[1]).floor() as usize;
    let mut split_of = vec![SplitKind::Test; n_pairs];
    for (rank, &idx) in order.iter().enumerate() {
        split_of[idx] = if rank < n_train {
            SplitKind::Train
        } else if rank < n_train + n_val {
            SplitKind::Val
        } else {
            SplitKind::Test
        };
    }

    let mut entries = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let spec = pair_spec(profile, seed, i);
        let dir_name = format!("pair_{i:04}");
        let pair_dir = out_dir.join(&dir_name);
        write_pair(&pair_dir, &spec, profile)?;
        entries.push(CorpusPairEntry {
            dir: dir_name,
            seed: spec.seed,
            split: split_of[i],
            n_nodules: spec.nodules.len(),
        });
    }

    let manifest = CorpusManifest {
        schema_version: CORPUS_SCHEMA_VERSION,
        seed,
        n_pairs,
        profile: profile.clone(),
        pairs: entries,
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    fs::write(out_dir.join("manifest.json"), json)?;
    Ok(manifest)
}

fn write_pair(pair_dir: &Path, spec: &PhantomSpec, profile: &CorpusProfile) -> Result<()> {
    fs::create_dir_all(pair_dir)?;
    let pair = generate_pair::<f32>(spec)?;
    write_volume(pair_dir.join("t1.nii"), &pair.t1)?;
    write_volume(pair_dir.join("t2.nii"), &pair.t2)?;
    let masks_dir = pair_dir.join("masks");
    fs::create_dir_all(&masks_dir)?;
    let mut mask_files = Vec::new();
    for (j, n) in spec.nodules.iter().enumerate() {
        let mut files = [String::new(), String::new()];
        for (slot, tp) in [(0usize, Timepoint::T1), (1, Timepoint::T2)] {
            let geom = mask_patch_geometry(n.center_mm(tp), profile.mask_patch_side);
            let mask = ground_truth_mask(n, tp, &geom)?;
            let rel = format!("masks/nodule{j}_{}.nii", if slot == 0 { "t1" } else { "t2" });
            write_mask(pair_dir.join(&rel), mask.voxels(), geom.spacing_mm, geom.origin_mm)?;
            files[slot] = rel;
        }
        mask_files.push(files);
    }
    let manifest = PairManifest {
        schema_version: CORPUS_SCHEMA_VERSION,
        seed: spec.seed,
        nodules: spec.nodules.clone(),
        annotations_t1: pair.annotations_t1,
        annotations_t2: pair.annotations_t2,
        matches: pair.matches,
        labels: spec.nodules.iter().map(|n| n.class_label).collect(),
        mask_files,
    };
    fs::write(pair_dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_corpus_manifest(dir: impl AsRef<Path>) -> Result<CorpusManifest> {
    let path = dir.as_ref().join("manifest.json");
    let manifest: CorpusManifest = serde_json::from_reader(fs::File::open(&path)?)?;
    if manifest.schema_version != CORPUS_SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "corpus manifest schema {} unsupported (expected {})",
            manifest.schema_version, CORPUS_SCHEMA_VERSION
        )));
    }
    Ok(manifest)
}

pub fn load_pair_manifest(pair_dir: impl AsRef<Path>) -> Result<PairManifest> {
    let path = pair_dir.as_ref().join("manifest.json");
    let manifest: PairManifest = serde_json::from_reader(fs::File::open(&path)?)?;
    if manifest.schema_version != CORPUS_SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "pair manifest schema {} unsupported (expected {})",
            manifest.schema_version, CORPUS_SCHEMA_VERSION
        )));
    }
    Ok(manifest)
}

/// Absolute path of a pair directory.
pub fn pair_dir(corpus_dir: impl AsRef<Path>, entry: &CorpusPairEntry) -> PathBuf {
    corpus_dir.as_ref().join(&entry.dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn corpus_statistics_track_profile_targets() {
        let profile = CorpusProfile::default();
        let mut d1 = Vec::new();
        let mut growth = Vec::new();
        for i in 0..120 {
            let spec = pair_spec(&profile, 314, i);
            for n in &spec.nodules {
                d1.push(n.diameter_mm_t1);
                growth.push(n.growth_mm());
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let md = mean(&d1);
        let mg = mean(&growth);
        assert!(
            (md - profile.t1_diameter_mean_mm).abs() / profile.t1_diameter_mean_mm < 0.15,
            "T1 diameter mean {md}"
        );
        assert!(
            (mg - profile.growth_mean_mm).abs() / profile.growth_mean_mm < 0.15,
            "growth mean {mg}"
        );
        assert!(md > 9.1 && md < 12.3, "diameter mean out of band: {md}");
    }

    #[test]
    fn malignant_rule_holds_exactly() {
        let profile = CorpusProfile::default();
        for i in 0..80 {
            let spec = pair_spec(&profile, 272, i);
            for n in &spec.nodules {
                let malignant = n.class_label == MalignancyClass::Malignant;
                let big_growth = n.growth_mm() >= profile.malignant_growth_threshold_mm;
                assert_eq!(malignant, big_growth);
                if malignant {
                    assert!(matches!(n.shape, NoduleShape::Lobulated { .. }));
                }
                if n.class_label == MalignancyClass::Benign {
                    assert!(matches!(n.shape, NoduleShape::Sphere));
                }
            }
        }
    }

    #[test]
    fn single_pair_corpus_lands_in_test_split() {
        let dir = tempdir().unwrap();
        let out = dir.path().join("corpus");
        let m = generate_corpus(&out, 1, &CorpusProfile::default(), 5, false).unwrap();
        assert_eq!(m.pairs.len(), 1);
        assert_eq!(m.pairs[0].split, SplitKind::Test);
    }

    #[test]
    fn refuses_overwrite_without_flag() {
        let dir = tempdir().unwrap();
        let out = dir.path().join("corpus");
        generate_corpus(&out, 1, &CorpusProfile::default(), 5, false).unwrap();
        assert!(matches!(
            generate_corpus(&out, 1, &CorpusProfile::default(), 5, false),
            Err(Error::RefusingOverwrite(_))
        ));
        generate_corpus(&out, 1, &CorpusProfile::default(), 5, true).unwrap();
    }

    #[test]
    fn corpus_is_byte_reproducible() {
        let dir = tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        generate_corpus(&a, 3, &CorpusProfile::default(), 77, false).unwrap();
        generate_corpus(&b, 3, &CorpusProfile::default(), 77, false).unwrap();
        assert_dirs_equal(&a, &b);
    }

    fn assert_dirs_equal(a: &Path, b: &Path) {
        let mut entries_a: Vec<_> = walk(a);
        let mut entries_b: Vec<_> = walk(b);
        entries_a.sort();
        entries_b.sort();
        let rel = |root: &Path, p: &Path| p.strip_prefix(root).unwrap().to_path_buf();
        let rels_a: Vec<_> = entries_a.iter().map(|p| rel(a, p)).collect();
        let rels_b: Vec<_> = entries_b.iter().map(|p| rel(b, p)).collect();
        assert_eq!(rels_a, rels_b);
        for (pa, pb) in entries_a.iter().zip(entries_b.iter()) {
            let ba = fs::read(pa).unwrap();
            let bb = fs::read(pb).unwrap();
            assert_eq!(ba, bb, "files differ: {pa:?} vs {pb:?}");
        }
    }

    fn walk(root: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push(p);
                }
            }
        }
        out
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempdir().unwrap();
        let out = dir.path().join("corpus");
        let written = generate_corpus(&out, 2, &CorpusProfile::default(), 11, false).unwrap();
        let read = load_corpus_manifest(&out).unwrap();
        assert_eq!(read.n_pairs, written.n_pairs);
        assert_eq!(read.seed, written.seed);
        for entry in &read.pairs {
            let pm = load_pair_manifest(out.join(&entry.dir)).unwrap();
            assert_eq!(pm.nodules.len(), entry.n_nodules);
            assert_eq!(pm.annotations_t1.len(), entry.n_nodules);
            for files in &pm.mask_files {
                for f in files {
                    assert!(out.join(&entry.dir).join(f).exists());
                }
            }
        }
    }
}

//! Detector training loop with deterministic, resumable state.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array3, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_split, open_corpus, LoadedPair};
use crate::detect::loss::{detection_loss_graph, split_head};
use crate::detect::{AnchorLayout, DetectionTargets, DetectorConfig, DetectorModel};
use crate::error::{Error, Result};
use crate::nn::{
    build_param_slots, collect_arrays, load_arrays_into, load_checkpoint, save_checkpoint,
    write_param_slots, Adam, CheckpointData, Graph,
};
use crate::num::Scalar;
use crate::phantom::{SplitKind, Timepoint};
use crate::seeding::rng_for;
use crate::types::NoduleAnnotation;
use crate::volume::{flip_axis, rot90_z, zoom_patch, Axis3, GridTransform, VolumeGrid};

pub use crate::detect::build_detector;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorTrainReport {
    pub epoch_losses: Vec<f64>,
    pub param_count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainerMeta {
    config: DetectorConfig,
    next_epoch: usize,
    step_count: u64,
    epoch_losses: Vec<f64>,
}

/// Deterministic, resumable detector trainer. All stochastic choices derive
/// from `(config.seed, epoch, sample)`, so an interrupted run resumed from a
/// trainer checkpoint reproduces the uninterrupted run bit for bit.
pub struct DetectorTrainer<F: Scalar> {
    pub model: DetectorModel<F>,
    adam: Adam<F>,
    next_epoch: usize,
    epoch_losses: Vec<f64>,
}

struct SampleSpec {
    pair: usize,
    tp: Timepoint,
    ann: Option<usize>,
}

impl<F: Scalar> DetectorTrainer<F> {
    pub fn new(config: &DetectorConfig) -> Result<Self> {
        Ok(Self {
            model: build_detector(config)?,
            adam: Adam::new(),
            next_epoch: 0,
            epoch_losses: Vec::new(),
        })
    }

    pub fn from_model(model: DetectorModel<F>) -> Self {
        Self {
            model,
            adam: Adam::new(),
            next_epoch: 0,
            epoch_losses: Vec::new(),
        }
    }

    pub fn next_epoch(&self) -> usize {
        self.next_epoch
    }

    /// Trains epochs `[next_epoch, until_epoch)` on the train split.
    pub fn run(&mut self, corpus_dir: impl AsRef<Path>, until_epoch: usize) -> Result<DetectorTrainReport> {
        let manifest = open_corpus(&corpus_dir)?;
        let pairs: Vec<LoadedPair<F>> = load_split(&corpus_dir, &manifest, SplitKind::Train)?;
        if pairs.is_empty() {
            return Err(Error::EmptyInput("corpus has no training pairs".into()));
        }
        let samples = build_samples(&pairs);
        if samples.is_empty() {
            return Err(Error::EmptyInput("training split has no usable volumes".into()));
        }
        let seed = self.model.config.seed;
        let cfg = self.model.config.clone();

        for epoch in self.next_epoch..until_epoch {
            let mut order: Vec<usize> = (0..samples.len()).collect();
            order.shuffle(&mut rng_for(seed, "det-shuffle", &[epoch as u64]));
            let lr = cfg.lr.at_epoch(epoch);
            let mut epoch_loss = 0.0;
            let mut batches = 0usize;
            for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let mut g = Graph::<F>::new(true, rng_for(seed, "det-graph", &[epoch as u64, step as u64]));
                let bound = self.model.bind(&mut g);
                let mut heads = Vec::new();
                let mut targets = Vec::new();
                for &si in chunk {
                    let s = &samples[si];
                    let (patch, anns) =
                        training_patch(&pairs[s.pair], s, &cfg, seed, epoch as u64, si as u64);
                    let layout = AnchorLayout::new(&cfg, cfg.patch_side);
                    targets.push(layout.assign(&anns, cfg.pos_ratio_bounds, cfg.ignore_margin));
                    let flat: Vec<F> = patch.iter().copied().collect();
                    let x = g.constant(
                        ArrayD::from_shape_vec(
                            IxDyn(&[1, cfg.patch_side, cfg.patch_side, cfg.patch_side]),
                            flat,
                        )
                        .unwrap(),
                    );
                    let head = bound.forward(&mut g, x);
                    heads.push(split_head(&mut g, head, cfg.anchors_mm.len()));
                }
                let target_refs: Vec<&DetectionTargets> = targets.iter().collect();
                let (loss, value) = detection_loss_graph(&mut g, &heads, &target_refs, cfg.ohem_factor);
                g.backward(loss);
                let grads = g.param_grads();
                self.apply_step(&grads, lr);
                epoch_loss += value.total;
                batches += 1;
            }
            let mean = epoch_loss / batches.max(1) as f64;
            log::info!("detector epoch {epoch}: loss {mean:.5} (lr {lr:.2e})");
            self.epoch_losses.push(mean);
            self.next_epoch = epoch + 1;
        }

        Ok(DetectorTrainReport {
            epoch_losses: self.epoch_losses.clone(),
            param_count: self.model.param_count(),
        })
    }

    fn apply_step(&mut self, grads: &BTreeMap<String, ArrayD<F>>, lr: f64) {
        let mut slots = build_param_slots(|v| self.model.visit(v));
        self.adam.step(&mut slots, grads, lr);
        write_param_slots(slots, |v| self.model.visit(v));
    }

    /// Persists model, optimizer state and epoch counter for resumption.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = TrainerMeta {
            config: self.model.config.clone(),
            next_epoch: self.next_epoch,
            step_count: self.adam.step_count,
            epoch_losses: self.epoch_losses.clone(),
        };
        let mut data = CheckpointData::<F>::new(
            "detector-trainer",
            self.model.config.seed,
            serde_json::to_string(&meta)?,
        );
        let mut model = self.model.clone();
        data.arrays = collect_arrays(|v| model.visit(v));
        data.arrays.extend(self.adam.export_state());
        save_checkpoint(path, &data)
    }

    pub fn resume(path: impl AsRef<Path>) -> Result<Self> {
        let data = load_checkpoint::<F>(path, "detector-trainer")?;
        let meta: TrainerMeta = data.parse_config()?;
        let mut model = build_detector::<F>(&meta.config)?;
        load_arrays_into(&data.arrays, |v| model.visit(v))?;
        let mut adam = Adam::new();
        adam.import_state(&data.arrays, meta.step_count);
        Ok(Self {
            model,
            adam,
            next_epoch: meta.next_epoch,
            epoch_losses: meta.epoch_losses,
        })
    }
}

/// Trains a detector for its configured number of epochs.
pub fn train_detector<F: Scalar>(
    model: &mut DetectorModel<F>,
    corpus_dir: impl AsRef<Path>,
) -> Result<DetectorTrainReport> {
    let mut trainer = DetectorTrainer::from_model(model.clone());
    let epochs = model.config.epochs;
    let report = trainer.run(corpus_dir, epochs)?;
    *model = trainer.model;
    Ok(report)
}

pub fn save_detector<F: Scalar>(model: &DetectorModel<F>, path: impl AsRef<Path>) -> Result<()> {
    let mut data = CheckpointData::<F>::new(
        "detector",
        model.config.seed,
        serde_json::to_string(&model.config)?,
    );
    let mut m = model.clone();
    data.arrays = collect_arrays(|v| m.visit(v));
    save_checkpoint(path, &data)
}

pub fn load_detector<F: Scalar>(path: impl AsRef<Path>) -> Result<DetectorModel<F>> {
    let data = load_checkpoint::<F>(path, "detector")?;
    let config: DetectorConfig = data.parse_config()?;
    let mut model = build_detector::<F>(&config)?;
    load_arrays_into(&data.arrays, |v| model.visit(v))?;
    Ok(model)
}

fn build_samples<F: Scalar>(pairs: &[LoadedPair<F>]) -> Vec<SampleSpec> {
    let mut out = Vec::new();
    for (pi, pair) in pairs.iter().enumerate() {
        for tp in [Timepoint::T1, Timepoint::T2] {
            let anns = pair.annotations(tp);
            if anns.is_empty() {
                out.push(SampleSpec {
                    pair: pi,
                    tp,
                    ann: None,
                });
            } else {
                for ai in 0..anns.len() {
                    out.push(SampleSpec {
                        pair: pi,
                        tp,
                        ann: Some(ai),
                    });
                }
            }
        }
    }
    out
}

/// Crops a training patch (jittered around the target annotation, or random
/// for negatives), applies augmentation, and returns the patch with its
/// patch-local annotations.
fn training_patch<F: Scalar>(
    pair: &LoadedPair<F>,
    sample: &SampleSpec,
    cfg: &DetectorConfig,
    seed: u64,
    epoch: u64,
    sample_idx: u64,
) -> (Array3<F>, Vec<NoduleAnnotation>) {
    let mut rng = rng_for(seed, "det-sample", &[epoch, sample_idx]);
    let volume = pair.volume(sample.tp);
    let dims = volume.dims();
    let side = cfg.patch_side;
    let max_origin = [
        dims[0].saturating_sub(side),
        dims[1].saturating_sub(side),
        dims[2].saturating_sub(side),
    ];
    let origin: [usize; 3] = match sample.ann {
        Some(ai) => {
            let ann = &pair.annotations(sample.tp)[ai];
            let v = volume.mm_to_voxel(ann.center_mm);
            let mut o = [0usize; 3];
            for a in 0..3 {
                let jitter: f64 = rng.gen_range(-8.0..=8.0);
                let want = v[a] - side as f64 / 2.0 + jitter;
                o[a] = want.round().clamp(0.0, max_origin[a] as f64) as usize;
            }
            o
        }
        None => [
            rng.gen_range(0..=max_origin[0]),
            rng.gen_range(0..=max_origin[1]),
            rng.gen_range(0..=max_origin[2]),
        ],
    };

    let mut patch = crop(volume, origin, side);
    // Patch-local annotation coordinates in voxel units (1 mm spacing).
    let vol_origin = volume.origin_mm();
    let mut anns: Vec<NoduleAnnotation> = pair
        .annotations(sample.tp)
        .iter()
        .filter_map(|ann| {
            let local = [
                ann.center_mm[0] - vol_origin[0] - origin[0] as f64,
                ann.center_mm[1] - vol_origin[1] - origin[1] as f64,
                ann.center_mm[2] - vol_origin[2] - origin[2] as f64,
            ];
            if local.iter().all(|&c| c >= 0.0 && c < side as f64) {
                Some(NoduleAnnotation {
                    center_mm: local,
                    ..ann.clone()
                })
            } else {
                None
            }
        })
        .collect();

    // Joint augmentation of patch and annotations.
    let mut tf = GridTransform::identity();
    if cfg.augment.rotation {
        let k = rng.gen_range(0..4usize);
        patch = rot90_z(&patch, k);
        tf = tf.then(&GridTransform::rot90_z(k, side));
    }
    if cfg.augment.flip {
        for axis in [Axis3::X, Axis3::Y, Axis3::Z] {
            if rng.gen_bool(0.5) {
                patch = flip_axis(&patch, axis);
                tf = tf.then(&GridTransform::flip(axis, side));
            }
        }
    }
    if cfg.augment.zoom {
        let factor = rng.gen_range(0.9..1.1);
        patch = zoom_patch(&patch, factor);
        tf = tf.then(&GridTransform::zoom(factor, side));
    }
    for ann in &mut anns {
        ann.center_mm = tf.apply_point(ann.center_mm);
        ann.diameter_mm *= tf.scale;
    }
    // Drop annotations pushed outside by the transform.
    anns.retain(|a| a.center_mm.iter().all(|&c| c >= 0.0 && c < side as f64));

    (patch, anns)
}

fn crop<F: Scalar>(v: &VolumeGrid<F>, origin: [usize; 3], side: usize) -> Array3<F> {
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

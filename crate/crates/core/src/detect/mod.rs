//! Nodule detection: a 3D region-proposal network with a U-Net-like
//! encoder-decoder backbone. Per anchor cell and anchor scale the head emits
//! an objectness logit and offsets `(dx, dy, dz, dd)`; training uses squared
//! error on the offsets plus binary cross-entropy with online hard example
//! mining over the negatives.

mod anchors;
mod infer;
mod loss;
mod train;

pub use anchors::{AnchorLayout, DetectionTargets};
pub use infer::{detect, hit_test, sphere_iou, tile_origins};
pub use loss::{detection_loss, DetectionLossValue, DetectionPrediction};
pub use train::{load_detector, save_detector, train_detector, DetectorTrainReport, DetectorTrainer};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{BoundConv, Conv3dLayer, ParamKind, ParamVisitor};
use crate::nn::{Graph, LrSchedule, VarId};
use crate::num::Scalar;
use crate::seeding::rng_for;

/// Augmentations applied jointly to patches and their annotations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentFlags {
    pub rotation: bool,
    pub flip: bool,
    pub zoom: bool,
}

impl Default for AugmentFlags {
    fn default() -> Self {
        Self {
            rotation: true,
            flip: true,
            zoom: true,
        }
    }
}

/// Detector configuration. [`DetectorConfig::default`] documents the
/// full-scale recipe (128-voxel patches, step-decayed learning rate, 450
/// epochs); [`DetectorConfig::desk`] is the small profile trained and
/// evaluated in this repository's test suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub patch_side: usize,
    /// Anchor diameters in mm, strictly increasing.
    pub anchors_mm: Vec<f64>,
    /// Channel widths of the four encoder stages.
    pub widths: [usize; 4],
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub epochs: usize,
    /// Negatives kept by hard example mining: `ohem_factor * batch_size`.
    pub ohem_factor: usize,
    pub augment: AugmentFlags,
    /// Positive anchors additionally require `gt_diameter / anchor_diameter`
    /// within these bounds.
    pub pos_ratio_bounds: [f64; 2],
    /// Anchors within `ignore_margin * radius` of a ground-truth center that
    /// are not positive become ignore.
    pub ignore_margin: f64,
    pub nms_iou: f64,
    pub pre_nms_per_tile: usize,
    pub tile_overlap: usize,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            patch_side: 128,
            anchors_mm: vec![5.0, 10.0, 20.0, 30.0],
            widths: [8, 16, 32, 48],
            batch_size: 8,
            lr: LrSchedule::StepDecay {
                initial: 0.1,
                factor: 0.001,
                every_epochs: 100,
            },
            epochs: 450,
            ohem_factor: 20,
            augment: AugmentFlags::default(),
            pos_ratio_bounds: [0.5, 2.0],
            ignore_margin: 1.5,
            nms_iou: 0.1,
            pre_nms_per_tile: 256,
            tile_overlap: 32,
            seed: 0,
        }
    }
}

impl DetectorConfig {
    /// Small-profile recipe for commodity hardware and the synthetic corpus.
    pub fn desk(seed: u64) -> Self {
        Self {
            patch_side: 64,
            widths: [4, 8, 16, 24],
            lr: LrSchedule::Constant { lr: 1e-3 },
            epochs: 14,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.anchors_mm.is_empty() {
            return Err(Error::InvalidConfig("anchor list must not be empty".into()));
        }
        if self.anchors_mm.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("anchors must be strictly increasing".into()));
        }
        if self.patch_side % 8 != 0 || self.patch_side == 0 {
            return Err(Error::InvalidConfig("patch side must be a positive multiple of 8".into()));
        }
        if self.ohem_factor < 1 {
            return Err(Error::InvalidConfig("ohem_factor must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch size must be >= 1".into()));
        }
        if self.pos_ratio_bounds[0] >= self.pos_ratio_bounds[1] {
            return Err(Error::InvalidConfig("bad positive ratio bounds".into()));
        }
        Ok(())
    }

    /// Head stride relative to the input patch.
    pub fn head_stride(&self) -> usize {
        2
    }

    pub fn head_grid(&self, input_side: usize) -> usize {
        input_side / self.head_stride()
    }

    pub fn head_channels(&self) -> usize {
        self.anchors_mm.len() * 5
    }
}

/// The detection network. Encoder at strides 1/2/4/8 with two decoder stages
/// carrying skip connections back to stride 2, where the anchor head sits.
#[derive(Debug, Clone)]
pub struct DetectorModel<F: Scalar> {
    pub config: DetectorConfig,
    enc0: Conv3dLayer<F>,
    enc1: Conv3dLayer<F>,
    enc2: Conv3dLayer<F>,
    enc3: Conv3dLayer<F>,
    mix2: Conv3dLayer<F>,
    dec2: Conv3dLayer<F>,
    mix1: Conv3dLayer<F>,
    head: Conv3dLayer<F>,
}

/// Builds a detector with seeded parameter initialization. Identical seeds
/// give identical initial parameters.
pub fn build_detector<F: Scalar>(config: &DetectorConfig) -> Result<DetectorModel<F>> {
    config.validate()?;
    let [c0, c1, c2, c3] = config.widths;
    let a5 = config.head_channels();
    let mut rng = rng_for(config.seed, "detector-init", &[]);
    let model = DetectorModel {
        config: config.clone(),
        enc0: Conv3dLayer::init(&mut rng, 1, c0, 3, 1, 1),
        enc1: Conv3dLayer::init(&mut rng, c0, c1, 3, 2, 1),
        enc2: Conv3dLayer::init(&mut rng, c1, c2, 3, 2, 1),
        enc3: Conv3dLayer::init(&mut rng, c2, c3, 3, 2, 1),
        mix2: Conv3dLayer::init(&mut rng, c3 + c2, c2, 1, 1, 0),
        dec2: Conv3dLayer::init(&mut rng, c2, c2, 3, 1, 1),
        mix1: Conv3dLayer::init(&mut rng, c2 + c1, c1, 1, 1, 0),
        head: Conv3dLayer::init(&mut rng, c1, a5, 1, 1, 0),
    };
    log::info!(
        "built detector: {} parameters, head grid {}^3 at stride {}",
        model.param_count(),
        config.head_grid(config.patch_side),
        config.head_stride()
    );
    Ok(model)
}

impl<F: Scalar> DetectorModel<F> {
    pub fn param_count(&self) -> usize {
        let mut n = 0usize;
        let mut clone = self.clone();
        clone.visit(&mut |_: &str, kind: ParamKind, v: &mut ndarray::ArrayD<F>| {
            if kind == ParamKind::Trainable {
                n += v.len();
            }
        });
        n
    }

    pub fn visit(&mut self, v: &mut dyn ParamVisitor<F>) {
        self.enc0.visit("enc0", v);
        self.enc1.visit("enc1", v);
        self.enc2.visit("enc2", v);
        self.enc3.visit("enc3", v);
        self.mix2.visit("mix2", v);
        self.dec2.visit("dec2", v);
        self.mix1.visit("mix1", v);
        self.head.visit("head", v);
    }

    pub fn bind(&self, g: &mut Graph<F>) -> BoundDetector {
        BoundDetector {
            enc0: self.enc0.bind(g, "enc0"),
            enc1: self.enc1.bind(g, "enc1"),
            enc2: self.enc2.bind(g, "enc2"),
            enc3: self.enc3.bind(g, "enc3"),
            mix2: self.mix2.bind(g, "mix2"),
            dec2: self.dec2.bind(g, "dec2"),
            mix1: self.mix1.bind(g, "mix1"),
            head: self.head.bind(g, "head"),
        }
    }

    /// Binds all weights as constants for inference.
    pub fn bind_frozen(&self, g: &mut Graph<F>) -> BoundDetector {
        BoundDetector {
            enc0: self.enc0.bind_frozen(g),
            enc1: self.enc1.bind_frozen(g),
            enc2: self.enc2.bind_frozen(g),
            enc3: self.enc3.bind_frozen(g),
            mix2: self.mix2.bind_frozen(g),
            dec2: self.dec2.bind_frozen(g),
            mix1: self.mix1.bind_frozen(g),
            head: self.head.bind_frozen(g),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundDetector {
    enc0: BoundConv,
    enc1: BoundConv,
    enc2: BoundConv,
    enc3: BoundConv,
    mix2: BoundConv,
    dec2: BoundConv,
    mix1: BoundConv,
    head: BoundConv,
}

impl BoundDetector {
    /// Input `[1, S, S, S]` (S a multiple of 8), output `[A*5, S/2, S/2, S/2]`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, x: VarId) -> VarId {
        let e0 = self.enc0.apply(g, x);
        let e0 = g.relu(e0);
        let e1 = self.enc1.apply(g, e0);
        let e1 = g.relu(e1);
        let e2 = self.enc2.apply(g, e1);
        let e2 = g.relu(e2);
        let e3 = self.enc3.apply(g, e2);
        let e3 = g.relu(e3);

        let up2 = g.nearest_up2(e3);
        let cat2 = g.concat(0, &[up2, e2]);
        let m2 = self.mix2.apply(g, cat2);
        let m2 = g.relu(m2);
        let d2 = self.dec2.apply(g, m2);
        let d2 = g.relu(d2);

        let up1 = g.nearest_up2(d2);
        let cat1 = g.concat(0, &[up1, e1]);
        let m1 = self.mix1.apply(g, cat1);
        let m1 = g.relu(m1);
        self.head.apply(g, m1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::collect_arrays;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn head_shape_follows_stride_arithmetic() {
        let mut cfg = DetectorConfig::desk(3);
        cfg.patch_side = 32;
        let model = build_detector::<f32>(&cfg).unwrap();
        let mut g = Graph::new(false, rng_for(0, "t", &[]));
        let x = g.constant(ArrayD::zeros(IxDyn(&[1, 32, 32, 32])));
        let bound = model.bind_frozen(&mut g);
        let head = bound.forward(&mut g, x);
        assert_eq!(g.shape(head), &[cfg.head_channels(), 16, 16, 16]);
    }

    #[test]
    fn accepts_128_cube_input() {
        let mut cfg = DetectorConfig::desk(3);
        cfg.widths = [2, 2, 2, 2];
        cfg.patch_side = 128;
        let model = build_detector::<f32>(&cfg).unwrap();
        let mut g = Graph::new(false, rng_for(0, "t", &[]));
        let x = g.constant(ArrayD::zeros(IxDyn(&[1, 128, 128, 128])));
        let head = model.bind_frozen(&mut g).forward(&mut g, x);
        assert_eq!(g.shape(head), &[20, 64, 64, 64]);
    }

    #[test]
    fn same_seed_same_initial_parameters() {
        let cfg = DetectorConfig::desk(11);
        let mut a = build_detector::<f32>(&cfg).unwrap();
        let mut b = build_detector::<f32>(&cfg).unwrap();
        let arrays_a = collect_arrays(|v| a.visit(v));
        let arrays_b = collect_arrays(|v| b.visit(v));
        assert_eq!(arrays_a, arrays_b);
        let cfg2 = DetectorConfig::desk(12);
        let mut c = build_detector::<f32>(&cfg2).unwrap();
        let arrays_c = collect_arrays(|v| c.visit(v));
        assert_ne!(arrays_a, arrays_c);
    }

    #[test]
    fn all_zero_input_gives_finite_outputs() {
        let mut cfg = DetectorConfig::desk(5);
        cfg.patch_side = 16;
        let model = build_detector::<f32>(&cfg).unwrap();
        let mut g = Graph::new(false, rng_for(0, "t", &[]));
        let x = g.constant(ArrayD::zeros(IxDyn(&[1, 16, 16, 16])));
        let head = model.bind_frozen(&mut g).forward(&mut g, x);
        assert!(g.value(head).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn empty_anchor_list_is_a_config_error() {
        let mut cfg = DetectorConfig::desk(5);
        cfg.anchors_mm.clear();
        assert!(matches!(
            build_detector::<f32>(&cfg),
            Err(Error::InvalidConfig(_))
        ));
    }
}

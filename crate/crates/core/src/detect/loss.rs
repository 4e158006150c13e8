//! Detection loss: squared-error offset regression over positive anchors
//! plus binary cross-entropy over positives and hard-mined negatives.

use ndarray::{ArrayD, IxDyn};

use crate::detect::DetectionTargets;
use crate::error::Result;
use crate::nn::{Graph, VarId};
use crate::num::Scalar;
use crate::seeding::rng_for;

/// Raw head outputs reorganized per anchor, as plain arrays.
#[derive(Debug, Clone)]
pub struct DetectionPrediction<F: Scalar> {
    /// Objectness logits, flat anchor order (see [`DetectionTargets`]).
    pub logits: Vec<F>,
    /// Offset predictions per component, flat anchor order.
    pub reg: [Vec<F>; 4],
}

/// Loss value with its term breakdown.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionLossValue {
    pub total: f64,
    pub regression: f64,
    pub objectness: f64,
    pub n_positive: usize,
    pub n_selected_negative: usize,
}

/// Per-item graph handles for the head outputs.
pub(crate) struct HeadVars {
    pub logits_flat: VarId,
    pub reg_flat: [VarId; 4],
}

/// Splits the `[A*5, G, G, G]` head tensor into flat per-anchor vectors.
pub(crate) fn split_head<F: Scalar>(g: &mut Graph<F>, head: VarId, n_anchor_scales: usize) -> HeadVars {
    let mut logit_parts = Vec::with_capacity(n_anchor_scales);
    let mut reg_parts: [Vec<VarId>; 4] = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    for a in 0..n_anchor_scales {
        let lg = g.narrow(head, 0, a * 5, 1);
        logit_parts.push(g.flatten(lg));
        for c in 0..4 {
            let rg = g.narrow(head, 0, a * 5 + 1 + c, 1);
            reg_parts[c].push(g.flatten(rg));
        }
    }
    HeadVars {
        logits_flat: g.concat(0, &logit_parts),
        reg_flat: [
            g.concat(0, &reg_parts[0]),
            g.concat(0, &reg_parts[1]),
            g.concat(0, &reg_parts[2]),
            g.concat(0, &reg_parts[3]),
        ],
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-(x.abs())).exp().ln_1p()
}

/// Selects the hard negatives for a batch: the `budget` highest-loss negative
/// anchors across all items, with a fixed total order so that growing the
/// budget only ever grows the selection.
fn select_hard_negatives<F: Scalar>(
    logits: &[Vec<F>],
    targets: &[&DetectionTargets],
    budget: usize,
) -> Vec<Vec<usize>> {
    let mut scored: Vec<(f64, usize, usize)> = Vec::new();
    for (item, t) in targets.iter().enumerate() {
        for idx in t.negatives() {
            let loss = softplus(logits[item][idx].into_f64());
            scored.push((loss, item, idx));
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![Vec::new(); targets.len()];
    for &(_, item, idx) in scored.iter().take(budget) {
        out[item].push(idx);
    }
    for sel in &mut out {
        sel.sort_unstable();
    }
    out
}

/// Builds the loss subgraph for a batch of head outputs.
///
/// `loss = mean over positives of sum of squared offset errors (4 components)
///        + mean BCE over {positives} ∪ {ohem_factor * batch_size hardest
///        negatives}`. With no anchors to score at all the loss is zero.
pub(crate) fn detection_loss_graph<F: Scalar>(
    g: &mut Graph<F>,
    heads: &[HeadVars],
    targets: &[&DetectionTargets],
    ohem_factor: usize,
) -> (VarId, DetectionLossValue) {
    assert_eq!(heads.len(), targets.len());
    let batch = heads.len();
    let budget = ohem_factor * batch;

    let logit_values: Vec<Vec<F>> = heads
        .iter()
        .map(|h| g.value(h.logits_flat).iter().copied().collect())
        .collect();
    let selected_negs = select_hard_negatives(&logit_values, targets, budget);

    let mut pos_pred_parts: [Vec<VarId>; 4] = Default::default();
    let mut pos_target_parts: [Vec<F>; 4] = Default::default();
    let mut bce_pred_parts: Vec<VarId> = Vec::new();
    let mut bce_targets: Vec<F> = Vec::new();
    let mut n_pos = 0usize;
    let mut n_neg_sel = 0usize;

    for (item, t) in targets.iter().enumerate() {
        let positives = t.positives();
        n_pos += positives.len();
        if !positives.is_empty() {
            for c in 0..4 {
                let picked = g.gather1d(heads[item].reg_flat[c], positives.clone());
                pos_pred_parts[c].push(picked);
                pos_target_parts[c].extend(positives.iter().map(|&i| F::of_f64(t.reg[i][c])));
            }
            let pos_logits = g.gather1d(heads[item].logits_flat, positives.clone());
            bce_pred_parts.push(pos_logits);
            bce_targets.extend(std::iter::repeat(F::one()).take(positives.len()));
        }
        let sel = &selected_negs[item];
        n_neg_sel += sel.len();
        if !sel.is_empty() {
            let neg_logits = g.gather1d(heads[item].logits_flat, sel.clone());
            bce_pred_parts.push(neg_logits);
            bce_targets.extend(std::iter::repeat(F::zero()).take(sel.len()));
        }
    }

    let mut total: Option<VarId> = None;
    let mut reg_value = 0.0f64;

    if n_pos > 0 {
        let mut reg_loss: Option<VarId> = None;
        for c in 0..4 {
            let preds = g.concat(0, &pos_pred_parts[c]);
            let tarr = ArrayD::from_shape_vec(IxDyn(&[n_pos]), pos_target_parts[c].clone()).unwrap();
            let tconst = g.constant(tarr);
            let diff = g.sub(preds, tconst);
            let sq = g.mul(diff, diff);
            let mse = g.mean_all(sq);
            reg_loss = Some(match reg_loss {
                None => mse,
                Some(acc) => g.add(acc, mse),
            });
        }
        let reg_loss = reg_loss.unwrap();
        reg_value = g.scalar_value(reg_loss);
        total = Some(reg_loss);
    }

    let mut obj_value = 0.0f64;
    if !bce_targets.is_empty() {
        let preds = g.concat(0, &bce_pred_parts);
        let tarr = ArrayD::from_shape_vec(IxDyn(&[bce_targets.len()]), bce_targets.clone()).unwrap();
        let losses = g.bce_with_logits(preds, tarr);
        let bce = g.mean_all(losses);
        obj_value = g.scalar_value(bce);
        total = Some(match total {
            None => bce,
            Some(acc) => g.add(acc, bce),
        });
    }

    let total = total.unwrap_or_else(|| {
        log::warn!("detection loss: no positive and no negative anchors; defining loss as zero");
        g.constant(ArrayD::zeros(IxDyn(&[])))
    });

    let value = DetectionLossValue {
        total: g.scalar_value(total),
        regression: reg_value,
        objectness: obj_value,
        n_positive: n_pos,
        n_selected_negative: n_neg_sel,
    };
    (total, value)
}

/// Scalar detection loss over a batch of plain prediction arrays.
pub fn detection_loss<F: Scalar>(
    preds: &[DetectionPrediction<F>],
    targets: &[&DetectionTargets],
    ohem_factor: usize,
) -> Result<DetectionLossValue> {
    assert_eq!(preds.len(), targets.len());
    let mut g = Graph::<F>::new(false, rng_for(0, "detection-loss", &[]));
    let heads: Vec<HeadVars> = preds
        .iter()
        .map(|p| {
            let n = p.logits.len();
            let logits_flat = g.constant(ArrayD::from_shape_vec(IxDyn(&[n]), p.logits.clone()).unwrap());
            let reg_flat = [0, 1, 2, 3].map(|c| {
                g.constant(ArrayD::from_shape_vec(IxDyn(&[n]), p.reg[c].clone()).unwrap())
            });
            HeadVars { logits_flat, reg_flat }
        })
        .collect();
    let (_, value) = detection_loss_graph(&mut g, &heads, targets, ohem_factor);
    Ok(value)
}

/// Exposes the hard-negative selection for property tests: returns, per item,
/// the selected negative indices for the given budget factor.
pub fn ohem_selection<F: Scalar>(
    preds: &[DetectionPrediction<F>],
    targets: &[&DetectionTargets],
    ohem_factor: usize,
) -> Vec<Vec<usize>> {
    let logits: Vec<Vec<F>> = preds.iter().map(|p| p.logits.clone()).collect();
    select_hard_negatives(&logits, targets, ohem_factor * preds.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::{AnchorLayout, DetectorConfig};
    use crate::types::{MalignancyClass, NoduleAnnotation};
    use rand::Rng;

    fn small_targets(anns: &[NoduleAnnotation]) -> DetectionTargets {
        let mut cfg = DetectorConfig::desk(0);
        cfg.patch_side = 16;
        AnchorLayout::new(&cfg, 16).assign(anns, [0.5, 2.0], 1.5)
    }

    fn ann(center: [f64; 3], d: f64) -> NoduleAnnotation {
        NoduleAnnotation {
            id: 0,
            center_mm: center,
            diameter_mm: d,
            class_label: MalignancyClass::Benign,
        }
    }

    #[test]
    fn perfect_predictions_drive_loss_to_zero() {
        let t = small_targets(&[ann([7.5, 7.5, 7.5], 6.0)]);
        let n = t.labels.len();
        let mut pred = DetectionPrediction::<f64> {
            logits: vec![-20.0; n],
            reg: [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        };
        for (i, &l) in t.labels.iter().enumerate() {
            if l == 1 {
                pred.logits[i] = 20.0;
                for c in 0..4 {
                    pred.reg[c][i] = t.reg[i][c];
                }
            }
        }
        let v = detection_loss(&[pred], &[&t], 20).unwrap();
        assert!(v.total < 1e-6, "loss {v:?}");
        assert_eq!(v.regression, 0.0);
    }

    #[test]
    fn single_negative_at_half_probability_is_ln2() {
        // One anchor grid with no annotations; all negatives with logit 0.
        let t = small_targets(&[]);
        let n = t.labels.len();
        let pred = DetectionPrediction::<f64> {
            logits: vec![0.0; n],
            reg: [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        };
        // Budget of 1 selects exactly one negative with BCE ln 2.
        let v = detection_loss(&[pred], &[&t], 1).unwrap();
        assert!((v.objectness - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(v.n_selected_negative, 1);
    }

    #[test]
    fn matches_hand_computed_oracle() {
        // 3 positives with hand-set residuals plus 100 negatives; budget 5.
        let t = small_targets(&[ann([7.5, 7.5, 7.5], 6.0)]);
        let mut rng = rng_for(41, "loss-oracle", &[]);
        let n = t.labels.len();
        let mut pred = DetectionPrediction::<f64> {
            logits: (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect(),
            reg: [
                (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            ],
        };
        // Keep only the first 3 positives; demote the rest to ignore so the
        // hand computation stays small.
        let mut t = t;
        let mut kept = 0;
        for i in 0..n {
            if t.labels[i] == 1 {
                kept += 1;
                if kept > 3 {
                    t.labels[i] = -1;
                }
            }
        }
        // Demote negatives beyond the first 100 to ignore.
        let mut negs = 0;
        for i in 0..n {
            if t.labels[i] == 0 {
                negs += 1;
                if negs > 100 {
                    t.labels[i] = -1;
                }
            }
        }
        for (i, &l) in t.labels.iter().enumerate() {
            if l == 1 {
                pred.logits[i] = rng.gen_range(0.0..2.0);
            }
        }

        let v = detection_loss(&[pred.clone()], &[&t], 5).unwrap();

        // Independent scalar recomputation.
        let positives: Vec<usize> = (0..n).filter(|&i| t.labels[i] == 1).collect();
        assert_eq!(positives.len(), 3);
        let mut reg = 0.0;
        for c in 0..4 {
            let mse: f64 = positives
                .iter()
                .map(|&i| (pred.reg[c][i] - t.reg[i][c]).powi(2))
                .sum::<f64>()
                / positives.len() as f64;
            reg += mse;
        }
        let mut neg_losses: Vec<f64> = (0..n)
            .filter(|&i| t.labels[i] == 0)
            .map(|i| softplus(pred.logits[i]))
            .collect();
        assert_eq!(neg_losses.len(), 100);
        neg_losses.sort_by(|a, b| b.total_cmp(a));
        let selected: Vec<f64> = neg_losses[..5].to_vec();
        let mut bce_sum: f64 = selected.iter().sum();
        for &i in &positives {
            let x = pred.logits[i];
            bce_sum += x.max(0.0) - x + (-(x.abs())).exp().ln_1p();
        }
        let bce = bce_sum / (positives.len() + 5) as f64;
        let expected = reg + bce;
        assert!(
            (v.total - expected).abs() / expected.abs().max(1.0) < 1e-9,
            "got {} expected {expected}",
            v.total
        );
    }

    #[test]
    fn ohem_selection_grows_monotonically() {
        let t = small_targets(&[]);
        let n = t.labels.len();
        let mut rng = rng_for(43, "ohem", &[]);
        let pred = DetectionPrediction::<f64> {
            logits: (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect(),
            reg: [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        };
        let mut prev: Vec<usize> = Vec::new();
        for factor in [1usize, 2, 5, 9, 20] {
            let sel = ohem_selection(&[pred.clone()], &[&t], factor);
            let cur = sel[0].clone();
            assert!(prev.iter().all(|i| cur.contains(i)), "not a superset at {factor}");
            prev = cur;
        }
    }

    #[test]
    fn all_ignore_yields_zero_loss() {
        let mut t = small_targets(&[]);
        for l in &mut t.labels {
            *l = -1;
        }
        let n = t.labels.len();
        let pred = DetectionPrediction::<f64> {
            logits: vec![1.0; n],
            reg: [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        };
        let v = detection_loss(&[pred], &[&t], 20).unwrap();
        assert_eq!(v.total, 0.0);
    }
}

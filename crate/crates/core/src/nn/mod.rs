//! Minimal neural-network stack: tape autodiff, volumetric ops, layers,
//! Adam, checkpoints and gradient checking. Deterministic end to end: all
//! randomness is injected through seeded streams and the computation order
//! is fixed, so training is byte-reproducible given the same seed.

mod adam;
mod checkpoint;
mod conv;
mod gradcheck;
pub mod graph;
pub mod layers;

pub use adam::{Adam, LrSchedule};
pub use checkpoint::{
    arrays_sha256, build_param_slots, collect_arrays, load_arrays_into, load_checkpoint,
    save_checkpoint, write_param_slots, CheckpointData, CHECKPOINT_FORMAT_VERSION,
};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use graph::{Graph, VarId};

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;

    use super::*;
    use crate::seeding::rng_for;

    fn randn(rng: &mut impl Rng, shape: &[usize]) -> ArrayD<f64> {
        use crate::num::Scalar;
        let mut a = ArrayD::<f64>::zeros(IxDyn(shape));
        for v in a.iter_mut() {
            *v = f64::standard_normal(rng);
        }
        a
    }

    /// Gradient check for a composite expression exercising most elementwise
    /// and structural ops.
    #[test]
    fn gradcheck_elementwise_and_structural() {
        let mut rng = rng_for(7, "gc-elem", &[]);
        let mut params = BTreeMap::new();
        params.insert("a".to_string(), randn(&mut rng, &[3, 4]));
        params.insert("b".to_string(), randn(&mut rng, &[3, 4]));
        let report = gradient_check(
            &params,
            |p| {
                let mut g = Graph::<f64>::new(false, rng_for(0, "x", &[]));
                let a = g.param("a", p["a"].clone());
                let b = g.param("b", p["b"].clone());
                let s = g.add(a, b);
                let m = g.mul(s, a);
                let sq = g.mul(m, m);
                let sg = g.sigmoid(sq);
                let e = g.exp(b);
                let c = g.concat(1, &[sg, e]);
                let n = g.narrow(c, 1, 2, 4);
                let ab = g.abs(n);
                let sh = g.shift(ab, 0.7);
                let l = g.ln(sh);
                let r = g.relu(l);
                let loss = g.mean_all(r);
                g.backward(loss);
                (g.scalar_value(loss), g.param_grads())
            },
            1e-5,
            1e-4,
        );
        assert!(report.max_rel_err < 1e-6, "{}", report.worst);
    }

    #[test]
    fn gradcheck_dense_stack_gather_losses() {
        let mut rng = rng_for(8, "gc-dense", &[]);
        let mut params = BTreeMap::new();
        params.insert("w".to_string(), randn(&mut rng, &[6, 4]));
        params.insert("b".to_string(), randn(&mut rng, &[4]));
        params.insert("x0".to_string(), randn(&mut rng, &[6]));
        params.insert("x1".to_string(), randn(&mut rng, &[6]));
        let targets = ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.0, 0.0]).unwrap();
        let report = gradient_check(
            &params,
            |p| {
                let mut g = Graph::<f64>::new(false, rng_for(0, "x", &[]));
                let w = g.param("w", p["w"].clone());
                let b = g.param("b", p["b"].clone());
                let x0 = g.param("x0", p["x0"].clone());
                let x1 = g.param("x1", p["x1"].clone());
                let x = g.stack_rows(&[x0, x1]);
                let y = g.dense(x, w, Some(b));
                let ce = g.softmax_ce(y, vec![2, 1]);
                let ce_sum = g.sum_all(ce);
                let flat = g.flatten(y);
                let picked = g.gather1d(flat, vec![0, 5]);
                let bce = g.bce_with_logits(picked, targets.clone());
                let bce_sum = g.sum_all(bce);
                let loss = g.add(ce_sum, bce_sum);
                g.backward(loss);
                (g.scalar_value(loss), g.param_grads())
            },
            1e-5,
            1e-4,
        );
        assert!(report.max_rel_err < 1e-6, "{}", report.worst);
    }

    #[test]
    fn gradcheck_conv_pool_upsample() {
        let mut rng = rng_for(9, "gc-conv", &[]);
        let mut params = BTreeMap::new();
        params.insert("x".to_string(), randn(&mut rng, &[2, 4, 4, 4]));
        params.insert("w1".to_string(), randn(&mut rng, &[3, 2, 3, 3, 3]) * 0.5);
        params.insert("b1".to_string(), randn(&mut rng, &[3]) * 0.1);
        params.insert("w2".to_string(), randn(&mut rng, &[2, 3, 1, 1, 1]) * 0.5);
        let report = gradient_check(
            &params,
            |p| {
                let mut g = Graph::<f64>::new(false, rng_for(0, "x", &[]));
                let x = g.param("x", p["x"].clone());
                let w1 = g.param("w1", p["w1"].clone());
                let b1 = g.param("b1", p["b1"].clone());
                let w2 = g.param("w2", p["w2"].clone());
                let c1 = g.conv3d(x, w1, Some(b1), 1, 1); // [3,4,4,4]
                let r1 = g.relu(c1);
                let pooled = g.maxpool2(r1); // [3,2,2,2]
                let c2 = g.conv3d(pooled, w2, None, 1, 0); // [2,2,2,2]
                let up = g.nearest_up2(c2); // [2,4,4,4]
                let prod = g.mul(up, x);
                let loss = g.mean_all(prod);
                g.backward(loss);
                (g.scalar_value(loss), g.param_grads())
            },
            1e-5,
            1e-4,
        );
        assert!(report.max_rel_err < 1e-6, "{}", report.worst);
    }

    #[test]
    fn gradcheck_strided_conv_and_rows() {
        let mut rng = rng_for(10, "gc-stride", &[]);
        let mut params = BTreeMap::new();
        params.insert("x".to_string(), randn(&mut rng, &[1, 6, 6, 6]));
        params.insert("w".to_string(), randn(&mut rng, &[2, 1, 3, 3, 3]) * 0.5);
        params.insert("v".to_string(), randn(&mut rng, &[8]));
        let report = gradient_check(
            &params,
            |p| {
                let mut g = Graph::<f64>::new(false, rng_for(0, "x", &[]));
                let x = g.param("x", p["x"].clone());
                let w = g.param("w", p["w"].clone());
                let v = g.param("v", p["v"].clone());
                let c = g.conv3d(x, w, None, 2, 1); // [2,3,3,3]
                let f = g.flatten(c); // [54]
                let row0 = g.narrow(f, 0, 0, 8);
                let row1 = g.narrow(f, 0, 8, 8);
                let m = g.stack_rows(&[row0, row1]); // [2,8]
                let sm = g.sub_row(m, v);
                let mm = g.mul_row(sm, v);
                let am = g.add_row(mm, v);
                let cm = g.mean_rows(am); // [8]
                let loss = g.sum_all(cm);
                g.backward(loss);
                (g.scalar_value(loss), g.param_grads())
            },
            1e-5,
            1e-4,
        );
        assert!(report.max_rel_err < 1e-6, "{}", report.worst);
    }

    #[test]
    fn gradcheck_batchnorm_train_mode() {
        use crate::nn::layers::BatchNorm1d;
        let mut rng = rng_for(11, "gc-bn", &[]);
        let mut params = BTreeMap::new();
        params.insert("x0".to_string(), randn(&mut rng, &[5]));
        params.insert("x1".to_string(), randn(&mut rng, &[5]));
        params.insert("x2".to_string(), randn(&mut rng, &[5]));
        params.insert("bn.gamma".to_string(), randn(&mut rng, &[5]).mapv(|v| 1.0 + 0.1 * v));
        params.insert("bn.beta".to_string(), randn(&mut rng, &[5]) * 0.1);
        let report = gradient_check(
            &params,
            |p| {
                let mut g = Graph::<f64>::new(true, rng_for(0, "x", &[]));
                let mut bn = BatchNorm1d::<f64>::init(5);
                bn.gamma = p["bn.gamma"].clone();
                bn.beta = p["bn.beta"].clone();
                let x0 = g.param("x0", p["x0"].clone());
                let x1 = g.param("x1", p["x1"].clone());
                let x2 = g.param("x2", p["x2"].clone());
                let x = g.stack_rows(&[x0, x1, x2]);
                let y = bn.apply(&mut g, "bn", x);
                let sq = g.mul(y, y);
                let loss = g.mean_all(sq);
                g.backward(loss);
                (g.scalar_value(loss), g.param_grads())
            },
            1e-5,
            1e-4,
        );
        assert!(report.max_rel_err < 1e-6, "{}", report.worst);
    }

    #[test]
    fn frozen_parents_receive_no_gradient() {
        let mut rng = rng_for(12, "frozen", &[]);
        let mut g = Graph::<f64>::new(false, rng_for(0, "x", &[]));
        let frozen = g.constant(randn(&mut rng, &[4]));
        let live = g.param("live", randn(&mut rng, &[4]));
        let prod = g.mul(frozen, live);
        let loss = g.sum_all(prod);
        g.backward(loss);
        assert!(g.grad(frozen).is_none());
        assert!(g.grad(live).is_some());
    }

    #[test]
    fn marked_interior_node_gets_gradient() {
        let mut rng = rng_for(13, "marked", &[]);
        let mut g = Graph::<f64>::new(false, rng_for(0, "x", &[]));
        let a = g.constant(randn(&mut rng, &[4]));
        let b = g.constant(randn(&mut rng, &[4]));
        let mid = g.mul(a, b);
        g.mark_needs_grad(mid);
        let sq = g.mul(mid, mid);
        let loss = g.sum_all(sq);
        g.backward(loss);
        let grad = g.grad(mid).expect("tap gradient");
        let expect = g.value(mid).mapv(|v| 2.0 * v);
        for (ga, ge) in grad.iter().zip(expect.iter()) {
            assert!((ga - ge).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_is_identity_at_eval_and_masks_at_train() {
        let mut rng = rng_for(14, "dropout", &[]);
        let x_val = randn(&mut rng, &[1000]);
        let mut ge = Graph::<f64>::new(false, rng_for(1, "d", &[]));
        let xe = ge.constant(x_val.clone());
        let ye = ge.dropout(xe, 0.3);
        assert_eq!(ge.value(ye), &x_val);

        let mut gt = Graph::<f64>::new(true, rng_for(1, "d", &[]));
        let xt = gt.constant(x_val.clone());
        let yt = gt.dropout(xt, 0.3);
        let zeros = gt.value(yt).iter().filter(|&&v| v == 0.0).count();
        assert!(zeros > 200 && zeros < 400, "unexpected dropout mask density: {zeros}");
    }

    #[test]
    fn maxpool_tie_break_is_first_in_scan_order() {
        let mut g = Graph::<f64>::new(false, rng_for(2, "mp", &[]));
        let x = g.leaf(ArrayD::from_elem(IxDyn(&[1, 2, 2, 2]), 1.0));
        let y = g.maxpool2(x);
        let s = g.sum_all(y);
        g.backward(s);
        let gx = g.grad(x).unwrap();
        // All 8 inputs equal: gradient routes to the first scanned element.
        assert_eq!(gx[[0, 0, 0, 0]], 1.0);
        assert_eq!(gx.iter().copied().sum::<f64>(), 1.0);
    }
}

//! Parameterized layers: owned weights, seeded init, graph binding.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::nn::graph::{Graph, VarId};
use crate::num::Scalar;

/// Whether a named array is optimized or only persisted (running stats).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

/// Visitor over a model's named arrays. Names are stable across runs and
/// define the checkpoint layout.
pub trait ParamVisitor<F: Scalar> {
    fn visit(&mut self, name: &str, kind: ParamKind, value: &mut ArrayD<F>);
}

impl<F: Scalar, T: FnMut(&str, ParamKind, &mut ArrayD<F>)> ParamVisitor<F> for T {
    fn visit(&mut self, name: &str, kind: ParamKind, value: &mut ArrayD<F>) {
        self(name, kind, value)
    }
}

fn he_normal<F: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> ArrayD<F> {
    let std = (2.0 / fan_in as f64).sqrt();
    let mut a = ArrayD::<F>::zeros(IxDyn(shape));
    for v in a.iter_mut() {
        let e = f64::standard_normal(rng);
        *v = F::of_f64(std * e);
    }
    a
}

fn xavier_normal<F: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> ArrayD<F> {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let mut a = ArrayD::<F>::zeros(IxDyn(shape));
    for v in a.iter_mut() {
        let e = f64::standard_normal(rng);
        *v = F::of_f64(std * e);
    }
    a
}

/// 3D convolution layer (cubic kernel).
#[derive(Debug, Clone)]
pub struct Conv3dLayer<F: Scalar> {
    pub w: ArrayD<F>,
    pub b: ArrayD<F>,
    pub stride: usize,
    pub pad: usize,
}

impl<F: Scalar> Conv3dLayer<F> {
    pub fn init(rng: &mut impl Rng, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Self {
        let fan_in = c_in * k * k * k;
        Self {
            w: he_normal(rng, &[c_out, c_in, k, k, k], fan_in),
            b: ArrayD::zeros(IxDyn(&[c_out])),
            stride,
            pad,
        }
    }

    pub fn bind(&self, g: &mut Graph<F>, prefix: &str) -> BoundConv {
        BoundConv {
            w: g.param(format!("{prefix}.w"), self.w.clone()),
            b: g.param(format!("{prefix}.b"), self.b.clone()),
            stride: self.stride,
            pad: self.pad,
        }
    }

    /// Binds as constants: no gradient, no optimizer updates (frozen weights).
    pub fn bind_frozen(&self, g: &mut Graph<F>) -> BoundConv {
        BoundConv {
            w: g.constant(self.w.clone()),
            b: g.constant(self.b.clone()),
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        v.visit(&format!("{prefix}.w"), ParamKind::Trainable, &mut self.w);
        v.visit(&format!("{prefix}.b"), ParamKind::Trainable, &mut self.b);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundConv {
    pub w: VarId,
    pub b: VarId,
    pub stride: usize,
    pub pad: usize,
}

impl BoundConv {
    pub fn apply<F: Scalar>(&self, g: &mut Graph<F>, x: VarId) -> VarId {
        g.conv3d(x, self.w, Some(self.b), self.stride, self.pad)
    }
}

/// Fully connected layer `[in, out]`.
#[derive(Debug, Clone)]
pub struct DenseLayer<F: Scalar> {
    pub w: ArrayD<F>,
    pub b: ArrayD<F>,
}

impl<F: Scalar> DenseLayer<F> {
    pub fn init(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: xavier_normal(rng, &[fan_in, fan_out], fan_in, fan_out),
            b: ArrayD::zeros(IxDyn(&[fan_out])),
        }
    }

    pub fn bind(&self, g: &mut Graph<F>, prefix: &str) -> BoundDense {
        BoundDense {
            w: g.param(format!("{prefix}.w"), self.w.clone()),
            b: g.param(format!("{prefix}.b"), self.b.clone()),
        }
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        v.visit(&format!("{prefix}.w"), ParamKind::Trainable, &mut self.w);
        v.visit(&format!("{prefix}.b"), ParamKind::Trainable, &mut self.b);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundDense {
    pub w: VarId,
    pub b: VarId,
}

impl BoundDense {
    pub fn apply<F: Scalar>(&self, g: &mut Graph<F>, x: VarId) -> VarId {
        g.dense(x, self.w, Some(self.b))
    }
}

/// Batch normalization over the batch dimension of `[B, C]` features.
///
/// Train mode normalizes with batch statistics (the gradient is exact because
/// the normalization is composed from differentiable primitives) and updates
/// running statistics outside the graph; eval mode applies the running-stat
/// affine map.
#[derive(Debug, Clone)]
pub struct BatchNorm1d<F: Scalar> {
    pub gamma: ArrayD<F>,
    pub beta: ArrayD<F>,
    pub running_mean: ArrayD<F>,
    pub running_var: ArrayD<F>,
    pub momentum: f64,
    pub eps: f64,
}

impl<F: Scalar> BatchNorm1d<F> {
    pub fn init(c: usize) -> Self {
        Self {
            gamma: ArrayD::from_elem(IxDyn(&[c]), F::one()),
            beta: ArrayD::zeros(IxDyn(&[c])),
            running_mean: ArrayD::zeros(IxDyn(&[c])),
            running_var: ArrayD::from_elem(IxDyn(&[c]), F::one()),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Applies the layer inside the graph. In train mode also updates the
    /// running statistics in place.
    pub fn apply(&mut self, g: &mut Graph<F>, prefix: &str, x: VarId) -> VarId {
        if g.is_train() {
            let gamma = g.param(format!("{prefix}.gamma"), self.gamma.clone());
            let beta = g.param(format!("{prefix}.beta"), self.beta.clone());
            let m = g.mean_rows(x);
            let xc = g.sub_row(x, m);
            let sq = g.mul(xc, xc);
            let var = g.mean_rows(sq);
            let var_eps = g.shift(var, self.eps);
            let lnv = g.ln(var_eps);
            let half = g.scale(lnv, -0.5);
            let inv_std = g.exp(half);
            let xhat = g.mul_row(xc, inv_std);
            let scaled = g.mul_row(xhat, gamma);
            let y = g.add_row(scaled, beta);

            let mom = F::of_f64(self.momentum);
            let keep = F::of_f64(1.0 - self.momentum);
            let batch_mean = g.value(m).clone();
            let batch_var = g.value(var).clone();
            for ((rm, &bm), (rv, &bv)) in self
                .running_mean
                .iter_mut()
                .zip(batch_mean.iter())
                .zip(self.running_var.iter_mut().zip(batch_var.iter()))
            {
                *rm = *rm * keep + bm * mom;
                *rv = *rv * keep + bv * mom;
            }
            y
        } else {
            let eps = F::of_f64(self.eps);
            let scale_arr = ndarray::Zip::from(&self.gamma)
                .and(&self.running_var)
                .map_collect(|&ga, &rv| ga / (rv + eps).sqrt());
            let shift_arr = ndarray::Zip::from(&self.beta)
                .and(&self.running_mean)
                .and(&scale_arr)
                .map_collect(|&be, &rm, &sc| be - rm * sc);
            let scale = g.constant(scale_arr);
            let shift = g.constant(shift_arr);
            let scaled = g.mul_row(x, scale);
            g.add_row(scaled, shift)
        }
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        v.visit(&format!("{prefix}.gamma"), ParamKind::Trainable, &mut self.gamma);
        v.visit(&format!("{prefix}.beta"), ParamKind::Trainable, &mut self.beta);
        v.visit(&format!("{prefix}.running_mean"), ParamKind::Buffer, &mut self.running_mean);
        v.visit(&format!("{prefix}.running_var"), ParamKind::Buffer, &mut self.running_var);
    }
}

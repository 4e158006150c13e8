//! Reverse-mode autodiff over `ndarray` values.
//!
//! A [`Graph`] records one forward computation as a flat tape of nodes; each
//! op stores enough to push gradients back to its parents. Gradients are only
//! propagated through nodes flagged `needs_grad`, so frozen parameters added
//! as constants cost nothing in the backward pass. Activation nodes can be
//! re-flagged with [`Graph::mark_needs_grad`] to obtain gradients at interior
//! taps (class activation maps).

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};

use crate::num::Scalar;
use crate::seeding::DetRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

pub(crate) struct Node<F: Scalar> {
    pub value: ArrayD<F>,
    pub needs_grad: bool,
    back: Option<Box<dyn Backward<F>>>,
}

/// Gradient scatter target for one backward step.
pub(crate) struct GradSink<'a, F: Scalar> {
    grads: &'a mut [Option<ArrayD<F>>],
    needs: &'a [bool],
}

impl<F: Scalar> GradSink<'_, F> {
    pub fn wants(&self, id: VarId) -> bool {
        self.needs[id.0]
    }

    pub fn add(&mut self, id: VarId, g: ArrayD<F>) {
        if !self.needs[id.0] {
            return;
        }
        match &mut self.grads[id.0] {
            slot @ None => *slot = Some(g),
            Some(acc) => *acc += &g,
        }
    }
}

pub(crate) trait Backward<F: Scalar> {
    fn backward(&self, nodes: &[Node<F>], grad_out: &ArrayD<F>, sink: &mut GradSink<'_, F>);
}

pub struct Graph<F: Scalar> {
    pub(crate) nodes: Vec<Node<F>>,
    params: BTreeMap<String, VarId>,
    grads: Vec<Option<ArrayD<F>>>,
    train: bool,
    pub(crate) rng: DetRng,
}

impl<F: Scalar> Graph<F> {
    /// `train` enables dropout and other train-only behavior; `rng` drives
    /// every stochastic op recorded on this graph.
    pub fn new(train: bool, rng: DetRng) -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            grads: Vec::new(),
            train,
            rng,
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    fn push(&mut self, value: ArrayD<F>, needs_grad: bool, back: Option<Box<dyn Backward<F>>>) -> VarId {
        self.nodes.push(Node {
            value,
            needs_grad,
            back,
        });
        VarId(self.nodes.len() - 1)
    }

    pub(crate) fn push_op(
        &mut self,
        value: ArrayD<F>,
        parents: &[VarId],
        back: Box<dyn Backward<F>>,
    ) -> VarId {
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(value, needs, Some(back))
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, value: ArrayD<F>) -> VarId {
        self.push(value, false, None)
    }

    /// Leaf that accumulates a gradient.
    pub fn leaf(&mut self, value: ArrayD<F>) -> VarId {
        self.push(value, true, None)
    }

    /// Named trainable parameter (a leaf registered for lookup).
    pub fn param(&mut self, name: impl Into<String>, value: ArrayD<F>) -> VarId {
        let id = self.leaf(value);
        self.params.insert(name.into(), id);
        id
    }

    /// Forces gradient computation through `id` even if no parameter feeds it.
    pub fn mark_needs_grad(&mut self, id: VarId) {
        self.nodes[id.0].needs_grad = true;
    }

    pub fn value(&self, id: VarId) -> &ArrayD<F> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: VarId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.len(), 1);
        v.iter().next().copied().unwrap().into_f64()
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Runs the backward pass from a scalar loss node.
    pub fn backward(&mut self, loss: VarId) {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        let n = self.nodes.len();
        let needs: Vec<bool> = self.nodes.iter().map(|nd| nd.needs_grad).collect();
        let mut grads: Vec<Option<ArrayD<F>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::from_elem(self.nodes[loss.0].value.raw_dim(), F::one()));
        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !needs[id] {
                continue;
            }
            let Some(back) = self.nodes[id].back.as_ref() else {
                continue;
            };
            let g = grads[id].take().unwrap();
            let mut sink = GradSink {
                grads: &mut grads,
                needs: &needs,
            };
            back.backward(&self.nodes, &g, &mut sink);
            grads[id] = Some(g);
        }
        self.grads = grads;
    }

    /// Gradient at a node after [`Graph::backward`].
    pub fn grad(&self, id: VarId) -> Option<&ArrayD<F>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradients of all registered parameters; parameters the loss does not
    /// touch get zero gradients of the right shape.
    pub fn param_grads(&self) -> BTreeMap<String, ArrayD<F>> {
        self.params
            .iter()
            .map(|(name, id)| {
                let g = self
                    .grad(*id)
                    .cloned()
                    .unwrap_or_else(|| ArrayD::zeros(self.nodes[id.0].value.raw_dim()));
                (name.clone(), g)
            })
            .collect()
    }

    pub fn param_id(&self, name: &str) -> Option<VarId> {
        self.params.get(name).copied()
    }
}

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

macro_rules! same_shape {
    ($g:expr, $a:expr, $b:expr) => {
        debug_assert_eq!($g.shape($a), $g.shape($b), "elementwise shape mismatch");
    };
}

struct AddBack {
    a: VarId,
    b: VarId,
}

impl<F: Scalar> Backward<F> for AddBack {
    fn backward(&self, _n: &[Node<F>], g: &ArrayD<F>, sink: &mut GradSink<'_, F>) {
        sink.add(self.a, g.clone());
        sink.add(self.b, g.clone());
    }
}

struct SubBack {
    a: VarId,
    b: VarId,
}

impl<F: Scalar> Backward<F> for SubBack {
    fn backward(&self, _n: &[Node<F>], g: &ArrayD<F>, sink: &mut GradSink<'_, F>) {
        sink.add(self.a, g.clone());
        sink.add(self.b, g.mapv(|v| -v));
    }
}

struct MulBack {
    a: VarId,
    b: VarId,
}

impl<F: Scalar> Backward<F> for MulBack {
    fn backward(&self, n: &[Node<F>], g: &ArrayD<F>, sink: &mut GradSink<'_, F>) {
        if sink.wants(self.a) {
            sink.add(self.a, g * &n[self.b.0].value);
        }
        if sink.wants(self.b) {
            sink.add(self.b, g * &n[self.a.0].value);
        }
    }
}

struct ScaleBack {
    x: VarId,
    c: f64,
}

impl<F: Scalar> Backward<F> for ScaleBack {
    fn backward(&self, _n: &[Node<F>], g: &ArrayD<F>, sink: &mut GradSink<'_, F>) {
        let c = F::of_f64(self.c);
        sink.add(self.x, g.mapv(|v| v * c));
    }
}

struct UnaryBack<F: Scalar> {
    x: VarId,
    /// dy/dx evaluated during forward.
    dydx: ArrayD<F>,
}

impl<F: Scalar> Backward<F> for UnaryBack<F> {
    fn backward(&self, _n: &[Node<F>], g: &ArrayD<F>, sink: &mut GradSink<'_, F>) {
        sink.add(self.x, g * &self.dydx);
    }
}

struct SumAllBack {
    x: VarId,
    shape: IxDyn,
}

impl<F: Scalar> Backward<F> for SumAllBack {
    fn backward(&self, _n: &[Node<F>], g: &ArrayD<F>, sink: &mut GradSink<'_, F>) {
        let gv = g.iter().next().copied().unwrap();
        sink.add(self.x, ArrayD::from_elem(self.shape.clone(), gv));
    }
}

struct ConcatBack {
    parts: Vec<(VarId, usize)>, // (id, extent along axis)
    axis: usize,
}

impl<F: Scalar> Backward<F> for ConcatBack {
    fn backward(&self, _n: &[Node<F>], g: &ArrayD<F>, sink: &mut GradSink<'_, F>) {
        let mut offset = 0usize;
        for (id, len) in &self.parts {
            let sl = g.slice_axis(ndarray::Axis(self.axis), ndarray::Slice::from(offset..offset + len));
            sink.add(*id, sl.to_owned());
            offset += len;
        }
    }
}

struct NarrowBack {
    x: VarId,
    axis: usize,
    start: usize,
    shape: IxDyn,
}

impl<F: Scalar> Backward<F> for NarrowBack {
    fn backward(&self, _n: &[Node<F>], g: &ArrayD<F>, sink: &mut GradSink<'_, F>) {
        let mut dx = ArrayD::<F>::zeros(self.shape.clone());
        let len = g.shape()[self.axis];
        dx.slice_axis_mut(
            ndarray::Axis(self.axis),
            ndarray::Slice::from(self.start..self.start + len),
        )
        .assign(g);
        sink.add(self.x, dx);
    }
}

struct ReshapeBack {
    x: VarId,
    shape: IxDyn,
}

impl<F: Scalar> Backward<F> for ReshapeBack {
    fn backward(&self, _n: &[Node<F>], g: &ArrayD<F>, sink: &mut GradSink<'_, F>) {
        let flat: Vec<F> = g.iter().copied().collect();
        sink.add(self.x, ArrayD::from_shape_vec(self.shape.clone(), flat).unwrap());
    }
}

struct StackRowsBack {
    rows: Vec<VarId>,
}

impl<F: Scalar> Backward<F> for StackRowsBack {
    fn backward(&self, _n: &[Node<F>], g: &ArrayD<F>, sink: &mut GradSink<'_, F>) {
        for (i, id) in self.rows.iter().enumerate() {
            let row = g.index_axis(ndarray::Axis(0), i).to_owned();
            sink.add(*id, row.into_dyn());
        }
    }
}

struct GatherBack {
    x: VarId,
    idx: Vec<usize>,
    len: usize,
}

impl<F: Scalar> Backward<F> for GatherBack {
    fn backward(&self, _n: &[Node<F>], g: &ArrayD<F>, sink: &mut GradSink<'_, F>) {
        let mut dx = ArrayD::<F>::zeros(IxDyn(&[self.len]));
        for (slot, &i) in self.idx.iter().enumerate() {
            dx[[i]] += g[[slot]];
        }
        sink.add(self.x, dx);
    }
}

struct DenseBack {
    x: VarId,
    w: VarId,
    b: Option<VarId>,
}

impl<F: Scalar> Backward<F> for DenseBack {
    fn backward(&self, n: &[Node<F>], g: &ArrayD<F>, sink: &mut GradSink<'_, F>) {
        let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        if sink.wants(self.x) {
            let w = n[self.w.0].value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            sink.add(self.x, g2.dot(&w.t()).into_dyn());
        }
        if sink.wants(self.w) {
            let x = n[self.x.0].value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            sink.add(self.w, x.t().dot(&g2).into_dyn());
        }
        if let Some(b) = self.b {
            if sink.wants(b) {
                sink.add(b, g2.sum_axis(ndarray::Axis(0)).into_dyn());
            }
        }
    }
}

struct MeanRowsBack {
    x: VarId,
    rows: usize,
}

impl<F: Scalar> Backward<F> for MeanRowsBack {
    fn backward(&self, n: &[Node<F>], g: &ArrayD<F>, sink: &mut GradSink<'_, F>) {
        let shape = n[self.x.0].value.raw_dim();
        let scale = F::of_f64(1.0 / self.rows as f64);
        let mut dx = ArrayD::<F>::zeros(shape);
        for mut row in dx.axis_iter_mut(ndarray::Axis(0)) {
            for (d, &gv) in row.iter_mut().zip(g.iter()) {
                *d = gv * scale;
            }
        }
        sink.add(self.x, dx);
    }
}

struct RowBroadcastBack {
    x: VarId,
    v: VarId,
    op: RowOp,
}

#[derive(Clone, Copy)]
enum RowOp {
    Add,
    Sub,
    Mul,
}

impl<F: Scalar> Backward<F> for RowBroadcastBack {
    fn backward(&self, n: &[Node<F>], g: &ArrayD<F>, sink: &mut GradSink<'_, F>) {
        let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        match self.op {
            RowOp::Add => {
                sink.add(self.x, g.clone());
                if sink.wants(self.v) {
                    sink.add(self.v, g2.sum_axis(ndarray::Axis(0)).into_dyn());
                }
            }
            RowOp::Sub => {
                sink.add(self.x, g.clone());
                if sink.wants(self.v) {
                    sink.add(self.v, g2.sum_axis(ndarray::Axis(0)).mapv(|x| -x).into_dyn());
                }
            }
            RowOp::Mul => {
                let v = n[self.v.0].value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                if sink.wants(self.x) {
                    let x2 = n[self.x.0].value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    let mut dx = ndarray::Array2::<F>::zeros(x2.raw_dim());
                    for ((mut drow, grow), _) in dx.outer_iter_mut().zip(g2.outer_iter()).zip(0..) {
                        for c in 0..v.len() {
                            drow[c] = grow[c] * v[c];
                        }
                    }
                    sink.add(self.x, dx.into_dyn());
                }
                if sink.wants(self.v) {
                    let x2 = n[self.x.0].value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    let mut dv = ndarray::Array1::<F>::zeros(v.len());
                    for (xrow, grow) in x2.outer_iter().zip(g2.outer_iter()) {
                        for c in 0..v.len() {
                            dv[c] += xrow[c] * grow[c];
                        }
                    }
                    sink.add(self.v, dv.into_dyn());
                }
            }
        }
    }
}

struct BceBack<F: Scalar> {
    x: VarId,
    targets: ArrayD<F>,
}

impl<F: Scalar> Backward<F> for BceBack<F> {
    fn backward(&self, n: &[Node<F>], g: &ArrayD<F>, sink: &mut GradSink<'_, F>) {
        let x = &n[self.x.0].value;
        let mut dx = ArrayD::<F>::zeros(x.raw_dim());
        for ((d, &xv), (&t, &gv)) in dx
            .iter_mut()
            .zip(x.iter())
            .zip(self.targets.iter().zip(g.iter()))
        {
            let s = F::one() / (F::one() + (-xv).exp());
            *d = (s - t) * gv;
        }
        sink.add(self.x, dx);
    }
}

struct SoftmaxCeBack {
    logits: VarId,
    labels: Vec<usize>,
}

impl<F: Scalar> Backward<F> for SoftmaxCeBack {
    fn backward(&self, n: &[Node<F>], g: &ArrayD<F>, sink: &mut GradSink<'_, F>) {
        let x = n[self.logits.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let mut dx = ndarray::Array2::<F>::zeros(x.raw_dim());
        for (b, row) in x.outer_iter().enumerate() {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let exps: Vec<F> = row.iter().map(|&v| (v - m).exp()).collect();
            let z: F = exps.iter().copied().sum();
            let gb = g[[b]];
            for k in 0..row.len() {
                let p = exps[k] / z;
                let t = if k == self.labels[b] { F::one() } else { F::zero() };
                dx[[b, k]] = (p - t) * gb;
            }
        }
        sink.add(self.logits, dx.into_dyn());
    }
}

struct DropoutBack<F: Scalar> {
    x: VarId,
    mask: ArrayD<F>,
}

impl<F: Scalar> Backward<F> for DropoutBack<F> {
    fn backward(&self, _n: &[Node<F>], g: &ArrayD<F>, sink: &mut GradSink<'_, F>) {
        sink.add(self.x, g * &self.mask);
    }
}

impl<F: Scalar> Graph<F> {
    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        same_shape!(self, a, b);
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push_op(v, &[a, b], Box::new(AddBack { a, b }))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        same_shape!(self, a, b);
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push_op(v, &[a, b], Box::new(SubBack { a, b }))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        same_shape!(self, a, b);
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push_op(v, &[a, b], Box::new(MulBack { a, b }))
    }

    pub fn scale(&mut self, x: VarId, c: f64) -> VarId {
        let cf = F::of_f64(c);
        let v = self.nodes[x.0].value.mapv(|e| e * cf);
        self.push_op(v, &[x], Box::new(ScaleBack { x, c }))
    }

    pub fn shift(&mut self, x: VarId, c: f64) -> VarId {
        let cf = F::of_f64(c);
        let v = self.nodes[x.0].value.mapv(|e| e + cf);
        // d(x + c)/dx = 1
        let dydx = ArrayD::from_elem(self.nodes[x.0].value.raw_dim(), F::one());
        self.push_op(v, &[x], Box::new(UnaryBack { x, dydx }))
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let xv = &self.nodes[x.0].value;
        let v = xv.mapv(|e| if e > F::zero() { e } else { F::zero() });
        let dydx = xv.mapv(|e| if e > F::zero() { F::one() } else { F::zero() });
        self.push_op(v, &[x], Box::new(UnaryBack { x, dydx }))
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let v = self.nodes[x.0].value.mapv(|e| F::one() / (F::one() + (-e).exp()));
        let dydx = v.mapv(|y| y * (F::one() - y));
        self.push_op(v, &[x], Box::new(UnaryBack { x, dydx }))
    }

    pub fn exp(&mut self, x: VarId) -> VarId {
        let v = self.nodes[x.0].value.mapv(|e| e.exp());
        let dydx = v.clone();
        self.push_op(v, &[x], Box::new(UnaryBack { x, dydx }))
    }

    pub fn ln(&mut self, x: VarId) -> VarId {
        let xv = &self.nodes[x.0].value;
        let v = xv.mapv(|e| e.ln());
        let dydx = xv.mapv(|e| F::one() / e);
        self.push_op(v, &[x], Box::new(UnaryBack { x, dydx }))
    }

    pub fn abs(&mut self, x: VarId) -> VarId {
        let xv = &self.nodes[x.0].value;
        let v = xv.mapv(|e| e.abs());
        let dydx = xv.mapv(|e| {
            if e > F::zero() {
                F::one()
            } else if e < F::zero() {
                -F::one()
            } else {
                F::zero()
            }
        });
        self.push_op(v, &[x], Box::new(UnaryBack { x, dydx }))
    }

    pub fn sum_all(&mut self, x: VarId) -> VarId {
        let s: F = self.nodes[x.0].value.iter().copied().sum();
        let shape = self.nodes[x.0].value.raw_dim();
        let v = ArrayD::from_elem(IxDyn(&[]), s);
        self.push_op(v, &[x], Box::new(SumAllBack { x, shape }))
    }

    pub fn mean_all(&mut self, x: VarId) -> VarId {
        let n = self.nodes[x.0].value.len();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn concat(&mut self, axis: usize, xs: &[VarId]) -> VarId {
        assert!(!xs.is_empty());
        let views: Vec<_> = xs.iter().map(|id| self.nodes[id.0].value.view()).collect();
        let v = ndarray::concatenate(ndarray::Axis(axis), &views).expect("concat shapes");
        let parts: Vec<(VarId, usize)> = xs
            .iter()
            .map(|id| (*id, self.nodes[id.0].value.shape()[axis]))
            .collect();
        self.push_op(v, xs, Box::new(ConcatBack { parts, axis }))
    }

    pub fn narrow(&mut self, x: VarId, axis: usize, start: usize, len: usize) -> VarId {
        let v = self.nodes[x.0]
            .value
            .slice_axis(ndarray::Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned();
        let shape = self.nodes[x.0].value.raw_dim();
        self.push_op(v, &[x], Box::new(NarrowBack { x, axis, start, shape }))
    }

    pub fn reshape(&mut self, x: VarId, shape: &[usize]) -> VarId {
        let flat: Vec<F> = self.nodes[x.0].value.iter().copied().collect();
        let old = self.nodes[x.0].value.raw_dim();
        let v = ArrayD::from_shape_vec(IxDyn(shape), flat).expect("reshape size");
        self.push_op(v, &[x], Box::new(ReshapeBack { x, shape: old }))
    }

    pub fn flatten(&mut self, x: VarId) -> VarId {
        let n = self.nodes[x.0].value.len();
        self.reshape(x, &[n])
    }

    /// Stacks 1-D rows of equal length into a `[B, N]` matrix.
    pub fn stack_rows(&mut self, rows: &[VarId]) -> VarId {
        assert!(!rows.is_empty());
        let n = self.nodes[rows[0].0].value.len();
        let mut v = ndarray::Array2::<F>::zeros((rows.len(), n));
        for (i, id) in rows.iter().enumerate() {
            debug_assert_eq!(self.nodes[id.0].value.len(), n);
            for (j, &e) in self.nodes[id.0].value.iter().enumerate() {
                v[[i, j]] = e;
            }
        }
        self.push_op(v.into_dyn(), rows, Box::new(StackRowsBack { rows: rows.to_vec() }))
    }

    /// Gathers elements of a 1-D vector at the given indices.
    pub fn gather1d(&mut self, x: VarId, idx: Vec<usize>) -> VarId {
        let xv = &self.nodes[x.0].value;
        debug_assert_eq!(xv.ndim(), 1);
        let len = xv.len();
        let v: Vec<F> = idx.iter().map(|&i| xv[[i]]).collect();
        let v = ArrayD::from_shape_vec(IxDyn(&[idx.len()]), v).unwrap();
        self.push_op(v, &[x], Box::new(GatherBack { x, idx, len }))
    }

    /// `[B, I] x [I, O] + [O]`.
    pub fn dense(&mut self, x: VarId, w: VarId, b: Option<VarId>) -> VarId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let wv = self.nodes[w.0].value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut out = xv.dot(&wv);
        if let Some(b) = b {
            let bv = self.nodes[b.0].value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            for mut row in out.outer_iter_mut() {
                for (o, &bb) in row.iter_mut().zip(bv.iter()) {
                    *o += bb;
                }
            }
        }
        let mut parents = vec![x, w];
        if let Some(bb) = b {
            parents.push(bb);
        }
        self.push_op(out.into_dyn(), &parents, Box::new(DenseBack { x, w, b }))
    }

    /// Column means of a `[B, C]` matrix.
    pub fn mean_rows(&mut self, x: VarId) -> VarId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let rows = xv.nrows();
        let v = xv.mean_axis(ndarray::Axis(0)).unwrap();
        self.push_op(v.into_dyn(), &[x], Box::new(MeanRowsBack { x, rows }))
    }

    pub fn add_row(&mut self, x: VarId, v: VarId) -> VarId {
        self.row_broadcast(x, v, RowOp::Add)
    }

    pub fn sub_row(&mut self, x: VarId, v: VarId) -> VarId {
        self.row_broadcast(x, v, RowOp::Sub)
    }

    pub fn mul_row(&mut self, x: VarId, v: VarId) -> VarId {
        self.row_broadcast(x, v, RowOp::Mul)
    }

    fn row_broadcast(&mut self, x: VarId, v: VarId, op: RowOp) -> VarId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let vv = self.nodes[v.0].value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        debug_assert_eq!(xv.ncols(), vv.len());
        let mut out = xv.to_owned();
        for mut row in out.outer_iter_mut() {
            for (o, &b) in row.iter_mut().zip(vv.iter()) {
                match op {
                    RowOp::Add => *o += b,
                    RowOp::Sub => *o -= b,
                    RowOp::Mul => *o *= b,
                }
            }
        }
        self.push_op(out.into_dyn(), &[x, v], Box::new(RowBroadcastBack { x, v, op }))
    }

    /// Numerically stable per-element binary cross-entropy with logits.
    pub fn bce_with_logits(&mut self, logits: VarId, targets: ArrayD<F>) -> VarId {
        let x = &self.nodes[logits.0].value;
        debug_assert_eq!(x.shape(), targets.shape());
        let mut v = ArrayD::<F>::zeros(x.raw_dim());
        for ((o, &xv), &t) in v.iter_mut().zip(x.iter()).zip(targets.iter()) {
            let max0 = if xv > F::zero() { xv } else { F::zero() };
            *o = max0 - xv * t + (F::one() + (-xv.abs()).exp()).ln();
        }
        self.push_op(v, &[logits], Box::new(BceBack { x: logits, targets }))
    }

    /// Row-wise softmax cross-entropy: `[B, K]` logits, `B` class labels,
    /// producing `[B]` losses.
    pub fn softmax_ce(&mut self, logits: VarId, labels: Vec<usize>) -> VarId {
        let x = self.nodes[logits.0].value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        debug_assert_eq!(x.nrows(), labels.len());
        let mut v = ndarray::Array1::<F>::zeros(x.nrows());
        for (b, row) in x.outer_iter().enumerate() {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let z: F = row.iter().map(|&e| (e - m).exp()).sum();
            v[b] = m + z.ln() - row[labels[b]];
        }
        self.push_op(v.into_dyn(), &[logits], Box::new(SoftmaxCeBack { logits, labels }))
    }

    /// Inverted dropout: active only in train mode; identity otherwise.
    pub fn dropout(&mut self, x: VarId, p: f64) -> VarId {
        if !self.train || p <= 0.0 {
            return x;
        }
        assert!(p < 1.0, "dropout rate must be < 1");
        let keep = 1.0 - p;
        let scale = F::of_f64(1.0 / keep);
        let shape = self.nodes[x.0].value.raw_dim();
        let mask = {
            use rand::Rng;
            let mut m = ArrayD::<F>::zeros(shape);
            for e in m.iter_mut() {
                if self.rng.gen::<f64>() < keep {
                    *e = scale;
                }
            }
            m
        };
        let v = &self.nodes[x.0].value * &mask;
        self.push_op(v, &[x], Box::new(DropoutBack { x, mask }))
    }
}

//! Volumetric ops: 3D convolution (im2col + GEMM), max pooling and nearest
//! upsampling. Single-sample layout `[C, D, H, W]`; batching is a loop at the
//! training-step level.

use ndarray::{Array2, ArrayD, IxDyn};

use crate::nn::graph::{Backward, GradSink, Graph, Node, VarId};
use crate::num::Scalar;

fn conv_out_side(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Unfolds `[C, D, H, W]` into `[C*k^3, N]` columns (N = output voxels).
fn im2col<F: Scalar>(x: &ArrayD<F>, k: usize, stride: usize, pad: usize) -> Array2<F> {
    let (c_in, d, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (od, oh, ow) = (
        conv_out_side(d, k, stride, pad),
        conv_out_side(h, k, stride, pad),
        conv_out_side(w, k, stride, pad),
    );
    let n = od * oh * ow;
    let mut cols = Array2::<F>::zeros((c_in * k * k * k, n));
    for c in 0..c_in {
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + kz) * k + ky) * k + kx;
                    let mut col = 0usize;
                    for zo in 0..od {
                        let z = (zo * stride + kz) as isize - pad as isize;
                        if z < 0 || z >= d as isize {
                            col += oh * ow;
                            continue;
                        }
                        for yo in 0..oh {
                            let y = (yo * stride + ky) as isize - pad as isize;
                            if y < 0 || y >= h as isize {
                                col += ow;
                                continue;
                            }
                            for xo in 0..ow {
                                let xx = (xo * stride + kx) as isize - pad as isize;
                                if xx >= 0 && xx < w as isize {
                                    cols[[row, col]] = x[[c, z as usize, y as usize, xx as usize]];
                                }
                                col += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Folds `[C*k^3, N]` column gradients back onto the input shape.
fn col2im<F: Scalar>(
    cols: &Array2<F>,
    in_shape: &[usize],
    k: usize,
    stride: usize,
    pad: usize,
) -> ArrayD<F> {
    let (c_in, d, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (od, oh, ow) = (
        conv_out_side(d, k, stride, pad),
        conv_out_side(h, k, stride, pad),
        conv_out_side(w, k, stride, pad),
    );
    let mut out = ArrayD::<F>::zeros(IxDyn(in_shape));
    for c in 0..c_in {
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + kz) * k + ky) * k + kx;
                    let mut col = 0usize;
                    for zo in 0..od {
                        let z = (zo * stride + kz) as isize - pad as isize;
                        if z < 0 || z >= d as isize {
                            col += oh * ow;
                            continue;
                        }
                        for yo in 0..oh {
                            let y = (yo * stride + ky) as isize - pad as isize;
                            if y < 0 || y >= h as isize {
                                col += ow;
                                continue;
                            }
                            for xo in 0..ow {
                                let xx = (xo * stride + kx) as isize - pad as isize;
                                if xx >= 0 && xx < w as isize {
                                    out[[c, z as usize, y as usize, xx as usize]] += cols[[row, col]];
                                }
                                col += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

struct Conv3dBack {
    x: VarId,
    w: VarId,
    b: Option<VarId>,
    stride: usize,
    pad: usize,
}

impl<F: Scalar> Backward<F> for Conv3dBack {
    fn backward(&self, nodes: &[Node<F>], grad_out: &ArrayD<F>, sink: &mut GradSink<'_, F>) {
        let wv = &nodes[self.w.0].value;
        let (c_out, k) = (wv.shape()[0], wv.shape()[2]);
        let n = grad_out.len() / c_out;
        let flat: Vec<F> = grad_out.iter().copied().collect();
        let g2 = Array2::from_shape_vec((c_out, n), flat).unwrap();

        if let Some(b) = self.b {
            if sink.wants(b) {
                sink.add(b, g2.sum_axis(ndarray::Axis(1)).into_dyn());
            }
        }
        let need_w = sink.wants(self.w);
        let need_x = sink.wants(self.x);
        if need_w {
            let xv = &nodes[self.x.0].value;
            let cols = im2col(xv, k, self.stride, self.pad);
            let dw = g2.dot(&cols.t());
            let dw = ArrayD::from_shape_vec(nodes[self.w.0].value.raw_dim(), dw.into_iter().collect()).unwrap();
            sink.add(self.w, dw);
        }
        if need_x {
            let ck3 = wv.len() / c_out;
            let w2 = Array2::from_shape_vec((c_out, ck3), wv.iter().copied().collect()).unwrap();
            let dcols = w2.t().dot(&g2);
            let dx = col2im(&dcols, nodes[self.x.0].value.shape(), k, self.stride, self.pad);
            sink.add(self.x, dx);
        }
    }
}

struct MaxPool2Back {
    x: VarId,
    argmax: Vec<usize>,
    in_shape: IxDyn,
}

impl<F: Scalar> Backward<F> for MaxPool2Back {
    fn backward(&self, _n: &[Node<F>], grad_out: &ArrayD<F>, sink: &mut GradSink<'_, F>) {
        let mut dx = ArrayD::<F>::zeros(self.in_shape.clone());
        let dx_flat = dx.as_slice_memory_order_mut().unwrap();
        for (&src, &g) in self.argmax.iter().zip(grad_out.iter()) {
            dx_flat[src] += g;
        }
        sink.add(self.x, dx);
    }
}

struct NearestUp2Back {
    x: VarId,
    in_shape: IxDyn,
}

impl<F: Scalar> Backward<F> for NearestUp2Back {
    fn backward(&self, _n: &[Node<F>], grad_out: &ArrayD<F>, sink: &mut GradSink<'_, F>) {
        let s = &self.in_shape;
        let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
        let mut dx = ArrayD::<F>::zeros(self.in_shape.clone());
        for ci in 0..c {
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = F::zero();
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dxx in 0..2 {
                                    acc += grad_out[[ci, 2 * z + dz, 2 * y + dy, 2 * x + dxx]];
                                }
                            }
                        }
                        dx[[ci, z, y, x]] = acc;
                    }
                }
            }
        }
        sink.add(self.x, dx);
    }
}

impl<F: Scalar> Graph<F> {
    /// 3D convolution: input `[C, D, H, W]`, weight `[O, C, k, k, k]`,
    /// optional bias `[O]`.
    pub fn conv3d(&mut self, x: VarId, w: VarId, b: Option<VarId>, stride: usize, pad: usize) -> VarId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv3d input must be [C,D,H,W]");
        assert_eq!(ws.len(), 5, "conv3d weight must be [O,C,k,k,k]");
        assert_eq!(xs[0], ws[1], "conv3d channel mismatch");
        assert!(ws[2] == ws[3] && ws[3] == ws[4], "cubic kernels only");
        let (c_out, k) = (ws[0], ws[2]);
        let (od, oh, ow) = (
            conv_out_side(xs[1], k, stride, pad),
            conv_out_side(xs[2], k, stride, pad),
            conv_out_side(xs[3], k, stride, pad),
        );

        let cols = im2col(self.value(x), k, stride, pad);
        let ck3 = ws[1] * k * k * k;
        let w2 = Array2::from_shape_vec((c_out, ck3), self.value(w).iter().copied().collect()).unwrap();
        let mut out2 = w2.dot(&cols);
        if let Some(b) = b {
            let bv = self.value(b).clone();
            for (mut row, &bb) in out2.outer_iter_mut().zip(bv.iter()) {
                for o in row.iter_mut() {
                    *o += bb;
                }
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[c_out, od, oh, ow]), out2.into_iter().collect()).unwrap();
        let mut parents = vec![x, w];
        if let Some(bb) = b {
            parents.push(bb);
        }
        self.push_op(out, &parents, Box::new(Conv3dBack { x, w, b, stride, pad }))
    }

    /// 2x2x2 max pooling with stride 2; spatial dims must be even. Ties break
    /// toward the first element in scan order.
    pub fn maxpool2(&mut self, x: VarId) -> VarId {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4);
        assert!(s[1] % 2 == 0 && s[2] % 2 == 0 && s[3] % 2 == 0, "odd dims in maxpool2");
        let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
        let xv = self.value(x);
        let mut out = ArrayD::<F>::zeros(IxDyn(&[c, d / 2, h / 2, w / 2]));
        let mut argmax = Vec::with_capacity(out.len());
        for ci in 0..c {
            for z in 0..d / 2 {
                for y in 0..h / 2 {
                    for xx in 0..w / 2 {
                        let mut best = F::neg_infinity();
                        let mut best_idx = 0usize;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let (iz, iy, ix) = (2 * z + dz, 2 * y + dy, 2 * xx + dx);
                                    let v = xv[[ci, iz, iy, ix]];
                                    if v > best {
                                        best = v;
                                        best_idx = ((ci * d + iz) * h + iy) * w + ix;
                                    }
                                }
                            }
                        }
                        out[[ci, z, y, xx]] = best;
                        argmax.push(best_idx);
                    }
                }
            }
        }
        let in_shape = IxDyn(&s);
        self.push_op(out, &[x], Box::new(MaxPool2Back { x, argmax, in_shape }))
    }

    /// Nearest-neighbor x2 upsampling of all spatial dims.
    pub fn nearest_up2(&mut self, x: VarId) -> VarId {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4);
        let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
        let xv = self.value(x);
        let mut out = ArrayD::<F>::zeros(IxDyn(&[c, 2 * d, 2 * h, 2 * w]));
        for ci in 0..c {
            for z in 0..2 * d {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        out[[ci, z, y, xx]] = xv[[ci, z / 2, y / 2, xx / 2]];
                    }
                }
            }
        }
        let in_shape = IxDyn(&s);
        self.push_op(out, &[x], Box::new(NearestUp2Back { x, in_shape }))
    }
}

//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] is a single-use tape: build the forward computation with the
//! op methods, call [`Graph::backward`] once on a scalar output, then read
//! gradients of the leaves. Node ids only ever point backwards, so reverse
//! iteration over the tape is a valid reverse-topological order.
//!
//! Everything is f64. The gradient-check acceptance suite compares these
//! backward rules against central finite differences at step 1e-5, which is
//! only meaningful in double precision.

use ndarray::{ArrayD, ArrayViewD, Axis, IxDyn};

use crate::tensor::{dims2, dims3, dims4, from_vec, gemm_into, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Recip(usize),
    Sqr(usize),
    Sqrt(usize),
    Abs(usize),
    Exp(usize),
    Ln(usize),
    MaxScalar(usize, f64),
    LeakyRelu(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Softmax(usize),
    Matmul(usize, usize),
    BatMatmul(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        stride: usize,
        pad: usize,
    },
    Pad2d {
        x: usize,
        pad: usize,
        mode: PadMode,
    },
    AvgPool2d {
        x: usize,
        k: usize,
    },
    NearestUp2(usize),
    BilinearUp2(usize),
    SumAxes(usize),
    SumAll(usize),
    Broadcast(usize),
    Reshape(usize),
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
    },
    Translate2d {
        x: usize,
        shifts: Vec<(i64, i64)>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    needs_grad: bool,
    op: Op,
}

pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that participates in gradient accumulation.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Leaf treated as a constant: gradients flow through ops that consume
    /// it but are never accumulated into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let t = &self.nodes[v.0].value;
        assert_eq!(t.len(), 1, "scalar_value on non-scalar");
        *t.iter().next().unwrap()
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "add: shape mismatch"
        );
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(v, ng, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "sub: shape mismatch"
        );
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(v, ng, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "mul: shape mismatch"
        );
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(v, ng, Op::Mul(a.0, b.0))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        let ng = self.needs(a.0);
        self.push(v, ng, Op::Neg(a.0))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        let ng = self.needs(a.0);
        self.push(v, ng, Op::AddScalar(a.0))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let ng = self.needs(a.0);
        self.push(v, ng, Op::MulScalar(a.0, c))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / x);
        let ng = self.needs(a.0);
        self.push(v, ng, Op::Recip(a.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let r = self.recip(b);
        self.mul(a, r)
    }

    pub fn sqr(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * x);
        let ng = self.needs(a.0);
        self.push(v, ng, Op::Sqr(a.0))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::sqrt);
        let ng = self.needs(a.0);
        self.push(v, ng, Op::Sqrt(a.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::abs);
        let ng = self.needs(a.0);
        self.push(v, ng, Op::Abs(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        let ng = self.needs(a.0);
        self.push(v, ng, Op::Exp(a.0))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        let ng = self.needs(a.0);
        self.push(v, ng, Op::Ln(a.0))
    }

    /// Elementwise max(x, c).
    pub fn max_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(c));
        let ng = self.needs(a.0);
        self.push(v, ng, Op::MaxScalar(a.0, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.max_scalar(a, 0.0)
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| if x > 0.0 { x } else { alpha * x });
        let ng = self.needs(a.0);
        self.push(v, ng, Op::LeakyRelu(a.0, alpha))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        let ng = self.needs(a.0);
        self.push(v, ng, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.needs(a.0);
        self.push(v, ng, Op::Sigmoid(a.0))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut v = x.clone();
        let last = v.ndim() - 1;
        for mut lane in v.lanes_mut(Axis(last)) {
            let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for e in lane.iter_mut() {
                *e = (*e - m).exp();
                s += *e;
            }
            for e in lane.iter_mut() {
                *e /= s;
            }
        }
        let ng = self.needs(a.0);
        self.push(v, ng, Op::Softmax(a.0))
    }

    // ---- linear algebra ----

    /// [m,k] x [k,n] -> [m,n]
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = dims2(self.value(a));
        let (k2, n) = dims2(self.value(b));
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let mut out = ArrayD::zeros(IxDyn(&[m, n]));
        gemm_into(
            self.value(a).view(),
            false,
            self.value(b).view(),
            false,
            1.0,
            0.0,
            &mut out.view_mut(),
        );
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(out, ng, Op::Matmul(a.0, b.0))
    }

    /// [B,m,k] x [B,k,n] -> [B,m,n]
    pub fn bat_matmul(&mut self, a: Var, b: Var) -> Var {
        let (ba, m, k) = dims3(self.value(a));
        let (bb, k2, n) = dims3(self.value(b));
        assert_eq!(ba, bb, "bat_matmul: batch {ba} vs {bb}");
        assert_eq!(k, k2, "bat_matmul: inner dims {k} vs {k2}");
        let mut out = ArrayD::zeros(IxDyn(&[ba, m, n]));
        for i in 0..ba {
            let av = self.value(a).index_axis(Axis(0), i);
            let bv = self.value(b).index_axis(Axis(0), i);
            let mut ov = out.index_axis_mut(Axis(0), i);
            gemm_into(av, false, bv, false, 1.0, 0.0, &mut ov);
        }
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(out, ng, Op::BatMatmul(a.0, b.0))
    }

    // ---- convolution & spatial ----

    /// NCHW convolution with zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let v = conv2d_forward(self.value(x), self.value(w), stride, pad);
        let ng = self.needs(x.0) || self.needs(w.0);
        self.push(
            v,
            ng,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                stride,
                pad,
            },
        )
    }

    /// Pads the two trailing axes by `pad` on every side.
    pub fn pad2d(&mut self, x: Var, pad: usize, mode: PadMode) -> Var {
        let v = pad2d_forward(self.value(x), pad, mode);
        let ng = self.needs(x.0);
        self.push(v, ng, Op::Pad2d { x: x.0, pad, mode })
    }

    /// Non-overlapping k x k average pooling; spatial dims must divide by k.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Var {
        let (n, c, h, w) = dims4(self.value(x));
        assert!(k >= 1 && h % k == 0 && w % k == 0, "avg_pool2d: {h}x{w} not divisible by {k}");
        let (ho, wo) = (h / k, w / k);
        let xf = flat(self.value(x));
        let mut out = vec![0.0; n * c * ho * wo];
        let inv = 1.0 / (k * k) as f64;
        for p in 0..n * c {
            let xp = &xf[p * h * w..][..h * w];
            let op = &mut out[p * ho * wo..][..ho * wo];
            for oy in 0..ho {
                let orow = &mut op[oy * wo..][..wo];
                for dy in 0..k {
                    let xrow = &xp[(oy * k + dy) * w..][..w];
                    for (ox, o) in orow.iter_mut().enumerate() {
                        let mut s = 0.0;
                        for dx in 0..k {
                            s += xrow[ox * k + dx];
                        }
                        *o += s;
                    }
                }
                for o in orow.iter_mut() {
                    *o *= inv;
                }
            }
        }
        let out = from_vec(&[n, c, ho, wo], out);
        let ng = self.needs(x.0);
        self.push(out, ng, Op::AvgPool2d { x: x.0, k })
    }

    pub fn nearest_up2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = dims4(self.value(x));
        let xf = flat(self.value(x));
        let mut out = vec![0.0; n * c * 4 * h * w];
        for p in 0..n * c {
            let xp = &xf[p * h * w..][..h * w];
            let op = &mut out[p * 4 * h * w..][..4 * h * w];
            for y in 0..h {
                let src = &xp[y * w..][..w];
                let (r0, r1) = op[2 * y * 2 * w..][..4 * w].split_at_mut(2 * w);
                for (xx, &v) in src.iter().enumerate() {
                    r0[2 * xx] = v;
                    r0[2 * xx + 1] = v;
                    r1[2 * xx] = v;
                    r1[2 * xx + 1] = v;
                }
            }
        }
        let out = from_vec(&[n, c, 2 * h, 2 * w], out);
        let ng = self.needs(x.0);
        self.push(out, ng, Op::NearestUp2(x.0))
    }

    /// Doubles the spatial size with bilinear interpolation (half-pixel
    /// centers, edges clamped).
    pub fn bilinear_up2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = dims4(self.value(x));
        let taps_y = bilinear_taps(h);
        let taps_x = bilinear_taps(w);
        let xf = flat(self.value(x));
        let mut out = vec![0.0; n * c * 4 * h * w];
        for p in 0..n * c {
            let xp = &xf[p * h * w..][..h * w];
            let op = &mut out[p * 4 * h * w..][..4 * h * w];
            for (oy, &(y0, y1, wy)) in taps_y.iter().enumerate() {
                let r0 = &xp[y0 * w..][..w];
                let r1 = &xp[y1 * w..][..w];
                let orow = &mut op[oy * 2 * w..][..2 * w];
                for (o, &(x0, x1, wx)) in orow.iter_mut().zip(taps_x.iter()) {
                    *o = (1.0 - wy) * ((1.0 - wx) * r0[x0] + wx * r0[x1])
                        + wy * ((1.0 - wx) * r1[x0] + wx * r1[x1]);
                }
            }
        }
        let out = from_vec(&[n, c, 2 * h, 2 * w], out);
        let ng = self.needs(x.0);
        self.push(out, ng, Op::BilinearUp2(x.0))
    }

    // ---- reductions & shape ----

    /// Sum over `axes`, keeping reduced dims as size 1.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Var {
        let mut v = self.value(x).clone();
        for &ax in axes {
            let summed = v.sum_axis(Axis(ax));
            v = summed.insert_axis(Axis(ax));
        }
        let ng = self.needs(x.0);
        self.push(v, ng, Op::SumAxes(x.0))
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Var {
        let count: usize = axes.iter().map(|&a| self.value(x).shape()[a]).product();
        let s = self.sum_axes(x, axes);
        self.mul_scalar(s, 1.0 / count as f64)
    }

    /// Sum of every element, yielding a 0-d scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.needs(x.0);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), ng, Op::SumAll(x.0))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum_all(x);
        self.mul_scalar(s, 1.0 / n as f64)
    }

    /// Broadcasts to `shape`. Ranks must match; each input dim is either
    /// equal to the target or 1.
    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), shape.len(), "broadcast: rank mismatch");
        for (i, (&a, &b)) in xs.iter().zip(shape.iter()).enumerate() {
            assert!(a == b || a == 1, "broadcast: dim {i} {a} -> {b}");
        }
        let v = broadcast_copy(self.value(x), shape);
        let ng = self.needs(x.0);
        self.push(v, ng, Op::Broadcast(x.0))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self
            .value(x)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: length mismatch");
        let ng = self.needs(x.0);
        self.push(v, ng, Op::Reshape(x.0))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let v = self
            .value(x)
            .view()
            .permuted_axes(IxDyn(perm))
            .as_standard_layout()
            .to_owned();
        let ng = self.needs(x.0);
        self.push(
            v,
            ng,
            Op::Permute {
                x: x.0,
                perm: perm.to_vec(),
            },
        )
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty());
        let views: Vec<ArrayViewD<f64>> = xs.iter().map(|v| self.value(*v).view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
        let ng = xs.iter().any(|v| self.needs(v.0));
        self.push(
            v.as_standard_layout().to_owned(),
            ng,
            Op::Concat {
                xs: xs.iter().map(|v| v.0).collect(),
                axis,
            },
        )
    }

    /// Shifts each sample by (dy, dx) with zero fill; the gradient shifts
    /// back the other way.
    pub fn translate2d(&mut self, x: Var, shifts: &[(i64, i64)]) -> Var {
        let (n, c, h, w) = dims4(self.value(x));
        assert_eq!(shifts.len(), n, "translate2d: one shift per sample");
        let xf = flat(self.value(x));
        let mut out = vec![0.0; n * c * h * w];
        for (ni, &(dy, dx)) in shifts.iter().enumerate() {
            let Some((dst_x0, src_x0, len)) = shift_span(dx, w) else {
                continue;
            };
            for ci in 0..c {
                let xp = &xf[(ni * c + ci) * h * w..][..h * w];
                let op = &mut out[(ni * c + ci) * h * w..][..h * w];
                for y in 0..h as i64 {
                    let sy = y - dy;
                    if sy < 0 || sy >= h as i64 {
                        continue;
                    }
                    let src = &xp[sy as usize * w..][..w];
                    let dst = &mut op[y as usize * w..][..w];
                    dst[dst_x0..dst_x0 + len].copy_from_slice(&src[src_x0..src_x0 + len]);
                }
            }
        }
        let out = from_vec(&[n, c, h, w], out);
        let ng = self.needs(x.0);
        self.push(
            out,
            ng,
            Op::Translate2d {
                x: x.0,
                shifts: shifts.to_vec(),
            },
        )
    }

    // ---- composite helpers ----

    /// x*[n,in] @ w[in,out] + b[out]
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        let (n, out) = dims2(self.value(y));
        let br = self.reshape(b, &[1, out]);
        let bb = self.broadcast(br, &[n, out]);
        self.add(y, bb)
    }

    /// conv2d plus per-channel bias.
    pub fn conv2d_bias(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let y = self.conv2d(x, w, stride, pad);
        let (n, c, h, wd) = dims4(self.value(y));
        let br = self.reshape(b, &[1, c, 1, 1]);
        let bb = self.broadcast(br, &[n, c, h, wd]);
        self.add(y, bb)
    }

    // ---- backward ----

    /// Accumulates gradients of every grad-participating ancestor of `out`,
    /// which must be a single-element tensor. One call per graph.
    pub fn backward(&mut self, out: Var) {
        assert_eq!(self.value(out).len(), 1, "backward needs a scalar output");
        assert!(
            self.nodes[out.0].needs_grad,
            "backward on a constant-only graph"
        );
        let seed_shape = self.value(out).raw_dim();
        self.nodes[out.0].grad = Some(ArrayD::from_elem(seed_shape, 1.0));

        for id in (0..=out.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[id].grad.take() else {
                continue;
            };
            let op = self.nodes[id].op.clone();
            self.backprop_node(id, &g, &op);
            self.nodes[id].grad = Some(g);
        }
    }

    fn accum(&mut self, parent: usize, delta: Tensor) {
        if !self.nodes[parent].needs_grad {
            return;
        }
        debug_assert_eq!(self.nodes[parent].value.shape(), delta.shape());
        match &mut self.nodes[parent].grad {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&mut self, id: usize, g: &Tensor, op: &Op) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(*a, g.clone());
                self.accum(*b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(*a, g.clone());
                self.accum(*b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                let da = g * &self.nodes[*b].value;
                let db = g * &self.nodes[*a].value;
                self.accum(*a, da);
                self.accum(*b, db);
            }
            Op::Neg(a) => self.accum(*a, g.mapv(|x| -x)),
            Op::AddScalar(a) => self.accum(*a, g.clone()),
            Op::MulScalar(a, c) => self.accum(*a, g.mapv(|x| x * c)),
            Op::Recip(a) => {
                let y = &self.nodes[id].value;
                self.accum(*a, -(g * y * y));
            }
            Op::Sqr(a) => {
                let da = 2.0 * g * &self.nodes[*a].value;
                self.accum(*a, da);
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[id].value;
                self.accum(*a, g / (2.0 * y));
            }
            Op::Abs(a) => {
                let x = &self.nodes[*a].value;
                let mut da = g.clone();
                ndarray::Zip::from(&mut da).and(x).for_each(|d, &xv| {
                    *d *= if xv > 0.0 {
                        1.0
                    } else if xv < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                self.accum(*a, da);
            }
            Op::Exp(a) => {
                let y = &self.nodes[id].value;
                self.accum(*a, g * y);
            }
            Op::Ln(a) => {
                let x = &self.nodes[*a].value;
                self.accum(*a, g / x);
            }
            Op::MaxScalar(a, c) => {
                let x = &self.nodes[*a].value;
                let mut da = g.clone();
                ndarray::Zip::from(&mut da)
                    .and(x)
                    .for_each(|d, &xv| *d *= if xv > *c { 1.0 } else { 0.0 });
                self.accum(*a, da);
            }
            Op::LeakyRelu(a, alpha) => {
                let x = &self.nodes[*a].value;
                let mut da = g.clone();
                ndarray::Zip::from(&mut da)
                    .and(x)
                    .for_each(|d, &xv| *d *= if xv > 0.0 { 1.0 } else { *alpha });
                self.accum(*a, da);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[id].value;
                self.accum(*a, g * &y.mapv(|v| 1.0 - v * v));
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[id].value;
                self.accum(*a, g * &y.mapv(|v| v * (1.0 - v)));
            }
            Op::Softmax(a) => {
                let y = &self.nodes[id].value;
                let last = y.ndim() - 1;
                let gy = g * y;
                let dot = gy.sum_axis(Axis(last)).insert_axis(Axis(last));
                let da = y * &(g - &dot);
                self.accum(*a, da);
            }
            Op::Matmul(a, b) => {
                let (m, n) = dims2(&self.nodes[id].value);
                let k = dims2(&self.nodes[*a].value).1;
                if self.needs(*a) {
                    let mut da = ArrayD::zeros(IxDyn(&[m, k]));
                    gemm_into(
                        g.view(),
                        false,
                        self.nodes[*b].value.view(),
                        true,
                        1.0,
                        0.0,
                        &mut da.view_mut(),
                    );
                    self.accum(*a, da);
                }
                if self.needs(*b) {
                    let mut db = ArrayD::zeros(IxDyn(&[k, n]));
                    gemm_into(
                        self.nodes[*a].value.view(),
                        true,
                        g.view(),
                        false,
                        1.0,
                        0.0,
                        &mut db.view_mut(),
                    );
                    self.accum(*b, db);
                }
            }
            Op::BatMatmul(a, b) => {
                let (bsz, m, n) = dims3(&self.nodes[id].value);
                let k = dims3(&self.nodes[*a].value).2;
                if self.needs(*a) {
                    let mut da = ArrayD::zeros(IxDyn(&[bsz, m, k]));
                    for i in 0..bsz {
                        let gv = g.index_axis(Axis(0), i);
                        let bv = self.nodes[*b].value.index_axis(Axis(0), i);
                        let mut dv = da.index_axis_mut(Axis(0), i);
                        gemm_into(gv, false, bv, true, 1.0, 0.0, &mut dv);
                    }
                    self.accum(*a, da);
                }
                if self.needs(*b) {
                    let mut db = ArrayD::zeros(IxDyn(&[bsz, k, n]));
                    for i in 0..bsz {
                        let av = self.nodes[*a].value.index_axis(Axis(0), i);
                        let gv = g.index_axis(Axis(0), i);
                        let mut dv = db.index_axis_mut(Axis(0), i);
                        gemm_into(av, true, gv, false, 1.0, 0.0, &mut dv);
                    }
                    self.accum(*b, db);
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (dx, dw) = conv2d_backward(
                    &self.nodes[*x].value,
                    &self.nodes[*w].value,
                    g,
                    *stride,
                    *pad,
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(dx) = dx {
                    self.accum(*x, dx);
                }
                if let Some(dw) = dw {
                    self.accum(*w, dw);
                }
            }
            Op::Pad2d { x, pad, mode } => {
                let dx = pad2d_backward(g, self.nodes[*x].value.shape(), *pad, *mode);
                self.accum(*x, dx);
            }
            Op::AvgPool2d { x, k } => {
                let (n, c, ho, wo) = dims4(&self.nodes[id].value);
                let (_, _, h, w) = dims4(&self.nodes[*x].value);
                let k = *k;
                let gf = flat(g);
                let mut dx = vec![0.0; n * c * h * w];
                let inv = 1.0 / (k * k) as f64;
                for p in 0..n * c {
                    let gp = &gf[p * ho * wo..][..ho * wo];
                    let dp = &mut dx[p * h * w..][..h * w];
                    for oy in 0..ho {
                        let grow = &gp[oy * wo..][..wo];
                        for dy in 0..k {
                            let drow = &mut dp[(oy * k + dy) * w..][..w];
                            for (ox, &gv) in grow.iter().enumerate() {
                                let gv = gv * inv;
                                for dxx in 0..k {
                                    drow[ox * k + dxx] += gv;
                                }
                            }
                        }
                    }
                }
                self.accum(*x, from_vec(&[n, c, h, w], dx));
            }
            Op::NearestUp2(x) => {
                let (n, c, h, w) = dims4(&self.nodes[*x].value);
                let gf = flat(g);
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    let gp = &gf[p * 4 * h * w..][..4 * h * w];
                    let dp = &mut dx[p * h * w..][..h * w];
                    for y in 0..h {
                        let g0 = &gp[2 * y * 2 * w..][..2 * w];
                        let g1 = &gp[(2 * y + 1) * 2 * w..][..2 * w];
                        let drow = &mut dp[y * w..][..w];
                        for (xx, d) in drow.iter_mut().enumerate() {
                            *d = g0[2 * xx] + g0[2 * xx + 1] + g1[2 * xx] + g1[2 * xx + 1];
                        }
                    }
                }
                self.accum(*x, from_vec(&[n, c, h, w], dx));
            }
            Op::BilinearUp2(x) => {
                let (n, c, h, w) = dims4(&self.nodes[*x].value);
                let taps_y = bilinear_taps(h);
                let taps_x = bilinear_taps(w);
                let gf = flat(g);
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    let gp = &gf[p * 4 * h * w..][..4 * h * w];
                    let dp = &mut dx[p * h * w..][..h * w];
                    for (oy, &(y0, y1, wy)) in taps_y.iter().enumerate() {
                        let grow = &gp[oy * 2 * w..][..2 * w];
                        for (&gv, &(x0, x1, wx)) in grow.iter().zip(taps_x.iter()) {
                            dp[y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                            dp[y0 * w + x1] += gv * (1.0 - wy) * wx;
                            dp[y1 * w + x0] += gv * wy * (1.0 - wx);
                            dp[y1 * w + x1] += gv * wy * wx;
                        }
                    }
                }
                self.accum(*x, from_vec(&[n, c, h, w], dx));
            }
            Op::SumAxes(x) => {
                let target = self.nodes[*x].value.shape().to_vec();
                let dx = broadcast_copy(g, &target);
                self.accum(*x, dx);
            }
            Op::SumAll(x) => {
                let gv = *g.iter().next().unwrap();
                let dx = ArrayD::from_elem(self.nodes[*x].value.raw_dim(), gv);
                self.accum(*x, dx);
            }
            Op::Broadcast(x) => {
                let xs = self.nodes[*x].value.shape().to_vec();
                let mut dx = g.clone();
                for (ax, &d) in xs.iter().enumerate() {
                    if d == 1 && dx.shape()[ax] != 1 {
                        dx = dx.sum_axis(Axis(ax)).insert_axis(Axis(ax));
                    }
                }
                self.accum(*x, dx);
            }
            Op::Reshape(x) => {
                let target = self.nodes[*x].value.shape().to_vec();
                let dx = g
                    .clone()
                    .into_shape_with_order(IxDyn(&target))
                    .expect("reshape backward");
                self.accum(*x, dx);
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let dx = g
                    .view()
                    .permuted_axes(IxDyn(&inv))
                    .as_standard_layout()
                    .to_owned();
                self.accum(*x, dx);
            }
            Op::Concat { xs, axis } => {
                let mut offset = 0usize;
                for &xid in xs {
                    let d = self.nodes[xid].value.shape()[*axis];
                    let sl = g
                        .slice_axis(Axis(*axis), ndarray::Slice::from(offset..offset + d))
                        .to_owned();
                    offset += d;
                    self.accum(xid, sl);
                }
            }
            Op::Translate2d { x, shifts } => {
                let (n, c, h, w) = dims4(&self.nodes[*x].value);
                let gf = flat(g);
                let mut dx = vec![0.0; n * c * h * w];
                for (ni, &(dy, dxs)) in shifts.iter().enumerate() {
                    let Some((dst_x0, src_x0, len)) = shift_span(dxs, w) else {
                        continue;
                    };
                    for ci in 0..c {
                        let gp = &gf[(ni * c + ci) * h * w..][..h * w];
                        let dp = &mut dx[(ni * c + ci) * h * w..][..h * w];
                        for y in 0..h as i64 {
                            let oy = y + dy;
                            if oy < 0 || oy >= h as i64 {
                                continue;
                            }
                            let grow = &gp[oy as usize * w..][..w];
                            let drow = &mut dp[y as usize * w..][..w];
                            for i in 0..len {
                                drow[src_x0 + i] += grow[dst_x0 + i];
                            }
                        }
                    }
                }
                self.accum(*x, from_vec(&[n, c, h, w], dx));
            }
        }
    }
}

// ---- convolution kernels ----

/// Geometry shared by the im2col/col2im pair.
#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

/// Unpacks one sample's `[cin, h, w]` plane stack into columns
/// `[col0, col0 + ho*wo)` of a patch matrix with `row_stride` columns
/// per row. Stride-1 rows collapse into straight `memcpy`s.
fn im2col(xs: &[f64], geo: ConvGeom, cols: &mut [f64], row_stride: usize, col0: usize) {
    let ConvGeom { cin, h, w, kh, kw, stride, pad, ho, wo } = geo;
    for c in 0..cin {
        let plane = &xs[c * h * w..][..h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut cols[((c * kh + ky) * kw + kx) * row_stride + col0..][..ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as i64 - pad as i64;
                    let dst = &mut row[oy * wo..][..wo];
                    if iy < 0 || iy >= h as i64 {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..][..w];
                    if stride == 1 {
                        let ox0 = pad.saturating_sub(kx);
                        let ox1 = (w + pad).saturating_sub(kx).min(wo);
                        dst[..ox0].fill(0.0);
                        dst[ox1.max(ox0)..].fill(0.0);
                        if ox0 < ox1 {
                            let ix0 = ox0 + kx - pad;
                            dst[ox0..ox1].copy_from_slice(&src[ix0..ix0 + (ox1 - ox0)]);
                        }
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as i64 - pad as i64;
                            *d = if ix >= 0 && ix < w as i64 {
                                src[ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds patch-matrix columns back onto one
/// sample's `[cin, h, w]` plane stack.
fn col2im_add(dcols: &[f64], geo: ConvGeom, row_stride: usize, col0: usize, dxs: &mut [f64]) {
    let ConvGeom { cin, h, w, kh, kw, stride, pad, ho, wo } = geo;
    for c in 0..cin {
        let plane = &mut dxs[c * h * w..][..h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &dcols[((c * kh + ky) * kw + kx) * row_stride + col0..][..ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as i64 - pad as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..][..w];
                    let src = &row[oy * wo..][..wo];
                    if stride == 1 {
                        let ox0 = pad.saturating_sub(kx);
                        let ox1 = (w + pad).saturating_sub(kx).min(wo);
                        if ox0 < ox1 {
                            let ix0 = ox0 + kx - pad;
                            for i in 0..ox1 - ox0 {
                                dst[ix0 + i] += src[ox0 + i];
                            }
                        }
                    } else {
                        for (ox, &s) in src.iter().enumerate() {
                            let ix = (ox * stride + kx) as i64 - pad as i64;
                            if ix >= 0 && ix < w as i64 {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

thread_local! {
    /// Reused im2col/col2im/GEMM staging buffers. Convolutions run thousands
    /// of times per training step at modest sizes, so allocator churn here
    /// costs more than the arithmetic.
    static CONV_SCRATCH: std::cell::RefCell<ConvScratch> = std::cell::RefCell::new(ConvScratch::default());
}

#[derive(Default)]
struct ConvScratch {
    cols: Vec<f64>,
    dcols: Vec<f64>,
    gbuf: Vec<f64>,
    obuf: Vec<f64>,
}

fn grown(buf: &mut Vec<f64>, len: usize) -> &mut [f64] {
    if buf.len() < len {
        buf.resize(len, 0.0);
    }
    &mut buf[..len]
}

/// Samples per im2col batch chunk, capped so the patch matrix stays cache-
/// friendly instead of scaling with the full batch at high resolutions.
fn conv_chunk(n: usize, k: usize, hw: usize) -> usize {
    const COLS_BUDGET: usize = 1 << 20; // 8 MiB of f64
    (COLS_BUDGET / (k * hw).max(1)).clamp(1, n)
}

/// Whether a convolution is cheaper as a direct shift-and-AXPY stencil than
/// as im2col + GEMM. im2col inflates the input `kh*kw`-fold, which turns
/// small-channel stride-1 kernels on wide planes — the bulk of this
/// workload — into a memory-bandwidth problem the skinny GEMM never pays
/// back. Narrow planes stay on im2col: the patch matrix fits in cache there
/// and the stencil's per-row overhead dominates its bandwidth savings.
fn conv_direct_ok(cin: usize, cout: usize, kh: usize, kw: usize, stride: usize, wo: usize) -> bool {
    stride == 1 && cin * cout * kh * kw <= 4096 && wo >= 32
}

fn conv2d_direct_forward(xf: &[f64], wf: &[f64], n: usize, cout: usize, geo: ConvGeom, out: &mut [f64]) {
    let ConvGeom { cin, h, w, kh, kw, pad, ho, wo, .. } = geo;
    for ni in 0..n {
        let xs = &xf[ni * cin * h * w..][..cin * h * w];
        let os = &mut out[ni * cout * ho * wo..][..cout * ho * wo];
        for co in 0..cout {
            let op = &mut os[co * ho * wo..][..ho * wo];
            for ci in 0..cin {
                let xp = &xs[ci * h * w..][..h * w];
                for ky in 0..kh {
                    let dy = ky as i64 - pad as i64;
                    let oy0 = (-dy).max(0) as usize;
                    let oy1 = (h as i64 - dy).clamp(0, ho as i64) as usize;
                    for kx in 0..kw {
                        let wv = wf[((co * cin + ci) * kh + ky) * kw + kx];
                        let dxx = kx as i64 - pad as i64;
                        let ox0 = (-dxx).max(0) as usize;
                        let ox1 = (w as i64 - dxx).clamp(0, wo as i64) as usize;
                        if ox0 >= ox1 {
                            continue;
                        }
                        let len = ox1 - ox0;
                        let ix0 = (ox0 as i64 + dxx) as usize;
                        for oy in oy0..oy1 {
                            let iy = (oy as i64 + dy) as usize;
                            let orow = &mut op[oy * wo + ox0..][..len];
                            let xrow = &xp[iy * w + ix0..][..len];
                            for (o, &xv) in orow.iter_mut().zip(xrow) {
                                *o += wv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_direct_bwd_dx(gf: &[f64], wf: &[f64], n: usize, cout: usize, geo: ConvGeom, dx: &mut [f64]) {
    let ConvGeom { cin, h, w, kh, kw, pad, ho, wo, .. } = geo;
    for ni in 0..n {
        let gs = &gf[ni * cout * ho * wo..][..cout * ho * wo];
        let ds = &mut dx[ni * cin * h * w..][..cin * h * w];
        for ci in 0..cin {
            let dp = &mut ds[ci * h * w..][..h * w];
            for co in 0..cout {
                let gp = &gs[co * ho * wo..][..ho * wo];
                for ky in 0..kh {
                    let dy = ky as i64 - pad as i64;
                    let oy0 = (-dy).max(0) as usize;
                    let oy1 = (h as i64 - dy).clamp(0, ho as i64) as usize;
                    for kx in 0..kw {
                        let wv = wf[((co * cin + ci) * kh + ky) * kw + kx];
                        let dxx = kx as i64 - pad as i64;
                        let ox0 = (-dxx).max(0) as usize;
                        let ox1 = (w as i64 - dxx).clamp(0, wo as i64) as usize;
                        if ox0 >= ox1 {
                            continue;
                        }
                        let len = ox1 - ox0;
                        let ix0 = (ox0 as i64 + dxx) as usize;
                        for oy in oy0..oy1 {
                            let iy = (oy as i64 + dy) as usize;
                            let drow = &mut dp[iy * w + ix0..][..len];
                            let grow = &gp[oy * wo + ox0..][..len];
                            for (d, &gv) in drow.iter_mut().zip(grow) {
                                *d += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_direct_bwd_dw(xf: &[f64], gf: &[f64], n: usize, cout: usize, geo: ConvGeom, dw: &mut [f64]) {
    let ConvGeom { cin, h, w, kh, kw, pad, ho, wo, .. } = geo;
    for ni in 0..n {
        let xs = &xf[ni * cin * h * w..][..cin * h * w];
        let gs = &gf[ni * cout * ho * wo..][..cout * ho * wo];
        for co in 0..cout {
            let gp = &gs[co * ho * wo..][..ho * wo];
            for ci in 0..cin {
                let xp = &xs[ci * h * w..][..h * w];
                for ky in 0..kh {
                    let dy = ky as i64 - pad as i64;
                    let oy0 = (-dy).max(0) as usize;
                    let oy1 = (h as i64 - dy).clamp(0, ho as i64) as usize;
                    for kx in 0..kw {
                        let dxx = kx as i64 - pad as i64;
                        let ox0 = (-dxx).max(0) as usize;
                        let ox1 = (w as i64 - dxx).clamp(0, wo as i64) as usize;
                        if ox0 >= ox1 {
                            continue;
                        }
                        let len = ox1 - ox0;
                        let ix0 = (ox0 as i64 + dxx) as usize;
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = (oy as i64 + dy) as usize;
                            acc += crate::tensor::dot(
                                &gp[oy * wo + ox0..][..len],
                                &xp[iy * w + ix0..][..len],
                            );
                        }
                        dw[((co * cin + ci) * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    }
}

fn conv2d_forward(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, cin, h, wd) = dims4(x);
    let (cout, cin2, kh, kw) = dims4(w);
    assert_eq!(cin, cin2, "conv2d: channel mismatch {cin} vs {cin2}");
    assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d: kernel larger than input");
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let geo = ConvGeom { cin, h, w: wd, kh, kw, stride, pad, ho, wo };
    let k = cin * kh * kw;
    let hw = ho * wo;
    let w2 = w
        .view()
        .into_shape_with_order((cout, k))
        .expect("conv2d: weight reshape");
    let xf = flat(x);
    let sample = cin * h * wd;
    if conv_direct_ok(cin, cout, kh, kw, stride, wo) {
        let wf = flat(w);
        let mut out = vec![0.0; n * cout * hw];
        conv2d_direct_forward(&xf, &wf, n, cout, geo, &mut out);
        return from_vec(&[n, cout, ho, wo], out);
    }
    let chunk = conv_chunk(n, k, hw);
    let mut out = vec![0.0; n * cout * hw];
    CONV_SCRATCH.with(|s| {
        let s = &mut *s.borrow_mut();
        let mut base = 0;
        while base < n {
            let cn = chunk.min(n - base);
            let ncols = cn * hw;
            let cols = grown(&mut s.cols, k * ncols);
            for si in 0..cn {
                im2col(&xf[(base + si) * sample..][..sample], geo, cols, ncols, si * hw);
            }
            let obuf = grown(&mut s.obuf, cout * ncols);
            let bview = ndarray::ArrayView2::from_shape((k, ncols), &cols[..k * ncols])
                .expect("conv2d: cols view");
            let mut cview =
                ndarray::ArrayViewMut2::from_shape((cout, ncols), &mut obuf[..cout * ncols])
                    .expect("conv2d: out view");
            crate::tensor::mat_mul_into(1.0, &w2, &bview, 0.0, &mut cview);
            for si in 0..cn {
                for co in 0..cout {
                    out[((base + si) * cout + co) * hw..][..hw]
                        .copy_from_slice(&obuf[co * ncols + si * hw..][..hw]);
                }
            }
            base += cn;
        }
    });
    from_vec(&[n, cout, ho, wo], out)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (n, cin, h, wd) = dims4(x);
    let (cout, _, kh, kw) = dims4(w);
    let ho = gy.shape()[2];
    let wo = gy.shape()[3];
    let geo = ConvGeom { cin, h, w: wd, kh, kw, stride, pad, ho, wo };
    let k = cin * kh * kw;
    let hw = ho * wo;
    let w2 = w
        .view()
        .into_shape_with_order((cout, k))
        .expect("conv2d: weight reshape");
    let xf = flat(x);
    let gf = flat(gy);
    let sample = cin * h * wd;
    if conv_direct_ok(cin, cout, kh, kw, stride, wo) {
        let wf = flat(w);
        let mut dx = need_dx.then(|| vec![0.0; n * sample]);
        let mut dwv = need_dw.then(|| vec![0.0; cout * k]);
        if let Some(dx) = dx.as_mut() {
            conv2d_direct_bwd_dx(&gf, &wf, n, cout, geo, dx);
        }
        if let Some(dwv) = dwv.as_mut() {
            conv2d_direct_bwd_dw(&xf, &gf, n, cout, geo, dwv);
        }
        return (
            dx.map(|v| from_vec(&[n, cin, h, wd], v)),
            dwv.map(|v| from_vec(&[cout, cin, kh, kw], v)),
        );
    }
    let chunk = conv_chunk(n, k, hw);
    let mut dx = need_dx.then(|| vec![0.0; n * sample]);
    let mut dw2 = need_dw.then(|| ndarray::Array2::<f64>::zeros((cout, k)));

    CONV_SCRATCH.with(|s| {
        let s = &mut *s.borrow_mut();
        let mut base = 0;
        while base < n {
            let cn = chunk.min(n - base);
            let ncols = cn * hw;
            // gather the chunk's output gradients as (cout, cn*hw)
            let gbuf = grown(&mut s.gbuf, cout * ncols);
            for si in 0..cn {
                for co in 0..cout {
                    gbuf[co * ncols + si * hw..][..hw]
                        .copy_from_slice(&gf[((base + si) * cout + co) * hw..][..hw]);
                }
            }
            let gview = ndarray::ArrayView2::from_shape((cout, ncols), &gbuf[..cout * ncols])
                .expect("conv2d: grad view");
            if let Some(dw2) = dw2.as_mut() {
                let cols = grown(&mut s.cols, k * ncols);
                for si in 0..cn {
                    im2col(&xf[(base + si) * sample..][..sample], geo, cols, ncols, si * hw);
                }
                let cview = ndarray::ArrayView2::from_shape((k, ncols), &cols[..k * ncols])
                    .expect("conv2d: cols view");
                crate::tensor::mat_mul_into(
                    1.0,
                    &gview,
                    &cview.reversed_axes(),
                    1.0,
                    &mut dw2.view_mut(),
                );
            }
            if let Some(dx) = dx.as_mut() {
                let dcols = grown(&mut s.dcols, k * ncols);
                let mut dview =
                    ndarray::ArrayViewMut2::from_shape((k, ncols), &mut dcols[..k * ncols])
                        .expect("conv2d: dcols view");
                crate::tensor::mat_mul_into(
                    1.0,
                    &w2.view().reversed_axes(),
                    &gview,
                    0.0,
                    &mut dview,
                );
                for si in 0..cn {
                    col2im_add(dcols, geo, ncols, si * hw, &mut dx[(base + si) * sample..][..sample]);
                }
            }
            base += cn;
        }
    });
    let dw = dw2.map(|m| {
        m.into_shape_with_order(IxDyn(&[cout, cin, kh, kw]))
            .expect("conv2d: dw reshape")
    });
    (dx.map(|v| from_vec(&[n, cin, h, wd], v)), dw)
}

// ---- padding ----

/// Mirror index into [0, n) excluding the edge sample (reflect-101).
fn mirror(i: i64, n: usize) -> usize {
    let n = n as i64;
    debug_assert!(n > 1 || i == 0);
    let mut v = i;
    if v < 0 {
        v = -v;
    }
    if v >= n {
        v = 2 * n - 2 - v;
    }
    debug_assert!(v >= 0 && v < n, "mirror out of range: pad too large for input");
    v as usize
}

fn pad2d_forward(x: &Tensor, pad: usize, mode: PadMode) -> Tensor {
    let (n, c, h, w) = dims4(x);
    if mode == PadMode::Reflect {
        assert!(pad < h && pad < w, "reflect pad {pad} too large for {h}x{w}");
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let xf = flat(x);
    let mut out = vec![0.0; n * c * hp * wp];
    match mode {
        PadMode::Zero => {
            for p in 0..n * c {
                let xp = &xf[p * h * w..][..h * w];
                let op = &mut out[p * hp * wp..][..hp * wp];
                for y in 0..h {
                    op[(y + pad) * wp + pad..][..w].copy_from_slice(&xp[y * w..][..w]);
                }
            }
        }
        PadMode::Reflect => {
            let ymap: Vec<usize> = (0..hp).map(|y| mirror(y as i64 - pad as i64, h)).collect();
            let xmap: Vec<usize> = (0..wp).map(|x| mirror(x as i64 - pad as i64, w)).collect();
            for p in 0..n * c {
                let xp = &xf[p * h * w..][..h * w];
                let op = &mut out[p * hp * wp..][..hp * wp];
                for y in 0..hp {
                    let src = &xp[ymap[y] * w..][..w];
                    let dst = &mut op[y * wp..][..wp];
                    dst[pad..pad + w].copy_from_slice(src);
                    for xx in 0..pad {
                        dst[xx] = src[xmap[xx]];
                    }
                    for xx in pad + w..wp {
                        dst[xx] = src[xmap[xx]];
                    }
                }
            }
        }
    }
    from_vec(&[n, c, hp, wp], out)
}

fn pad2d_backward(g: &Tensor, xshape: &[usize], pad: usize, mode: PadMode) -> Tensor {
    let (n, c, h, w) = (xshape[0], xshape[1], xshape[2], xshape[3]);
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let gf = flat(g);
    let mut dx = vec![0.0; n * c * h * w];
    match mode {
        PadMode::Zero => {
            for p in 0..n * c {
                let gp = &gf[p * hp * wp..][..hp * wp];
                let dp = &mut dx[p * h * w..][..h * w];
                for y in 0..h {
                    dp[y * w..][..w].copy_from_slice(&gp[(y + pad) * wp + pad..][..w]);
                }
            }
        }
        PadMode::Reflect => {
            let ymap: Vec<usize> = (0..hp).map(|y| mirror(y as i64 - pad as i64, h)).collect();
            let xmap: Vec<usize> = (0..wp).map(|x| mirror(x as i64 - pad as i64, w)).collect();
            for p in 0..n * c {
                let gp = &gf[p * hp * wp..][..hp * wp];
                let dp = &mut dx[p * h * w..][..h * w];
                for y in 0..hp {
                    let grow = &gp[y * wp..][..wp];
                    let drow = &mut dp[ymap[y] * w..][..w];
                    for (xx, &gv) in grow.iter().enumerate() {
                        drow[xmap[xx]] += gv;
                    }
                }
            }
        }
    }
    from_vec(xshape, dx)
}

// ---- flat-buffer utilities ----

/// Contiguous row-major view of a tensor's elements; copies only when the
/// backing layout is non-standard.
fn flat(x: &Tensor) -> std::borrow::Cow<'_, [f64]> {
    match x.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(x.iter().copied().collect()),
    }
}

/// Materializes a broadcast (each input dim equal to the target or 1) with
/// block fills and copies instead of per-element dynamic-rank iteration.
fn broadcast_copy(x: &Tensor, shape: &[usize]) -> Tensor {
    let xf = flat(x);
    let mut out = vec![0.0; shape.iter().product()];
    bcast_rec(&xf, x.shape(), &mut out, shape);
    from_vec(shape, out)
}

fn bcast_rec(x: &[f64], xshape: &[usize], out: &mut [f64], oshape: &[usize]) {
    if oshape.is_empty() {
        out[0] = x[0];
        return;
    }
    if xshape == oshape {
        out.copy_from_slice(x);
        return;
    }
    if xshape.iter().all(|&d| d == 1) {
        out.fill(x[0]);
        return;
    }
    let xsub: usize = xshape[1..].iter().product();
    let osub: usize = oshape[1..].iter().product();
    for i in 0..oshape[0] {
        let xoff = if xshape[0] == 1 { 0 } else { i * xsub };
        bcast_rec(
            &x[xoff..][..xsub],
            &xshape[1..],
            &mut out[i * osub..][..osub],
            &oshape[1..],
        );
    }
}

/// Overlap of a length-`w` row with itself shifted by `dx`: returns
/// (destination start, source start, length), or None when disjoint.
fn shift_span(dx: i64, w: usize) -> Option<(usize, usize, usize)> {
    let (dst, src, len) = if dx >= 0 {
        (dx as usize, 0, w.saturating_sub(dx as usize))
    } else {
        (0, (-dx) as usize, w.saturating_sub((-dx) as usize))
    };
    (len > 0).then_some((dst, src, len))
}

/// Interpolation taps for doubling a length-n axis with half-pixel centers.
fn bilinear_taps(n: usize) -> Vec<(usize, usize, f64)> {
    let mut taps = Vec::with_capacity(2 * n);
    for o in 0..2 * n {
        let s = (o as f64 + 0.5) / 2.0 - 0.5;
        let s_clamped = s.max(0.0);
        let i0 = (s_clamped.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        let t = (s - i0 as f64).clamp(0.0, 1.0);
        taps.push((i0, i1, t));
    }
    taps
}

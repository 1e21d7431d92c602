//! Reverse-mode automatic differentiation on dense `f64` tensors.
//!
//! Values live on an append-only tape; every operation evaluates eagerly
//! and records how to backpropagate through itself. Crucially, `Tape::grad`
//! emits the adjoint computation as ordinary tape nodes, so gradients are
//! themselves differentiable — a requirement for the discriminator
//! gradient penalty, whose loss contains a gradient norm.

use ndarray::{ArrayD, ArrayViewD, Axis, IxDyn};

/// Handle to a tape node. Cheap to copy; only meaningful together with the
/// tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    StopGrad(usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    /// lhs (..., q) times rhs (q, r) contracting the last axis of lhs.
    MatMul(usize, usize),
    /// (b, p, q) times (b, q, r), one matrix product per leading index.
    BatchMatMul(usize, usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Relu(usize),
    /// Indicator of positivity; not differentiated (subgradient 0 at 0).
    Step(usize),
    Sqrt(usize),
    Recip(usize),
    SumAll(usize),
    /// Scalar broadcast to an arbitrary shape.
    BroadcastAs(usize, Vec<usize>),
    SumAxis(usize, usize),
    /// Insert a new axis of the given length at `axis`, repeating content.
    RepeatAxis(usize, usize, usize),
    ConcatLast(usize, usize),
    /// Half-open range on the last axis.
    SliceLast(usize, usize, usize),
    /// Zero padding on the last axis: (before, after).
    PadLast(usize, usize, usize),
    Reshape(usize),
    SwapAxes(usize, usize, usize),
    /// Maximum over the last axis, kept as a length-1 axis; not
    /// differentiated (used only inside numerically stable softmax).
    MaxLastKeep(usize),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn as2d(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    let q = *a.shape().last().expect("matmul operand must have an axis");
    let p = a.len() / q;
    a.view()
        .into_shape_with_order((p, q))
        .expect("tape values are standard layout")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> ArrayViewD<'_, f64> {
        self.nodes[v.0].value.view()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let a = &self.nodes[v.0].value;
        debug_assert_eq!(a.len(), 1, "scalar() on non-scalar node");
        *a.first().unwrap()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_standard_layout());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    /// Differentiable input (parameter or tensor we want gradients for).
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn stop_grad(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.clone();
        self.push(value, Op::StopGrad(a.0), false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(value, Op::Add(a.0, b.0), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(value, Op::Mul(a.0, b.0), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x * c);
        let rg = self.requires_grad(a);
        self.push(value, Op::Scale(a.0, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x + c);
        let rg = self.requires_grad(a);
        self.push(value, Op::AddScalar(a.0, c), rg)
    }

    /// Matrix product contracting the last axis of `a` with the first axis
    /// of the 2-d `b`: (..., q) x (q, r) -> (..., r).
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        debug_assert_eq!(bv.ndim(), 2);
        let b2 = as2d(bv);
        let a2 = as2d(av);
        let out2 = a2.dot(&b2);
        let mut out_shape: Vec<usize> = av.shape().to_vec();
        *out_shape.last_mut().unwrap() = b2.ncols();
        let value = out2
            .into_dyn()
            .into_shape_with_order(IxDyn(&out_shape))
            .unwrap();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(value, Op::MatMul(a.0, b.0), rg)
    }

    /// Batched matrix product: (b, p, q) x (b, q, r) -> (b, p, r).
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        debug_assert_eq!(av.ndim(), 3);
        debug_assert_eq!(bv.ndim(), 3);
        let (batch, p) = (av.shape()[0], av.shape()[1]);
        let r = bv.shape()[2];
        debug_assert_eq!(bv.shape()[0], batch);
        debug_assert_eq!(bv.shape()[1], av.shape()[2]);
        let mut value = ArrayD::zeros(IxDyn(&[batch, p, r]));
        for i in 0..batch {
            let ai = av
                .index_axis(Axis(0), i)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let bi = bv
                .index_axis(Axis(0), i)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            value.index_axis_mut(Axis(0), i).assign(&ai.dot(&bi));
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(value, Op::BatchMatMul(a.0, b.0), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::tanh);
        let rg = self.requires_grad(a);
        self.push(value, Op::Tanh(a.0), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let rg = self.requires_grad(a);
        self.push(value, Op::Sigmoid(a.0), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::exp);
        let rg = self.requires_grad(a);
        self.push(value, Op::Exp(a.0), rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::ln);
        let rg = self.requires_grad(a);
        self.push(value, Op::Ln(a.0), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        let rg = self.requires_grad(a);
        self.push(value, Op::Relu(a.0), rg)
    }

    /// 1 where the input is strictly positive, else 0. Not differentiated.
    pub fn step(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0]
            .value
            .mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
        self.push(value, Op::Step(a.0), false)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::sqrt);
        let rg = self.requires_grad(a);
        self.push(value, Op::Sqrt(a.0), rg)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| 1.0 / x);
        let rg = self.requires_grad(a);
        self.push(value, Op::Recip(a.0), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = ArrayD::from_elem(IxDyn(&[]), self.nodes[a.0].value.sum());
        let rg = self.requires_grad(a);
        self.push(value, Op::SumAll(a.0), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Broadcast a scalar node to the given shape.
    pub fn broadcast_as(&mut self, a: Var, shape: &[usize]) -> Var {
        debug_assert_eq!(self.nodes[a.0].value.len(), 1);
        let v = *self.nodes[a.0].value.first().unwrap();
        let value = ArrayD::from_elem(IxDyn(shape), v);
        let rg = self.requires_grad(a);
        self.push(value, Op::BroadcastAs(a.0, shape.to_vec()), rg)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let value = self.nodes[a.0].value.sum_axis(Axis(axis));
        let rg = self.requires_grad(a);
        self.push(
            value.as_standard_layout().into_owned(),
            Op::SumAxis(a.0, axis),
            rg,
        )
    }

    /// Insert a new axis of length `len` at `axis`, repeating the content.
    pub fn repeat_axis(&mut self, a: Var, axis: usize, len: usize) -> Var {
        let expanded = self.nodes[a.0].value.view().insert_axis(Axis(axis));
        let mut shape: Vec<usize> = expanded.shape().to_vec();
        shape[axis] = len;
        let value = expanded
            .broadcast(IxDyn(&shape))
            .expect("broadcast after insert_axis")
            .as_standard_layout()
            .into_owned();
        let rg = self.requires_grad(a);
        self.push(value, Op::RepeatAxis(a.0, axis, len), rg)
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let last = av.ndim() - 1;
        let value = ndarray::concatenate(Axis(last), &[av.view(), bv.view()])
            .expect("concat shapes agree")
            .as_standard_layout()
            .into_owned();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(value, Op::ConcatLast(a.0, b.0), rg)
    }

    pub fn slice_last(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = &self.nodes[a.0].value;
        let last = av.ndim() - 1;
        let value = av
            .slice_axis(Axis(last), ndarray::Slice::from(start..end))
            .as_standard_layout()
            .into_owned();
        let rg = self.requires_grad(a);
        self.push(value, Op::SliceLast(a.0, start, end), rg)
    }

    pub fn pad_last(&mut self, a: Var, before: usize, after: usize) -> Var {
        let av = &self.nodes[a.0].value;
        let last = av.ndim() - 1;
        let mut shape: Vec<usize> = av.shape().to_vec();
        shape[last] += before + after;
        let mut value = ArrayD::zeros(IxDyn(&shape));
        value
            .slice_axis_mut(
                Axis(last),
                ndarray::Slice::from(before..before + av.shape()[last]),
            )
            .assign(av);
        let rg = self.requires_grad(a);
        self.push(value, Op::PadLast(a.0, before, after), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.nodes[a.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape length mismatch");
        let rg = self.requires_grad(a);
        self.push(value, Op::Reshape(a.0), rg)
    }

    pub fn swap_axes(&mut self, a: Var, ax1: usize, ax2: usize) -> Var {
        let mut view = self.nodes[a.0].value.view();
        view.swap_axes(ax1, ax2);
        let value = view.as_standard_layout().into_owned();
        let rg = self.requires_grad(a);
        self.push(value, Op::SwapAxes(a.0, ax1, ax2), rg)
    }

    /// Maximum over the last axis, kept as a length-1 axis. Treated as a
    /// constant by differentiation; only used to stabilize softmax.
    pub fn max_last_keep(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let last = av.ndim() - 1;
        let value = av
            .map_axis(Axis(last), |lane| {
                lane.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            })
            .insert_axis(Axis(last))
            .as_standard_layout()
            .into_owned();
        self.push(value, Op::MaxLastKeep(a.0), false)
    }

    // ----- composed conveniences ------------------------------------------

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let rb = self.recip(b);
        self.mul(a, rb)
    }

    /// Broadcast a (..., 1) tensor across the last axis to length `len`.
    pub fn broadcast_last(&mut self, a: Var, len: usize) -> Var {
        let nd = self.nodes[a.0].value.ndim();
        debug_assert_eq!(self.shape(a)[nd - 1], 1);
        let squeezed_shape: Vec<usize> = self.shape(a)[..nd - 1].to_vec();
        let squeezed = self.reshape(a, &squeezed_shape);
        self.repeat_axis(squeezed, nd - 1, len)
    }

    /// Sum over the last axis, kept as a length-1 axis.
    pub fn sum_last_keep(&mut self, a: Var) -> Var {
        let nd = self.nodes[a.0].value.ndim();
        let summed = self.sum_axis(a, nd - 1);
        let mut shape: Vec<usize> = self.shape(summed).to_vec();
        shape.push(1);
        self.reshape(summed, &shape)
    }

    /// `x W + b` where `x` is (..., q), `W` is (q, r), `b` is (r,): the bias
    /// is broadcast across all leading axes.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        let mut bb = b;
        let lead = self.shape(xw).len() - 1;
        for axis in (0..lead).rev() {
            let len = self.shape(xw)[axis];
            bb = self.repeat_axis(bb, 0, len);
            let _ = axis;
        }
        self.add(xw, bb)
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let len = *self.shape(a).last().unwrap();
        let m = self.max_last_keep(a);
        let mb = self.broadcast_last(m, len);
        let centered = self.sub(a, mb);
        let e = self.exp(centered);
        let s = self.sum_last_keep(e);
        let r = self.recip(s);
        let rb = self.broadcast_last(r, len);
        self.mul(e, rb)
    }

    /// Population variance of a 1-d tensor.
    pub fn variance(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let mean = self.mean_all(a);
        let mb = self.broadcast_as(mean, &[n]);
        let centered = self.sub(a, mb);
        let sq = self.square(centered);
        self.mean_all(sq)
    }

    /// Gradients of a scalar `output` with respect to each entry of `wrt`.
    ///
    /// The adjoints are appended to the tape as ordinary nodes, so the
    /// returned gradients can participate in further differentiable
    /// computation. Entries of `wrt` the output does not depend on yield
    /// zero tensors.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Vec<Var> {
        debug_assert_eq!(self.nodes[output.0].value.len(), 1, "grad needs a scalar");
        let horizon = output.0;
        let mut adjoint: Vec<Option<Var>> = vec![None; horizon + 1];
        let seed_shape: Vec<usize> = self.nodes[output.0].value.shape().to_vec();
        let seed = self.constant(ArrayD::from_elem(IxDyn(&seed_shape), 1.0));
        adjoint[output.0] = Some(seed);

        fn accumulate(
            tape: &mut Tape,
            adjoint: &mut [Option<Var>],
            parent: usize,
            contrib: Var,
        ) {
            if !tape.nodes[parent].requires_grad {
                return;
            }
            adjoint[parent] = Some(match adjoint[parent] {
                None => contrib,
                Some(prev) => tape.add(prev, contrib),
            });
        }

        for id in (0..=horizon).rev() {
            let out_adj = match adjoint[id] {
                Some(v) => v,
                None => continue,
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf | Op::StopGrad(_) | Op::Step(_) | Op::MaxLastKeep(_) => {}
                Op::Add(a, b) => {
                    accumulate(self, &mut adjoint, a, out_adj);
                    accumulate(self, &mut adjoint, b, out_adj);
                }
                Op::Mul(a, b) => {
                    if self.nodes[a].requires_grad {
                        let da = self.mul(out_adj, Var(b));
                        accumulate(self, &mut adjoint, a, da);
                    }
                    if self.nodes[b].requires_grad {
                        let db = self.mul(out_adj, Var(a));
                        accumulate(self, &mut adjoint, b, db);
                    }
                }
                Op::Scale(a, c) => {
                    let da = self.scale(out_adj, c);
                    accumulate(self, &mut adjoint, a, da);
                }
                Op::AddScalar(a, _) => accumulate(self, &mut adjoint, a, out_adj),
                Op::MatMul(a, b) => {
                    // y = x W: dx = dy W^T, dW = x_2d^T dy_2d.
                    if self.nodes[a].requires_grad {
                        let wt = self.swap_axes(Var(b), 0, 1);
                        let da = self.matmul(out_adj, wt);
                        accumulate(self, &mut adjoint, a, da);
                    }
                    if self.nodes[b].requires_grad {
                        let q = *self.shape(Var(a)).last().unwrap();
                        let p: usize = self.nodes[a].value.len() / q;
                        let r = *self.shape(out_adj).last().unwrap();
                        let a2 = self.reshape(Var(a), &[p, q]);
                        let at = self.swap_axes(a2, 0, 1);
                        let dy2 = self.reshape(out_adj, &[p, r]);
                        let db = self.matmul(at, dy2);
                        accumulate(self, &mut adjoint, b, db);
                    }
                }
                Op::BatchMatMul(a, b) => {
                    if self.nodes[a].requires_grad {
                        let bt = self.swap_axes(Var(b), 1, 2);
                        let da = self.batch_matmul(out_adj, bt);
                        accumulate(self, &mut adjoint, a, da);
                    }
                    if self.nodes[b].requires_grad {
                        let at = self.swap_axes(Var(a), 1, 2);
                        let db = self.batch_matmul(at, out_adj);
                        accumulate(self, &mut adjoint, b, db);
                    }
                }
                Op::Tanh(a) => {
                    let y2 = self.square(Var(id));
                    let neg = self.scale(y2, -1.0);
                    let one_minus = self.add_scalar(neg, 1.0);
                    let da = self.mul(out_adj, one_minus);
                    accumulate(self, &mut adjoint, a, da);
                }
                Op::Sigmoid(a) => {
                    let neg = self.scale(Var(id), -1.0);
                    let one_minus = self.add_scalar(neg, 1.0);
                    let yy = self.mul(Var(id), one_minus);
                    let da = self.mul(out_adj, yy);
                    accumulate(self, &mut adjoint, a, da);
                }
                Op::Exp(a) => {
                    let da = self.mul(out_adj, Var(id));
                    accumulate(self, &mut adjoint, a, da);
                }
                Op::Ln(a) => {
                    let ra = self.recip(Var(a));
                    let da = self.mul(out_adj, ra);
                    accumulate(self, &mut adjoint, a, da);
                }
                Op::Relu(a) => {
                    let mask = self.step(Var(a));
                    let da = self.mul(out_adj, mask);
                    accumulate(self, &mut adjoint, a, da);
                }
                Op::Sqrt(a) => {
                    let ry = self.recip(Var(id));
                    let half = self.scale(ry, 0.5);
                    let da = self.mul(out_adj, half);
                    accumulate(self, &mut adjoint, a, da);
                }
                Op::Recip(a) => {
                    let y2 = self.square(Var(id));
                    let neg = self.scale(y2, -1.0);
                    let da = self.mul(out_adj, neg);
                    accumulate(self, &mut adjoint, a, da);
                }
                Op::SumAll(a) => {
                    let shape: Vec<usize> = self.nodes[a].value.shape().to_vec();
                    let da = self.broadcast_as(out_adj, &shape);
                    accumulate(self, &mut adjoint, a, da);
                }
                Op::BroadcastAs(a, _) => {
                    let da = self.sum_all(out_adj);
                    accumulate(self, &mut adjoint, a, da);
                }
                Op::SumAxis(a, axis) => {
                    let len = self.nodes[a].value.shape()[axis];
                    let da = self.repeat_axis(out_adj, axis, len);
                    accumulate(self, &mut adjoint, a, da);
                }
                Op::RepeatAxis(a, axis, _) => {
                    let da = self.sum_axis(out_adj, axis);
                    accumulate(self, &mut adjoint, a, da);
                }
                Op::ConcatLast(a, b) => {
                    let na = *self.nodes[a].value.shape().last().unwrap();
                    let nb = *self.nodes[b].value.shape().last().unwrap();
                    if self.nodes[a].requires_grad {
                        let da = self.slice_last(out_adj, 0, na);
                        accumulate(self, &mut adjoint, a, da);
                    }
                    if self.nodes[b].requires_grad {
                        let db = self.slice_last(out_adj, na, na + nb);
                        accumulate(self, &mut adjoint, b, db);
                    }
                }
                Op::SliceLast(a, start, end) => {
                    let full = *self.nodes[a].value.shape().last().unwrap();
                    let da = self.pad_last(out_adj, start, full - end);
                    accumulate(self, &mut adjoint, a, da);
                }
                Op::PadLast(a, before, _after) => {
                    let orig = *self.nodes[a].value.shape().last().unwrap();
                    let da = self.slice_last(out_adj, before, before + orig);
                    accumulate(self, &mut adjoint, a, da);
                }
                Op::Reshape(a) => {
                    let shape: Vec<usize> = self.nodes[a].value.shape().to_vec();
                    let da = self.reshape(out_adj, &shape);
                    accumulate(self, &mut adjoint, a, da);
                }
                Op::SwapAxes(a, ax1, ax2) => {
                    let da = self.swap_axes(out_adj, ax1, ax2);
                    accumulate(self, &mut adjoint, a, da);
                }
            }
        }

        wrt.iter()
            .map(|v| match adjoint.get(v.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let shape: Vec<usize> = self.nodes[v.0].value.shape().to_vec();
                    self.constant(ArrayD::zeros(IxDyn(&shape)))
                }
            })
            .collect()
    }
}

/// Central finite-difference gradient of a scalar function at `x`,
/// restricted to the given flat coordinate indices. Serves as the
/// independent oracle for gradient checks; it never touches the tape's
/// backward pass.
pub fn central_difference<F>(f: &F, x: &ArrayD<f64>, coords: &[usize], step: f64) -> Vec<f64>
where
    F: Fn(&ArrayD<f64>) -> f64,
{
    let mut grads = Vec::with_capacity(coords.len());
    for &c in coords {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus.as_slice_mut().unwrap()[c] += step;
        minus.as_slice_mut().unwrap()[c] -= step;
        grads.push((f(&plus) - f(&minus)) / (2.0 * step));
    }
    grads
}

/// Largest relative deviation between analytic and finite-difference
/// gradients over the probed coordinates.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::prelude::*;
    use rand_distr::StandardNormal;

    fn randn(shape: &[usize], rng: &mut impl Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.sample(StandardNormal))
    }

    #[test]
    fn add_mul_chain_matches_by_hand() {
        let mut t = Tape::new();
        let x = t.leaf(ArrayD::from_elem(IxDyn(&[2]), 3.0));
        let y = t.leaf(ArrayD::from_elem(IxDyn(&[2]), 4.0));
        let xy = t.mul(x, y);
        let s = t.sum_all(xy);
        assert_eq!(t.scalar(s), 24.0);
        let grads = t.grad(s, &[x, y]);
        assert_eq!(t.value(grads[0]).as_slice().unwrap(), &[4.0, 4.0]);
        assert_eq!(t.value(grads[1]).as_slice().unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x0 = randn(&[3, 4], &mut rng);
        let w0 = randn(&[4, 5], &mut rng);
        let b0 = randn(&[5], &mut rng);

        fn network(t: &mut Tape, x: Var, w: Var, b: Var) -> Var {
            let h = t.affine(x, w, b);
            let h = t.tanh(h);
            let s = t.softmax_last(h);
            let lg = t.ln(s);
            let p = t.mul(s, lg);
            t.sum_all(p)
        }

        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let w = t.leaf(w0.clone());
        let b = t.leaf(b0.clone());
        let out = network(&mut t, x, w, b);
        let grads = t.grad(out, &[x, w, b]);

        let cases: [(usize, &ArrayD<f64>, Box<dyn Fn(&ArrayD<f64>) -> f64>); 3] = [
            (
                12,
                &x0,
                Box::new(|a: &ArrayD<f64>| {
                    let mut t = Tape::new();
                    let (x, w, b) = (t.leaf(a.clone()), t.leaf(w0.clone()), t.leaf(b0.clone()));
                    let out = network(&mut t, x, w, b);
                    t.scalar(out)
                }),
            ),
            (
                20,
                &w0,
                Box::new(|a: &ArrayD<f64>| {
                    let mut t = Tape::new();
                    let (x, w, b) = (t.leaf(x0.clone()), t.leaf(a.clone()), t.leaf(b0.clone()));
                    let out = network(&mut t, x, w, b);
                    t.scalar(out)
                }),
            ),
            (
                5,
                &b0,
                Box::new(|a: &ArrayD<f64>| {
                    let mut t = Tape::new();
                    let (x, w, b) = (t.leaf(x0.clone()), t.leaf(w0.clone()), t.leaf(a.clone()));
                    let out = network(&mut t, x, w, b);
                    t.scalar(out)
                }),
            ),
        ];
        for ((count, arr, f), g) in cases.iter().zip(&grads) {
            let coords: Vec<usize> = (0..*count).collect();
            let numeric = central_difference(f, arr, &coords, 1e-5);
            let analytic: Vec<f64> = coords
                .iter()
                .map(|&c| t.value(*g).as_slice().unwrap()[c])
                .collect();
            let err = max_relative_error(&analytic, &numeric);
            assert!(err < 1e-5, "rel err {err}");
        }
    }

    #[test]
    fn batch_matmul_gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let a0 = randn(&[2, 3, 4], &mut rng);
        let b0 = randn(&[2, 4, 3], &mut rng);

        fn network(t: &mut Tape, a: Var, b: Var) -> Var {
            let c = t.batch_matmul(a, b);
            let c = t.tanh(c);
            t.sum_all(c)
        }

        let mut t = Tape::new();
        let a = t.leaf(a0.clone());
        let b = t.leaf(b0.clone());
        let out = network(&mut t, a, b);
        let grads = t.grad(out, &[a, b]);

        let coords: Vec<usize> = (0..24).collect();
        let fa = |x: &ArrayD<f64>| {
            let mut t = Tape::new();
            let (a, b) = (t.leaf(x.clone()), t.leaf(b0.clone()));
            let out = network(&mut t, a, b);
            t.scalar(out)
        };
        let na = central_difference(&fa, &a0, &coords, 1e-6);
        let ga: Vec<f64> = coords
            .iter()
            .map(|&c| t.value(grads[0]).as_slice().unwrap()[c])
            .collect();
        assert!(max_relative_error(&ga, &na) < 1e-6);

        let fb = |x: &ArrayD<f64>| {
            let mut t = Tape::new();
            let (a, b) = (t.leaf(a0.clone()), t.leaf(x.clone()));
            let out = network(&mut t, a, b);
            t.scalar(out)
        };
        let nb = central_difference(&fb, &b0, &coords, 1e-6);
        let gb: Vec<f64> = coords
            .iter()
            .map(|&c| t.value(grads[1]).as_slice().unwrap()[c])
            .collect();
        assert!(max_relative_error(&gb, &nb) < 1e-6);
    }

    /// Second-order check in the shape of the gradient penalty: the loss
    /// contains the norm of a first-order gradient and is differentiated
    /// with respect to the parameters.
    #[test]
    fn second_order_gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let w0 = randn(&[4, 1], &mut rng);
        let x0 = randn(&[3, 4], &mut rng);

        fn penalty(t: &mut Tape, w: Var, x: Var) -> Var {
            let h = t.matmul(x, w);
            let y = t.tanh(h);
            let out = t.sum_all(y);
            let g = t.grad(out, &[x])[0];
            let g2 = t.square(g);
            let total = t.sum_all(g2);
            let shifted = t.add_scalar(total, -1.0);
            t.square(shifted)
        }

        let eval = |wa: &ArrayD<f64>| -> f64 {
            let mut t = Tape::new();
            let w = t.leaf(wa.clone());
            let x = t.leaf(x0.clone());
            let p = penalty(&mut t, w, x);
            t.scalar(p)
        };

        let mut t = Tape::new();
        let w = t.leaf(w0.clone());
        let x = t.leaf(x0.clone());
        let p = penalty(&mut t, w, x);
        let grads = t.grad(p, &[w]);

        let coords: Vec<usize> = (0..4).collect();
        let numeric = central_difference(&eval, &w0, &coords, 1e-6);
        let analytic: Vec<f64> = coords
            .iter()
            .map(|&c| t.value(grads[0]).as_slice().unwrap()[c])
            .collect();
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-5, "second-order rel err {err}");
    }

    #[test]
    fn unused_input_gets_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let y = t.leaf(ArrayD::from_elem(IxDyn(&[3]), 2.0));
        let s = t.sum_all(x);
        let grads = t.grad(s, &[x, y]);
        assert_eq!(t.value(grads[1]).sum(), 0.0);
        assert_eq!(t.shape(grads[1]), &[3]);
    }

    #[test]
    fn stop_grad_blocks_backpropagation() {
        let mut t = Tape::new();
        let x = t.leaf(ArrayD::from_elem(IxDyn(&[2]), 2.0));
        let d = t.stop_grad(x);
        let p = t.mul(x, d);
        let s = t.sum_all(p);
        let grads = t.grad(s, &[x]);
        // Only the live factor contributes: d/dx (x * const(x)) = const(x).
        assert_eq!(t.value(grads[0]).as_slice().unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn variance_and_softmax_values() {
        let mut t = Tape::new();
        let x = t.constant(ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.0, 2.0]).unwrap());
        let v = t.variance(x);
        assert!((t.scalar(v) - 1.0).abs() < 1e-12, "population variance");
        let l = t.constant(ArrayD::from_shape_vec(IxDyn(&[1, 3]), vec![1.0, 1.0, 1.0]).unwrap());
        let s = t.softmax_last(l);
        for &p in t.value(s).iter() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }
}

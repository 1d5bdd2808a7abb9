//! Reverse-mode differentiation over a linear tape of recorded ops.
//!
//! Ops append nodes holding the forward value plus whatever the backward
//! rule needs; `backward` replays the tape in reverse topological order
//! (which is exactly the recording order) and accumulates gradients.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Scalar, Tensor};

pub type VarId = usize;

/// Minimum |alpha| before division in attention scaling is refused.
pub const ALPHA_GUARD: f64 = 1e-8;

enum Op {
    Leaf,
    Conv2d {
        x: VarId,
        w: VarId,
        bias: Option<VarId>,
        pad: usize,
        groups: usize,
    },
    PixelUnshuffle { x: VarId, r: usize },
    PixelShuffle { x: VarId, r: usize },
    Gelu { x: VarId },
    Softmax { x: VarId, axis: usize },
    LayerNorm {
        x: VarId,
        gamma: VarId,
        beta: Option<VarId>,
    },
    Matmul {
        a: VarId,
        b: VarId,
        batch: usize,
        a_batch: usize,
        b_batch: usize,
        m: usize,
        k: usize,
        p: usize,
    },
    Add { a: VarId, b: VarId },
    Sub { a: VarId, b: VarId },
    Mul { a: VarId, b: VarId },
    Abs { x: VarId },
    Scale { x: VarId },
    SumAll { x: VarId },
    DivScalarVar { x: VarId, s: VarId },
    SliceLast { x: VarId, start: usize },
    ConcatLast { inputs: Vec<VarId> },
    Reshape { x: VarId },
    TransposeLast2 { x: VarId },
    L2NormalizeAxis { x: VarId, axis: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
    // Saved intermediates for backward rules that need them.
    saved_a: Vec<T>,
    saved_b: Vec<T>,
    scale: T,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor as a differentiation leaf.
    pub fn leaf(&mut self, t: Tensor<T>) -> VarId {
        let requires = t.requires_grad;
        self.push(t, Op::Leaf, requires)
    }

    pub fn value(&self, id: VarId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    /// Gradient of the last `backward` call w.r.t. `id`, if one was produced.
    pub fn grad(&self, id: VarId) -> Option<&[T]> {
        self.nodes[id].value.grad.as_deref()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> VarId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            saved_a: Vec::new(),
            saved_b: Vec::new(),
            scale: T::zero(),
        });
        self.nodes.len() - 1
    }

    fn requires(&self, id: VarId) -> bool {
        self.nodes[id].requires_grad
    }

    // ---- ops -----------------------------------------------------------

    /// Stride-1 zero-padded convolution. `x`: [n,h,w,cin], `w`:
    /// [k,k,cin/groups,cout], optional `bias`: [cout].
    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        bias: Option<VarId>,
        pad: usize,
        groups: usize,
    ) -> Result<VarId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d expects rank-4 input/weight, got {:?} and {:?}",
                xs, ws
            )));
        }
        let (cin, k, cout) = (xs[3], ws[0], ws[3]);
        if ws[1] != k || k % 2 == 0 {
            return Err(Error::Dimension(format!("kernel must be square and odd, got {:?}", ws)));
        }
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::Config(format!(
                "groups {} must divide cin {} and cout {}",
                groups, cin, cout
            )));
        }
        if ws[2] != cin / groups {
            return Err(Error::Dimension(format!(
                "weight input extent {} != cin/groups {}",
                ws[2],
                cin / groups
            )));
        }
        if let Some(b) = bias {
            let bs = self.value(b).shape();
            if bs != [cout] {
                return Err(Error::Dimension(format!("bias shape {:?} != [{}]", bs, cout)));
            }
        }
        if xs[1] + 2 * pad < k || xs[2] + 2 * pad < k {
            return Err(Error::Dimension("input smaller than kernel".into()));
        }
        let out = kernels::conv2d_forward(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            pad,
            groups,
        );
        let req = self.requires(x)
            || self.requires(w)
            || bias.map(|b| self.requires(b)).unwrap_or(false);
        Ok(self.push(out, Op::Conv2d { x, w, bias, pad, groups }, req))
    }

    pub fn pixel_unshuffle(&mut self, x: VarId, r: usize) -> Result<VarId> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 || r == 0 || s[1] % r != 0 || s[2] % r != 0 {
            return Err(Error::Dimension(format!(
                "pixel_unshuffle: r={} must divide spatial extents of {:?}",
                r, s
            )));
        }
        let out = kernels::pixel_unshuffle(self.value(x), r);
        let req = self.requires(x);
        Ok(self.push(out, Op::PixelUnshuffle { x, r }, req))
    }

    pub fn pixel_shuffle(&mut self, x: VarId, r: usize) -> Result<VarId> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 || r == 0 || s[3] % (r * r) != 0 {
            return Err(Error::Dimension(format!(
                "pixel_shuffle: r^2={} must divide channels of {:?}",
                r * r,
                s
            )));
        }
        let out = kernels::pixel_shuffle(self.value(x), r);
        let req = self.requires(x);
        Ok(self.push(out, Op::PixelShuffle { x, r }, req))
    }

    pub fn gelu(&mut self, x: VarId) -> VarId {
        let out_data: Vec<T> = self.value(x).data().iter().map(|&v| kernels::gelu(v)).collect();
        let out = Tensor::new(self.value(x).shape(), out_data).unwrap();
        let req = self.requires(x);
        self.push(out, Op::Gelu { x }, req)
    }

    pub fn softmax(&mut self, x: VarId, axis: usize) -> Result<VarId> {
        if axis >= self.value(x).shape().len() {
            return Err(Error::Dimension(format!(
                "softmax axis {} out of range for {:?}",
                axis,
                self.value(x).shape()
            )));
        }
        let out = kernels::softmax(self.value(x), axis);
        let req = self.requires(x);
        Ok(self.push(out, Op::Softmax { x, axis }, req))
    }

    /// Layer normalization over the trailing channel axis; biased variance,
    /// eps inside the square root. `beta` is absent in bias-free mode.
    pub fn layer_norm(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: Option<VarId>,
        eps: T,
    ) -> Result<VarId> {
        let c = *self.value(x).shape().last().ok_or_else(|| {
            Error::Dimension("layer_norm on rank-0 tensor".into())
        })?;
        if self.value(gamma).shape() != [c] {
            return Err(Error::Dimension(format!(
                "gamma shape {:?} != [{}]",
                self.value(gamma).shape(),
                c
            )));
        }
        if let Some(b) = beta {
            if self.value(b).shape() != [c] {
                return Err(Error::Dimension(format!(
                    "beta shape {:?} != [{}]",
                    self.value(b).shape(),
                    c
                )));
            }
        }
        let (out, inv_std, means) = kernels::layer_norm_forward(
            self.value(x),
            self.value(gamma).data(),
            beta.map(|b| self.value(b).data()),
            eps,
        );
        let req = self.requires(x)
            || self.requires(gamma)
            || beta.map(|b| self.requires(b)).unwrap_or(false);
        let id = self.push(out, Op::LayerNorm { x, gamma, beta }, req);
        self.nodes[id].saved_a = inv_std;
        self.nodes[id].saved_b = means;
        Ok(id)
    }

    /// Batched matrix product: [..,m,k] x [..,k,p]. Rank 2 or 3; a rank-2
    /// (or batch-1) operand broadcasts against the other's batch extent.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let asp = self.value(a).shape().to_vec();
        let bsp = self.value(b).shape().to_vec();
        if asp.len() < 2 || asp.len() > 3 || bsp.len() < 2 || bsp.len() > 3 {
            return Err(Error::Dimension(format!(
                "matmul supports rank 2/3, got {:?} x {:?}",
                asp, bsp
            )));
        }
        let (a_batch, m, ak) = if asp.len() == 3 {
            (asp[0], asp[1], asp[2])
        } else {
            (1, asp[0], asp[1])
        };
        let (b_batch, bk, p) = if bsp.len() == 3 {
            (bsp[0], bsp[1], bsp[2])
        } else {
            (1, bsp[0], bsp[1])
        };
        if ak != bk {
            return Err(Error::Dimension(format!(
                "matmul inner extents differ: {:?} x {:?}",
                asp, bsp
            )));
        }
        if a_batch != b_batch && a_batch != 1 && b_batch != 1 {
            return Err(Error::Dimension(format!(
                "matmul batch extents incompatible: {} vs {}",
                a_batch, b_batch
            )));
        }
        let batch = a_batch.max(b_batch);
        let data = kernels::matmul_forward(
            self.value(a).data(),
            self.value(b).data(),
            batch,
            a_batch,
            b_batch,
            m,
            ak,
            p,
        );
        let shape = if asp.len() == 3 || bsp.len() == 3 {
            vec![batch, m, p]
        } else {
            vec![m, p]
        };
        let out = Tensor::new(&shape, data).unwrap();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(
            out,
            Op::Matmul { a, b, batch, a_batch, b_batch, m, k: ak, p },
            req,
        ))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.zip_op(a, b, Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.zip_op(a, b, Op::Sub { a, b }, |x, y| x - y)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.zip_op(a, b, Op::Mul { a, b }, |x, y| x * y)
    }

    fn zip_op(
        &mut self,
        a: VarId,
        b: VarId,
        op: Op,
        f: impl Fn(T, T) -> T,
    ) -> Result<VarId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "elementwise op on {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(self.value(a).shape(), data).unwrap();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(out, op, req))
    }

    pub fn abs(&mut self, x: VarId) -> VarId {
        let data: Vec<T> = self.value(x).data().iter().map(|v| v.abs()).collect();
        let out = Tensor::new(self.value(x).shape(), data).unwrap();
        let req = self.requires(x);
        self.push(out, Op::Abs { x }, req)
    }

    pub fn scale(&mut self, x: VarId, c: T) -> VarId {
        let data: Vec<T> = self.value(x).data().iter().map(|&v| v * c).collect();
        let out = Tensor::new(self.value(x).shape(), data).unwrap();
        let req = self.requires(x);
        let id = self.push(out, Op::Scale { x }, req);
        self.nodes[id].scale = c;
        id
    }

    pub fn sum_all(&mut self, x: VarId) -> VarId {
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc = acc + v;
        }
        let req = self.requires(x);
        self.push(Tensor::scalar(acc), Op::SumAll { x }, req)
    }

    /// out = x / s with `s` a one-element variable (learnable temperature).
    pub fn div_scalar_var(&mut self, x: VarId, s: VarId) -> Result<VarId> {
        if self.value(s).numel() != 1 {
            return Err(Error::Dimension(format!(
                "scalar divisor must have one element, got {:?}",
                self.value(s).shape()
            )));
        }
        let sv = self.value(s).data()[0];
        if sv.abs().as_f64() < ALPHA_GUARD {
            return Err(Error::Numeric(format!(
                "|alpha| = {:e} below guard {:e}",
                sv.as_f64(),
                ALPHA_GUARD
            )));
        }
        let data: Vec<T> = self.value(x).data().iter().map(|&v| v / sv).collect();
        let out = Tensor::new(self.value(x).shape(), data).unwrap();
        let req = self.requires(x) || self.requires(s);
        Ok(self.push(out, Op::DivScalarVar { x, s }, req))
    }

    /// Slice `len` channels from the trailing axis starting at `start`.
    pub fn slice_last(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        let shape = self.value(x).shape().to_vec();
        let c = *shape.last().ok_or_else(|| Error::Dimension("slice on rank-0".into()))?;
        if start + len > c || len == 0 {
            return Err(Error::Dimension(format!(
                "slice [{}, {}) out of channel range {}",
                start,
                start + len,
                c
            )));
        }
        let rows = self.value(x).numel() / c;
        let xs = self.value(x).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xs[r * c + start..][..len]);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        let out = Tensor::new(&out_shape, data).unwrap();
        let req = self.requires(x);
        Ok(self.push(out, Op::SliceLast { x, start }, req))
    }

    /// Concatenate along the trailing axis.
    pub fn concat_last(&mut self, inputs: &[VarId]) -> Result<VarId> {
        if inputs.is_empty() {
            return Err(Error::Dimension("concat of zero tensors".into()));
        }
        let first = self.value(inputs[0]).shape().to_vec();
        let lead = &first[..first.len() - 1];
        let mut total_c = 0;
        for &id in inputs {
            let s = self.value(id).shape();
            if &s[..s.len() - 1] != lead {
                return Err(Error::Dimension(format!(
                    "concat leading extents differ: {:?} vs {:?}",
                    first, s
                )));
            }
            total_c += *s.last().unwrap();
        }
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total_c);
        for r in 0..rows {
            for &id in inputs {
                let c = *self.value(id).shape().last().unwrap();
                data.extend_from_slice(&self.value(id).data()[r * c..][..c]);
            }
        }
        let mut out_shape = lead.to_vec();
        out_shape.push(total_c);
        let out = Tensor::new(&out_shape, data).unwrap();
        let req = inputs.iter().any(|&id| self.requires(id));
        Ok(self.push(out, Op::ConcatLast { inputs: inputs.to_vec() }, req))
    }

    pub fn reshape(&mut self, x: VarId, shape: &[usize]) -> Result<VarId> {
        let out = self.value(x).clone().reshaped(shape)?;
        let req = self.requires(x);
        Ok(self.push(out, Op::Reshape { x }, req))
    }

    pub fn transpose_last2(&mut self, x: VarId) -> Result<VarId> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::Dimension("transpose needs rank >= 2".into()));
        }
        let out = transpose_last2_tensor(self.value(x));
        let req = self.requires(x);
        Ok(self.push(out, Op::TransposeLast2 { x }, req))
    }

    /// L2 normalization of the lanes along `axis` (optional Q/K stabilizer).
    pub fn l2_normalize(&mut self, x: VarId, axis: usize) -> Result<VarId> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "l2_normalize axis {} out of range for {:?}",
                axis, shape
            )));
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let eps = T::f(1e-12);
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); xs.len()];
        let mut norms = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut sq = T::zero();
                for l in 0..len {
                    let v = xs[base + l * inner];
                    sq = sq + v * v;
                }
                let norm = (sq + eps).sqrt();
                norms[o * inner + i] = norm;
                for l in 0..len {
                    out[base + l * inner] = xs[base + l * inner] / norm;
                }
            }
        }
        let out = Tensor::new(&shape, out).unwrap();
        let req = self.requires(x);
        let id = self.push(out, Op::L2NormalizeAxis { x, axis }, req);
        self.nodes[id].saved_a = norms;
        Ok(id)
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, pred: VarId, target: VarId) -> Result<VarId> {
        let n = self.value(pred).numel();
        let d = self.sub(pred, target)?;
        let a = self.abs(d);
        let s = self.sum_all(a);
        Ok(self.scale(s, T::f(1.0 / n as f64)))
    }

    // ---- backward ------------------------------------------------------

    /// Populates gradients for every requires-grad leaf reachable from
    /// `loss`; unreachable leaves get zero gradients.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss] = Some(vec![T::one()]);

        for id in (0..n).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(id, &g, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf) {
                self.nodes[id].value.grad = Some(g);
            }
        }
        // Leaves not reached by the loss still get (zero) gradients.
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) && node.requires_grad && node.value.grad.is_none() {
                node.value.grad = Some(vec![T::zero(); node.value.numel()]);
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], id: VarId, delta: &[T]) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(delta) {
                    *a = *a + *b;
                }
            }
            None => grads[id] = Some(delta.to_vec()),
        }
    }

    fn backprop_node(&self, id: VarId, g: &[T], grads: &mut [Option<Vec<T>>]) {
        // Ops are matched by value to keep the borrow on `self.nodes[id]` short.
        match &self.nodes[id].op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, bias, pad, groups } => {
                if self.requires(x) {
                    let dx = kernels::conv2d_backward_input(
                        g,
                        self.value(w),
                        self.value(x).shape(),
                        pad,
                        groups,
                    );
                    self.accumulate(grads, x, &dx);
                }
                if self.requires(w) {
                    let dw = kernels::conv2d_backward_weight(
                        self.value(x),
                        g,
                        self.value(w).shape(),
                        pad,
                        groups,
                    );
                    self.accumulate(grads, w, &dw);
                }
                if let Some(b) = bias {
                    if self.requires(b) {
                        let db = kernels::conv2d_backward_bias(g, self.value(b).numel());
                        self.accumulate(grads, b, &db);
                    }
                }
            }
            &Op::PixelUnshuffle { x, r } => {
                let gt = Tensor::new(self.value(id).shape(), g.to_vec()).unwrap();
                let dx = kernels::pixel_shuffle(&gt, r);
                self.accumulate(grads, x, dx.data());
            }
            &Op::PixelShuffle { x, r } => {
                let gt = Tensor::new(self.value(id).shape(), g.to_vec()).unwrap();
                let dx = kernels::pixel_unshuffle(&gt, r);
                self.accumulate(grads, x, dx.data());
            }
            &Op::Gelu { x } => {
                let dx: Vec<T> = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| gv * kernels::gelu_grad(v))
                    .collect();
                self.accumulate(grads, x, &dx);
            }
            &Op::Softmax { x, axis } => {
                let dx = kernels::softmax_backward(self.value(id), g, axis);
                self.accumulate(grads, x, &dx);
            }
            &Op::LayerNorm { x, gamma, beta } => {
                let (dx, dgamma, dbeta) = kernels::layer_norm_backward(
                    self.value(x),
                    self.value(gamma).data(),
                    beta.is_some(),
                    &self.nodes[id].saved_a,
                    &self.nodes[id].saved_b,
                    g,
                );
                if self.requires(x) {
                    self.accumulate(grads, x, &dx);
                }
                if self.requires(gamma) {
                    self.accumulate(grads, gamma, &dgamma);
                }
                if let (Some(b), Some(db)) = (beta, dbeta) {
                    if self.requires(b) {
                        self.accumulate(grads, b, &db);
                    }
                }
            }
            &Op::Matmul { a, b, batch, a_batch, b_batch, m, k, p } => {
                if self.requires(a) {
                    let da = kernels::matmul_backward_a(
                        g,
                        self.value(b).data(),
                        batch,
                        a_batch,
                        b_batch,
                        m,
                        k,
                        p,
                    );
                    self.accumulate(grads, a, &da);
                }
                if self.requires(b) {
                    let db = kernels::matmul_backward_b(
                        g,
                        self.value(a).data(),
                        batch,
                        a_batch,
                        b_batch,
                        m,
                        k,
                        p,
                    );
                    self.accumulate(grads, b, &db);
                }
            }
            &Op::Add { a, b } => {
                self.accumulate(grads, a, g);
                self.accumulate(grads, b, g);
            }
            &Op::Sub { a, b } => {
                self.accumulate(grads, a, g);
                if self.requires(b) {
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    self.accumulate(grads, b, &neg);
                }
            }
            &Op::Mul { a, b } => {
                if self.requires(a) {
                    let da: Vec<T> =
                        g.iter().zip(self.value(b).data()).map(|(&gv, &bv)| gv * bv).collect();
                    self.accumulate(grads, a, &da);
                }
                if self.requires(b) {
                    let db: Vec<T> =
                        g.iter().zip(self.value(a).data()).map(|(&gv, &av)| gv * av).collect();
                    self.accumulate(grads, b, &db);
                }
            }
            &Op::Abs { x } => {
                // sign(0) := 0
                let dx: Vec<T> = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| {
                        if v > T::zero() {
                            gv
                        } else if v < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accumulate(grads, x, &dx);
            }
            &Op::Scale { x } => {
                let c = self.nodes[id].scale;
                let dx: Vec<T> = g.iter().map(|&v| v * c).collect();
                self.accumulate(grads, x, &dx);
            }
            &Op::SumAll { x } => {
                let dx = vec![g[0]; self.value(x).numel()];
                self.accumulate(grads, x, &dx);
            }
            &Op::DivScalarVar { x, s } => {
                let sv = self.value(s).data()[0];
                if self.requires(x) {
                    let dx: Vec<T> = g.iter().map(|&v| v / sv).collect();
                    self.accumulate(grads, x, &dx);
                }
                if self.requires(s) {
                    let mut acc = T::zero();
                    for (&gv, &xv) in g.iter().zip(self.value(x).data()) {
                        acc = acc + gv * xv;
                    }
                    let ds = [-acc / (sv * sv)];
                    self.accumulate(grads, s, &ds);
                }
            }
            &Op::SliceLast { x, start } => {
                let c = *self.value(x).shape().last().unwrap();
                let len = *self.value(id).shape().last().unwrap();
                let rows = self.value(x).numel() / c;
                let mut dx = vec![T::zero(); self.value(x).numel()];
                for r in 0..rows {
                    dx[r * c + start..][..len].copy_from_slice(&g[r * len..][..len]);
                }
                self.accumulate(grads, x, &dx);
            }
            Op::ConcatLast { inputs } => {
                let inputs = inputs.clone();
                let total_c = *self.value(id).shape().last().unwrap();
                let rows = self.value(id).numel() / total_c;
                let mut offset = 0;
                for &inp in &inputs {
                    let c = *self.value(inp).shape().last().unwrap();
                    if self.requires(inp) {
                        let mut dx = vec![T::zero(); rows * c];
                        for r in 0..rows {
                            dx[r * c..][..c]
                                .copy_from_slice(&g[r * total_c + offset..][..c]);
                        }
                        self.accumulate(grads, inp, &dx);
                    }
                    offset += c;
                }
            }
            &Op::Reshape { x } => {
                self.accumulate(grads, x, g);
            }
            &Op::TransposeLast2 { x } => {
                let gt = Tensor::new(self.value(id).shape(), g.to_vec()).unwrap();
                let dx = transpose_last2_tensor(&gt);
                self.accumulate(grads, x, dx.data());
            }
            &Op::L2NormalizeAxis { x, axis } => {
                let shape = self.value(x).shape().to_vec();
                let len = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..axis].iter().product();
                let ys = self.value(id).data();
                let norms = &self.nodes[id].saved_a;
                let mut dx = vec![T::zero(); ys.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let norm = norms[o * inner + i];
                        let mut dot = T::zero();
                        for l in 0..len {
                            let idx = base + l * inner;
                            dot = dot + g[idx] * ys[idx];
                        }
                        for l in 0..len {
                            let idx = base + l * inner;
                            dx[idx] = (g[idx] - ys[idx] * dot) / norm;
                        }
                    }
                }
                self.accumulate(grads, x, &dx);
            }
        }
    }
}

fn transpose_last2_tensor<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let shape = x.shape();
    let rank = shape.len();
    let (a, b) = (shape[rank - 2], shape[rank - 1]);
    let batch: usize = shape[..rank - 2].iter().product();
    let xs = x.data();
    let mut out = vec![T::zero(); xs.len()];
    for bi in 0..batch {
        let xm = &xs[bi * a * b..][..a * b];
        let om = &mut out[bi * a * b..][..a * b];
        for i in 0..a {
            for j in 0..b {
                om[j * a + i] = xm[i * b + j];
            }
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape[rank - 2] = b;
    out_shape[rank - 1] = a;
    Tensor::new(&out_shape, out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, grad_check_single};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap().with_grad());
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_elementwise_square() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_grad());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_grad());
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_zeroes_unreachable_leaves() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_grad());
        let unused = tape.leaf(Tensor::new(&[3], vec![5.0; 3]).unwrap().with_grad());
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn grad_check_exact_for_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_t(&[3, 3], &mut rng);
        let err = grad_check_single(&|t: &mut Tape<f64>, x| Ok(t.sum_all(x)), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "err {err}");
    }

    #[test]
    fn grad_check_gelu() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 16;
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = Tensor::new(&[n], data).unwrap();
        let err = grad_check_single(
            &|t: &mut Tape<f64>, x| {
                let g = t.gelu(x);
                Ok(t.sum_all(g))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    /// Weights each output element so reductions cannot hide sign errors.
    fn weighted_sum(t: &mut Tape<f64>, x: VarId) -> Result<VarId> {
        let n = t.value(x).numel();
        let shape = t.value(x).shape().to_vec();
        let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.1 * i as f64).collect();
        let w = t.leaf(Tensor::new(&shape, w).unwrap());
        let p = t.mul(x, w)?;
        Ok(t.sum_all(p))
    }

    #[test]
    fn grad_check_conv2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_t(&[1, 4, 4, 4], &mut rng);
        let w = rand_t(&[3, 3, 2, 6], &mut rng);
        let b = rand_t(&[6], &mut rng);
        let err = grad_check(
            &|t: &mut Tape<f64>, ids: &[VarId]| {
                let y = t.conv2d(ids[0], ids[1], Some(ids[2]), 1, 2)?;
                weighted_sum(t, y)
            },
            &[x, w, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn grad_check_matmul_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_t(&[2, 3, 4], &mut rng);
        let b = rand_t(&[1, 4, 2], &mut rng);
        let err = grad_check(
            &|t: &mut Tape<f64>, ids: &[VarId]| {
                let y = t.matmul(ids[0], ids[1])?;
                weighted_sum(t, y)
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn grad_check_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_t(&[3, 5], &mut rng);
        let err = grad_check(
            &|t: &mut Tape<f64>, ids: &[VarId]| {
                let y = t.softmax(ids[0], 1)?;
                weighted_sum(t, y)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn grad_check_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_t(&[1, 2, 2, 5], &mut rng);
        let gamma = rand_t(&[5], &mut rng);
        let beta = rand_t(&[5], &mut rng);
        let err = grad_check(
            &|t: &mut Tape<f64>, ids: &[VarId]| {
                let y = t.layer_norm(ids[0], ids[1], Some(ids[2]), 1e-5)?;
                weighted_sum(t, y)
            },
            &[x, gamma, beta],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn grad_check_pixel_shuffles() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_t(&[1, 4, 4, 2], &mut rng);
        let err = grad_check(
            &|t: &mut Tape<f64>, ids: &[VarId]| {
                let y = t.pixel_unshuffle(ids[0], 2)?;
                let y = t.pixel_shuffle(y, 2)?;
                weighted_sum(t, y)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn grad_check_slice_concat_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_t(&[2, 3, 6], &mut rng);
        let err = grad_check(
            &|t: &mut Tape<f64>, ids: &[VarId]| {
                let a = t.slice_last(ids[0], 0, 3)?;
                let b = t.slice_last(ids[0], 3, 3)?;
                let bt = t.transpose_last2(b)?;
                let prod = t.matmul(a, bt)?;
                let cc = t.concat_last(&[a, prod])?;
                weighted_sum(t, cc)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn grad_check_div_scalar_var() {
        // Gelu downstream keeps the s-gradient nonzero; normalizing here
        // would make the function scale-invariant and the check degenerate.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_t(&[2, 4], &mut rng);
        let s = Tensor::new(&[1], vec![1.3]).unwrap();
        let err = grad_check(
            &|t: &mut Tape<f64>, ids: &[VarId]| {
                let d = t.div_scalar_var(ids[0], ids[1])?;
                let a = t.gelu(d);
                weighted_sum(t, a)
            },
            &[x, s],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn grad_check_l2_normalize_both_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_t(&[2, 4], &mut rng);
        for axis in 0..2 {
            let err = grad_check(
                &|t: &mut Tape<f64>, ids: &[VarId]| {
                    let n = t.l2_normalize(ids[0], axis)?;
                    weighted_sum(t, n)
                },
                &[x.clone()],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "axis {axis} err {err}");
        }
    }

    #[test]
    fn grad_check_l1_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // Keep pred and target well separated so |.| is differentiable at
        // every probe.
        let pred = rand_t(&[2, 3], &mut rng);
        let target_data: Vec<f64> = pred.data().iter().map(|v| v + 2.0).collect();
        let target = Tensor::new(&[2, 3], target_data).unwrap();
        let err = grad_check(
            &|t: &mut Tape<f64>, ids: &[VarId]| t.l1_loss(ids[0], ids[1]),
            &[pred, target],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn alpha_guard_rejects_tiny_alpha() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::new(&[2, 2], vec![1.0; 4]).unwrap());
        let s = tape.leaf(Tensor::new(&[1], vec![1e-12]).unwrap());
        assert!(matches!(tape.div_scalar_var(x, s), Err(Error::Numeric(_))));
    }
}

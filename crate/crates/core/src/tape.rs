//! Reverse-mode autodiff on a linear tape.
//!
//! Operations append nodes holding the op kind, input ids, and the forward
//! value; node order is the topological order of the computation. Values are
//! immutable once pushed. [`Tape::backward`] seeds a scalar root with 1 and
//! replays the tape once in reverse, accumulating gradients into slots keyed
//! by node id. Leaves created with [`Tape::leaf`] receive gradients;
//! [`Tape::constant`] values never do.

use crate::error::{Error, Result};
use crate::scan::{scan_lanes_adjoint, scan_lanes_forward};
use crate::tensor::{binary_broadcast, reduce_to_shape, strides_of, Scalar, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Exp,
    /// Errors on non-positive input.
    Log,
    /// Clamps the argument at 1e-8; zero subgradient below the clamp.
    LogClamped,
    Sigmoid,
    Silu,
    Softplus,
    /// Errors on negative input.
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// Convolution flavor; all 3x3 modes use reflect padding of 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvMode {
    /// 1x1 kernel mapping Cin -> Cout, weight [Cin, Cout].
    Pointwise,
    /// 3x3 kernel, one filter per channel, weight [3, 3, C].
    Depthwise3x3,
    /// Dense 3x3 kernel, weight [3, 3, Cin, Cout].
    Full3x3,
}

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    Constant,
    Unary {
        kind: UnaryKind,
        x: NodeId,
    },
    /// out = mul * x + add; only the slope matters for the backward pass.
    Affine {
        x: NodeId,
        mul: T,
    },
    Binary {
        kind: BinaryKind,
        lhs: NodeId,
        rhs: NodeId,
    },
    /// x [.., In] times w [In, Out], no bias.
    Linear {
        x: NodeId,
        w: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        bias: NodeId,
        mode: ConvMode,
        stride: usize,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        /// Per-location mean and reciprocal std saved at forward time.
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    /// Softmax over the last axis.
    Softmax {
        x: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    Permute {
        x: NodeId,
        axes: Vec<usize>,
    },
    Concat {
        xs: Vec<NodeId>,
        axis: usize,
    },
    Narrow {
        x: NodeId,
        axis: usize,
        start: usize,
    },
    /// Reverse along one axis.
    Flip {
        x: NodeId,
        axis: usize,
    },
    Reduce {
        x: NodeId,
        axis: usize,
        mean: bool,
    },
    ReduceAll {
        x: NodeId,
        mean: bool,
    },
    /// NHWC reflect padding [top, bottom, left, right].
    ReflectPad {
        x: NodeId,
        pad: [usize; 4],
    },
    ResizeBilinear {
        x: NodeId,
    },
    /// (B, H, W, C*r*r) -> (B, H*r, W*r, C)
    PixelShuffle {
        x: NodeId,
        r: usize,
    },
    /// h_t = a_t * h_{t-1} + b_t along axis 1, h_0 = 0.
    Scan {
        a: NodeId,
        b: NodeId,
    },
    /// mean(hypot(x - y, eps)); scalar output.
    Charbonnier {
        x: NodeId,
        y: NodeId,
        eps: T,
    },
}

struct Node<T: Scalar> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, keyed by node id.
pub struct Gradients<T: Scalar> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }
}

/// Recording tape. Confined to one logical execution stream; concurrent
/// work uses one tape per worker.
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

    /// Total bytes held by node values; a proxy for peak live memory.
    pub fn live_bytes(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| n.value.numel() * T::BYTE_WIDTH)
            .sum()
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Non-differentiable input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::contract(format!(
                "node {} is not on this tape (len {})",
                id.0,
                self.nodes.len()
            )));
        }
        Ok(())
    }

    fn req(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ── elementwise ──────────────────────────────────────────────────

    pub fn unary(&mut self, kind: UnaryKind, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let xv = self.value(x);
        let clamp = T::from_f64(1e-8);
        let mut data = Vec::with_capacity(xv.numel());
        for &v in xv.data() {
            let out = match kind {
                UnaryKind::Exp => v.exp(),
                UnaryKind::Log => {
                    if v.to_f64() <= 0.0 {
                        return Err(Error::Domain(format!(
                            "log of non-positive value {v} in strict mode"
                        )));
                    }
                    v.ln()
                }
                UnaryKind::LogClamped => v.maxs(clamp).ln(),
                UnaryKind::Sigmoid => sigmoid(v),
                UnaryKind::Silu => v * sigmoid(v),
                UnaryKind::Softplus => softplus(v),
                UnaryKind::Sqrt => {
                    if v.to_f64() < 0.0 {
                        return Err(Error::Domain(format!("sqrt of negative value {v}")));
                    }
                    v.sqrt()
                }
            };
            data.push(out);
        }
        let value = Tensor::new(data, xv.shape())?;
        let requires = self.req(x);
        Ok(self.push(Op::Unary { kind, x }, value, requires))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(UnaryKind::Exp, x)
    }
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(UnaryKind::Log, x)
    }
    pub fn log_clamped(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(UnaryKind::LogClamped, x)
    }
    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(UnaryKind::Sigmoid, x)
    }
    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(UnaryKind::Silu, x)
    }
    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(UnaryKind::Softplus, x)
    }
    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(UnaryKind::Sqrt, x)
    }

    /// out = mul * x + add, elementwise with scalar coefficients.
    pub fn affine(&mut self, x: NodeId, mul: T, add: T) -> Result<NodeId> {
        self.check(x)?;
        let value = self.value(x).map(|v| mul * v + add);
        let requires = self.req(x);
        Ok(self.push(Op::Affine { x, mul }, value, requires))
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.affine(x, T::from_f64(-1.0), T::ZERO)
    }

    pub fn binary(&mut self, kind: BinaryKind, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.check(lhs)?;
        self.check(rhs)?;
        let (a, b) = (self.value(lhs), self.value(rhs));
        let value = match kind {
            BinaryKind::Add => binary_broadcast(a, b, |x, y| x + y)?,
            BinaryKind::Sub => binary_broadcast(a, b, |x, y| x - y)?,
            BinaryKind::Mul => binary_broadcast(a, b, |x, y| x * y)?,
            BinaryKind::Div => binary_broadcast(a, b, |x, y| x / y)?,
        };
        let requires = self.req(lhs) || self.req(rhs);
        Ok(self.push(Op::Binary { kind, lhs, rhs }, value, requires))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Add, a, b)
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Sub, a, b)
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Mul, a, b)
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Div, a, b)
    }

    // ── linear algebra ───────────────────────────────────────────────

    /// x [.., In] @ w [In, Out] -> [.., Out]. Leading axes are batch.
    pub fn linear(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        self.check(x)?;
        self.check(w)?;
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.rank() != 2 {
            return Err(Error::shape(format!(
                "linear weight must be rank 2, got {:?}",
                wv.shape()
            )));
        }
        let (d_in, d_out) = (wv.dim(0), wv.dim(1));
        if xv.rank() == 0 || xv.shape()[xv.rank() - 1] != d_in {
            return Err(Error::shape(format!(
                "linear input {:?} does not end in {}",
                xv.shape(),
                d_in
            )));
        }
        let rows = xv.numel() / d_in;
        let mut out = vec![T::ZERO; rows * d_out];
        let xd = xv.data();
        let wd = wv.data();
        for r in 0..rows {
            let xrow = &xd[r * d_in..(r + 1) * d_in];
            let orow = &mut out[r * d_out..(r + 1) * d_out];
            for (i, &xi) in xrow.iter().enumerate() {
                let wrow = &wd[i * d_out..(i + 1) * d_out];
                for (o, &wio) in orow.iter_mut().zip(wrow.iter()) {
                    *o += xi * wio;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = d_out;
        let value = Tensor::new(out, &shape)?;
        let requires = self.req(x) || self.req(w);
        Ok(self.push(Op::Linear { x, w }, value, requires))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: NodeId,
        mode: ConvMode,
        stride: usize,
    ) -> Result<NodeId> {
        self.check(x)?;
        self.check(w)?;
        self.check(bias)?;
        if stride != 1 && stride != 2 {
            return Err(Error::contract(format!("conv stride must be 1 or 2, got {stride}")));
        }
        let xv = self.value(x);
        if xv.rank() != 4 {
            return Err(Error::shape(format!("conv input must be NHWC, got {:?}", xv.shape())));
        }
        let (h, wd_, c_in) = (xv.dim(1), xv.dim(2), xv.dim(3));
        let wv = self.value(w);
        let bv = self.value(bias);
        let (c_out, k) = match mode {
            ConvMode::Pointwise => {
                if wv.rank() != 2 || wv.dim(0) != c_in {
                    return Err(Error::shape(format!(
                        "pointwise weight must be [{}, Cout], got {:?}",
                        c_in,
                        wv.shape()
                    )));
                }
                (wv.dim(1), 1)
            }
            ConvMode::Depthwise3x3 => {
                if wv.shape() != [3, 3, c_in] {
                    return Err(Error::shape(format!(
                        "depthwise weight must be [3, 3, {}], got {:?}",
                        c_in,
                        wv.shape()
                    )));
                }
                (c_in, 3)
            }
            ConvMode::Full3x3 => {
                if wv.rank() != 4 || wv.dim(0) != 3 || wv.dim(1) != 3 || wv.dim(2) != c_in {
                    return Err(Error::shape(format!(
                        "full3x3 weight must be [3, 3, {}, Cout], got {:?}",
                        c_in,
                        wv.shape()
                    )));
                }
                (wv.dim(3), 3)
            }
        };
        if bv.shape() != [c_out] {
            return Err(Error::shape(format!(
                "conv bias must be [{}], got {:?}",
                c_out,
                bv.shape()
            )));
        }
        if k == 3 && (h < 2 || wd_ < 2) {
            return Err(Error::shape(format!(
                "3x3 conv with reflect padding needs spatial extents >= 2, got {h}x{wd_}"
            )));
        }
        let oh = (h - 1) / stride + 1;
        let ow = (wd_ - 1) / stride + 1;
        let value = conv2d_forward(xv, wv, bv, mode, stride, oh, ow)?;
        let requires = self.req(x) || self.req(w) || self.req(bias);
        Ok(self.push(Op::Conv2d { x, w, bias, mode, stride }, value, requires))
    }

    /// Normalize over the channel (last) axis at every leading location.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> Result<NodeId> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        if eps.to_f64() <= 0.0 {
            return Err(Error::contract("layer_norm eps must be > 0"));
        }
        let xv = self.value(x);
        if xv.rank() == 0 {
            return Err(Error::shape("layer_norm input must have a channel axis"));
        }
        let c = xv.shape()[xv.rank() - 1];
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape(format!(
                "layer_norm gamma/beta must be [{c}], got {:?}/{:?}",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        let rows = xv.numel() / c;
        let xd = xv.data();
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let mut out = vec![T::ZERO; xv.numel()];
        let mut means = vec![T::ZERO; rows];
        let mut rstds = vec![T::ZERO; rows];
        let inv_c = T::from_f64(1.0 / c as f64);
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mut mean = T::ZERO;
            for &v in row {
                mean += v;
            }
            mean = mean * inv_c;
            let mut var = T::ZERO;
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var = var * inv_c;
            let rstd = T::ONE / (var + eps).sqrt();
            means[r] = mean;
            rstds[r] = rstd;
            let orow = &mut out[r * c..(r + 1) * c];
            for i in 0..c {
                orow[i] = (row[i] - mean) * rstd * gd[i] + bd[i];
            }
        }
        let value = Tensor::new(out, xv.shape())?;
        let requires = self.req(x) || self.req(gamma) || self.req(beta);
        Ok(self.push(
            Op::LayerNorm { x, gamma, beta, mean: means, rstd: rstds },
            value,
            requires,
        ))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let xv = self.value(x);
        if xv.rank() == 0 {
            return Err(Error::shape("softmax input must have a channel axis"));
        }
        let c = xv.shape()[xv.rank() - 1];
        let rows = xv.numel() / c;
        let xd = xv.data();
        let mut out = vec![T::ZERO; xv.numel()];
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mut m = row[0];
            for &v in row {
                m = m.maxs(v);
            }
            let mut denom = T::ZERO;
            let orow = &mut out[r * c..(r + 1) * c];
            for i in 0..c {
                let e = (row[i] - m).exp();
                orow[i] = e;
                denom += e;
            }
            for o in orow.iter_mut() {
                *o = *o / denom;
            }
        }
        let value = Tensor::new(out, xv.shape())?;
        let requires = self.req(x);
        Ok(self.push(Op::Softmax { x }, value, requires))
    }

    // ── shape ops ────────────────────────────────────────────────────

    /// Metadata-only reshape; the buffer is shared.
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check(x)?;
        let value = self.value(x).reshape(shape)?;
        let requires = self.req(x);
        Ok(self.push(Op::Reshape { x }, value, requires))
    }

    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        self.check(x)?;
        let xv = self.value(x);
        let rank = xv.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(format!(
                "invalid permutation {:?} for rank {}",
                axes, rank
            )));
        }
        let value = permute_tensor(xv, axes)?;
        let requires = self.req(x);
        Ok(self.push(Op::Permute { x, axes: axes.to_vec() }, value, requires))
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        for &x in xs {
            self.check(x)?;
        }
        let first = self.value(xs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::shape(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.value(x).shape();
            if s.len() != first.len()
                || s.iter().zip(first.iter()).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(format!(
                    "concat shapes {:?} vs {:?} differ off-axis",
                    s, first
                )));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![T::ZERO; shape.iter().product()];
        let row = total * inner;
        let mut off = 0;
        for &x in xs {
            let xv = self.value(x);
            let len = xv.dim(axis);
            let xd = xv.data();
            for o in 0..outer {
                let src = &xd[o * len * inner..(o + 1) * len * inner];
                let dst = &mut out[o * row + off * inner..o * row + (off + len) * inner];
                dst.copy_from_slice(src);
            }
            off += len;
        }
        let value = Tensor::new(out, &shape)?;
        let requires = xs.iter().any(|&x| self.req(x));
        Ok(self.push(Op::Concat { xs: xs.to_vec(), axis }, value, requires))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.check(x)?;
        let xv = self.value(x);
        if axis >= xv.rank() || start + len > xv.dim(axis) {
            return Err(Error::shape(format!(
                "narrow [{start}, {start}+{len}) on axis {axis} of {:?}",
                xv.shape()
            )));
        }
        let outer: usize = xv.shape()[..axis].iter().product();
        let inner: usize = xv.shape()[axis + 1..].iter().product();
        let full = xv.dim(axis);
        let mut out = vec![T::ZERO; outer * len * inner];
        let xd = xv.data();
        for o in 0..outer {
            let src = &xd[(o * full + start) * inner..(o * full + start + len) * inner];
            out[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(out, &shape)?;
        let requires = self.req(x);
        Ok(self.push(Op::Narrow { x, axis, start }, value, requires))
    }

    /// Reverse the entries along `axis`.
    pub fn flip(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.check(x)?;
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::shape(format!(
                "flip axis {axis} out of range for {:?}",
                xv.shape()
            )));
        }
        let value = flip_tensor(xv, axis)?;
        let requires = self.req(x);
        Ok(self.push(Op::Flip { x, axis }, value, requires))
    }

    /// Split along `axis` into pieces of the given sizes.
    pub fn split(&mut self, x: NodeId, axis: usize, sizes: &[usize]) -> Result<Vec<NodeId>> {
        self.check(x)?;
        let extent = {
            let xv = self.value(x);
            if axis >= xv.rank() {
                return Err(Error::shape(format!("split axis {axis} out of range")));
            }
            xv.dim(axis)
        };
        if sizes.iter().sum::<usize>() != extent {
            return Err(Error::shape(format!(
                "split sizes {:?} do not sum to extent {}",
                sizes, extent
            )));
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &len in sizes {
            out.push(self.narrow(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    pub fn reduce_mean(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce(x, axis, true)
    }

    pub fn reduce_sum(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce(x, axis, false)
    }

    fn reduce(&mut self, x: NodeId, axis: usize, mean: bool) -> Result<NodeId> {
        self.check(x)?;
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::shape(format!(
                "reduce axis {axis} out of range for {:?}",
                xv.shape()
            )));
        }
        let outer: usize = xv.shape()[..axis].iter().product();
        let len = xv.dim(axis);
        let inner: usize = xv.shape()[axis + 1..].iter().product();
        let scale = if mean { T::from_f64(1.0 / len as f64) } else { T::ONE };
        let mut out = vec![T::ZERO; outer * inner];
        let xd = xv.data();
        for o in 0..outer {
            for t in 0..len {
                let src = &xd[(o * len + t) * inner..(o * len + t + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for i in 0..inner {
                    dst[i] += src[i];
                }
            }
        }
        for v in out.iter_mut() {
            *v = *v * scale;
        }
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(out, &shape)?;
        let requires = self.req(x);
        Ok(self.push(Op::Reduce { x, axis, mean }, value, requires))
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        self.reduce_all(x, true)
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        self.reduce_all(x, false)
    }

    fn reduce_all(&mut self, x: NodeId, mean: bool) -> Result<NodeId> {
        self.check(x)?;
        let xv = self.value(x);
        let mut acc = 0.0f64;
        for &v in xv.data() {
            acc += v.to_f64();
        }
        if mean {
            acc /= xv.numel() as f64;
        }
        let value = Tensor::scalar(T::from_f64(acc));
        let requires = self.req(x);
        Ok(self.push(Op::ReduceAll { x, mean }, value, requires))
    }

    /// Reflect-pad the H and W axes of an NHWC tensor. Each pad must be
    /// strictly smaller than the padded extent.
    pub fn reflect_pad(&mut self, x: NodeId, pad: [usize; 4]) -> Result<NodeId> {
        self.check(x)?;
        let xv = self.value(x);
        if xv.rank() != 4 {
            return Err(Error::shape(format!("reflect_pad input must be NHWC, got {:?}", xv.shape())));
        }
        let (b, h, w, c) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let [top, bottom, left, right] = pad;
        if top.max(bottom) >= h || left.max(right) >= w {
            return Err(Error::shape(format!(
                "reflect pad {pad:?} too large for {h}x{w}"
            )));
        }
        let (oh, ow) = (h + top + bottom, w + left + right);
        let mut out = vec![T::ZERO; b * oh * ow * c];
        let xd = xv.data();
        for bi in 0..b {
            for ho in 0..oh {
                let hs = reflect_index(ho as isize - top as isize, h);
                for wo in 0..ow {
                    let ws = reflect_index(wo as isize - left as isize, w);
                    let src = ((bi * h + hs) * w + ws) * c;
                    let dst = ((bi * oh + ho) * ow + wo) * c;
                    out[dst..dst + c].copy_from_slice(&xd[src..src + c]);
                }
            }
        }
        let value = Tensor::new(out, &[b, oh, ow, c])?;
        let requires = self.req(x);
        Ok(self.push(Op::ReflectPad { x, pad }, value, requires))
    }

    /// Crop an NHWC tensor to `height` x `width` starting at (top, left).
    pub fn crop(&mut self, x: NodeId, top: usize, left: usize, height: usize, width: usize) -> Result<NodeId> {
        let h = self.narrow(x, 1, top, height)?;
        self.narrow(h, 2, left, width)
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn resize_bilinear(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        self.check(x)?;
        let xv = self.value(x);
        if xv.rank() != 4 {
            return Err(Error::shape(format!("resize input must be NHWC, got {:?}", xv.shape())));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("resize target extent is zero"));
        }
        let value = resize_bilinear_forward(xv, out_h, out_w)?;
        let requires = self.req(x);
        Ok(self.push(Op::ResizeBilinear { x }, value, requires))
    }

    /// Rearrange (B, H, W, C·r²) to (B, H·r, W·r, C).
    pub fn pixel_shuffle(&mut self, x: NodeId, r: usize) -> Result<NodeId> {
        self.check(x)?;
        let xv = self.value(x);
        if xv.rank() != 4 || r == 0 || xv.dim(3) % (r * r) != 0 {
            return Err(Error::shape(format!(
                "pixel_shuffle r={r} needs NHWC channels divisible by r^2, got {:?}",
                xv.shape()
            )));
        }
        let (b, h, w, cr2) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let c = cr2 / (r * r);
        let mut out = vec![T::ZERO; xv.numel()];
        let xd = xv.data();
        for bi in 0..b {
            for hi in 0..h {
                for wi in 0..w {
                    let src = ((bi * h + hi) * w + wi) * cr2;
                    for dy in 0..r {
                        for dx in 0..r {
                            let dst = ((bi * h * r + hi * r + dy) * w * r + wi * r + dx) * c;
                            let s = src + (dy * r + dx) * c;
                            out[dst..dst + c].copy_from_slice(&xd[s..s + c]);
                        }
                    }
                }
            }
        }
        let value = Tensor::new(out, &[b, h * r, w * r, c])?;
        let requires = self.req(x);
        Ok(self.push(Op::PixelShuffle { x, r }, value, requires))
    }

    // ── recurrence ───────────────────────────────────────────────────

    /// h_t = a_t ⊙ h_{t-1} + b_t along axis 1 with h_0 = 0, evaluated per
    /// lane over all remaining axes. The backward pass is a fused reverse
    /// (adjoint) scan rather than per-step tape nodes.
    pub fn scan(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!(
                "scan coefficient shapes differ: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        if av.rank() < 2 {
            return Err(Error::shape("scan input needs at least (batch, len) axes"));
        }
        let outer = av.dim(0);
        let len = av.dim(1);
        let inner: usize = av.shape()[2..].iter().product();
        let out = scan_lanes_forward(av.data(), bv.data(), outer, len, inner);
        let value = Tensor::new(out, av.shape())?;
        let requires = self.req(a) || self.req(b);
        Ok(self.push(Op::Scan { a, b }, value, requires))
    }

    /// Charbonnier distance mean(hypot(x - y, eps)) as a scalar.
    pub fn charbonnier(&mut self, x: NodeId, y: NodeId, eps: T) -> Result<NodeId> {
        self.check(x)?;
        self.check(y)?;
        if eps.to_f64() <= 0.0 {
            return Err(Error::contract("charbonnier eps must be > 0"));
        }
        let (xv, yv) = (self.value(x), self.value(y));
        if xv.shape() != yv.shape() {
            return Err(Error::shape(format!(
                "charbonnier shapes differ: {:?} vs {:?}",
                xv.shape(),
                yv.shape()
            )));
        }
        let mut acc = 0.0f64;
        for (&a, &b) in xv.data().iter().zip(yv.data().iter()) {
            acc += (a - b).hypot(eps).to_f64();
        }
        acc /= xv.numel() as f64;
        let value = Tensor::scalar(T::from_f64(acc));
        let requires = self.req(x) || self.req(y);
        Ok(self.push(Op::Charbonnier { x, y, eps }, value, requires))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root; every differentiable leaf reachable
    /// from the root receives d(root)/d(leaf).
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        self.check(root)?;
        if self.value(root).numel() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let n = self.nodes.len();
        let mut slots: Vec<Option<Vec<T>>> = vec![None; n];
        slots[root.0] = Some(vec![T::ONE]);

        for i in (0..n).rev() {
            if slots[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let grad = slots[i].take().unwrap();
            self.backprop_node(i, &grad, &mut slots)?;
            // Re-store only if someone may still read it (leaves keep theirs).
            slots[i] = Some(grad);
        }

        let mut out = Vec::with_capacity(n);
        for (i, slot) in slots.into_iter().enumerate() {
            match slot {
                Some(g) if self.nodes[i].requires_grad => {
                    out.push(Some(Tensor::new(g, self.nodes[i].value.shape())?));
                }
                _ => out.push(None),
            }
        }
        Ok(Gradients { slots: out })
    }

    fn accum(slots: &mut [Option<Vec<T>>], id: NodeId, contrib: Vec<T>) {
        match &mut slots[id.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib.into_iter()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backprop_node(&self, i: usize, grad: &[T], slots: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let clamp = T::from_f64(1e-8);
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Unary { kind, x } => {
                if !self.req(*x) {
                    return Ok(());
                }
                let xd = self.value(*x).data();
                let od = node.value.data();
                let gx: Vec<T> = match kind {
                    UnaryKind::Exp => grad.iter().zip(od).map(|(&g, &o)| g * o).collect(),
                    UnaryKind::Log => grad.iter().zip(xd).map(|(&g, &v)| g / v).collect(),
                    UnaryKind::LogClamped => grad
                        .iter()
                        .zip(xd)
                        .map(|(&g, &v)| if v.to_f64() > 1e-8 { g / v.maxs(clamp) } else { T::ZERO })
                        .collect(),
                    UnaryKind::Sigmoid => grad
                        .iter()
                        .zip(od)
                        .map(|(&g, &s)| g * s * (T::ONE - s))
                        .collect(),
                    UnaryKind::Silu => grad
                        .iter()
                        .zip(xd)
                        .map(|(&g, &v)| {
                            let s = sigmoid(v);
                            g * (s + v * s * (T::ONE - s))
                        })
                        .collect(),
                    UnaryKind::Softplus => grad
                        .iter()
                        .zip(xd)
                        .map(|(&g, &v)| g * sigmoid(v))
                        .collect(),
                    UnaryKind::Sqrt => grad
                        .iter()
                        .zip(od)
                        .map(|(&g, &o)| g / (T::from_f64(2.0) * o))
                        .collect(),
                };
                Self::accum(slots, *x, gx);
            }
            Op::Affine { x, mul } => {
                if self.req(*x) {
                    let gx = grad.iter().map(|&g| g * *mul).collect();
                    Self::accum(slots, *x, gx);
                }
            }
            Op::Binary { kind, lhs, rhs } => {
                let (av, bv) = (self.value(*lhs), self.value(*rhs));
                let out_shape = node.value.shape();
                match kind {
                    BinaryKind::Add => {
                        if self.req(*lhs) {
                            Self::accum(slots, *lhs, reduce_to_shape(grad, out_shape, av.shape()));
                        }
                        if self.req(*rhs) {
                            Self::accum(slots, *rhs, reduce_to_shape(grad, out_shape, bv.shape()));
                        }
                    }
                    BinaryKind::Sub => {
                        if self.req(*lhs) {
                            Self::accum(slots, *lhs, reduce_to_shape(grad, out_shape, av.shape()));
                        }
                        if self.req(*rhs) {
                            let neg: Vec<T> = grad.iter().map(|&g| -g).collect();
                            Self::accum(slots, *rhs, reduce_to_shape(&neg, out_shape, bv.shape()));
                        }
                    }
                    BinaryKind::Mul => {
                        if self.req(*lhs) {
                            let gb = broadcast_apply(grad, out_shape, bv, |g, b| g * b);
                            Self::accum(slots, *lhs, reduce_to_shape(&gb, out_shape, av.shape()));
                        }
                        if self.req(*rhs) {
                            let ga = broadcast_apply(grad, out_shape, av, |g, a| g * a);
                            Self::accum(slots, *rhs, reduce_to_shape(&ga, out_shape, bv.shape()));
                        }
                    }
                    BinaryKind::Div => {
                        if self.req(*lhs) {
                            let gb = broadcast_apply(grad, out_shape, bv, |g, b| g / b);
                            Self::accum(slots, *lhs, reduce_to_shape(&gb, out_shape, av.shape()));
                        }
                        if self.req(*rhs) {
                            // d(a/b)/db = -a / b^2
                            let ga = broadcast_apply2(grad, out_shape, av, bv, |g, a, b| {
                                -g * a / (b * b)
                            });
                            Self::accum(slots, *rhs, reduce_to_shape(&ga, out_shape, bv.shape()));
                        }
                    }
                }
            }
            Op::Linear { x, w } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (d_in, d_out) = (wv.dim(0), wv.dim(1));
                let rows = xv.numel() / d_in;
                let (xd, wd) = (xv.data(), wv.data());
                if self.req(*x) {
                    let mut gx = vec![T::ZERO; xv.numel()];
                    for r in 0..rows {
                        let grow = &grad[r * d_out..(r + 1) * d_out];
                        let gxrow = &mut gx[r * d_in..(r + 1) * d_in];
                        for i in 0..d_in {
                            let wrow = &wd[i * d_out..(i + 1) * d_out];
                            let mut acc = T::ZERO;
                            for (g, w) in grow.iter().zip(wrow.iter()) {
                                acc += *g * *w;
                            }
                            gxrow[i] = acc;
                        }
                    }
                    Self::accum(slots, *x, gx);
                }
                if self.req(*w) {
                    let mut gw = vec![T::ZERO; wv.numel()];
                    for r in 0..rows {
                        let xrow = &xd[r * d_in..(r + 1) * d_in];
                        let grow = &grad[r * d_out..(r + 1) * d_out];
                        for (i, &xi) in xrow.iter().enumerate() {
                            let gwrow = &mut gw[i * d_out..(i + 1) * d_out];
                            for (gw_io, &g) in gwrow.iter_mut().zip(grow.iter()) {
                                *gw_io += xi * g;
                            }
                        }
                    }
                    Self::accum(slots, *w, gw);
                }
            }
            Op::Conv2d { x, w, bias, mode, stride } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (gx, gw, gb) = conv2d_backward(
                    xv,
                    wv,
                    node.value.shape(),
                    grad,
                    *mode,
                    *stride,
                    self.req(*x),
                    self.req(*w),
                    self.req(*bias),
                );
                if let Some(gx) = gx {
                    Self::accum(slots, *x, gx);
                }
                if let Some(gw) = gw {
                    Self::accum(slots, *w, gw);
                }
                if let Some(gb) = gb {
                    Self::accum(slots, *bias, gb);
                }
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let xv = self.value(*x);
                let c = xv.shape()[xv.rank() - 1];
                let rows = xv.numel() / c;
                let xd = xv.data();
                let gd = self.value(*gamma).data();
                let inv_c = T::from_f64(1.0 / c as f64);
                let mut gx = if self.req(*x) { Some(vec![T::ZERO; xv.numel()]) } else { None };
                let mut ggamma = if self.req(*gamma) { Some(vec![T::ZERO; c]) } else { None };
                let mut gbeta = if self.req(*beta) { Some(vec![T::ZERO; c]) } else { None };
                for r in 0..rows {
                    let xrow = &xd[r * c..(r + 1) * c];
                    let grow = &grad[r * c..(r + 1) * c];
                    let (m, rs) = (mean[r], rstd[r]);
                    if let Some(gg) = ggamma.as_mut() {
                        for i in 0..c {
                            gg[i] += grow[i] * (xrow[i] - m) * rs;
                        }
                    }
                    if let Some(gb) = gbeta.as_mut() {
                        for i in 0..c {
                            gb[i] += grow[i];
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        // dx = rstd * (gg - mean(gg) - xhat * mean(gg * xhat)),
                        // with gg = grad * gamma and xhat the normalized input.
                        let mut mean_gg = T::ZERO;
                        let mut mean_ggx = T::ZERO;
                        for i in 0..c {
                            let gg = grow[i] * gd[i];
                            let xh = (xrow[i] - m) * rs;
                            mean_gg += gg;
                            mean_ggx += gg * xh;
                        }
                        mean_gg = mean_gg * inv_c;
                        mean_ggx = mean_ggx * inv_c;
                        let gxrow = &mut gx[r * c..(r + 1) * c];
                        for i in 0..c {
                            let gg = grow[i] * gd[i];
                            let xh = (xrow[i] - m) * rs;
                            gxrow[i] = rs * (gg - mean_gg - xh * mean_ggx);
                        }
                    }
                }
                if let Some(g) = gx {
                    Self::accum(slots, *x, g);
                }
                if let Some(g) = ggamma {
                    Self::accum(slots, *gamma, g);
                }
                if let Some(g) = gbeta {
                    Self::accum(slots, *beta, g);
                }
            }
            Op::Softmax { x } => {
                if !self.req(*x) {
                    return Ok(());
                }
                let od = node.value.data();
                let c = node.value.shape()[node.value.rank() - 1];
                let rows = node.value.numel() / c;
                let mut gx = vec![T::ZERO; node.value.numel()];
                for r in 0..rows {
                    let p = &od[r * c..(r + 1) * c];
                    let g = &grad[r * c..(r + 1) * c];
                    let mut dot = T::ZERO;
                    for i in 0..c {
                        dot += g[i] * p[i];
                    }
                    let gxrow = &mut gx[r * c..(r + 1) * c];
                    for i in 0..c {
                        gxrow[i] = p[i] * (g[i] - dot);
                    }
                }
                Self::accum(slots, *x, gx);
            }
            Op::Reshape { x } => {
                if self.req(*x) {
                    Self::accum(slots, *x, grad.to_vec());
                }
            }
            Op::Permute { x, axes } => {
                if !self.req(*x) {
                    return Ok(());
                }
                // Gradient permutes back via the inverse permutation.
                let mut inv = vec![0usize; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                let g = Tensor::new(grad.to_vec(), node.value.shape())?;
                let gx = permute_tensor(&g, &inv)?;
                Self::accum(slots, *x, gx.data().to_vec());
            }
            Op::Concat { xs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let total = shape[*axis];
                let mut off = 0;
                for &xid in xs {
                    let len = self.value(xid).dim(*axis);
                    if self.req(xid) {
                        let mut gx = vec![T::ZERO; outer * len * inner];
                        for o in 0..outer {
                            let src = &grad[(o * total + off) * inner..(o * total + off + len) * inner];
                            gx[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
                        }
                        Self::accum(slots, xid, gx);
                    }
                    off += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                if !self.req(*x) {
                    return Ok(());
                }
                let xv = self.value(*x);
                let outer: usize = xv.shape()[..*axis].iter().product();
                let inner: usize = xv.shape()[*axis + 1..].iter().product();
                let full = xv.dim(*axis);
                let len = node.value.dim(*axis);
                let mut gx = vec![T::ZERO; xv.numel()];
                for o in 0..outer {
                    let dst = &mut gx[(o * full + start) * inner..(o * full + start + len) * inner];
                    let src = &grad[o * len * inner..(o + 1) * len * inner];
                    for (d, s) in dst.iter_mut().zip(src.iter()) {
                        *d += *s;
                    }
                }
                Self::accum(slots, *x, gx);
            }
            Op::Flip { x, axis } => {
                if !self.req(*x) {
                    return Ok(());
                }
                // flipping is an involution, so the gradient flips back
                let g = Tensor::new(grad.to_vec(), node.value.shape())?;
                let gx = flip_tensor(&g, *axis)?;
                Self::accum(slots, *x, gx.data().to_vec());
            }
            Op::Reduce { x, axis, mean } => {
                if !self.req(*x) {
                    return Ok(());
                }
                let xv = self.value(*x);
                let outer: usize = xv.shape()[..*axis].iter().product();
                let len = xv.dim(*axis);
                let inner: usize = xv.shape()[*axis + 1..].iter().product();
                let scale = if *mean { T::from_f64(1.0 / len as f64) } else { T::ONE };
                let mut gx = vec![T::ZERO; xv.numel()];
                for o in 0..outer {
                    let src = &grad[o * inner..(o + 1) * inner];
                    for t in 0..len {
                        let dst = &mut gx[(o * len + t) * inner..(o * len + t + 1) * inner];
                        for i in 0..inner {
                            dst[i] = src[i] * scale;
                        }
                    }
                }
                Self::accum(slots, *x, gx);
            }
            Op::ReduceAll { x, mean } => {
                if !self.req(*x) {
                    return Ok(());
                }
                let n = self.value(*x).numel();
                let scale = if *mean { T::from_f64(1.0 / n as f64) } else { T::ONE };
                let g = grad[0] * scale;
                Self::accum(slots, *x, vec![g; n]);
            }
            Op::ReflectPad { x, pad } => {
                if !self.req(*x) {
                    return Ok(());
                }
                let xv = self.value(*x);
                let (b, h, w, c) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
                let [top, _, left, _] = *pad;
                let (oh, ow) = (node.value.dim(1), node.value.dim(2));
                let mut gx = vec![T::ZERO; xv.numel()];
                for bi in 0..b {
                    for ho in 0..oh {
                        let hs = reflect_index(ho as isize - top as isize, h);
                        for wo in 0..ow {
                            let ws = reflect_index(wo as isize - left as isize, w);
                            let src = ((bi * oh + ho) * ow + wo) * c;
                            let dst = ((bi * h + hs) * w + ws) * c;
                            for i in 0..c {
                                gx[dst + i] += grad[src + i];
                            }
                        }
                    }
                }
                Self::accum(slots, *x, gx);
            }
            Op::ResizeBilinear { x } => {
                if !self.req(*x) {
                    return Ok(());
                }
                let xv = self.value(*x);
                let gx = resize_bilinear_backward(xv.shape(), node.value.shape(), grad);
                Self::accum(slots, *x, gx);
            }
            Op::PixelShuffle { x, r } => {
                if !self.req(*x) {
                    return Ok(());
                }
                let xv = self.value(*x);
                let (b, h, w, cr2) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
                let c = cr2 / (r * r);
                let mut gx = vec![T::ZERO; xv.numel()];
                for bi in 0..b {
                    for hi in 0..h {
                        for wi in 0..w {
                            let dst = ((bi * h + hi) * w + wi) * cr2;
                            for dy in 0..*r {
                                for dx in 0..*r {
                                    let src = ((bi * h * r + hi * r + dy) * w * r + wi * r + dx) * c;
                                    let d = dst + (dy * r + dx) * c;
                                    gx[d..d + c].copy_from_slice(&grad[src..src + c]);
                                }
                            }
                        }
                    }
                }
                Self::accum(slots, *x, gx);
            }
            Op::Scan { a, b } => {
                let av = self.value(*a);
                let outer = av.dim(0);
                let len = av.dim(1);
                let inner: usize = av.shape()[2..].iter().product();
                let lambda = scan_lanes_adjoint(av.data(), grad, outer, len, inner);
                if self.req(*a) {
                    // da_t = lambda_t * h_{t-1}, with h_0 = 0.
                    let h = node.value.data();
                    let mut ga = vec![T::ZERO; av.numel()];
                    for o in 0..outer {
                        for t in 1..len {
                            let cur = (o * len + t) * inner;
                            let prev = (o * len + t - 1) * inner;
                            for i in 0..inner {
                                ga[cur + i] = lambda[cur + i] * h[prev + i];
                            }
                        }
                    }
                    Self::accum(slots, *a, ga);
                }
                if self.req(*b) {
                    Self::accum(slots, *b, lambda);
                }
            }
            Op::Charbonnier { x, y, eps } => {
                let (xv, yv) = (self.value(*x), self.value(*y));
                let n = T::from_f64(xv.numel() as f64);
                let g = grad[0];
                let per: Vec<T> = xv
                    .data()
                    .iter()
                    .zip(yv.data().iter())
                    .map(|(&a, &b)| {
                        let d = a - b;
                        g * d / (d.hypot(*eps) * n)
                    })
                    .collect();
                if self.req(*x) {
                    Self::accum(slots, *x, per.clone());
                }
                if self.req(*y) {
                    Self::accum(slots, *y, per.iter().map(|&v| -v).collect());
                }
            }
        }
        Ok(())
    }
}

// ── scalar helpers ───────────────────────────────────────────────────

fn sigmoid<T: Scalar>(v: T) -> T {
    // Stable in both tails.
    if v.to_f64() >= 0.0 {
        T::ONE / (T::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::ONE + e)
    }
}

fn softplus<T: Scalar>(v: T) -> T {
    // ln(1 + e^v) = max(v, 0) + ln(1 + e^{-|v|})
    let x = v.to_f64();
    T::from_f64(x.max(0.0) + (-x.abs()).exp().ln_1p())
}

/// Reflect an out-of-range index back into [0, n); valid for offsets whose
/// magnitude is < n.
fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    debug_assert!((0..n).contains(&r));
    r as usize
}

/// Combine an output-shaped gradient with a broadcast operand.
fn broadcast_apply<T: Scalar>(
    grad: &[T],
    out_shape: &[usize],
    other: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    if other.shape() == out_shape {
        return grad
            .iter()
            .zip(other.data().iter())
            .map(|(&g, &o)| f(g, o))
            .collect();
    }
    let st = crate::tensor::broadcast_strides(other.shape(), out_shape);
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    let od = other.data();
    let mut out = Vec::with_capacity(grad.len());
    for &g in grad {
        out.push(f(g, od[off]));
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            off += st[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            off -= st[ax] * out_shape[ax];
        }
    }
    out
}

fn broadcast_apply2<T: Scalar>(
    grad: &[T],
    out_shape: &[usize],
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T, T) -> T,
) -> Vec<T> {
    let sa = crate::tensor::broadcast_strides(a.shape(), out_shape);
    let sb = crate::tensor::broadcast_strides(b.shape(), out_shape);
    let mut idx = vec![0usize; out_shape.len()];
    let (mut oa, mut ob) = (0usize, 0usize);
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(grad.len());
    for &g in grad {
        out.push(f(g, ad[oa], bd[ob]));
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            oa -= sa[ax] * out_shape[ax];
            ob -= sb[ax] * out_shape[ax];
        }
    }
    out
}

fn flip_tensor<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let outer: usize = x.shape()[..axis].iter().product();
    let len = x.dim(axis);
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let xd = x.data();
    let mut out = vec![T::ZERO; x.numel()];
    for o in 0..outer {
        for i in 0..len {
            let src = (o * len + i) * inner;
            let dst = (o * len + len - 1 - i) * inner;
            out[dst..dst + inner].copy_from_slice(&xd[src..src + inner]);
        }
    }
    Tensor::new(out, x.shape())
}

fn permute_tensor<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let in_shape = x.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let in_strides = strides_of(in_shape);
    let perm_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    let xd = x.data();
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(xd[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += perm_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            off -= perm_strides[ax] * out_shape[ax];
        }
    }
    Tensor::new(out, &out_shape)
}

// ── convolution kernels ──────────────────────────────────────────────

fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: &Tensor<T>,
    mode: ConvMode,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Result<Tensor<T>> {
    let (b, h, wd_, c_in) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let xd = x.data();
    let wv = w.data();
    let bd = bias.data();
    match mode {
        ConvMode::Pointwise => {
            let c_out = w.dim(1);
            let mut out = vec![T::ZERO; b * oh * ow * c_out];
            let mut dst = 0;
            for bi in 0..b {
                for ho in 0..oh {
                    for wo in 0..ow {
                        let src = ((bi * h + ho * stride) * wd_ + wo * stride) * c_in;
                        let orow = &mut out[dst..dst + c_out];
                        orow.copy_from_slice(bd);
                        for ci in 0..c_in {
                            let xv = xd[src + ci];
                            let wrow = &wv[ci * c_out..(ci + 1) * c_out];
                            for (o, &wk) in orow.iter_mut().zip(wrow.iter()) {
                                *o += xv * wk;
                            }
                        }
                        dst += c_out;
                    }
                }
            }
            Tensor::new(out, &[b, oh, ow, c_out])
        }
        ConvMode::Depthwise3x3 => {
            let c = c_in;
            let mut out = vec![T::ZERO; b * oh * ow * c];
            let mut dst = 0;
            for bi in 0..b {
                for ho in 0..oh {
                    for wo in 0..ow {
                        let orow = &mut out[dst..dst + c];
                        orow.copy_from_slice(bd);
                        for ky in 0..3 {
                            let hs = reflect_index((ho * stride + ky) as isize - 1, h);
                            for kx in 0..3 {
                                let ws = reflect_index((wo * stride + kx) as isize - 1, wd_);
                                let src = ((bi * h + hs) * wd_ + ws) * c;
                                let wrow = &wv[(ky * 3 + kx) * c..(ky * 3 + kx + 1) * c];
                                for i in 0..c {
                                    orow[i] += xd[src + i] * wrow[i];
                                }
                            }
                        }
                        dst += c;
                    }
                }
            }
            Tensor::new(out, &[b, oh, ow, c])
        }
        ConvMode::Full3x3 => {
            let c_out = w.dim(3);
            let mut out = vec![T::ZERO; b * oh * ow * c_out];
            let mut dst = 0;
            for bi in 0..b {
                for ho in 0..oh {
                    for wo in 0..ow {
                        let orow = &mut out[dst..dst + c_out];
                        orow.copy_from_slice(bd);
                        for ky in 0..3 {
                            let hs = reflect_index((ho * stride + ky) as isize - 1, h);
                            for kx in 0..3 {
                                let ws = reflect_index((wo * stride + kx) as isize - 1, wd_);
                                let src = ((bi * h + hs) * wd_ + ws) * c_in;
                                let wbase = (ky * 3 + kx) * c_in * c_out;
                                for ci in 0..c_in {
                                    let xv = xd[src + ci];
                                    let wrow = &wv[wbase + ci * c_out..wbase + (ci + 1) * c_out];
                                    for (o, &wk) in orow.iter_mut().zip(wrow.iter()) {
                                        *o += xv * wk;
                                    }
                                }
                            }
                        }
                        dst += c_out;
                    }
                }
            }
            Tensor::new(out, &[b, oh, ow, c_out])
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    out_shape: &[usize],
    grad: &[T],
    mode: ConvMode,
    stride: usize,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let (b, h, wd_, c_in) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let c_out = out_shape[3];
    let xd = x.data();
    let wv = w.data();
    let mut gx = if need_x { Some(vec![T::ZERO; x.numel()]) } else { None };
    let mut gw = if need_w { Some(vec![T::ZERO; w.numel()]) } else { None };
    let mut gb = if need_b { Some(vec![T::ZERO; c_out]) } else { None };

    let mut src_g = 0;
    for bi in 0..b {
        for ho in 0..oh {
            for wo in 0..ow {
                let grow = &grad[src_g..src_g + c_out];
                if let Some(gb) = gb.as_mut() {
                    for (s, &g) in gb.iter_mut().zip(grow.iter()) {
                        *s += g;
                    }
                }
                match mode {
                    ConvMode::Pointwise => {
                        let src = ((bi * h + ho * stride) * wd_ + wo * stride) * c_in;
                        for ci in 0..c_in {
                            let wrow = &wv[ci * c_out..(ci + 1) * c_out];
                            if let Some(gx) = gx.as_mut() {
                                let mut acc = T::ZERO;
                                for (g, wk) in grow.iter().zip(wrow.iter()) {
                                    acc += *g * *wk;
                                }
                                gx[src + ci] += acc;
                            }
                            if let Some(gw) = gw.as_mut() {
                                let xv = xd[src + ci];
                                let gwrow = &mut gw[ci * c_out..(ci + 1) * c_out];
                                for (s, &g) in gwrow.iter_mut().zip(grow.iter()) {
                                    *s += xv * g;
                                }
                            }
                        }
                    }
                    ConvMode::Depthwise3x3 => {
                        for ky in 0..3 {
                            let hs = reflect_index((ho * stride + ky) as isize - 1, h);
                            for kx in 0..3 {
                                let ws = reflect_index((wo * stride + kx) as isize - 1, wd_);
                                let src = ((bi * h + hs) * wd_ + ws) * c_in;
                                let wbase = (ky * 3 + kx) * c_in;
                                if let Some(gx) = gx.as_mut() {
                                    for i in 0..c_in {
                                        gx[src + i] += grow[i] * wv[wbase + i];
                                    }
                                }
                                if let Some(gw) = gw.as_mut() {
                                    for i in 0..c_in {
                                        gw[wbase + i] += grow[i] * xd[src + i];
                                    }
                                }
                            }
                        }
                    }
                    ConvMode::Full3x3 => {
                        for ky in 0..3 {
                            let hs = reflect_index((ho * stride + ky) as isize - 1, h);
                            for kx in 0..3 {
                                let ws = reflect_index((wo * stride + kx) as isize - 1, wd_);
                                let src = ((bi * h + hs) * wd_ + ws) * c_in;
                                let wbase = (ky * 3 + kx) * c_in * c_out;
                                for ci in 0..c_in {
                                    let wrow = &wv[wbase + ci * c_out..wbase + (ci + 1) * c_out];
                                    if let Some(gx) = gx.as_mut() {
                                        let mut acc = T::ZERO;
                                        for (g, wk) in grow.iter().zip(wrow.iter()) {
                                            acc += *g * *wk;
                                        }
                                        gx[src + ci] += acc;
                                    }
                                    if let Some(gw) = gw.as_mut() {
                                        let xv = xd[src + ci];
                                        let gwrow = &mut gw[wbase + ci * c_out..wbase + (ci + 1) * c_out];
                                        for (s, &g) in gwrow.iter_mut().zip(grow.iter()) {
                                            *s += xv * g;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                src_g += c_out;
            }
        }
    }
    (gx, gw, gb)
}

// ── bilinear resize kernels ──────────────────────────────────────────

/// Source taps for one output coordinate under half-pixel mapping.
fn bilinear_taps(o: usize, out_n: usize, in_n: usize) -> (usize, usize, f64) {
    let s = (o as f64 + 0.5) * in_n as f64 / out_n as f64 - 0.5;
    let s = s.max(0.0).min(in_n as f64 - 1.0);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(in_n - 1);
    (i0, i1, s - i0 as f64)
}

fn resize_bilinear_forward<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let (b, h, w, c) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let xd = x.data();
    let mut out = vec![T::ZERO; b * oh * ow * c];
    for bi in 0..b {
        for yo in 0..oh {
            let (y0, y1, fy) = bilinear_taps(yo, oh, h);
            for xo in 0..ow {
                let (x0, x1, fx) = bilinear_taps(xo, ow, w);
                let w00 = T::from_f64((1.0 - fy) * (1.0 - fx));
                let w01 = T::from_f64((1.0 - fy) * fx);
                let w10 = T::from_f64(fy * (1.0 - fx));
                let w11 = T::from_f64(fy * fx);
                let s00 = ((bi * h + y0) * w + x0) * c;
                let s01 = ((bi * h + y0) * w + x1) * c;
                let s10 = ((bi * h + y1) * w + x0) * c;
                let s11 = ((bi * h + y1) * w + x1) * c;
                let dst = ((bi * oh + yo) * ow + xo) * c;
                for i in 0..c {
                    out[dst + i] = xd[s00 + i] * w00
                        + xd[s01 + i] * w01
                        + xd[s10 + i] * w10
                        + xd[s11 + i] * w11;
                }
            }
        }
    }
    Tensor::new(out, &[b, oh, ow, c])
}

fn resize_bilinear_backward<T: Scalar>(
    in_shape: &[usize],
    out_shape: &[usize],
    grad: &[T],
) -> Vec<T> {
    let (b, h, w, c) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let mut gx = vec![T::ZERO; b * h * w * c];
    for bi in 0..b {
        for yo in 0..oh {
            let (y0, y1, fy) = bilinear_taps(yo, oh, h);
            for xo in 0..ow {
                let (x0, x1, fx) = bilinear_taps(xo, ow, w);
                let w00 = T::from_f64((1.0 - fy) * (1.0 - fx));
                let w01 = T::from_f64((1.0 - fy) * fx);
                let w10 = T::from_f64(fy * (1.0 - fx));
                let w11 = T::from_f64(fy * fx);
                let s00 = ((bi * h + y0) * w + x0) * c;
                let s01 = ((bi * h + y0) * w + x1) * c;
                let s10 = ((bi * h + y1) * w + x0) * c;
                let s11 = ((bi * h + y1) * w + x1) * c;
                let src = ((bi * oh + yo) * ow + xo) * c;
                for i in 0..c {
                    let g = grad[src + i];
                    gx[s00 + i] += g * w00;
                    gx[s01 + i] += g * w01;
                    gx[s10 + i] += g * w10;
                    gx[s11 + i] += g * w11;
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn silu_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[0.0, 1.0], &[2]));
        let y = tape.silu(x).unwrap();
        let d = tape.value(y).data();
        assert_eq!(d[0], 0.0);
        assert!((d[1] - 0.7310585786300049).abs() < 1e-15);
    }

    #[test]
    fn add_scalar_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1.0, 2.0], &[2]));
        let z = tape.constant(Tensor::scalar(0.0));
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1.0, 2.0, 3.0], &[3]));
        let s = tape.sum_all(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2.0, -3.0], &[2]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[4.0, -6.0]);
    }

    #[test]
    fn backward_silu_hand_value() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1.0], &[1]));
        let y = tape.silu(x).unwrap();
        let s = tape.sum_all(y).unwrap();
        let g = tape.backward(s).unwrap();
        // sigma(1) + 1*sigma(1)*(1 - sigma(1))
        let s1 = 1.0 / (1.0 + (-1.0f64).exp());
        let want = s1 + s1 * (1.0 - s1);
        assert!((g.get(x).unwrap().data()[0] - want).abs() < 1e-15);
        assert!((want - 0.92767).abs() < 1e-5);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1.0, 2.0], &[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_rejects_foreign_node() {
        let mut other = Tape::<f64>::new();
        let x = other.leaf(Tensor::scalar(1.0));
        let tape = Tape::<f64>::new();
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3.0], &[1]));
        let c = tape.constant(t(&[2.0], &[1]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum_all(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn strict_log_domain_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[-1.0], &[1]));
        assert!(matches!(tape.log(x), Err(Error::Domain(_))));
        let y = tape.leaf(t(&[-1.0], &[1]));
        assert!(tape.log_clamped(y).is_ok());
    }

    #[test]
    fn pointwise_identity_conv() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], &[1, 2, 2, 2]));
        let w = tape.constant(t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.conv2d(x, w, b, ConvMode::Pointwise, 1).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn depthwise_box_kernel_preserves_constant() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 4, 5, 3], 2.5f64));
        let w = tape.constant(Tensor::full(&[3, 3, 3], 1.0 / 9.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.conv2d(x, w, b, ConvMode::Depthwise3x3, 1).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn depthwise_laplacian_kills_constant() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 4, 4, 1], 3.0f64));
        let lap = [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];
        let w = tape.constant(t(&lap, &[3, 3, 1]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, b, ConvMode::Depthwise3x3, 1).unwrap();
        for &v in tape.value(y).data() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn conv_channel_mismatch_is_shape_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 4, 4, 3]));
        let w = tape.constant(Tensor::zeros(&[2, 5]));
        let b = tape.constant(Tensor::zeros(&[5]));
        assert!(matches!(
            tape.conv2d(x, w, b, ConvMode::Pointwise, 1),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn conv_tiny_input_is_shape_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 4, 2]));
        let w = tape.constant(Tensor::zeros(&[3, 3, 2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(
            tape.conv2d(x, w, b, ConvMode::Depthwise3x3, 1),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 1, 4], 5.0f64));
        let g = tape.constant(Tensor::full(&[4], 1.0));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g, b, 1e-6).unwrap();
        for &v in tape.value(y).data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_two_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1.0, 3.0], &[1, 2]));
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-5);
        assert!((d[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_zero_gamma_gives_beta() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[0.3, -2.0, 7.0], &[1, 3]));
        let g = tape.constant(Tensor::zeros(&[3]));
        let b = tape.constant(t(&[1.0, 2.0, 3.0], &[3]));
        let y = tape.layer_norm(x, g, b, 1e-6).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn layer_norm_requires_positive_eps() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1]));
        let g = tape.constant(Tensor::full(&[1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        assert!(tape.layer_norm(x, g, b, 0.0).is_err());
    }

    #[test]
    fn reduce_mean_constant_and_arithmetic() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 3, 4, 5], 3.0f64));
        let m = tape.reduce_mean(x, 2).unwrap();
        assert_eq!(tape.value(m).shape(), &[2, 3, 5]);
        for &v in tape.value(m).data() {
            assert!((v - 3.0).abs() < 1e-12);
        }
        let y = tape.leaf(t(&[1.0, 2.0, 3.0, 6.0], &[4]));
        let m = tape.reduce_mean(y, 0).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0]);
    }

    #[test]
    fn reshape_preserves_bitwise_and_split_checks_sizes() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let r = tape.reshape(x, &[6, 4]).unwrap();
        let back = tape.reshape(r, &[2, 3, 4]).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(x).data());
        assert!(tape.split(x, 1, &[2, 2]).is_err());
        let parts = tape.split(x, 1, &[1, 2]).unwrap();
        assert_eq!(tape.value(parts[0]).shape(), &[2, 1, 4]);
        assert_eq!(tape.value(parts[1]).shape(), &[2, 2, 4]);
    }

    #[test]
    fn reflect_pad_then_crop_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 4, 5, 2], |i| (i as f64).sin()));
        let p = tape.reflect_pad(x, [2, 1, 3, 2]).unwrap();
        let c = tape.crop(p, 2, 3, 4, 5).unwrap();
        assert_eq!(tape.value(c).data(), tape.value(x).data());
    }

    #[test]
    fn pixel_shuffle_round_trip_property() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 2, 3, 8], |i| i as f64));
        let y = tape.pixel_shuffle(x, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 4, 6, 2]);
        // multiset of values is preserved exactly
        let mut a: Vec<u64> = tape.value(x).data().iter().map(|v| v.to_bits()).collect();
        let mut b: Vec<u64> = tape.value(y).data().iter().map(|v| v.to_bits()).collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    #[test]
    fn scan_node_matches_sequential_reference() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[0.5, 0.5], &[1, 2, 1]));
        let b = tape.leaf(t(&[1.0, 2.0], &[1, 2, 1]));
        let h = tape.scan(a, b).unwrap();
        assert_eq!(tape.value(h).data(), &[1.0, 2.5]);
    }

    #[test]
    fn charbonnier_zero_difference_is_eps() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 3], 0.4f64));
        let y = tape.constant(Tensor::full(&[2, 3], 0.4f64));
        let l = tape.charbonnier(x, y, 1e-3).unwrap();
        assert_eq!(tape.value(l).item(), 1e-3);
    }

    #[test]
    fn resize_bilinear_preserves_constant() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 5, 7, 2], 1.25f64));
        let y = tape.resize_bilinear(x, 9, 3).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.25).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_flows_through_branching_graph() {
        // y = x*x + x => dy/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3.0], &[1]));
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        let s = tape.sum_all(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[7.0]);
    }
}

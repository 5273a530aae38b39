//! The S6 selective-scan layer: input-dependent discretization followed by
//! the linear recurrence and readout.
//!
//! For input x of shape (B, L, D) with state size N:
//!   delta = softplus(x · delta_proj + delta_bias)        (B, L, D)
//!   B_t = x · b_proj,  C_t = x · c_proj                  (B, L, N)
//!   A = -exp(a_log)                                       (D, N)
//!   a_bar = exp(delta · A),  b_bar = delta · B_t · x      (B, L, D, N)
//!   h_t = a_bar_t ⊙ h_{t-1} + b_bar_t
//!   y_t = ⟨C_t, h_t⟩ + d_skip ⊙ x_t                       (B, L, D)
//!
//! The scan is uni-directional, so y_t depends only on x_{1..t}.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

/// Learnable parameters of one S6 scanner over D channels and N states.
#[derive(Debug, Clone)]
pub struct ScanParams<T: Scalar> {
    /// [D, N]; the effective state matrix is A = -exp(a_log), so the
    /// discretized decay exp(delta * A) stays in (0, 1) for delta > 0.
    pub a_log: Tensor<T>,
    /// [D, N], bias-free: zero input gives zero B_t.
    pub b_proj: Tensor<T>,
    /// [D, N], bias-free.
    pub c_proj: Tensor<T>,
    /// [D, D]
    pub delta_proj: Tensor<T>,
    /// [D]
    pub delta_bias: Tensor<T>,
    /// [D] residual gain.
    pub d_skip: Tensor<T>,
}

impl<T: Scalar> ScanParams<T> {
    /// Published defaults of the cited selective-scan lineage: a_log holds
    /// log(1..N) per channel, softplus(delta_bias) is log-uniform in
    /// [1e-3, 1e-1], projections are uniform +-1/sqrt(D), d_skip is ones.
    pub fn init(d: usize, n: usize, rng: &mut impl Rng) -> Self {
        let a_log = Tensor::from_fn(&[d, n], |i| T::from_f64(((i % n) as f64 + 1.0).ln()));
        let bound = 1.0 / (d as f64).sqrt();
        let mut uniform = |shape: &[usize]| {
            let count: usize = shape.iter().product();
            let data: Vec<T> = (0..count)
                .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
                .collect();
            Tensor::new(data, shape).expect("shape matches count")
        };
        let b_proj = uniform(&[d, n]);
        let c_proj = uniform(&[d, n]);
        let delta_proj = uniform(&[d, d]);
        let delta_bias = {
            let lo = (1e-3f64).ln();
            let hi = (1e-1f64).ln();
            let data: Vec<T> = (0..d)
                .map(|_| {
                    let dt = rng.gen_range(lo..hi).exp();
                    // inverse softplus: bias = ln(e^dt - 1)
                    T::from_f64((dt.exp() - 1.0).ln())
                })
                .collect();
            Tensor::new(data, &[d]).expect("bias length d")
        };
        let d_skip = Tensor::full(&[d], T::ONE);
        ScanParams {
            a_log,
            b_proj,
            c_proj,
            delta_proj,
            delta_bias,
            d_skip,
        }
    }

    pub fn channels(&self) -> usize {
        self.a_log.dim(0)
    }

    pub fn state_dim(&self) -> usize {
        self.a_log.dim(1)
    }
}

/// Tape handles for one scanner's parameters.
#[derive(Debug, Clone, Copy)]
pub struct S6Ids {
    pub a_log: NodeId,
    pub b_proj: NodeId,
    pub c_proj: NodeId,
    pub delta_proj: NodeId,
    pub delta_bias: NodeId,
    pub d_skip: NodeId,
}

impl S6Ids {
    /// Bind parameters onto a tape as differentiable leaves.
    pub fn leaf<T: Scalar>(tape: &mut Tape<T>, p: &ScanParams<T>) -> Self {
        S6Ids {
            a_log: tape.leaf(p.a_log.clone()),
            b_proj: tape.leaf(p.b_proj.clone()),
            c_proj: tape.leaf(p.c_proj.clone()),
            delta_proj: tape.leaf(p.delta_proj.clone()),
            delta_bias: tape.leaf(p.delta_bias.clone()),
            d_skip: tape.leaf(p.d_skip.clone()),
        }
    }
}

/// Zero-order-hold discretization as a plain tensor function:
/// a_bar = exp(delta ⊗ A), b_bar = delta ⊗ B ⊗ x, both (B, L, D, N).
pub fn discretize<T: Scalar>(
    delta: &Tensor<T>,
    a_log: &Tensor<T>,
    b: &Tensor<T>,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if delta.rank() != 3 || b.rank() != 3 || x.rank() != 3 || a_log.rank() != 2 {
        return Err(Error::shape(
            "discretize expects delta/B/x of rank 3 and a_log of rank 2",
        ));
    }
    let (bsz, len, d) = (delta.dim(0), delta.dim(1), delta.dim(2));
    let n = a_log.dim(1);
    if x.shape() != [bsz, len, d] || b.shape() != [bsz, len, n] || a_log.dim(0) != d {
        return Err(Error::shape(format!(
            "discretize shape mismatch: delta {:?}, x {:?}, B {:?}, a_log {:?}",
            delta.shape(),
            x.shape(),
            b.shape(),
            a_log.shape()
        )));
    }
    for &v in delta.data() {
        if v.to_f64() <= 0.0 {
            return Err(Error::contract(format!(
                "discretize requires delta > 0 elementwise, found {v}"
            )));
        }
    }
    let mut a_bar = vec![T::ZERO; bsz * len * d * n];
    let mut b_bar = vec![T::ZERO; bsz * len * d * n];
    let dd = delta.data();
    let ad = a_log.data();
    let bd = b.data();
    let xd = x.data();
    for bi in 0..bsz {
        for t in 0..len {
            for di in 0..d {
                let dt = dd[(bi * len + t) * d + di];
                let xv = xd[(bi * len + t) * d + di];
                for ni in 0..n {
                    let a = -ad[di * n + ni].exp();
                    let idx = (((bi * len + t) * d) + di) * n + ni;
                    a_bar[idx] = (dt * a).exp();
                    b_bar[idx] = dt * bd[(bi * len + t) * n + ni] * xv;
                }
            }
        }
    }
    Ok((
        Tensor::new(a_bar, &[bsz, len, d, n])?,
        Tensor::new(b_bar, &[bsz, len, d, n])?,
    ))
}

/// Full S6 layer on the tape; see the module docs for the algebra.
pub fn s6_forward<T: Scalar>(tape: &mut Tape<T>, x: NodeId, p: &S6Ids) -> Result<NodeId> {
    let xv = tape.value(x);
    if xv.rank() != 3 {
        return Err(Error::shape(format!(
            "s6_forward input must be (batch, len, channels), got {:?}",
            xv.shape()
        )));
    }
    if !xv.all_finite() {
        return Err(Error::NonFinite("s6_forward input".into()));
    }
    let (bsz, len, d) = (xv.dim(0), xv.dim(1), xv.dim(2));
    let n = tape.value(p.a_log).dim(1);
    if tape.value(p.a_log).dim(0) != d {
        return Err(Error::shape(format!(
            "s6 params expect {} channels, input has {}",
            tape.value(p.a_log).dim(0),
            d
        )));
    }

    let delta_pre = tape.linear(x, p.delta_proj)?;
    let delta_biased = tape.add(delta_pre, p.delta_bias)?;
    let delta = tape.softplus(delta_biased)?;

    let bt = tape.linear(x, p.b_proj)?;
    let ct = tape.linear(x, p.c_proj)?;

    // a_bar = exp(delta * -exp(a_log)) via (B,L,D,1) x (D,N) broadcast
    let a_exp = tape.exp(p.a_log)?;
    let a_neg = tape.neg(a_exp)?;
    let delta4 = tape.reshape(delta, &[bsz, len, d, 1])?;
    let da = tape.mul(delta4, a_neg)?;
    let a_bar = tape.exp(da)?;

    // b_bar = delta * B_t * x via (B,L,D,1) x (B,L,1,N) x (B,L,D,1)
    let bt4 = tape.reshape(bt, &[bsz, len, 1, n])?;
    let x4 = tape.reshape(x, &[bsz, len, d, 1])?;
    let db = tape.mul(delta4, bt4)?;
    let b_bar = tape.mul(db, x4)?;

    let h = tape.scan(a_bar, b_bar)?;

    // y = sum_n C_t[n] * h[d, n] + d_skip * x
    let ct4 = tape.reshape(ct, &[bsz, len, 1, n])?;
    let ch = tape.mul(h, ct4)?;
    let y_core = tape.reduce_sum(ch, 3)?;
    let skip = tape.mul(x, p.d_skip)?;
    tape.add(y_core, skip)
}

/// Independent reference evaluation with plain loops; used as the oracle for
/// the tape implementation.
pub fn s6_reference(x: &Tensor<f64>, p: &ScanParams<f64>) -> Result<Tensor<f64>> {
    let (bsz, len, d) = (x.dim(0), x.dim(1), x.dim(2));
    let n = p.state_dim();
    let xd = x.data();
    let mut out = vec![0.0; bsz * len * d];
    let softplus = |v: f64| v.max(0.0) + (-v.abs()).exp().ln_1p();
    for bi in 0..bsz {
        let mut h = vec![0.0; d * n];
        for t in 0..len {
            let xrow = &xd[(bi * len + t) * d..(bi * len + t + 1) * d];
            // projections
            let mut bt = vec![0.0; n];
            let mut ct = vec![0.0; n];
            for di in 0..d {
                for ni in 0..n {
                    bt[ni] += xrow[di] * p.b_proj.data()[di * n + ni];
                    ct[ni] += xrow[di] * p.c_proj.data()[di * n + ni];
                }
            }
            for di in 0..d {
                let mut dpre = p.delta_bias.data()[di];
                for dj in 0..d {
                    dpre += xrow[dj] * p.delta_proj.data()[dj * d + di];
                }
                let delta = softplus(dpre);
                let mut y = p.d_skip.data()[di] * xrow[di];
                for ni in 0..n {
                    let a = -p.a_log.data()[di * n + ni].exp();
                    let a_bar = (delta * a).exp();
                    let b_bar = delta * bt[ni] * xrow[di];
                    h[di * n + ni] = a_bar * h[di * n + ni] + b_bar;
                    y += ct[ni] * h[di * n + ni];
                }
                out[(bi * len + t) * d + di] = y;
            }
        }
    }
    Tensor::new(out, &[bsz, len, d])
}

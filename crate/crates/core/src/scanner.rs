//! Slice-and-scan operators.
//!
//! The Intra-Scanner slices the feature map into rows (horizontal) or
//! columns (vertical), folds the slice index into the batch axis, and runs
//! the S6 scan within each slice at pixel granularity; no information
//! crosses slices. The Inter-Scanner pools the other spatial axis away with
//! a parameter-free global average (compression factor 1/extent), scans the
//! slice descriptors, and applies the resulting sigmoid gate back onto the
//! input.

use rand::Rng;

use crate::error::{Error, Result};
use crate::s6::{s6_forward, S6Ids, ScanParams};
use crate::tape::{NodeId, Tape};
use crate::tensor::Scalar;

/// Scan orientation. Horizontal scans along width; vertical along height.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanAxis {
    Horizontal,
    Vertical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanKind {
    Intra,
    Inter,
}

/// A standalone scanner: orientation, granularity, and its S6 parameters.
#[derive(Debug, Clone)]
pub struct ScannerConfig<T: Scalar> {
    pub axis: ScanAxis,
    pub kind: ScanKind,
    pub params: ScanParams<T>,
}

impl<T: Scalar> ScannerConfig<T> {
    pub fn init(axis: ScanAxis, kind: ScanKind, channels: usize, state_dim: usize, rng: &mut impl Rng) -> Self {
        ScannerConfig {
            axis,
            kind,
            params: ScanParams::init(channels, state_dim, rng),
        }
    }

    pub fn apply(&self, tape: &mut Tape<T>, f: NodeId) -> Result<NodeId> {
        let ids = S6Ids::leaf(tape, &self.params);
        match self.kind {
            ScanKind::Intra => intra_scan(tape, f, self.axis, &ids),
            ScanKind::Inter => inter_scan(tape, f, self.axis, &ids),
        }
    }
}

fn check_nhwc<T: Scalar>(tape: &Tape<T>, f: NodeId) -> Result<(usize, usize, usize, usize)> {
    let v = tape.value(f);
    if v.rank() != 4 {
        return Err(Error::shape(format!(
            "scanner input must be (B, H, W, C), got {:?}",
            v.shape()
        )));
    }
    Ok((v.dim(0), v.dim(1), v.dim(2), v.dim(3)))
}

/// Pixel-level scan within each slice.
///
/// Horizontal: rows become independent sequences via the metadata-only
/// reshape (B, H, W, C) -> (B*H, W, C). Vertical permutes H and W first and
/// is otherwise identical.
pub fn intra_scan<T: Scalar>(
    tape: &mut Tape<T>,
    f: NodeId,
    axis: ScanAxis,
    params: &S6Ids,
) -> Result<NodeId> {
    let (b, h, w, c) = check_nhwc(tape, f)?;
    match axis {
        ScanAxis::Horizontal => {
            let seq = tape.reshape(f, &[b * h, w, c])?;
            let out = s6_forward(tape, seq, params)?;
            tape.reshape(out, &[b, h, w, c])
        }
        ScanAxis::Vertical => {
            let fw = tape.permute(f, &[0, 2, 1, 3])?;
            let seq = tape.reshape(fw, &[b * w, h, c])?;
            let out = s6_forward(tape, seq, params)?;
            let back = tape.reshape(out, &[b, w, h, c])?;
            tape.permute(back, &[0, 2, 1, 3])
        }
    }
}

/// Slice-level gated scan.
///
/// Vertical pools width away and scans the H slice descriptors; the sigmoid
/// of the scan output gates the input, broadcast along the pooled axis.
pub fn inter_scan<T: Scalar>(
    tape: &mut Tape<T>,
    f: NodeId,
    axis: ScanAxis,
    params: &S6Ids,
) -> Result<NodeId> {
    let (b, h, w, c) = check_nhwc(tape, f)?;
    let (pool_axis, gate_shape) = match axis {
        ScanAxis::Vertical => (2usize, [b, h, 1, c]),
        ScanAxis::Horizontal => (1usize, [b, 1, w, c]),
    };
    let pooled = tape.reduce_mean(f, pool_axis)?;
    let scanned = s6_forward(tape, pooled, params)?;
    let gate = tape.sigmoid(scanned)?;
    let gate4 = tape.reshape(gate, &gate_shape)?;
    tape.mul(f, gate4)
}

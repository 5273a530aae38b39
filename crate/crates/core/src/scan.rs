//! Linear-recurrence scans: h_t = a_t * h_{t-1} + b_t.
//!
//! [`scan_sequential`] is the O(L) reference. [`scan_parallel`] evaluates the
//! same recurrence as a blocked prefix scan over the associative composition
//! of affine maps, so chunks can run on separate workers; the chunk carries
//! are combined in a fixed order and results are reproducible bit-for-bit
//! for a given chunk size.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// The affine map h ↦ a·h + b as a scan element.
///
/// Composition applies the left element first:
/// (a₁,b₁)∘(a₂,b₂) = (a₁a₂, a₂b₁ + b₂). The identity is (1, 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanElement<T: Scalar> {
    pub a: T,
    pub b: T,
}

impl<T: Scalar> ScanElement<T> {
    pub fn new(a: T, b: T) -> Self {
        ScanElement { a, b }
    }

    pub fn identity() -> Self {
        ScanElement { a: T::ONE, b: T::ZERO }
    }

    /// `self` applied first, then `later`.
    pub fn compose(self, later: ScanElement<T>) -> Self {
        ScanElement {
            a: self.a * later.a,
            b: later.a * self.b + later.b,
        }
    }

    /// Apply the map to a state.
    pub fn apply(self, h: T) -> T {
        self.a * h + self.b
    }
}

/// Reference recurrence: returns h_1..h_L.
pub fn scan_sequential<T: Scalar>(a: &[T], b: &[T], h0: T) -> Result<Vec<T>> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "scan coefficient lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut h = h0;
    Ok(a.iter()
        .zip(b.iter())
        .map(|(&at, &bt)| {
            h = at * h + bt;
            h
        })
        .collect())
}

/// Blocked parallel evaluation of the same recurrence.
///
/// Phase 1 reduces each chunk to its local prefix compositions, phase 2
/// carries chunk aggregates left to right, phase 3 applies each chunk's
/// incoming state. Phases 1 and 3 run on the rayon pool; phase 2 is a short
/// sequential pass over ceil(L/chunk) aggregates.
pub fn scan_parallel<T: Scalar>(a: &[T], b: &[T], h0: T, chunk: usize) -> Result<Vec<T>> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "scan coefficient lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if chunk == 0 {
        return Err(Error::contract("scan chunk size must be >= 1"));
    }
    let n = a.len();
    if n == 0 {
        return Ok(Vec::new());
    }

    // Phase 1: inclusive prefix compositions within each chunk.
    let mut prefix: Vec<ScanElement<T>> = vec![ScanElement::identity(); n];
    prefix
        .par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(ci, out)| {
            let base = ci * chunk;
            let mut acc = ScanElement::identity();
            for (i, slot) in out.iter_mut().enumerate() {
                acc = acc.compose(ScanElement::new(a[base + i], b[base + i]));
                *slot = acc;
            }
        });

    // Phase 2: carry the incoming state across chunks in order.
    let n_chunks = n.div_ceil(chunk);
    let mut carry_in = Vec::with_capacity(n_chunks);
    let mut h = h0;
    for ci in 0..n_chunks {
        carry_in.push(h);
        let last = ((ci + 1) * chunk).min(n) - 1;
        h = prefix[last].apply(h);
    }

    // Phase 3: apply each chunk's incoming state to its local prefixes.
    let mut out = vec![T::ZERO; n];
    out.par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(ci, slots)| {
            let base = ci * chunk;
            let h_in = carry_in[ci];
            for (i, slot) in slots.iter_mut().enumerate() {
                *slot = prefix[base + i].apply(h_in);
            }
        });
    Ok(out)
}

/// Forward scan over axis 1 of an (outer, len, inner) buffer, vectorized
/// across the inner lanes. Starts from h = 0 in every lane.
pub(crate) fn scan_lanes_forward<T: Scalar>(
    a: &[T],
    b: &[T],
    outer: usize,
    len: usize,
    inner: usize,
) -> Vec<T> {
    debug_assert_eq!(a.len(), outer * len * inner);
    let mut out = vec![T::ZERO; a.len()];
    for o in 0..outer {
        let base = o * len * inner;
        // first step: h_1 = b_1
        out[base..base + inner].copy_from_slice(&b[base..base + inner]);
        for t in 1..len {
            let prev = base + (t - 1) * inner;
            let cur = base + t * inner;
            for i in 0..inner {
                out[cur + i] = a[cur + i] * out[prev + i] + b[cur + i];
            }
        }
    }
    out
}

/// Adjoint of [`scan_lanes_forward`]: given upstream gradients g_t = dL/dh_t,
/// returns lambda_t = g_t + a_{t+1} * lambda_{t+1}, which equals dL/db_t.
/// dL/da_t is then lambda_t * h_{t-1} (h_0 = 0).
pub(crate) fn scan_lanes_adjoint<T: Scalar>(
    a: &[T],
    grad: &[T],
    outer: usize,
    len: usize,
    inner: usize,
) -> Vec<T> {
    debug_assert_eq!(a.len(), outer * len * inner);
    let mut lambda = vec![T::ZERO; a.len()];
    for o in 0..outer {
        let base = o * len * inner;
        let last = base + (len - 1) * inner;
        lambda[last..last + inner].copy_from_slice(&grad[last..last + inner]);
        for t in (0..len - 1).rev() {
            let cur = base + t * inner;
            let next = base + (t + 1) * inner;
            for i in 0..inner {
                lambda[cur + i] = grad[cur + i] + a[next + i] * lambda[next + i];
            }
        }
    }
    lambda
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn compose_matches_hand_formula() {
        let e = ScanElement::new(0.5f64, 1.0).compose(ScanElement::new(0.5, 2.0));
        assert_eq!(e.a, 0.25);
        assert_eq!(e.b, 2.5);
    }

    #[test]
    fn identity_is_neutral_on_both_sides() {
        let e = ScanElement::new(0.3f64, -2.0);
        assert_eq!(e.compose(ScanElement::identity()), e);
        assert_eq!(ScanElement::identity().compose(e), e);
    }

    #[test]
    fn sequential_hand_case() {
        let h = scan_sequential(&[0.5f64, 0.5], &[1.0, 2.0], 0.0).unwrap();
        assert_eq!(h, vec![1.0, 2.5]);
    }

    #[test]
    fn sequential_identity_and_memoryless() {
        let h = scan_sequential(&[1.0f64; 5], &[0.0; 5], 7.0).unwrap();
        assert_eq!(h, vec![7.0; 5]);
        let b = [3.0f64, -1.0, 2.0];
        let h = scan_sequential(&[0.0; 3], &b, 123.0).unwrap();
        assert_eq!(h, b.to_vec());
    }

    #[test]
    fn length_mismatch_is_shape_error() {
        assert!(scan_sequential(&[1.0f64], &[1.0, 2.0], 0.0).is_err());
        assert!(scan_parallel(&[1.0f64], &[1.0, 2.0], 0.0, 4).is_err());
    }

    #[test]
    fn parallel_matches_sequential_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let len = rng.gen_range(1..=1024);
            let a: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let h0 = rng.gen_range(-1.0..1.0);
            let want = scan_sequential(&a, &b, h0).unwrap();
            for chunk in [1usize, 7, 64, len] {
                let got = scan_parallel(&a, &b, h0, chunk).unwrap();
                let max = want
                    .iter()
                    .zip(got.iter())
                    .map(|(w, g)| (w - g).abs())
                    .fold(0.0, f64::max);
                assert!(max < 1e-10, "chunk {chunk} len {len} diff {max}");
            }
        }
    }

    #[test]
    fn lanes_forward_matches_per_lane_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (outer, len, inner) = (2usize, 13usize, 5usize);
        let n = outer * len * inner;
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h = scan_lanes_forward(&a, &b, outer, len, inner);
        for o in 0..outer {
            for i in 0..inner {
                let lane_a: Vec<f64> = (0..len).map(|t| a[(o * len + t) * inner + i]).collect();
                let lane_b: Vec<f64> = (0..len).map(|t| b[(o * len + t) * inner + i]).collect();
                let want = scan_sequential(&lane_a, &lane_b, 0.0).unwrap();
                for t in 0..len {
                    let got = h[(o * len + t) * inner + i];
                    assert!((got - want[t]).abs() < 1e-14);
                }
            }
        }
    }
}

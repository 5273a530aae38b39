//! Finite-difference gradient verification.
//!
//! Runs in f64 with central differences (default step 1e-5) against the
//! tape's reverse-mode gradients. Large inputs are checked on a
//! deterministic subsample of at least 64 coordinates.

use rayon::prelude::*;

use crate::error::Result;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const MIN_COORDS: usize = 64;

/// Worst coordinate of one checked input.
#[derive(Debug, Clone)]
pub struct InputReport {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
    /// Set when the function produced a non-finite value at some coordinate.
    pub non_finite_at: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub tol_rel: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.inputs
            .iter()
            .all(|r| r.non_finite_at.is_none() && r.max_rel_err <= self.tol_rel)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }
}

/// Deterministic evenly spaced coordinate subsample.
fn sample_coords(numel: usize) -> Vec<usize> {
    if numel <= MIN_COORDS {
        return (0..numel).collect();
    }
    let mut out: Vec<usize> = (0..MIN_COORDS)
        .map(|i| i * (numel - 1) / (MIN_COORDS - 1))
        .collect();
    out.dedup();
    out
}

/// Check the analytic gradient of `f` (a scalar-valued tape program over the
/// given leaves) against central differences at each sampled coordinate of
/// each input.
///
/// The relative error uses max(|analytic|, |numeric|, 1e-3) as denominator so
/// near-zero gradients are compared on an absolute footing.
pub fn gradcheck<F>(inputs: &[(&str, Tensor<f64>)], tol_rel: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId> + Sync,
{
    gradcheck_with_step(inputs, tol_rel, DEFAULT_STEP, f)
}

pub fn gradcheck_with_step<F>(
    inputs: &[(&str, Tensor<f64>)],
    tol_rel: f64,
    step: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId> + Sync,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let root = f(&mut tape, &ids)?;
    let grads = tape.backward(root)?;

    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = f(&mut tape, &ids)?;
        Ok(tape.value(root).item())
    };

    let base: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut reports = Vec::with_capacity(inputs.len());
    for (k, (name, tensor)) in inputs.iter().enumerate() {
        let analytic = grads.get(ids[k]);
        let coords = sample_coords(tensor.numel());
        let results: Vec<(usize, f64, f64, f64, bool)> = coords
            .par_iter()
            .map(|&c| {
                let v = tensor.data()[c];
                let mut plus = base.clone();
                plus[k] = tensor.with_value_at(c, v + step);
                let mut minus = base.clone();
                minus[k] = tensor.with_value_at(c, v - step);
                let (fp, fm) = match (eval(&plus), eval(&minus)) {
                    (Ok(a), Ok(b)) => (a, b),
                    _ => return (c, f64::NAN, f64::NAN, f64::NAN, false),
                };
                if !fp.is_finite() || !fm.is_finite() {
                    return (c, f64::NAN, f64::NAN, f64::NAN, false);
                }
                let numeric = (fp - fm) / (2.0 * step);
                let a = analytic.map(|g| g.data()[c]).unwrap_or(0.0);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                (c, rel, a, numeric, true)
            })
            .collect();

        let mut report = InputReport {
            name: name.to_string(),
            max_rel_err: 0.0,
            worst_coord: 0,
            analytic: 0.0,
            numeric: 0.0,
            coords_checked: coords.len(),
            non_finite_at: None,
        };
        for (c, rel, a, n, finite) in results {
            if !finite {
                report.non_finite_at = Some(c);
                continue;
            }
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_coord = c;
                report.analytic = a;
                report.numeric = n;
            }
        }
        reports.push(report);
    }
    Ok(GradCheckReport {
        inputs: reports,
        tol_rel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_has_zero_error() {
        let x = Tensor::from_fn(&[4], |i| i as f64 * 0.3 - 0.5);
        let report = gradcheck(&[("x", x)], 1e-8, |tape, ids| tape.sum_all(ids[0])).unwrap();
        assert!(report.passed());
        assert!(report.max_rel_err() < 1e-10);
    }

    #[test]
    fn silu_gradient_matches_finite_difference() {
        let x = Tensor::new(vec![1.0f64], &[1]).unwrap();
        let report = gradcheck(&[("x", x)], 1e-8, |tape, ids| {
            let y = tape.silu(ids[0])?;
            tape.sum_all(y)
        })
        .unwrap();
        assert!(report.passed(), "rel err {}", report.max_rel_err());
    }

    #[test]
    fn layer_norm_conv_composite_passes() {
        let x = Tensor::from_fn(&[1, 4, 4, 3], |i| ((i * 37 % 17) as f64 - 8.0) / 9.0);
        let w = Tensor::from_fn(&[3, 3, 3], |i| ((i * 13 % 11) as f64 - 5.0) / 12.0);
        let b = Tensor::from_fn(&[3], |i| i as f64 * 0.1);
        let gamma = Tensor::from_fn(&[3], |i| 1.0 + 0.1 * i as f64);
        let beta = Tensor::from_fn(&[3], |i| 0.05 * i as f64);
        let report = gradcheck(
            &[("x", x), ("w", w), ("b", b), ("gamma", gamma), ("beta", beta)],
            1e-4,
            |tape, ids| {
                let ln = tape.layer_norm(ids[0], ids[3], ids[4], 1e-5)?;
                let y = tape.conv2d(ln, ids[1], ids[2], crate::tape::ConvMode::Depthwise3x3, 1)?;
                tape.mean_all(y)
            },
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err());
    }

    #[test]
    fn subsampling_keeps_at_least_64_coords() {
        assert_eq!(sample_coords(10).len(), 10);
        let s = sample_coords(100_000);
        assert!(s.len() >= 60 && s.len() <= MIN_COORDS);
        assert_eq!(s[0], 0);
        assert_eq!(*s.last().unwrap(), 99_999);
    }

    #[test]
    fn non_finite_output_is_reported_with_location() {
        let x = Tensor::new(vec![1e-6f64], &[1]).unwrap();
        // log near zero: the minus-side probe goes negative and errors out,
        // which must surface as a located failure, not a panic.
        let report = gradcheck(&[("x", x)], 1e-4, |tape, ids| {
            let y = tape.log(ids[0])?;
            tape.sum_all(y)
        })
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.inputs[0].non_finite_at, Some(0));
    }
}

//! Composite network blocks: the gated dual-scanner VSSM, the SiLU-gated
//! depthwise feed-forward block, and the two cross-level fusion modules
//! (KL-gated DGFF and the convolutional AFF baseline).

use rand::Rng;

use crate::error::{Error, Result};
use crate::s6::{S6Ids, ScanParams};
use crate::scanner::{inter_scan, intra_scan, ScanAxis, ScanKind};
use crate::tape::{ConvMode, NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-6;

/// Weight + bias pair for one convolution.
#[derive(Debug, Clone)]
pub struct ConvWeights<T: Scalar> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> ConvWeights<T> {
    /// Kaiming-uniform weights (+-1/sqrt(fan_in)) with zero bias.
    pub fn init(mode: ConvMode, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let (shape, fan_in): (Vec<usize>, usize) = match mode {
            ConvMode::Pointwise => (vec![c_in, c_out], c_in),
            ConvMode::Depthwise3x3 => (vec![3, 3, c_in], 9),
            ConvMode::Full3x3 => (vec![3, 3, c_in, c_out], 9 * c_in),
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Tensor::from_fn(&shape, |_| T::from_f64(rng.gen_range(-bound..bound)));
        let bias = match mode {
            ConvMode::Depthwise3x3 => c_in,
            _ => c_out,
        };
        ConvWeights {
            w,
            b: Tensor::zeros(&[bias]),
        }
    }

    pub fn zeros(mode: ConvMode, c_in: usize, c_out: usize) -> Self {
        let shape: Vec<usize> = match mode {
            ConvMode::Pointwise => vec![c_in, c_out],
            ConvMode::Depthwise3x3 => vec![3, 3, c_in],
            ConvMode::Full3x3 => vec![3, 3, c_in, c_out],
        };
        let bias = match mode {
            ConvMode::Depthwise3x3 => c_in,
            _ => c_out,
        };
        ConvWeights {
            w: Tensor::zeros(&shape),
            b: Tensor::zeros(&[bias]),
        }
    }

    pub fn param_count(&self) -> usize {
        self.w.numel() + self.b.numel()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvIds {
    pub w: NodeId,
    pub b: NodeId,
}

impl ConvIds {
    pub fn leaf<T: Scalar>(tape: &mut Tape<T>, w: &ConvWeights<T>) -> Self {
        ConvIds {
            w: tape.leaf(w.w.clone()),
            b: tape.leaf(w.b.clone()),
        }
    }
}

// ── VSSM ─────────────────────────────────────────────────────────────

/// Weights of one VSSM block over C channels.
///
/// The pointwise expansion produces 2C channels split as Y (C) and F (C);
/// F splits again into the vertical and horizontal branches of C/2 each.
#[derive(Debug, Clone)]
pub struct VssmWeights<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    /// Pointwise C -> 2C.
    pub w_point: ConvWeights<T>,
    /// Depthwise 3x3 over 2C.
    pub w_depth: ConvWeights<T>,
    pub scan_v: ScanParams<T>,
    pub scan_h: ScanParams<T>,
    /// Final pointwise C -> C mixing before the residual; optional because
    /// the gated product alone never mixes channels.
    pub w_out: Option<ConvWeights<T>>,
}

impl<T: Scalar> VssmWeights<T> {
    pub fn init(channels: usize, state_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if channels % 2 != 0 {
            return Err(Error::shape(format!(
                "VSSM channel count must be even for the C/2 split, got {channels}"
            )));
        }
        Ok(VssmWeights {
            gamma: Tensor::full(&[channels], T::ONE),
            beta: Tensor::zeros(&[channels]),
            w_point: ConvWeights::init(ConvMode::Pointwise, channels, 2 * channels, rng),
            w_depth: ConvWeights::init(ConvMode::Depthwise3x3, 2 * channels, 2 * channels, rng),
            scan_v: ScanParams::init(channels / 2, state_dim, rng),
            scan_h: ScanParams::init(channels / 2, state_dim, rng),
            w_out: Some(ConvWeights::init(ConvMode::Pointwise, channels, channels, rng)),
        })
    }

    pub fn param_count(&self) -> usize {
        let scan = |p: &ScanParams<T>| {
            p.a_log.numel()
                + p.b_proj.numel()
                + p.c_proj.numel()
                + p.delta_proj.numel()
                + p.delta_bias.numel()
                + p.d_skip.numel()
        };
        self.gamma.numel()
            + self.beta.numel()
            + self.w_point.param_count()
            + self.w_depth.param_count()
            + scan(&self.scan_v)
            + scan(&self.scan_h)
            + self.w_out.as_ref().map_or(0, |w| w.param_count())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VssmIds {
    pub gamma: NodeId,
    pub beta: NodeId,
    pub w_point: ConvIds,
    pub w_depth: ConvIds,
    pub scan_v: S6Ids,
    pub scan_h: S6Ids,
    pub w_out: Option<ConvIds>,
}

impl VssmIds {
    pub fn leaf<T: Scalar>(tape: &mut Tape<T>, w: &VssmWeights<T>) -> Self {
        VssmIds {
            gamma: tape.leaf(w.gamma.clone()),
            beta: tape.leaf(w.beta.clone()),
            w_point: ConvIds::leaf(tape, &w.w_point),
            w_depth: ConvIds::leaf(tape, &w.w_depth),
            scan_v: S6Ids::leaf(tape, &w.scan_v),
            scan_h: S6Ids::leaf(tape, &w.scan_h),
            w_out: w.w_out.as_ref().map(|c| ConvIds::leaf(tape, c)),
        }
    }
}

/// x + W_out(SiLU(Y) ⊙ [scanner_v(F_v) ‖ scanner_h(F_h)]) where
/// (Y, F) = W_d W_p LN(x) and `kind` selects Intra or Inter scanners for
/// both branches.
pub fn vssm_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    ids: &VssmIds,
    kind: ScanKind,
) -> Result<NodeId> {
    let xv = tape.value(x);
    if xv.rank() != 4 {
        return Err(Error::shape(format!("VSSM input must be NHWC, got {:?}", xv.shape())));
    }
    let c = xv.dim(3);
    if c % 2 != 0 {
        return Err(Error::shape(format!("VSSM channels must be even, got {c}")));
    }
    let ln = tape.layer_norm(x, ids.gamma, ids.beta, T::from_f64(LN_EPS))?;
    let expanded = tape.conv2d(ln, ids.w_point.w, ids.w_point.b, ConvMode::Pointwise, 1)?;
    let mixed = tape.conv2d(expanded, ids.w_depth.w, ids.w_depth.b, ConvMode::Depthwise3x3, 1)?;
    let parts = tape.split(mixed, 3, &[c, c])?;
    let (y, f) = (parts[0], parts[1]);
    let branches = tape.split(f, 3, &[c / 2, c / 2])?;
    let (f_v, f_h) = (branches[0], branches[1]);
    let (fv, fh) = match kind {
        ScanKind::Intra => (
            intra_scan(tape, f_v, ScanAxis::Vertical, &ids.scan_v)?,
            intra_scan(tape, f_h, ScanAxis::Horizontal, &ids.scan_h)?,
        ),
        ScanKind::Inter => (
            inter_scan(tape, f_v, ScanAxis::Vertical, &ids.scan_v)?,
            inter_scan(tape, f_h, ScanAxis::Horizontal, &ids.scan_h)?,
        ),
    };
    let f_hat = tape.concat(&[fv, fh], 3)?;
    let gate = tape.silu(y)?;
    let mut branch = tape.mul(gate, f_hat)?;
    if let Some(out) = &ids.w_out {
        branch = tape.conv2d(branch, out.w, out.b, ConvMode::Pointwise, 1)?;
    }
    tape.add(branch, x)
}

// ── GDFN ─────────────────────────────────────────────────────────────

/// Expansion width: ratio * channels rounded to the nearest even count.
pub fn gdfn_hidden(channels: usize, ratio: f64) -> usize {
    let even = 2.0 * (ratio * channels as f64 / 2.0).round();
    even.max(2.0) as usize
}

#[derive(Debug, Clone)]
pub struct GdfnWeights<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    /// Pointwise C -> 2*hidden (gate and value halves).
    pub expand: ConvWeights<T>,
    /// Depthwise 3x3 over 2*hidden.
    pub depth: ConvWeights<T>,
    /// Pointwise hidden -> C.
    pub project: ConvWeights<T>,
}

impl<T: Scalar> GdfnWeights<T> {
    pub fn init(channels: usize, ratio: f64, rng: &mut impl Rng) -> Self {
        let hidden = gdfn_hidden(channels, ratio);
        GdfnWeights {
            gamma: Tensor::full(&[channels], T::ONE),
            beta: Tensor::zeros(&[channels]),
            expand: ConvWeights::init(ConvMode::Pointwise, channels, 2 * hidden, rng),
            depth: ConvWeights::init(ConvMode::Depthwise3x3, 2 * hidden, 2 * hidden, rng),
            project: ConvWeights::init(ConvMode::Pointwise, hidden, channels, rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.gamma.numel()
            + self.beta.numel()
            + self.expand.param_count()
            + self.depth.param_count()
            + self.project.param_count()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GdfnIds {
    pub gamma: NodeId,
    pub beta: NodeId,
    pub expand: ConvIds,
    pub depth: ConvIds,
    pub project: ConvIds,
}

impl GdfnIds {
    pub fn leaf<T: Scalar>(tape: &mut Tape<T>, w: &GdfnWeights<T>) -> Self {
        GdfnIds {
            gamma: tape.leaf(w.gamma.clone()),
            beta: tape.leaf(w.beta.clone()),
            expand: ConvIds::leaf(tape, &w.expand),
            depth: ConvIds::leaf(tape, &w.depth),
            project: ConvIds::leaf(tape, &w.project),
        }
    }
}

/// x + project(SiLU(gate) ⊙ value) where (gate, value) are the halves of
/// depthwise(expand(LN(x))).
pub fn gdfn_forward<T: Scalar>(tape: &mut Tape<T>, x: NodeId, ids: &GdfnIds) -> Result<NodeId> {
    let ln = tape.layer_norm(x, ids.gamma, ids.beta, T::from_f64(LN_EPS))?;
    let expanded = tape.conv2d(ln, ids.expand.w, ids.expand.b, ConvMode::Pointwise, 1)?;
    let mixed = tape.conv2d(expanded, ids.depth.w, ids.depth.b, ConvMode::Depthwise3x3, 1)?;
    let hidden = tape.value(mixed).dim(3) / 2;
    let parts = tape.split(mixed, 3, &[hidden, hidden])?;
    let gate = tape.silu(parts[0])?;
    let gated = tape.mul(gate, parts[1])?;
    let projected = tape.conv2d(gated, ids.project.w, ids.project.b, ConvMode::Pointwise, 1)?;
    tape.add(projected, x)
}

// ── KL gate and fusion ───────────────────────────────────────────────

/// Per-location KL divergence gate in (0, 1), shape (B, H, W, 1).
///
/// Both inputs are channel-softmax normalized before the log (with a 1e-8
/// floor inside the log), giving d(h, w) = sum_c p_ref (log p_ref - log
/// p_in) >= 0 and gate = sigmoid(d); identical inputs give exactly 0.5.
pub fn kl_gate<T: Scalar>(tape: &mut Tape<T>, y_in: NodeId, y_ref: NodeId) -> Result<NodeId> {
    let (vi, vr) = (tape.value(y_in), tape.value(y_ref));
    if vi.shape() != vr.shape() {
        return Err(Error::shape(format!(
            "kl_gate shapes differ: {:?} vs {:?}",
            vi.shape(),
            vr.shape()
        )));
    }
    if vi.rank() != 4 {
        return Err(Error::shape(format!("kl_gate input must be NHWC, got {:?}", vi.shape())));
    }
    if !vi.all_finite() || !vr.all_finite() {
        return Err(Error::NonFinite("kl_gate input".into()));
    }
    let (b, h, w) = (vi.dim(0), vi.dim(1), vi.dim(2));
    let p_in = tape.softmax(y_in)?;
    let p_ref = tape.softmax(y_ref)?;
    let lp_in = tape.log_clamped(p_in)?;
    let lp_ref = tape.log_clamped(p_ref)?;
    let diff = tape.sub(lp_ref, lp_in)?;
    let weighted = tape.mul(p_ref, diff)?;
    let d = tape.reduce_sum(weighted, 3)?;
    let gate = tape.sigmoid(d)?;
    tape.reshape(gate, &[b, h, w, 1])
}

/// Cross-level fusion weights: one pointwise projection per source to the
/// current level's width, plus the pointwise merge over the gated-sum ‖
/// current concatenation (2C -> C).
#[derive(Debug, Clone)]
pub struct FusionWeights<T: Scalar> {
    pub proj_cur: ConvWeights<T>,
    pub proj_oth1: ConvWeights<T>,
    pub proj_oth2: ConvWeights<T>,
    pub merge: ConvWeights<T>,
}

impl<T: Scalar> FusionWeights<T> {
    pub fn init(c_cur: usize, c_oth1: usize, c_oth2: usize, rng: &mut impl Rng) -> Self {
        FusionWeights {
            proj_cur: ConvWeights::init(ConvMode::Pointwise, c_cur, c_cur, rng),
            proj_oth1: ConvWeights::init(ConvMode::Pointwise, c_oth1, c_cur, rng),
            proj_oth2: ConvWeights::init(ConvMode::Pointwise, c_oth2, c_cur, rng),
            merge: ConvWeights::init(ConvMode::Pointwise, 2 * c_cur, c_cur, rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.proj_cur.param_count()
            + self.proj_oth1.param_count()
            + self.proj_oth2.param_count()
            + self.merge.param_count()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FusionIds {
    pub proj_cur: ConvIds,
    pub proj_oth1: ConvIds,
    pub proj_oth2: ConvIds,
    pub merge: ConvIds,
}

impl FusionIds {
    pub fn leaf<T: Scalar>(tape: &mut Tape<T>, w: &FusionWeights<T>) -> Self {
        FusionIds {
            proj_cur: ConvIds::leaf(tape, &w.proj_cur),
            proj_oth1: ConvIds::leaf(tape, &w.proj_oth1),
            proj_oth2: ConvIds::leaf(tape, &w.proj_oth2),
            merge: ConvIds::leaf(tape, &w.merge),
        }
    }
}

/// Bilinear-resize a source to the target extent (no-op when equal).
fn resize_to<T: Scalar>(tape: &mut Tape<T>, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
    let v = tape.value(x);
    if v.dim(1) == h && v.dim(2) == w {
        Ok(x)
    } else {
        tape.resize_bilinear(x, h, w)
    }
}

/// Dual-gating fusion: project all sources to the current level, gate the
/// two other-level features by their KL distance to the current one, sum,
/// concatenate with the current projection, and merge pointwise.
pub fn dgff_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x_cur: NodeId,
    x_oth1: NodeId,
    x_oth2: NodeId,
    ids: &FusionIds,
) -> Result<NodeId> {
    let cur = tape.value(x_cur);
    let (h, w) = (cur.dim(1), cur.dim(2));
    if h == 0 || w == 0 {
        return Err(Error::shape("fusion target has zero spatial extent"));
    }
    let p_cur = tape.conv2d(x_cur, ids.proj_cur.w, ids.proj_cur.b, ConvMode::Pointwise, 1)?;
    let r1 = resize_to(tape, x_oth1, h, w)?;
    let p1 = tape.conv2d(r1, ids.proj_oth1.w, ids.proj_oth1.b, ConvMode::Pointwise, 1)?;
    let r2 = resize_to(tape, x_oth2, h, w)?;
    let p2 = tape.conv2d(r2, ids.proj_oth2.w, ids.proj_oth2.b, ConvMode::Pointwise, 1)?;
    let g1 = kl_gate(tape, p1, p_cur)?;
    let g2 = kl_gate(tape, p2, p_cur)?;
    let gated1 = tape.mul(p1, g1)?;
    let gated2 = tape.mul(p2, g2)?;
    let gated = tape.add(gated1, gated2)?;
    let cat = tape.concat(&[gated, p_cur], 3)?;
    tape.conv2d(cat, ids.merge.w, ids.merge.b, ConvMode::Pointwise, 1)
}

/// Convolutional fusion baseline: resize, concatenate all three sources,
/// then 1x1 and 3x3 convolutions.
#[derive(Debug, Clone)]
pub struct AffWeights<T: Scalar> {
    pub reduce: ConvWeights<T>,
    pub refine: ConvWeights<T>,
}

impl<T: Scalar> AffWeights<T> {
    pub fn init(c_cur: usize, c_oth1: usize, c_oth2: usize, rng: &mut impl Rng) -> Self {
        let total = c_cur + c_oth1 + c_oth2;
        AffWeights {
            reduce: ConvWeights::init(ConvMode::Pointwise, total, c_cur, rng),
            refine: ConvWeights::init(ConvMode::Full3x3, c_cur, c_cur, rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.reduce.param_count() + self.refine.param_count()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AffIds {
    pub reduce: ConvIds,
    pub refine: ConvIds,
}

impl AffIds {
    pub fn leaf<T: Scalar>(tape: &mut Tape<T>, w: &AffWeights<T>) -> Self {
        AffIds {
            reduce: ConvIds::leaf(tape, &w.reduce),
            refine: ConvIds::leaf(tape, &w.refine),
        }
    }
}

pub fn aff_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x_cur: NodeId,
    x_oth1: NodeId,
    x_oth2: NodeId,
    ids: &AffIds,
) -> Result<NodeId> {
    let cur = tape.value(x_cur);
    let (h, w) = (cur.dim(1), cur.dim(2));
    if h == 0 || w == 0 {
        return Err(Error::shape("fusion target has zero spatial extent"));
    }
    let r1 = resize_to(tape, x_oth1, h, w)?;
    let r2 = resize_to(tape, x_oth2, h, w)?;
    let cat = tape.concat(&[x_cur, r1, r2], 3)?;
    let reduced = tape.conv2d(cat, ids.reduce.w, ids.reduce.b, ConvMode::Pointwise, 1)?;
    tape.conv2d(reduced, ids.refine.w, ids.refine.b, ConvMode::Full3x3, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn vssm_zero_branch_is_residual_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut w = VssmWeights::<f64>::init(4, 4, &mut rng).unwrap();
        w.w_point = ConvWeights::zeros(ConvMode::Pointwise, 4, 8);
        let x = random_input(&[1, 5, 6, 4], 32);
        for kind in [ScanKind::Intra, ScanKind::Inter] {
            let mut tape = Tape::new();
            let ids = VssmIds::leaf(&mut tape, &w);
            let xid = tape.leaf(x.clone());
            let y = vssm_forward(&mut tape, xid, &ids, kind).unwrap();
            assert_eq!(tape.value(y).data(), x.data(), "{kind:?} not identity");
        }
    }

    #[test]
    fn vssm_shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let w = VssmWeights::<f64>::init(16, 8, &mut rng).unwrap();
        let x = random_input(&[1, 8, 12, 16], 34);
        let mut tape = Tape::new();
        let ids = VssmIds::leaf(&mut tape, &w);
        let xid = tape.leaf(x);
        let y = vssm_forward(&mut tape, xid, &ids, ScanKind::Intra).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 8, 12, 16]);
    }

    #[test]
    fn vssm_rejects_odd_channels() {
        assert!(VssmWeights::<f64>::init(5, 4, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn gdfn_zero_expand_is_residual_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let mut w = GdfnWeights::<f64>::init(4, 2.0, &mut rng);
        let hidden = gdfn_hidden(4, 2.0);
        w.expand = ConvWeights::zeros(ConvMode::Pointwise, 4, 2 * hidden);
        let x = random_input(&[2, 4, 5, 4], 36);
        let mut tape = Tape::new();
        let ids = GdfnIds::leaf(&mut tape, &w);
        let xid = tape.leaf(x.clone());
        let y = gdfn_forward(&mut tape, xid, &ids).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn gdfn_shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let w = GdfnWeights::<f64>::init(8, 2.66, &mut rng);
        let x = random_input(&[2, 6, 6, 8], 38);
        let mut tape = Tape::new();
        let ids = GdfnIds::leaf(&mut tape, &w);
        let xid = tape.leaf(x);
        let y = gdfn_forward(&mut tape, xid, &ids).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 6, 6, 8]);
    }

    #[test]
    fn gdfn_hidden_rounds_to_even() {
        assert_eq!(gdfn_hidden(16, 2.66), 42); // 42.56 -> 42
        assert_eq!(gdfn_hidden(48, 2.66), 128); // 127.68 -> 128
        assert_eq!(gdfn_hidden(4, 2.0), 8);
    }

    #[test]
    fn kl_gate_identical_inputs_give_half() {
        let x = random_input(&[1, 3, 4, 5], 39);
        let mut tape = Tape::new();
        let a = tape.leaf(x.clone());
        let b = tape.leaf(x);
        let g = kl_gate(&mut tape, a, b).unwrap();
        for &v in tape.value(g).data() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn kl_gate_two_channel_formula_case() {
        // logits chosen so softmax(ref) = (1-1e-8, 1e-8) and
        // softmax(in) = (0.5, 0.5)
        let eps = 1e-8f64;
        let y_ref = Tensor::new(vec![(1.0 - eps).ln(), eps.ln()], &[1, 1, 1, 2]).unwrap();
        let y_in = Tensor::new(vec![0.0, 0.0], &[1, 1, 1, 2]).unwrap();
        let mut tape = Tape::new();
        let a = tape.leaf(y_in);
        let b = tape.leaf(y_ref);
        let g = kl_gate(&mut tape, a, b).unwrap();
        // direct formula oracle with the same floor convention
        let p_ref = [1.0 - eps, eps];
        let p_in = [0.5f64, 0.5];
        let d: f64 = (0..2)
            .map(|i| p_ref[i] * (p_ref[i].max(1e-8).ln() - p_in[i].max(1e-8).ln()))
            .sum();
        let want = 1.0 / (1.0 + (-d).exp());
        let got = tape.value(g).item();
        assert!((got - want).abs() < 1e-10, "got {got}, want {want}");
        assert!((d - std::f64::consts::LN_2).abs() < 1e-6);
        assert!((got - 2.0 / 3.0).abs() < 1e-4);
    }

    #[test]
    fn kl_gate_range_on_random_inputs() {
        for seed in 0..10 {
            let a = random_input(&[1, 3, 3, 6], 100 + seed);
            let b = random_input(&[1, 3, 3, 6], 200 + seed);
            let mut tape = Tape::new();
            let ai = tape.leaf(a);
            let bi = tape.leaf(b);
            let g = kl_gate(&mut tape, ai, bi).unwrap();
            for &v in tape.value(g).data() {
                assert!(v > 0.5 && v < 1.0, "gate {v} outside (0.5, 1)");
            }
        }
    }

    #[test]
    fn kl_gate_rejects_non_finite() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![f64::INFINITY, 0.0], &[1, 1, 1, 2]).unwrap());
        let b = tape.leaf(Tensor::zeros(&[1, 1, 1, 2]));
        assert!(matches!(kl_gate(&mut tape, a, b), Err(Error::NonFinite(_))));
    }

    #[test]
    fn dgff_identical_sources_reduce_to_duplicated_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut w = FusionWeights::<f64>::init(4, 4, 4, &mut rng);
        // identical projections for all three sources
        w.proj_oth1 = w.proj_cur.clone();
        w.proj_oth2 = w.proj_cur.clone();
        let x = random_input(&[1, 4, 4, 4], 42);
        let mut tape = Tape::new();
        let ids = FusionIds::leaf(&mut tape, &w);
        let (a, b, c) = (tape.leaf(x.clone()), tape.leaf(x.clone()), tape.leaf(x.clone()));
        let y = dgff_forward(&mut tape, a, b, c, &ids).unwrap();
        // oracle: gates are exactly 0.5, so the gated sum equals the
        // projection itself and the merge sees concat(X', X')
        let mut oracle = Tape::new();
        let xi = oracle.leaf(x);
        let pw = oracle.constant(w.proj_cur.w.clone());
        let pb = oracle.constant(w.proj_cur.b.clone());
        let proj = oracle.conv2d(xi, pw, pb, ConvMode::Pointwise, 1).unwrap();
        let cat = oracle.concat(&[proj, proj], 3).unwrap();
        let mw = oracle.constant(w.merge.w.clone());
        let mb = oracle.constant(w.merge.b.clone());
        let want = oracle.conv2d(cat, mw, mb, ConvMode::Pointwise, 1).unwrap();
        let got = tape.value(y).data();
        let want = oracle.value(want).data();
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn dgff_symmetric_in_other_sources() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let w = FusionWeights::<f64>::init(4, 6, 8, &mut rng);
        let swapped = FusionWeights {
            proj_cur: w.proj_cur.clone(),
            proj_oth1: w.proj_oth2.clone(),
            proj_oth2: w.proj_oth1.clone(),
            merge: w.merge.clone(),
        };
        let cur = random_input(&[1, 4, 4, 4], 44);
        let o1 = random_input(&[1, 8, 8, 6], 45);
        let o2 = random_input(&[1, 2, 2, 8], 46);
        let run = |w: &FusionWeights<f64>, a: &Tensor<f64>, b: &Tensor<f64>| {
            let mut tape = Tape::new();
            let ids = FusionIds::leaf(&mut tape, w);
            let c = tape.leaf(cur.clone());
            let x1 = tape.leaf(a.clone());
            let x2 = tape.leaf(b.clone());
            let y = dgff_forward(&mut tape, c, x1, x2, &ids).unwrap();
            tape.value(y).data().to_vec()
        };
        let plain = run(&w, &o1, &o2);
        let flipped = run(&swapped, &o2, &o1);
        for (a, b) in plain.iter().zip(flipped.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn aff_zero_weights_give_zero_output() {
        let w = AffWeights::<f64> {
            reduce: ConvWeights::zeros(ConvMode::Pointwise, 12, 4),
            refine: ConvWeights::zeros(ConvMode::Full3x3, 4, 4),
        };
        let cur = random_input(&[1, 4, 4, 4], 47);
        let o1 = random_input(&[1, 8, 8, 4], 48);
        let o2 = random_input(&[1, 2, 2, 4], 49);
        let mut tape = Tape::new();
        let ids = AffIds::leaf(&mut tape, &w);
        let c = tape.leaf(cur);
        let a = tape.leaf(o1);
        let b = tape.leaf(o2);
        let y = aff_forward(&mut tape, c, a, b, &ids).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.value(y).shape(), &[1, 4, 4, 4]);
    }

    #[test]
    fn fusion_shape_contracts_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let dg = FusionWeights::<f64>::init(4, 6, 8, &mut rng);
        let af = AffWeights::<f64>::init(4, 6, 8, &mut rng);
        let cur = random_input(&[1, 4, 6, 4], 52);
        let o1 = random_input(&[1, 8, 12, 6], 53);
        let o2 = random_input(&[1, 2, 3, 8], 54);
        let mut tape = Tape::new();
        let dgi = FusionIds::leaf(&mut tape, &dg);
        let afi = AffIds::leaf(&mut tape, &af);
        let c = tape.leaf(cur);
        let a = tape.leaf(o1);
        let b = tape.leaf(o2);
        let y1 = dgff_forward(&mut tape, c, a, b, &dgi).unwrap();
        let y2 = aff_forward(&mut tape, c, a, b, &afi).unwrap();
        assert_eq!(tape.value(y1).shape(), tape.value(y2).shape());
        assert_eq!(tape.value(y1).shape(), &[1, 4, 6, 4]);
    }

    #[test]
    fn gradcheck_vssm_both_kinds() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let w = VssmWeights::<f64>::init(4, 3, &mut rng).unwrap();
        let x = random_input(&[1, 4, 4, 4], 56);
        for kind in [ScanKind::Intra, ScanKind::Inter] {
            let report = crate::gradcheck::gradcheck(
                &[
                    ("x", x.clone()),
                    ("w_point", w.w_point.w.clone()),
                    ("scan_v_b", w.scan_v.b_proj.clone()),
                    ("gamma", w.gamma.clone()),
                ],
                1e-4,
                |tape, ids| {
                    let vssm = VssmIds {
                        gamma: ids[3],
                        beta: tape.leaf(w.beta.clone()),
                        w_point: ConvIds {
                            w: ids[1],
                            b: tape.leaf(w.w_point.b.clone()),
                        },
                        w_depth: ConvIds::leaf(tape, &w.w_depth),
                        scan_v: S6Ids {
                            b_proj: ids[2],
                            ..S6Ids::leaf(tape, &w.scan_v)
                        },
                        scan_h: S6Ids::leaf(tape, &w.scan_h),
                        w_out: w.w_out.as_ref().map(|c| ConvIds::leaf(tape, c)),
                    };
                    let y = vssm_forward(tape, ids[0], &vssm, kind)?;
                    tape.mean_all(y)
                },
            )
            .unwrap();
            assert!(report.passed(), "{kind:?} max rel err {}", report.max_rel_err());
        }
    }

    #[test]
    fn gradcheck_gdfn() {
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let w = GdfnWeights::<f64>::init(4, 2.0, &mut rng);
        let x = random_input(&[1, 4, 4, 4], 58);
        let report = crate::gradcheck::gradcheck(
            &[("x", x), ("expand", w.expand.w.clone()), ("project", w.project.w.clone())],
            1e-4,
            |tape, ids| {
                let gdfn = GdfnIds {
                    gamma: tape.leaf(w.gamma.clone()),
                    beta: tape.leaf(w.beta.clone()),
                    expand: ConvIds {
                        w: ids[1],
                        b: tape.leaf(w.expand.b.clone()),
                    },
                    depth: ConvIds::leaf(tape, &w.depth),
                    project: ConvIds {
                        w: ids[2],
                        b: tape.leaf(w.project.b.clone()),
                    },
                };
                let y = gdfn_forward(tape, ids[0], &gdfn)?;
                tape.mean_all(y)
            },
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err());
    }

    #[test]
    fn gradcheck_dgff() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let w = FusionWeights::<f64>::init(2, 4, 2, &mut rng);
        let cur = random_input(&[1, 4, 4, 2], 60);
        let o1 = random_input(&[1, 2, 2, 4], 61);
        let o2 = random_input(&[1, 8, 8, 2], 62);
        let report = crate::gradcheck::gradcheck(
            &[
                ("cur", cur),
                ("oth1", o1),
                ("oth2", o2),
                ("merge", w.merge.w.clone()),
            ],
            1e-4,
            |tape, ids| {
                let fusion = FusionIds {
                    proj_cur: ConvIds::leaf(tape, &w.proj_cur),
                    proj_oth1: ConvIds::leaf(tape, &w.proj_oth1),
                    proj_oth2: ConvIds::leaf(tape, &w.proj_oth2),
                    merge: ConvIds {
                        w: ids[3],
                        b: tape.leaf(w.merge.b.clone()),
                    },
                };
                let y = dgff_forward(tape, ids[0], ids[1], ids[2], &fusion)?;
                tape.mean_all(y)
            },
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err());
    }
}

//! Scan-strategy analysis: pixel-visit orders with their misalignment and
//! pixel-forgetting statistics, a flatten-and-scan 4-way baseline block, and
//! a cost/time comparison across scanning strategies.
//!
//! A sequence adjacency between pixels at spatial Chebyshev distance > 1 is
//! counted as misaligned: slice orders never wrap across the grid, while a
//! row-major flatten wraps at every row transition.

use std::time::Instant;

use rand::Rng;

use crate::error::{Error, Result};
use crate::network::{s6_macs, vssm_macs};
use crate::s6::{s6_forward, S6Ids, ScanParams};
use crate::scanner::ScanKind;
use crate::tape::{ConvMode, NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

/// Explicit pixel-visit order: disjoint sequences covering an H x W grid.
#[derive(Debug, Clone)]
pub struct ScanOrder {
    pub name: String,
    pub height: usize,
    pub width: usize,
    sequences: Vec<Vec<(usize, usize)>>,
}

impl ScanOrder {
    /// Validates that every grid pixel appears in exactly one sequence
    /// exactly once.
    pub fn new(
        name: impl Into<String>,
        height: usize,
        width: usize,
        sequences: Vec<Vec<(usize, usize)>>,
    ) -> Result<Self> {
        let mut seen = vec![false; height * width];
        let mut count = 0usize;
        for seq in &sequences {
            for &(r, c) in seq {
                if r >= height || c >= width {
                    return Err(Error::contract(format!(
                        "pixel ({r}, {c}) outside {height}x{width} grid"
                    )));
                }
                if std::mem::replace(&mut seen[r * width + c], true) {
                    return Err(Error::contract(format!("pixel ({r}, {c}) visited twice")));
                }
                count += 1;
            }
        }
        if count != height * width {
            return Err(Error::contract(format!(
                "order covers {count} of {} pixels",
                height * width
            )));
        }
        Ok(ScanOrder {
            name: name.into(),
            height,
            width,
            sequences,
        })
    }

    pub fn sequences(&self) -> &[Vec<(usize, usize)>] {
        &self.sequences
    }

    /// Single row-major sequence over the whole grid.
    pub fn row_major_flatten(height: usize, width: usize) -> Self {
        let seq = (0..height)
            .flat_map(|r| (0..width).map(move |c| (r, c)))
            .collect();
        ScanOrder::new("flatten-row-major", height, width, vec![seq]).expect("covers grid")
    }

    /// One sequence per row (the horizontal intra-slice order).
    pub fn intra_rows(height: usize, width: usize) -> Self {
        let seqs = (0..height)
            .map(|r| (0..width).map(|c| (r, c)).collect())
            .collect();
        ScanOrder::new("intra-rows", height, width, seqs).expect("covers grid")
    }

    /// One sequence per column (the vertical intra-slice order).
    pub fn intra_cols(height: usize, width: usize) -> Self {
        let seqs = (0..width)
            .map(|c| (0..height).map(|r| (r, c)).collect())
            .collect();
        ScanOrder::new("intra-cols", height, width, seqs).expect("covers grid")
    }
}

/// Count sequence-adjacent pixel pairs at spatial Chebyshev distance > 1.
pub fn misalignment_count(order: &ScanOrder) -> usize {
    let mut count = 0;
    for seq in &order.sequences {
        for pair in seq.windows(2) {
            let (r0, c0) = pair[0];
            let (r1, c1) = pair[1];
            let cheb = r0.abs_diff(r1).max(c0.abs_diff(c1));
            if cheb > 1 {
                count += 1;
            }
        }
    }
    count
}

/// Sequence-distance statistics over spatially 4-adjacent pixel pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ForgettingStats {
    /// Largest in-sequence distance among connected pairs.
    pub max_distance: usize,
    /// Mean in-sequence distance among connected pairs.
    pub mean_distance: f64,
    /// Fraction of 4-adjacent pairs whose pixels fall in different
    /// sequences (distance effectively infinite).
    pub disconnected_fraction: f64,
    pub pairs_total: usize,
    pub pairs_disconnected: usize,
}

pub fn forgetting_distance(order: &ScanOrder) -> ForgettingStats {
    // map each pixel to (sequence index, position)
    let mut pos = vec![(usize::MAX, 0usize); order.height * order.width];
    for (si, seq) in order.sequences.iter().enumerate() {
        for (pi, &(r, c)) in seq.iter().enumerate() {
            pos[r * order.width + c] = (si, pi);
        }
    }
    let mut max_distance = 0usize;
    let mut sum = 0usize;
    let mut connected = 0usize;
    let mut disconnected = 0usize;
    let mut total = 0usize;
    for r in 0..order.height {
        for c in 0..order.width {
            for (nr, nc) in [(r + 1, c), (r, c + 1)] {
                if nr >= order.height || nc >= order.width {
                    continue;
                }
                total += 1;
                let (sa, pa) = pos[r * order.width + c];
                let (sb, pb) = pos[nr * order.width + nc];
                if sa == sb {
                    let d = pa.abs_diff(pb);
                    max_distance = max_distance.max(d);
                    sum += d;
                    connected += 1;
                } else {
                    disconnected += 1;
                }
            }
        }
    }
    ForgettingStats {
        max_distance,
        mean_distance: if connected > 0 { sum as f64 / connected as f64 } else { 0.0 },
        disconnected_fraction: if total > 0 { disconnected as f64 / total as f64 } else { 0.0 },
        pairs_total: total,
        pairs_disconnected: disconnected,
    }
}

// ── flatten-and-scan baseline ────────────────────────────────────────

/// Full-grid flatten-and-scan in four directions (row-major forward and
/// reverse, column-major forward and reverse), one S6 per direction, summed.
/// Every direction is a full-length L = H*W scan over all C channels.
pub fn flatten4way_scan<T: Scalar>(
    tape: &mut Tape<T>,
    f: NodeId,
    params: &[S6Ids; 4],
) -> Result<NodeId> {
    let v = tape.value(f);
    if v.rank() != 4 {
        return Err(Error::shape(format!(
            "flatten4way input must be (B, H, W, C), got {:?}",
            v.shape()
        )));
    }
    let (b, h, w, c) = (v.dim(0), v.dim(1), v.dim(2), v.dim(3));
    let mut acc: Option<NodeId> = None;
    for (dir, p) in params.iter().enumerate() {
        let transposed = dir >= 2;
        let reversed = dir % 2 == 1;
        let mut x = f;
        if transposed {
            x = tape.permute(x, &[0, 2, 1, 3])?;
        }
        let (sh, sw) = if transposed { (w, h) } else { (h, w) };
        let mut seq = tape.reshape(x, &[b, sh * sw, c])?;
        if reversed {
            seq = tape.flip(seq, 1)?;
        }
        let mut y = s6_forward(tape, seq, p)?;
        if reversed {
            y = tape.flip(y, 1)?;
        }
        let mut out = tape.reshape(y, &[b, sh, sw, c])?;
        if transposed {
            out = tape.permute(out, &[0, 2, 1, 3])?;
        }
        acc = Some(match acc {
            Some(a) => tape.add(a, out)?,
            None => out,
        });
    }
    Ok(acc.expect("four directions"))
}

/// Cost of the 4-way flatten baseline block's scanning stage.
pub fn flatten4way_macs(h: u64, w: u64, c: u64, n: u64) -> u64 {
    4 * s6_macs(h * w, c, n)
}

// ── strategy benchmark ───────────────────────────────────────────────

/// Scanning strategy inside an otherwise identical gated block stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    InterOnly,
    Interleaved,
    IntraOnly,
    Flatten4Way,
}

impl Strategy {
    pub fn all() -> [Strategy; 4] {
        [
            Strategy::InterOnly,
            Strategy::Interleaved,
            Strategy::IntraOnly,
            Strategy::Flatten4Way,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::InterOnly => "inter-only",
            Strategy::Interleaved => "interleaved",
            Strategy::IntraOnly => "intra-only",
            Strategy::Flatten4Way => "flatten-4way",
        }
    }
}

/// A stack of VSSM+GDFN pairs whose scanner stage follows the strategy.
pub struct StrategyStack<T: Scalar> {
    pub strategy: Strategy,
    pub channels: usize,
    pub state_dim: usize,
    blocks: Vec<StackBlock<T>>,
}

enum StackBlock<T: Scalar> {
    Vssm(crate::block::VssmWeights<T>, ScanKind),
    Flatten {
        vssm: crate::block::VssmWeights<T>,
        scans: Box<[ScanParams<T>; 4]>,
    },
}

impl<T: Scalar> StrategyStack<T> {
    pub fn init(
        strategy: Strategy,
        depth: usize,
        channels: usize,
        state_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(depth);
        for i in 0..depth {
            let vssm = crate::block::VssmWeights::init(channels, state_dim, rng)?;
            let block = match strategy {
                Strategy::InterOnly => StackBlock::Vssm(vssm, ScanKind::Inter),
                Strategy::IntraOnly => StackBlock::Vssm(vssm, ScanKind::Intra),
                Strategy::Interleaved => StackBlock::Vssm(
                    vssm,
                    if i % 2 == 0 { ScanKind::Intra } else { ScanKind::Inter },
                ),
                Strategy::Flatten4Way => StackBlock::Flatten {
                    vssm,
                    scans: Box::new([
                        ScanParams::init(channels, state_dim, rng),
                        ScanParams::init(channels, state_dim, rng),
                        ScanParams::init(channels, state_dim, rng),
                        ScanParams::init(channels, state_dim, rng),
                    ]),
                },
            };
            blocks.push(block);
        }
        Ok(StrategyStack {
            strategy,
            channels,
            state_dim,
            blocks,
        })
    }

    /// Forward returning the live-byte high-water mark of the tape.
    pub fn forward(&self, input: &Tensor<T>) -> Result<(Tensor<T>, usize)> {
        let mut tape = Tape::new();
        let mut x = tape.constant(input.clone());
        for block in &self.blocks {
            match block {
                StackBlock::Vssm(w, kind) => {
                    let ids = crate::block::VssmIds::leaf(&mut tape, w);
                    x = crate::block::vssm_forward(&mut tape, x, &ids, *kind)?;
                }
                StackBlock::Flatten { vssm, scans } => {
                    x = flatten_block_forward(&mut tape, x, vssm, scans)?;
                }
            }
        }
        let bytes = tape.live_bytes();
        Ok((tape.value(x).clone(), bytes))
    }

    /// Analytic MAC count at the given spatial extent.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (h, w) = (h as u64, w as u64);
        let c = self.channels as u64;
        let n = self.state_dim as u64;
        self.blocks
            .iter()
            .map(|b| match b {
                StackBlock::Vssm(_, kind) => vssm_macs(*kind, h, w, c, n, true),
                StackBlock::Flatten { .. } => {
                    // identical skeleton, scanning stage replaced by the
                    // 4-way full-grid scan over all C channels
                    let skeleton = vssm_macs(ScanKind::Intra, h, w, c, n, true)
                        - crate::network::scanner_macs(ScanKind::Intra, h, w, c, n);
                    skeleton + flatten4way_macs(h, w, c, n)
                }
            })
            .sum()
    }
}

/// VSSM skeleton with the dual scanner replaced by the 4-way flatten scan
/// on the full C-channel branch.
fn flatten_block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    w: &crate::block::VssmWeights<T>,
    scans: &[ScanParams<T>; 4],
) -> Result<NodeId> {
    let c = tape.value(x).dim(3);
    let gamma = tape.leaf(w.gamma.clone());
    let beta = tape.leaf(w.beta.clone());
    let ln = tape.layer_norm(x, gamma, beta, T::from_f64(crate::block::LN_EPS))?;
    let wp = tape.leaf(w.w_point.w.clone());
    let bp = tape.leaf(w.w_point.b.clone());
    let expanded = tape.conv2d(ln, wp, bp, ConvMode::Pointwise, 1)?;
    let wd = tape.leaf(w.w_depth.w.clone());
    let bd = tape.leaf(w.w_depth.b.clone());
    let mixed = tape.conv2d(expanded, wd, bd, ConvMode::Depthwise3x3, 1)?;
    let parts = tape.split(mixed, 3, &[c, c])?;
    let ids = [
        S6Ids::leaf(tape, &scans[0]),
        S6Ids::leaf(tape, &scans[1]),
        S6Ids::leaf(tape, &scans[2]),
        S6Ids::leaf(tape, &scans[3]),
    ];
    let scanned = flatten4way_scan(tape, parts[1], &ids)?;
    let gate = tape.silu(parts[0])?;
    let mut branch = tape.mul(gate, scanned)?;
    if let Some(out) = &w.w_out {
        let ow = tape.leaf(out.w.clone());
        let ob = tape.leaf(out.b.clone());
        branch = tape.conv2d(branch, ow, ob, ConvMode::Pointwise, 1)?;
    }
    tape.add(branch, x)
}

/// Per-strategy cost and timing report.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub strategy: Strategy,
    pub macs: u64,
    pub median_ms: f64,
    pub iqr_ms: f64,
    pub peak_live_bytes: usize,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub state_dim: usize,
    pub depth: usize,
    pub repeats: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, s: Strategy) -> &BenchRow {
        self.rows.iter().find(|r| r.strategy == s).expect("all strategies present")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("strategy,macs,median_ms,iqr_ms,peak_live_bytes\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.3},{:.3},{}\n",
                r.strategy.name(),
                r.macs,
                r.median_ms,
                r.iqr_ms,
                r.peak_live_bytes
            ));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "scan strategies at {}x{} C={} N={} depth={} ({} repeats)\n",
            self.height, self.width, self.channels, self.state_dim, self.depth, self.repeats
        );
        out.push_str(&format!(
            "{:<14} {:>14} {:>12} {:>10} {:>16}\n",
            "strategy", "MACs", "median ms", "IQR ms", "peak live bytes"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<14} {:>14} {:>12.3} {:>10.3} {:>16}\n",
                r.strategy.name(),
                r.macs,
                r.median_ms,
                r.iqr_ms,
                r.peak_live_bytes
            ));
        }
        out
    }
}

/// Build one stack per strategy at equal (C, N, H, W) and measure analytic
/// MACs plus median/IQR wall time over `repeats` runs (after one warmup).
/// Timing is single-threaded per forward for stable medians.
pub fn bench_compare(
    channels: usize,
    state_dim: usize,
    depth: usize,
    height: usize,
    width: usize,
    repeats: usize,
    seed: u64,
) -> Result<BenchReport> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let input = Tensor::<f32>::from_fn(&[1, height, width, channels], |_| rng.gen_range(-1.0..1.0));
    let mut rows = Vec::new();
    for strategy in Strategy::all() {
        let stack = StrategyStack::<f32>::init(strategy, depth, channels, state_dim, &mut rng)?;
        let (_, peak) = stack.forward(&input)?; // warmup, also captures bytes
        let mut times = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let t0 = Instant::now();
            let _ = stack.forward(&input)?;
            times.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = times[times.len() / 2];
        let q1 = times[times.len() / 4];
        let q3 = times[3 * times.len() / 4];
        rows.push(BenchRow {
            strategy,
            macs: stack.macs(height, width),
            median_ms: median,
            iqr_ms: q3 - q1,
            peak_live_bytes: peak,
        });
    }
    Ok(BenchReport {
        height,
        width,
        channels,
        state_dim,
        depth,
        repeats,
        rows,
    })
}

/// Misalignment/forgetting summary for the standard orders on one grid.
pub fn order_report(height: usize, width: usize) -> String {
    let mut out = format!(
        "{:<18} {:>12} {:>10} {:>10} {:>14}\n",
        "order", "misaligned", "max dist", "mean dist", "disconnected"
    );
    for order in [
        ScanOrder::row_major_flatten(height, width),
        ScanOrder::intra_rows(height, width),
        ScanOrder::intra_cols(height, width),
    ] {
        let m = misalignment_count(&order);
        let f = forgetting_distance(&order);
        out.push_str(&format!(
            "{:<18} {:>12} {:>10} {:>10.2} {:>13.1}%\n",
            order.name,
            m,
            f.max_distance,
            f.mean_distance,
            100.0 * f.disconnected_fraction
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Brute-force misalignment: enumerate all sequence adjacencies.
    fn misalignment_brute(order: &ScanOrder) -> usize {
        let mut count = 0;
        for seq in order.sequences() {
            for i in 1..seq.len() {
                let (r0, c0) = seq[i - 1];
                let (r1, c1) = seq[i];
                let dr = (r0 as i64 - r1 as i64).abs();
                let dc = (c0 as i64 - c1 as i64).abs();
                if dr.max(dc) > 1 {
                    count += 1;
                }
            }
        }
        count
    }

    #[test]
    fn flatten_misalignment_is_rows_minus_one() {
        let order = ScanOrder::row_major_flatten(3, 4);
        assert_eq!(misalignment_count(&order), 2);
        assert_eq!(misalignment_brute(&order), 2);
        let order = ScanOrder::row_major_flatten(64, 64);
        assert_eq!(misalignment_count(&order), 63);
    }

    #[test]
    fn slice_orders_have_zero_misalignment() {
        for (h, w) in [(3usize, 4usize), (7, 5), (16, 16)] {
            assert_eq!(misalignment_count(&ScanOrder::intra_rows(h, w)), 0);
            assert_eq!(misalignment_count(&ScanOrder::intra_cols(h, w)), 0);
        }
    }

    #[test]
    fn misalignment_matches_brute_force_on_random_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        for _ in 0..25 {
            let h = rng.gen_range(2..40);
            let w = rng.gen_range(2..40);
            for order in [
                ScanOrder::row_major_flatten(h, w),
                ScanOrder::intra_rows(h, w),
                ScanOrder::intra_cols(h, w),
            ] {
                assert_eq!(misalignment_count(&order), misalignment_brute(&order));
            }
            // the H-1 closed form needs W >= 3: at W = 2 the row wrap is
            // diagonal-adjacent and does not count as misaligned
            if w >= 3 {
                assert_eq!(
                    misalignment_count(&ScanOrder::row_major_flatten(h, w)),
                    h - 1
                );
            }
        }
    }

    #[test]
    fn coverage_violations_are_contract_errors() {
        assert!(ScanOrder::new("bad", 2, 2, vec![vec![(0, 0), (0, 1)]]).is_err());
        assert!(ScanOrder::new("dup", 2, 2, vec![vec![(0, 0), (0, 1), (0, 0), (1, 0), (1, 1)]]).is_err());
        assert!(ScanOrder::new("oob", 2, 2, vec![vec![(0, 0), (0, 1), (1, 0), (2, 0)]]).is_err());
    }

    #[test]
    fn forgetting_flatten_vertical_distance_is_width() {
        let order = ScanOrder::row_major_flatten(3, 4);
        let stats = forgetting_distance(&order);
        assert_eq!(stats.max_distance, 4);
        assert_eq!(stats.pairs_disconnected, 0);
        // horizontal pairs: 3 rows x 3 = 9 at distance 1;
        // vertical pairs: 2 x 4 = 8 at distance 4
        assert_eq!(stats.pairs_total, 17);
        assert!((stats.mean_distance - (9.0 + 8.0 * 4.0) / 17.0).abs() < 1e-12);
    }

    #[test]
    fn forgetting_intra_rows_disconnects_vertical_pairs() {
        let order = ScanOrder::intra_rows(3, 4);
        let stats = forgetting_distance(&order);
        assert_eq!(stats.max_distance, 1);
        // vertical pairs (8) are cross-sequence, horizontal (9) connected
        assert_eq!(stats.pairs_disconnected, 8);
        assert!((stats.disconnected_fraction - 8.0 / 17.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_single_row_orders_agree() {
        let flatten = ScanOrder::row_major_flatten(1, 9);
        let intra = ScanOrder::intra_rows(1, 9);
        assert_eq!(misalignment_count(&flatten), misalignment_count(&intra));
        assert_eq!(forgetting_distance(&flatten), forgetting_distance(&intra));
    }

    #[test]
    fn flatten4way_zero_input_and_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let params: [ScanParams<f64>; 4] = [
            ScanParams::init(4, 3, &mut rng),
            ScanParams::init(4, 3, &mut rng),
            ScanParams::init(4, 3, &mut rng),
            ScanParams::init(4, 3, &mut rng),
        ];
        let mut tape = Tape::new();
        let ids = [
            S6Ids::leaf(&mut tape, &params[0]),
            S6Ids::leaf(&mut tape, &params[1]),
            S6Ids::leaf(&mut tape, &params[2]),
            S6Ids::leaf(&mut tape, &params[3]),
        ];
        let x = tape.leaf(Tensor::zeros(&[1, 3, 5, 4]));
        let y = flatten4way_scan(&mut tape, x, &ids).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 3, 5, 4]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flatten4way_mixes_all_directions() {
        // a perturbation at the grid center must reach every corner
        let mut rng = ChaCha8Rng::seed_from_u64(92);
        let params: [ScanParams<f64>; 4] = [
            ScanParams::init(2, 2, &mut rng),
            ScanParams::init(2, 2, &mut rng),
            ScanParams::init(2, 2, &mut rng),
            ScanParams::init(2, 2, &mut rng),
        ];
        let run = |x: &Tensor<f64>| {
            let mut tape = Tape::new();
            let ids = [
                S6Ids::leaf(&mut tape, &params[0]),
                S6Ids::leaf(&mut tape, &params[1]),
                S6Ids::leaf(&mut tape, &params[2]),
                S6Ids::leaf(&mut tape, &params[3]),
            ];
            let xi = tape.leaf(x.clone());
            let y = flatten4way_scan(&mut tape, xi, &ids).unwrap();
            tape.value(y).data().to_vec()
        };
        let base = Tensor::from_fn(&[1, 5, 5, 2], |i| ((i * 13 % 7) as f64 - 3.0) / 5.0);
        let y0 = run(&base);
        let mut data = base.data().to_vec();
        data[(2 * 5 + 2) * 2] += 0.5;
        let y1 = run(&Tensor::new(data, &[1, 5, 5, 2]).unwrap());
        for (corner_r, corner_c) in [(0usize, 0usize), (0, 4), (4, 0), (4, 4)] {
            let i = (corner_r * 5 + corner_c) * 2;
            assert!(
                (y0[i] - y1[i]).abs() > 0.0,
                "corner ({corner_r},{corner_c}) unaffected"
            );
        }
    }

    #[test]
    fn scan_macs_ordering_holds() {
        let (c, n, d) = (16usize, 8usize, 2usize);
        let mut rng = ChaCha8Rng::seed_from_u64(93);
        let stacks: Vec<StrategyStack<f32>> = Strategy::all()
            .into_iter()
            .map(|s| StrategyStack::init(s, d, c, n, &mut rng).unwrap())
            .collect();
        let macs: Vec<u64> = stacks.iter().map(|s| s.macs(128, 128)).collect();
        assert!(macs[0] < macs[1], "inter-only !< interleaved: {macs:?}");
        assert!(macs[1] < macs[2], "interleaved !< intra-only: {macs:?}");
        assert!(macs[2] < macs[3], "intra-only !< flatten4way: {macs:?}");
    }

    #[test]
    fn scan_stage_ratio_exceeds_two() {
        // scan-stage MACs only: 4-way flatten vs interleaved average
        for (h, w) in [(2u64, 2u64), (8, 8), (37, 21), (128, 128)] {
            let (c, n) = (16u64, 8u64);
            let flat = flatten4way_macs(h, w, c, n);
            let intra = crate::network::scanner_macs(ScanKind::Intra, h, w, c, n);
            let inter = crate::network::scanner_macs(ScanKind::Inter, h, w, c, n);
            let interleaved = (intra + inter) as f64 / 2.0;
            assert!(
                flat as f64 / interleaved > 2.0,
                "{h}x{w}: ratio {}",
                flat as f64 / interleaved
            );
        }
    }

    #[test]
    fn report_formats_contain_all_strategies() {
        let report = bench_compare(4, 2, 1, 8, 8, 3, 7).unwrap();
        let csv = report.to_csv();
        let table = report.to_table();
        for s in Strategy::all() {
            assert!(csv.contains(s.name()));
            assert!(table.contains(s.name()));
        }
        assert_eq!(report.rows.len(), 4);
        assert!(report.rows.iter().all(|r| r.macs > 0));
    }
}

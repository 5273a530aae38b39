//! The gradient verification suite: every differentiable primitive and every
//! composite block checked against central differences (f64, step 1e-5,
//! relative tolerance 1e-4). Shared by the `gradcheck` CLI command and the
//! acceptance tests.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::block::{
    dgff_forward, gdfn_forward, vssm_forward, ConvIds, FusionIds, GdfnIds, VssmIds,
};
use crate::block::{FusionWeights, GdfnWeights, VssmWeights};
use crate::error::Result;
use crate::gradcheck::{gradcheck, GradCheckReport};
use crate::loss::{edge_loss, perceptual_loss, total_loss, LossWeights, PerceptualExtractor};
use crate::network::{build_model, forward_with_overrides, ModelConfig};
use crate::s6::{s6_forward, S6Ids, ScanParams};
use crate::scanner::{inter_scan, intra_scan, ScanAxis, ScanKind};
use crate::tape::ConvMode;
use crate::tensor::Tensor;

pub const SUITE_TOL: f64 = 1e-4;

pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Run the whole suite; each entry is one gradcheck report.
pub fn gradient_suite() -> Result<Vec<SuiteEntry>> {
    let mut entries: Vec<SuiteEntry> = Vec::new();
    let mut push = |name: &'static str, report: GradCheckReport| {
        entries.push(SuiteEntry { name, report });
    };

    // ── elementwise primitives ───────────────────────────────────────
    let a = rand_tensor(&[2, 3, 4], 1, -1.0, 1.0);
    let b = rand_tensor(&[4], 2, -1.0, 1.0);
    push(
        "add-broadcast",
        gradcheck(&[("a", a.clone()), ("b", b.clone())], SUITE_TOL, |t, ids| {
            let y = t.add(ids[0], ids[1])?;
            t.sum_all(y)
        })?,
    );
    push(
        "sub-broadcast",
        gradcheck(&[("a", a.clone()), ("b", b.clone())], SUITE_TOL, |t, ids| {
            let y = t.sub(ids[0], ids[1])?;
            t.mean_all(y)
        })?,
    );
    push(
        "mul-broadcast",
        gradcheck(&[("a", a.clone()), ("b", b.clone())], SUITE_TOL, |t, ids| {
            let y = t.mul(ids[0], ids[1])?;
            t.mean_all(y)
        })?,
    );
    let denom = rand_tensor(&[2, 3, 4], 3, 0.5, 2.0);
    push(
        "div",
        gradcheck(&[("a", a.clone()), ("b", denom)], SUITE_TOL, |t, ids| {
            let y = t.div(ids[0], ids[1])?;
            t.mean_all(y)
        })?,
    );
    push(
        "exp",
        gradcheck(&[("x", a.clone())], SUITE_TOL, |t, ids| {
            let y = t.exp(ids[0])?;
            t.mean_all(y)
        })?,
    );
    let positive = rand_tensor(&[3, 3], 4, 0.2, 3.0);
    push(
        "log",
        gradcheck(&[("x", positive.clone())], SUITE_TOL, |t, ids| {
            let y = t.log(ids[0])?;
            t.mean_all(y)
        })?,
    );
    push(
        "log-clamped",
        gradcheck(&[("x", positive.clone())], SUITE_TOL, |t, ids| {
            let y = t.log_clamped(ids[0])?;
            t.mean_all(y)
        })?,
    );
    push(
        "sigmoid",
        gradcheck(&[("x", a.clone())], SUITE_TOL, |t, ids| {
            let y = t.sigmoid(ids[0])?;
            t.mean_all(y)
        })?,
    );
    push(
        "silu",
        gradcheck(&[("x", a.clone())], SUITE_TOL, |t, ids| {
            let y = t.silu(ids[0])?;
            t.mean_all(y)
        })?,
    );
    push(
        "softplus",
        gradcheck(&[("x", a.clone())], SUITE_TOL, |t, ids| {
            let y = t.softplus(ids[0])?;
            t.mean_all(y)
        })?,
    );
    push(
        "sqrt",
        gradcheck(&[("x", positive.clone())], SUITE_TOL, |t, ids| {
            let y = t.sqrt(ids[0])?;
            t.mean_all(y)
        })?,
    );
    push(
        "affine",
        gradcheck(&[("x", a.clone())], SUITE_TOL, |t, ids| {
            let y = t.affine(ids[0], -1.7, 0.3)?;
            t.mean_all(y)
        })?,
    );

    // ── linear algebra and convolutions ──────────────────────────────
    let x_seq = rand_tensor(&[2, 5, 3], 5, -1.0, 1.0);
    let w_lin = rand_tensor(&[3, 4], 6, -0.7, 0.7);
    push(
        "linear",
        gradcheck(&[("x", x_seq.clone()), ("w", w_lin)], SUITE_TOL, |t, ids| {
            let y = t.linear(ids[0], ids[1])?;
            t.mean_all(y)
        })?,
    );
    let img = rand_tensor(&[1, 5, 6, 3], 7, -1.0, 1.0);
    let wp = rand_tensor(&[3, 4], 8, -0.6, 0.6);
    let bp = rand_tensor(&[4], 9, -0.2, 0.2);
    push(
        "conv-pointwise",
        gradcheck(
            &[("x", img.clone()), ("w", wp.clone()), ("b", bp.clone())],
            SUITE_TOL,
            |t, ids| {
                let y = t.conv2d(ids[0], ids[1], ids[2], ConvMode::Pointwise, 1)?;
                t.mean_all(y)
            },
        )?,
    );
    let wd = rand_tensor(&[3, 3, 3], 10, -0.5, 0.5);
    let bd = rand_tensor(&[3], 11, -0.2, 0.2);
    push(
        "conv-depthwise3x3",
        gradcheck(
            &[("x", img.clone()), ("w", wd), ("b", bd)],
            SUITE_TOL,
            |t, ids| {
                let y = t.conv2d(ids[0], ids[1], ids[2], ConvMode::Depthwise3x3, 1)?;
                t.mean_all(y)
            },
        )?,
    );
    let wf = rand_tensor(&[3, 3, 3, 2], 12, -0.4, 0.4);
    let bf = rand_tensor(&[2], 13, -0.2, 0.2);
    push(
        "conv-full3x3",
        gradcheck(
            &[("x", img.clone()), ("w", wf.clone()), ("b", bf.clone())],
            SUITE_TOL,
            |t, ids| {
                let y = t.conv2d(ids[0], ids[1], ids[2], ConvMode::Full3x3, 1)?;
                t.mean_all(y)
            },
        )?,
    );
    push(
        "conv-stride2",
        gradcheck(&[("x", img.clone()), ("w", wf), ("b", bf)], SUITE_TOL, |t, ids| {
            let y = t.conv2d(ids[0], ids[1], ids[2], ConvMode::Full3x3, 2)?;
            t.mean_all(y)
        })?,
    );
    let gamma = rand_tensor(&[3], 14, 0.5, 1.5);
    let beta = rand_tensor(&[3], 15, -0.3, 0.3);
    push(
        "layer-norm",
        gradcheck(
            &[("x", img.clone()), ("gamma", gamma), ("beta", beta)],
            SUITE_TOL,
            |t, ids| {
                let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
                t.mean_all(y)
            },
        )?,
    );
    push(
        "softmax",
        gradcheck(&[("x", a.clone())], SUITE_TOL, |t, ids| {
            let p = t.softmax(ids[0])?;
            let sq = t.mul(p, p)?;
            t.mean_all(sq)
        })?,
    );

    // ── shape ops ────────────────────────────────────────────────────
    push(
        "reshape-permute-concat-narrow",
        gradcheck(&[("x", img.clone())], SUITE_TOL, |t, ids| {
            let r = t.reshape(ids[0], &[1, 6, 5, 3])?;
            let p = t.permute(r, &[0, 2, 1, 3])?;
            let n = t.narrow(p, 1, 1, 3)?;
            let c = t.concat(&[n, n], 3)?;
            let sq = t.mul(c, c)?;
            t.mean_all(sq)
        })?,
    );
    push(
        "reduce-mean",
        gradcheck(&[("x", img.clone())], SUITE_TOL, |t, ids| {
            let m = t.reduce_mean(ids[0], 2)?;
            let sq = t.mul(m, m)?;
            t.mean_all(sq)
        })?,
    );
    push(
        "reduce-sum",
        gradcheck(&[("x", img.clone())], SUITE_TOL, |t, ids| {
            let m = t.reduce_sum(ids[0], 1)?;
            let sq = t.mul(m, m)?;
            t.mean_all(sq)
        })?,
    );
    push(
        "reflect-pad-crop",
        gradcheck(&[("x", img.clone())], SUITE_TOL, |t, ids| {
            let p = t.reflect_pad(ids[0], [2, 1, 1, 2])?;
            let sq = t.mul(p, p)?;
            t.mean_all(sq)
        })?,
    );
    push(
        "resize-bilinear",
        gradcheck(&[("x", img.clone())], SUITE_TOL, |t, ids| {
            let r = t.resize_bilinear(ids[0], 9, 4)?;
            let sq = t.mul(r, r)?;
            t.mean_all(sq)
        })?,
    );
    let shuffle_in = rand_tensor(&[1, 3, 2, 8], 16, -1.0, 1.0);
    push(
        "pixel-shuffle",
        gradcheck(&[("x", shuffle_in)], SUITE_TOL, |t, ids| {
            let s = t.pixel_shuffle(ids[0], 2)?;
            let sq = t.mul(s, s)?;
            t.mean_all(sq)
        })?,
    );
    push(
        "flip",
        gradcheck(&[("x", img.clone())], SUITE_TOL, |t, ids| {
            let f = t.flip(ids[0], 2)?;
            let sq = t.mul(f, f)?;
            let g = t.mul(sq, ids[0])?;
            t.mean_all(g)
        })?,
    );

    // ── recurrence ───────────────────────────────────────────────────
    let scan_a = rand_tensor(&[2, 6, 3], 17, 0.1, 0.9);
    let scan_b = rand_tensor(&[2, 6, 3], 18, -1.0, 1.0);
    push(
        "scan",
        gradcheck(&[("a", scan_a), ("b", scan_b)], SUITE_TOL, |t, ids| {
            let h = t.scan(ids[0], ids[1])?;
            let sq = t.mul(h, h)?;
            t.mean_all(sq)
        })?,
    );
    let cx = rand_tensor(&[2, 4], 19, 0.0, 1.0);
    let cy = rand_tensor(&[2, 4], 20, 0.0, 1.0);
    push(
        "charbonnier-op",
        gradcheck(&[("x", cx), ("y", cy)], SUITE_TOL, |t, ids| {
            t.charbonnier(ids[0], ids[1], 1e-3)
        })?,
    );

    // ── S6 and scanners ──────────────────────────────────────────────
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let s6p = ScanParams::<f64>::init(2, 3, &mut rng);
    let s6x = rand_tensor(&[1, 4, 2], 22, -1.0, 1.0);
    push(
        "s6-forward",
        gradcheck(
            &[
                ("x", s6x),
                ("a_log", s6p.a_log.clone()),
                ("b_proj", s6p.b_proj.clone()),
                ("c_proj", s6p.c_proj.clone()),
                ("delta_proj", s6p.delta_proj.clone()),
                ("delta_bias", s6p.delta_bias.clone()),
                ("d_skip", s6p.d_skip.clone()),
            ],
            SUITE_TOL,
            |t, ids| {
                let p = S6Ids {
                    a_log: ids[1],
                    b_proj: ids[2],
                    c_proj: ids[3],
                    delta_proj: ids[4],
                    delta_bias: ids[5],
                    d_skip: ids[6],
                };
                let y = s6_forward(t, ids[0], &p)?;
                t.mean_all(y)
            },
        )?,
    );
    let grid = rand_tensor(&[1, 3, 4, 2], 23, -1.0, 1.0);
    let scan_cases: [(&'static str, ScanKind, ScanAxis); 4] = [
        ("intra-scan-h", ScanKind::Intra, ScanAxis::Horizontal),
        ("intra-scan-v", ScanKind::Intra, ScanAxis::Vertical),
        ("inter-scan-h", ScanKind::Inter, ScanAxis::Horizontal),
        ("inter-scan-v", ScanKind::Inter, ScanAxis::Vertical),
    ];
    for (name, kind, axis) in scan_cases {
        let p = s6p.clone();
        push(
            name,
            gradcheck(
                &[("x", grid.clone()), ("b_proj", p.b_proj.clone()), ("c_proj", p.c_proj.clone())],
                SUITE_TOL,
                |t, ids| {
                    let s6 = S6Ids {
                        b_proj: ids[1],
                        c_proj: ids[2],
                        ..S6Ids::leaf(t, &p)
                    };
                    let y = match kind {
                        ScanKind::Intra => intra_scan(t, ids[0], axis, &s6)?,
                        ScanKind::Inter => inter_scan(t, ids[0], axis, &s6)?,
                    };
                    t.mean_all(y)
                },
            )?,
        );
    }

    // ── blocks ───────────────────────────────────────────────────────
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let vssm = VssmWeights::<f64>::init(4, 3, &mut rng)?;
    let block_in = rand_tensor(&[1, 4, 4, 4], 25, -1.0, 1.0);
    for (name, kind) in [("vssm-intra", ScanKind::Intra), ("vssm-inter", ScanKind::Inter)] {
        let w = vssm.clone();
        push(
            name,
            gradcheck(
                &[
                    ("x", block_in.clone()),
                    ("w_point", w.w_point.w.clone()),
                    ("scan_v_c", w.scan_v.c_proj.clone()),
                    ("w_out", w.w_out.as_ref().unwrap().w.clone()),
                ],
                SUITE_TOL,
                |t, ids| {
                    let b = VssmIds {
                        gamma: t.leaf(w.gamma.clone()),
                        beta: t.leaf(w.beta.clone()),
                        w_point: ConvIds {
                            w: ids[1],
                            b: t.leaf(w.w_point.b.clone()),
                        },
                        w_depth: ConvIds::leaf(t, &w.w_depth),
                        scan_v: S6Ids {
                            c_proj: ids[2],
                            ..S6Ids::leaf(t, &w.scan_v)
                        },
                        scan_h: S6Ids::leaf(t, &w.scan_h),
                        w_out: Some(ConvIds {
                            w: ids[3],
                            b: t.leaf(w.w_out.as_ref().unwrap().b.clone()),
                        }),
                    };
                    let y = vssm_forward(t, ids[0], &b, kind)?;
                    t.mean_all(y)
                },
            )?,
        );
    }
    let gdfn = GdfnWeights::<f64>::init(4, 2.0, &mut rng);
    push(
        "gdfn",
        gradcheck(
            &[("x", block_in.clone()), ("expand", gdfn.expand.w.clone())],
            SUITE_TOL,
            |t, ids| {
                let b = GdfnIds {
                    gamma: t.leaf(gdfn.gamma.clone()),
                    beta: t.leaf(gdfn.beta.clone()),
                    expand: ConvIds {
                        w: ids[1],
                        b: t.leaf(gdfn.expand.b.clone()),
                    },
                    depth: ConvIds::leaf(t, &gdfn.depth),
                    project: ConvIds::leaf(t, &gdfn.project),
                };
                let y = gdfn_forward(t, ids[0], &b)?;
                t.mean_all(y)
            },
        )?,
    );
    let fusion = FusionWeights::<f64>::init(2, 4, 2, &mut rng);
    let f_cur = rand_tensor(&[1, 4, 4, 2], 26, -1.0, 1.0);
    let f_o1 = rand_tensor(&[1, 2, 2, 4], 27, -1.0, 1.0);
    let f_o2 = rand_tensor(&[1, 8, 8, 2], 28, -1.0, 1.0);
    push(
        "dgff",
        gradcheck(
            &[
                ("cur", f_cur),
                ("oth1", f_o1),
                ("oth2", f_o2),
                ("merge", fusion.merge.w.clone()),
            ],
            SUITE_TOL,
            |t, ids| {
                let b = FusionIds {
                    proj_cur: ConvIds::leaf(t, &fusion.proj_cur),
                    proj_oth1: ConvIds::leaf(t, &fusion.proj_oth1),
                    proj_oth2: ConvIds::leaf(t, &fusion.proj_oth2),
                    merge: ConvIds {
                        w: ids[3],
                        b: t.leaf(fusion.merge.b.clone()),
                    },
                };
                let y = dgff_forward(t, ids[0], ids[1], ids[2], &b)?;
                t.mean_all(y)
            },
        )?,
    );

    // ── losses ───────────────────────────────────────────────────────
    let pred = rand_tensor(&[1, 8, 8, 3], 29, 0.0, 1.0);
    let target = rand_tensor(&[1, 8, 8, 3], 30, 0.0, 1.0);
    let extractor = PerceptualExtractor::<f64>::new(31);
    push(
        "charbonnier-loss",
        gradcheck(
            &[("x", pred.clone()), ("y", target.clone())],
            SUITE_TOL,
            |t, ids| t.charbonnier(ids[0], ids[1], 1e-3),
        )?,
    );
    push(
        "edge-loss",
        gradcheck(
            &[("x", pred.clone()), ("y", target.clone())],
            SUITE_TOL,
            |t, ids| edge_loss(t, ids[0], ids[1], 1e-3),
        )?,
    );
    push(
        "perceptual-loss",
        gradcheck(&[("x", pred.clone())], SUITE_TOL, |t, ids| {
            let y = t.constant(target.clone());
            perceptual_loss(t, ids[0], y, &extractor)
        })?,
    );
    let lw = LossWeights::default();
    push(
        "total-loss",
        gradcheck(
            &[("x", pred.clone()), ("y", target.clone())],
            SUITE_TOL,
            |t, ids| Ok(total_loss(t, ids[0], ids[1], &lw, &extractor)?.total),
        )?,
    );

    // ── full model ───────────────────────────────────────────────────
    let cfg = ModelConfig {
        base_channels: 4,
        blocks_per_level: [1, 1, 1],
        state_dim: 2,
        gdfn_ratio: 1.0,
        seed: 32,
        ..ModelConfig::default()
    };
    let weights = build_model::<f64>(&cfg)?;
    let image = rand_tensor(&[1, 8, 8, 3], 33, 0.0, 1.0);
    let picks = [
        "embed.w",
        "enc1/b0/expand.w",
        "dec0/b0/vssm/w_point.w",
        "dec2/b0/vssm/scan_h/a_log",
        "dec1/b0/vssm/scan_v/delta_bias",
        "fusion1/merge.w",
        "output.w",
    ];
    let mut inputs: Vec<(&str, Tensor<f64>)> = vec![("input", image)];
    for p in picks {
        inputs.push((p, weights.get(p)?.clone()));
    }
    push(
        "model-forward-mean",
        gradcheck(&inputs, SUITE_TOL, |t, ids| {
            let overrides: BTreeMap<String, crate::tape::NodeId> = picks
                .iter()
                .enumerate()
                .map(|(i, p)| (p.to_string(), ids[i + 1]))
                .collect();
            let (out, _) = forward_with_overrides(t, &weights, &cfg, ids[0], &overrides)?;
            t.mean_all(out)
        })?,
    );

    Ok(entries)
}

/// One line per entry, `PASS`/`FAIL` first.
pub fn format_suite(entries: &[SuiteEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!(
            "{} {:<28} max_rel_err {:.3e} ({} inputs)\n",
            if e.passed() { "PASS" } else { "FAIL" },
            e.name,
            e.report.max_rel_err(),
            e.report.inputs.len()
        ));
    }
    out
}

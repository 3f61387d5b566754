//! Built-in invariant suites behind the `check` command.
//!
//! Every module-level invariant is exercised at least once on small seeded
//! fixtures. Floating-point tolerances are multiplied by `tol_scale` (a test
//! hook: a corrupted scale such as 0 must turn the run red); bit-exactness
//! checks ignore the scale.

use crate::analysis::{
    attention_budget, attention_fraction, compute_alphas, detect_sinks, inter_head_similarity,
    profile_branches,
};
use crate::branches::{branch_op_counts, run_branches, Branch, SparseConfig};
use crate::dense::{concat_heads, dense_causal_attention, dense_row_probs, gqa_group_of_head,
    HeadLayout, QkvBatch};
use crate::error::Result;
use crate::fixtures::seeded_batch;
use crate::gating::{
    gate_backward, gate_forward, gate_forward_f64, hybrid_layer_attention, nsa_attention,
    GateParams, GateValues, Modality, ModalitySpans, Span,
};
use crate::rng::Rng64;
use crate::tensor::{matmul, seeded_uniform, stable_softmax, Tensor};

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

struct Suite {
    failures: Vec<String>,
    tol_scale: f64,
}

impl Suite {
    fn new(tol_scale: f64) -> Self {
        Self {
            failures: Vec::new(),
            tol_scale,
        }
    }

    fn expect(&mut self, ok: bool, what: &str) {
        if !ok {
            self.failures.push(what.to_string());
        }
    }

    fn expect_close(&mut self, got: f64, want: f64, tol: f64, what: &str) {
        let tol = tol * self.tol_scale;
        if !((got - want).abs() <= tol) {
            self.failures
                .push(format!("{what}: |{got} - {want}| > {tol}"));
        }
    }

    fn finish(self, name: &'static str) -> SuiteResult {
        SuiteResult {
            name,
            passed: self.failures.is_empty(),
            detail: self.failures.join("; "),
        }
    }
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .fold(0.0, f64::max)
}

fn bits_equal(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn softmax_suite(tol: f64) -> SuiteResult {
    let mut s = Suite::new(tol);
    let p = stable_softmax(&[0.0, 0.0, 0.0, 0.0], None).unwrap();
    s.expect(p == vec![0.25; 4], "uniform logits give 1/4 each");

    let mut rng = Rng64::new(1);
    for _ in 0..10 {
        let logits: Vec<f32> = (0..8).map(|_| rng.next_unit() * 40.0).collect();
        let p = stable_softmax(&logits, None).unwrap();
        let sum: f64 = p.iter().map(|&x| x as f64).sum();
        s.expect_close(sum, 1.0, 1e-6, "softmax sums to one");
        s.expect(p.iter().all(|&x| x >= 0.0), "softmax is nonnegative");
        let shifted: Vec<f32> = logits.iter().map(|x| x + 3.0).collect();
        let q = stable_softmax(&shifted, None).unwrap();
        let dev = p
            .iter()
            .zip(q.iter())
            .map(|(a, b)| (a - b).abs() as f64)
            .fold(0.0, f64::max);
        s.expect_close(dev, 0.0, 1e-6, "softmax shift invariance");
    }
    s.expect(
        stable_softmax(&[1.0], Some(&[false])).is_err(),
        "all-masked input errors",
    );
    s.finish("softmax-properties")
}

fn matmul_suite(tol: f64) -> SuiteResult {
    let mut s = Suite::new(tol);
    let mut rng = Rng64::new(2);
    let a = seeded_uniform(&mut rng, &[9, 7]).unwrap();
    let b = seeded_uniform(&mut rng, &[7, 5]).unwrap();
    let c1 = matmul(&a, &b).unwrap();
    let c2 = matmul(&a, &b).unwrap();
    s.expect(bits_equal(c1.data(), c2.data()), "matmul is bit-reproducible");
    s.finish("matmul-reproducibility")
}

fn rng_suite(tol: f64) -> SuiteResult {
    let mut s = Suite::new(tol);
    let mut a = Rng64::new(42);
    let mut b = Rng64::new(42);
    let mut xor_bits = 0u32;
    for _ in 0..1000 {
        let x = a.next_unit();
        let y = b.next_unit();
        s.expect(x.to_bits() == y.to_bits(), "seed-42 streams are bit-identical");
        s.expect((-0.05..0.05).contains(&x), "draw stays in range");
        xor_bits ^= x.to_bits();
    }
    s.expect(xor_bits == 0x8729_3DA1, "seed-42 1000-draw checksum");
    let mut zero = Rng64::new(0);
    s.expect(
        zero.next_unit().to_bits() == 0x3D1D_010D,
        "seed-0 golden first draw",
    );
    s.finish("rng-determinism")
}

fn fixture_format_suite(tol: f64) -> SuiteResult {
    let mut s = Suite::new(tol);
    let mut rng = Rng64::new(3);
    let t = seeded_uniform(&mut rng, &[3, 5]).unwrap();
    let bytes = crate::io::encode_tensor(&t);
    s.expect(
        bytes[..5] == [0x56, 0x4E, 0x53, 0x41, 0x01],
        "header magic and version",
    );
    let back = crate::io::decode_tensor(&bytes).unwrap();
    s.expect(bits_equal(t.data(), back.data()), "roundtrip is bit-exact");
    s.finish("fixture-format")
}

fn group_map_suite(tol: f64) -> SuiteResult {
    let mut s = Suite::new(tol);
    let layout = HeadLayout::new(28, 4, 8).unwrap();
    for head in 1..=28 {
        let got = gqa_group_of_head(head, &layout).unwrap();
        s.expect(got == (head + 6) / 7, "28x4 map follows ceil(s*g/h)");
    }
    let layout = HeadLayout::new(5, 5, 4).unwrap();
    for head in 1..=5 {
        s.expect(
            gqa_group_of_head(head, &layout).unwrap() == head,
            "g = h map is the identity",
        );
    }
    s.finish("gqa-group-map")
}

fn dense_suite(tol: f64) -> SuiteResult {
    let mut s = Suite::new(tol);
    let layout = HeadLayout::new(4, 2, 4).unwrap();
    let mut batch = seeded_batch(11, &layout, 10).unwrap();
    let before = dense_causal_attention(&batch, &layout).unwrap();

    for head in 0..4 {
        for t in 1..=10 {
            let sum: f64 = dense_row_probs(&batch, &layout, head, t).unwrap().iter().sum();
            s.expect_close(sum, 1.0, 1e-6, "attention row sums to one");
        }
    }

    let p = 7;
    for group in 0..2 {
        batch.k_row_mut(group, p)[0] += 2.0;
        batch.v_row_mut(group, p)[1] -= 1.0;
    }
    let after = dense_causal_attention(&batch, &layout).unwrap();
    for head in 0..4 {
        for t in 0..p - 1 {
            s.expect(
                bits_equal(before.row3(head, t), after.row3(head, t)),
                "dense causality under future perturbation",
            );
        }
    }
    s.finish("dense-causality")
}

fn mha_degeneracy_suite(tol: f64) -> SuiteResult {
    let mut s = Suite::new(tol);
    let layout = HeadLayout::new(3, 3, 4).unwrap();
    let batch = seeded_batch(13, &layout, 6).unwrap();
    let full = dense_causal_attention(&batch, &layout).unwrap();
    let single = HeadLayout::new(1, 1, 4).unwrap();
    for head in 0..3 {
        let q = batch.q().outer_slice(head);
        let k = batch.k().outer_slice(head);
        let v = batch.v().outer_slice(head);
        let one = QkvBatch::new(
            Tensor::new(vec![1, 6, 4], q.data().to_vec()).unwrap(),
            Tensor::new(vec![1, 6, 4], k.data().to_vec()).unwrap(),
            Tensor::new(vec![1, 6, 4], v.data().to_vec()).unwrap(),
            &single,
        )
        .unwrap();
        let out = dense_causal_attention(&one, &single).unwrap();
        s.expect(
            bits_equal(full.outer_slice(head).data(), out.data()),
            "g = h equals per-head MHA bit-for-bit",
        );
    }

    // g = 1: heads share one KV group, so equal queries give equal outputs.
    let shared = HeadLayout::new(2, 1, 4).unwrap();
    let batch = seeded_batch(15, &shared, 6).unwrap();
    let mut q = batch.q().clone();
    for t in 0..6 {
        let row = q.row3(0, t).to_vec();
        q.set_row3(1, t, &row);
    }
    let equal_q = QkvBatch::new(q, batch.k().clone(), batch.v().clone(), &shared).unwrap();
    let out = dense_causal_attention(&equal_q, &shared).unwrap();
    for t in 0..6 {
        s.expect(
            bits_equal(out.row3(0, t), out.row3(1, t)),
            "g = 1 outputs differ only through Q",
        );
    }
    s.finish("gqa-mha-degeneracy")
}

fn full_budget_suite(tol: f64) -> SuiteResult {
    let mut s = Suite::new(tol);
    let layout = HeadLayout::new(2, 1, 4).unwrap();
    let l = 32;
    let cfg = SparseConfig::new(4, l / 4, l).unwrap();
    let batch = seeded_batch(17, &layout, l).unwrap();
    let dense = dense_causal_attention(&batch, &layout).unwrap();
    let runs = run_branches(&batch, &layout, &cfg).unwrap();
    for head in 0..2 {
        for t in 1..=l {
            let dev_win = max_abs_diff(runs.window.row3(head, t - 1), dense.row3(head, t - 1));
            s.expect_close(dev_win, 0.0, 1e-5, "full window equals dense");
            if t % 4 == 0 {
                let dev_slc =
                    max_abs_diff(runs.selection.row3(head, t - 1), dense.row3(head, t - 1));
                s.expect_close(dev_slc, 0.0, 1e-5, "full selection equals dense at boundaries");
            }
        }
    }
    s.finish("full-budget-oracle-equivalence")
}

fn branch_causality_suite(tol: f64) -> SuiteResult {
    let mut s = Suite::new(tol);
    let layout = HeadLayout::new(2, 1, 4).unwrap();
    let cfg = SparseConfig::new(4, 1, 5).unwrap();
    let mut batch = seeded_batch(19, &layout, 16).unwrap();
    let before = run_branches(&batch, &layout, &cfg).unwrap();
    let p = 12;
    batch.k_row_mut(0, p)[3] -= 7.0;
    batch.v_row_mut(0, p)[0] += 4.0;
    let after = run_branches(&batch, &layout, &cfg).unwrap();
    for head in 0..2 {
        for t in 0..p - 1 {
            s.expect(
                bits_equal(before.compression.row3(head, t), after.compression.row3(head, t)),
                "compression causality",
            );
            s.expect(
                bits_equal(before.selection.row3(head, t), after.selection.row3(head, t)),
                "selection causality",
            );
            s.expect(
                bits_equal(before.window.row3(head, t), after.window.row3(head, t)),
                "window causality",
            );
        }
    }
    s.finish("branch-causality")
}

fn op_count_suite(tol: f64) -> SuiteResult {
    let mut s = Suite::new(tol);
    let layout = HeadLayout::new(2, 1, 4).unwrap();
    let configs = [
        SparseConfig::new(4, 2, 8).unwrap(),
        SparseConfig::new(64, 32, 256).unwrap(),
    ];
    for cfg in &configs {
        for l in [8usize, 64, 257, 1024] {
            let batch = seeded_batch(23, &layout, l).unwrap();
            let run = run_branches(&batch, &layout, cfg).unwrap();
            let analytic = branch_op_counts(l, cfg);
            s.expect(
                run.counts == analytic,
                &format!("measured counts equal analytic at L={l} s={}", cfg.block_size),
            );
        }
    }
    s.finish("operation-count-grid")
}

fn selection_validity_suite(tol: f64) -> SuiteResult {
    let mut s = Suite::new(tol);
    let layout = HeadLayout::new(2, 1, 4).unwrap();
    let cfg = SparseConfig::new(4, 2, 4).unwrap();
    let batch = seeded_batch(29, &layout, 20).unwrap();
    let compressed = crate::branches::compress_blocks(batch.k(), batch.v(), 4).unwrap();
    for t in 1..=20 {
        let probs: Vec<Vec<f64>> = (0..2)
            .map(|head| {
                crate::branches::compression_attention(batch.q_row(head, t), &compressed, 0, t).1
            })
            .collect();
        let scores = crate::branches::importance_scores(&probs, &layout).unwrap();
        let entry = crate::branches::select_top_blocks(&scores[0], cfg.select_blocks);
        let visible = compressed.visible_blocks(t);
        s.expect(
            entry.blocks.len() == cfg.select_blocks.min(visible),
            "selection size is min(n, visible)",
        );
        s.expect(
            entry.blocks.iter().all(|&b| b * 4 <= t),
            "selected blocks are causally visible",
        );
    }
    s.finish("selection-validity")
}

fn compression_exactness_suite(tol: f64) -> SuiteResult {
    let mut s = Suite::new(tol);
    let mut data = Vec::new();
    for block in 0..3 {
        for _ in 0..4 {
            data.extend_from_slice(&[block as f32 + 0.5, -(block as f32 + 1.0), 1.25]);
        }
    }
    let k = Tensor::new(vec![1, 12, 3], data.clone()).unwrap();
    let v = Tensor::new(vec![1, 12, 3], data).unwrap();
    let c = crate::branches::compress_blocks(&k, &v, 4).unwrap();
    for block in 0..3 {
        let want = [block as f32 + 0.5, -(block as f32 + 1.0), 1.25];
        s.expect(
            bits_equal(c.key_row(0, block + 1), &want),
            "constant blocks compress bit-exactly",
        );
    }
    s.finish("compression-exactness")
}

fn gate_suite(tol: f64) -> SuiteResult {
    let mut s = Suite::new(tol);
    let mut rng = Rng64::new(31);
    let params = GateParams::seeded(&mut rng, 6, 6, 2).unwrap();
    for _ in 0..20 {
        let x: Vec<f32> = (0..6).map(|_| rng.next_unit()).collect();
        for g in gate_forward(&x, &params).unwrap() {
            s.expect(g > 0.0 && g < 1.0, "gate outputs stay inside (0, 1)");
        }
    }

    let layout = HeadLayout::new(2, 1, 4).unwrap();
    let cfg = SparseConfig::new(4, 1, 4).unwrap();
    let batch = seeded_batch(37, &layout, 12).unwrap();
    let gates = GateValues::seeded(5, 12, 2).unwrap();
    let base = nsa_attention(&batch, &layout, &cfg, &gates).unwrap();
    let lambda = 0.5f32;
    let scaled =
        GateValues::new(12, 2, gates.data().iter().map(|g| g * lambda).collect()).unwrap();
    let out = nsa_attention(&batch, &layout, &cfg, &scaled).unwrap();
    let dev = out
        .data()
        .iter()
        .zip(base.data().iter())
        .map(|(a, b)| (*a as f64 - lambda as f64 * *b as f64).abs())
        .fold(0.0, f64::max);
    s.expect_close(dev, 0.0, 1e-6, "fusion is linear in the gates");
    s.finish("gate-range-and-linearity")
}

/// Seeded gate params with hidden biases pushed away from 0, so central
/// differences never straddle the relu kink.
pub fn gradcheck_params(rng: &mut Rng64, d_in: usize, d_h: usize, heads: usize) -> GateParams {
    let p = GateParams::seeded(rng, d_in, d_h, heads).unwrap();
    let mut b1 = p.b1().to_vec();
    for (j, b) in b1.iter_mut().enumerate() {
        *b += if j % 2 == 0 { 0.35 } else { -0.35 };
    }
    GateParams::new(p.w1().clone(), b1, p.w2().clone(), p.b2().to_vec()).unwrap()
}

fn gradient_suite(tol: f64) -> SuiteResult {
    let mut s = Suite::new(tol);
    let mut failures = 0usize;
    let mut checked = 0usize;
    for seed in 0..100u64 {
        let mut rng = Rng64::new(4000 + seed);
        let params = gradcheck_params(&mut rng, 4, 4, 2);
        let x: Vec<f32> = (0..4).map(|_| rng.next_unit()).collect();
        let upstream: Vec<f64> = (0..6).map(|_| rng.next_unit() as f64 * 20.0).collect();
        let grads = gate_backward(&x, &params, &upstream).unwrap();

        let objective = |p: &GateParams, xs: &[f32]| -> f64 {
            gate_forward_f64(xs, p)
                .unwrap()
                .iter()
                .zip(upstream.iter())
                .map(|(o, u)| o * u)
                .sum()
        };
        let step = 1e-3f32;
        let mut check = |analytic: f64, plus: f64, minus: f64, realized: f64| {
            let fd = (plus - minus) / realized;
            let tolerance = (1e-6f64).max(1e-3 * analytic.abs().max(fd.abs())) * tol;
            checked += 1;
            if (fd - analytic).abs() > tolerance {
                failures += 1;
            }
        };
        // Differencing every b2 entry plus a few x entries keeps the suite
        // fast while still touching both layers each instance.
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += step;
            xm[i] -= step;
            check(
                grads.x[i],
                objective(&params, &xp),
                objective(&params, &xm),
                xp[i] as f64 - xm[i] as f64,
            );
        }
        for i in 0..6 {
            let mut pp = params.clone();
            let mut pm = params.clone();
            let mut b2p = pp.b2().to_vec();
            let mut b2m = pm.b2().to_vec();
            b2p[i] += step;
            b2m[i] -= step;
            let realized = b2p[i] as f64 - b2m[i] as f64;
            pp = GateParams::new(pp.w1().clone(), pp.b1().to_vec(), pp.w2().clone(), b2p).unwrap();
            pm = GateParams::new(pm.w1().clone(), pm.b1().to_vec(), pm.w2().clone(), b2m).unwrap();
            check(grads.b2[i], objective(&pp, &x), objective(&pm, &x), realized);
        }
    }
    s.expect(
        failures == 0,
        &format!("{failures}/{checked} finite-difference entries failed"),
    );
    s.finish("gradient-checks")
}

fn hybrid_suite(tol: f64) -> SuiteResult {
    let mut s = Suite::new(tol);
    let layout = HeadLayout::new(2, 1, 3).unwrap();
    let cfg = SparseConfig::new(2, 1, 2).unwrap();
    let batch = seeded_batch(41, &layout, 10).unwrap();
    let gates = GateValues::seeded(6, 10, 2).unwrap();
    let spans = ModalitySpans::new(
        vec![
            Span {
                start: 1,
                end: 6,
                modality: Modality::Vision,
            },
            Span {
                start: 7,
                end: 10,
                modality: Modality::Text,
            },
        ],
        10,
    )
    .unwrap();
    let hybrid = hybrid_layer_attention(&batch, &layout, &cfg, &gates, &spans).unwrap();

    let vision: Vec<usize> = (1..=6).collect();
    let sub = batch.gather(&vision).unwrap();
    let nsa = nsa_attention(&sub, &layout, &cfg, &gates.gather(&vision).unwrap()).unwrap();
    let dense = dense_causal_attention(&batch, &layout).unwrap();
    let mut expected: Vec<Vec<u32>> = Vec::new();
    for i in 0..6 {
        let mut row = Vec::new();
        for head in 0..2 {
            row.extend(nsa.row3(head, i).iter().map(|v| v.to_bits()));
        }
        expected.push(row);
    }
    for t in 7..=10 {
        let mut row = Vec::new();
        for head in 0..2 {
            row.extend(dense.row3(head, t - 1).iter().map(|v| v.to_bits()));
        }
        expected.push(row);
    }
    let mut got: Vec<Vec<u32>> = (0..10)
        .map(|r| hybrid.row2(r).iter().map(|v| v.to_bits()).collect())
        .collect();
    expected.sort();
    got.sort();
    s.expect(expected == got, "hybrid re-interleaving is a permutation");

    let all_text = ModalitySpans::uniform(10, Modality::Text).unwrap();
    let out = hybrid_layer_attention(&batch, &layout, &cfg, &gates, &all_text).unwrap();
    let heads: Vec<Tensor> = (0..2).map(|h| dense.outer_slice(h)).collect();
    let expected = concat_heads(&heads).unwrap();
    s.expect(
        bits_equal(out.data(), expected.data()),
        "all-text hybrid equals dense GQA bit-for-bit",
    );

    let mut perturbed = batch.clone();
    let p = 8;
    perturbed.k_row_mut(0, p)[0] += 6.0;
    perturbed.v_row_mut(0, p)[1] -= 2.5;
    let after = hybrid_layer_attention(&perturbed, &layout, &cfg, &gates, &spans).unwrap();
    for t in 0..p - 1 {
        s.expect(
            bits_equal(hybrid.row2(t), after.row2(t)),
            "hybrid causality end-to-end",
        );
    }
    s.finish("hybrid-properties")
}

fn budget_suite(tol: f64) -> SuiteResult {
    let mut s = Suite::new(tol);
    for (b, ss, w, l) in [(32u64, 64u64, 256u64, 128_000u64), (0, 64, 256, 1000), (7, 3, 11, 999)] {
        let gamma = attention_fraction(b, ss, w, l).unwrap();
        let k = attention_budget(b, ss, w) as f64;
        s.expect_close(
            gamma * (l - 1) as f64 / 2.0,
            k,
            1e-12 * k.max(1.0),
            "gamma * (L-1)/2 equals the budget",
        );
    }
    let gamma = attention_fraction(32, 64, 256, 128_000).unwrap();
    s.expect_close(gamma, 0.036, 0.0005, "headline 3.6% fraction");
    s.finish("budget-identity")
}

fn sink_suite(tol: f64) -> SuiteResult {
    let mut s = Suite::new(tol);
    let mut vnorms = vec![10.0f64; 9];
    vnorms.push(0.1);
    let alphas = vec![0.2f64; 10];
    let report = detect_sinks(&alphas, &vnorms).unwrap();
    s.expect(report.sink_count() == 1, "planted sink is found");
    s.expect(report.tokens[9].is_sink, "planted sink is the tiny-norm token");
    let again = detect_sinks(&alphas, &vnorms).unwrap();
    s.expect(report == again, "sink detection is idempotent");

    let equal = detect_sinks(&[0.5; 6], &[2.0; 6]).unwrap();
    s.expect(equal.sink_count() == 0, "equal norms yield no sinks");

    let mut rng = Rng64::new(47);
    let alphas: Vec<f64> = (0..20).map(|_| (rng.next_unit() as f64 + 0.05) * 4.0).collect();
    let vnorms: Vec<f64> = (0..20).map(|_| (rng.next_unit() as f64 + 0.06) * 50.0).collect();
    let base = detect_sinks(&alphas, &vnorms).unwrap();
    for t in &base.tokens {
        s.expect(
            t.is_sink == (t.alpha > 0.1 && t.vnorm < base.norm_threshold),
            "flags match the conjunction exactly",
        );
    }
    let perm: Vec<usize> = (0..20).rev().collect();
    let pa: Vec<f64> = perm.iter().map(|&i| alphas[i]).collect();
    let pv: Vec<f64> = perm.iter().map(|&i| vnorms[i]).collect();
    let permuted = detect_sinks(&pa, &pv).unwrap();
    for (slot, &src) in perm.iter().enumerate() {
        s.expect(
            permuted.tokens[slot].is_sink == base.tokens[src].is_sink,
            "permutation equivariance",
        );
    }
    s.finish("sink-detector")
}

fn alpha_suite(tol: f64) -> SuiteResult {
    let mut s = Suite::new(tol);
    let rows = vec![
        vec![1.0],
        vec![0.5, 0.5],
        vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
    ];
    let a = compute_alphas(&rows).unwrap();
    s.expect_close(a[0], 11.0 / 18.0, 1e-4, "uniform alpha for key 1");
    s.expect_close(a[1], 5.0 / 12.0, 1e-4, "uniform alpha for key 2");
    s.expect_close(a[2], 1.0 / 3.0, 1e-4, "uniform alpha for key 3");
    s.expect(a.iter().all(|&x| (0.0..=1.0).contains(&x)), "alphas in [0, 1]");
    s.finish("alpha-range")
}

fn similarity_suite(tol: f64) -> SuiteResult {
    let mut s = Suite::new(tol);
    let mut data = Vec::new();
    for t in 1..=5 {
        let v = 0.1 * t as f32;
        for _ in 0..3 {
            data.extend_from_slice(&[v, 0.5, 0.5]);
        }
    }
    let gates = GateValues::new(5, 3, data).unwrap();
    let corr = inter_head_similarity(&gates, Branch::Compression).unwrap();
    s.expect_close(corr, 1.0, 1e-12, "identical heads correlate at 1");
    s.expect(
        inter_head_similarity(&gates, Branch::Selection).unwrap() == 0.0,
        "zero-variance heads contribute 0",
    );

    let seeded = GateValues::seeded(51, 8, 3).unwrap();
    let base = inter_head_similarity(&seeded, Branch::Window).unwrap();
    let mut swapped = seeded.data().to_vec();
    for t in 0..8 {
        for b in 0..3 {
            swapped.swap((t * 3) * 3 + b, (t * 3 + 2) * 3 + b);
        }
    }
    let swapped = GateValues::new(8, 3, swapped).unwrap();
    s.expect_close(
        inter_head_similarity(&swapped, Branch::Window).unwrap(),
        base,
        1e-12,
        "similarity is symmetric in head order",
    );
    let shifted: Vec<f32> = seeded
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| if i % 3 == 2 { v + 0.25 } else { v })
        .collect();
    let shifted = GateValues::new(8, 3, shifted).unwrap();
    s.expect_close(
        inter_head_similarity(&shifted, Branch::Window).unwrap(),
        base,
        1e-5,
        "similarity is shift invariant",
    );
    s.finish("inter-head-similarity")
}

fn profile_suite(tol: f64) -> SuiteResult {
    let mut s = Suite::new(tol);
    let layout = HeadLayout::new(1, 1, 4).unwrap();
    let cfg = SparseConfig::new(64, 32, 256).unwrap();
    let lens = [512usize, 1024, 2048];
    match profile_branches(&lens, &cfg, &layout) {
        Err(e) => s.expect(false, &format!("profiler failed: {e}")),
        Ok(report) => {
            s.expect(
                report.rows.iter().all(|r| r.analytic == r.measured),
                "profiled counts equal analytic counts",
            );
        }
    }
    // Asymptotic dominance of the selection scoring term, on analytic counts
    // at lengths where the attended-token terms have saturated (L >> n*s).
    let a = branch_op_counts(131_072, &cfg);
    let b = branch_op_counts(262_144, &cfg);
    let ratio = |x: u64, y: u64| y as f64 / x as f64;
    let slc = ratio(a.slc_scores, b.slc_scores);
    s.expect(
        slc > ratio(a.slc_attended, b.slc_attended) && slc > ratio(a.win_attended, b.win_attended),
        "selection scoring grows fastest at scale",
    );
    s.finish("branch-profile")
}

/// Run every suite; `tol_scale` multiplies the floating-point tolerances.
pub fn run_all(tol_scale: f64) -> Vec<SuiteResult> {
    vec![
        softmax_suite(tol_scale),
        matmul_suite(tol_scale),
        rng_suite(tol_scale),
        fixture_format_suite(tol_scale),
        group_map_suite(tol_scale),
        dense_suite(tol_scale),
        mha_degeneracy_suite(tol_scale),
        full_budget_suite(tol_scale),
        branch_causality_suite(tol_scale),
        op_count_suite(tol_scale),
        selection_validity_suite(tol_scale),
        compression_exactness_suite(tol_scale),
        gate_suite(tol_scale),
        gradient_suite(tol_scale),
        hybrid_suite(tol_scale),
        budget_suite(tol_scale),
        sink_suite(tol_scale),
        alpha_suite(tol_scale),
        similarity_suite(tol_scale),
        profile_suite(tol_scale),
    ]
}

/// Convenience for tests: all suites green at the default tolerance scale.
pub fn all_pass() -> Result<()> {
    let results = run_all(1.0);
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{}: {}", r.name, r.detail))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(crate::error::Error::Internal(failed.join(" | ")))
    }
}

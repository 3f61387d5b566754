//! Command implementations behind the `vnsa` subcommands.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};

use vnsa_core::analysis::{
    attention_budget, attention_fraction, cost_report_csv, detect_sinks, gate_stats_csv,
    info_context_length, profile_branches, sink_report_csv, AlphaAccumulator, GateStats,
    SinkReport,
};
use vnsa_core::branches::{
    branch_op_counts, compress_blocks, compression_attention, importance_scores,
    select_top_blocks, selection_attention, selection_positions, sliding_window_attention, Branch,
    SparseConfig,
};
use vnsa_core::dense::{
    concat_heads, dense_causal_attention, dense_row_probs, HeadLayout, QkvBatch,
};
use vnsa_core::fixtures::{generate, FixtureSpec};
use vnsa_core::gating::{
    hybrid_layer_attention, GateParams, GateValues, Modality, ModalitySpans, Span,
};
use vnsa_core::io::{read_tensor, write_atomic, write_tensor};
use vnsa_core::selfcheck;
use vnsa_core::tensor::Tensor;

use crate::config::RunConfig;

/// Format with the given number of significant digits (fixed notation).
pub fn format_significant(v: f64, digits: u32) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v:.prec$}", prec = digits as usize - 1);
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (digits as i32 - 1 - magnitude).max(0) as usize;
    format!("{v:.decimals$}")
}

fn spans_to_tensor(spans: &ModalitySpans) -> Result<Tensor> {
    let mut data = Vec::with_capacity(spans.spans().len() * 3);
    for s in spans.spans() {
        data.push(s.start as f32);
        data.push(s.end as f32);
        data.push(match s.modality {
            Modality::Vision => 1.0,
            Modality::Text => 0.0,
        });
    }
    Ok(Tensor::new(vec![spans.spans().len(), 3], data)?)
}

fn spans_from_tensor(t: &Tensor, seq_len: usize) -> Result<ModalitySpans> {
    if t.dims().len() != 2 || t.dims()[1] != 3 {
        bail!("span fixture must be [n x 3], got {:?}", t.dims());
    }
    let mut spans = Vec::with_capacity(t.dims()[0]);
    for r in 0..t.dims()[0] {
        let row = t.row2(r);
        spans.push(Span {
            start: row[0] as usize,
            end: row[1] as usize,
            modality: if row[2] == 1.0 {
                Modality::Vision
            } else {
                Modality::Text
            },
        });
    }
    Ok(ModalitySpans::new(spans, seq_len)?)
}

/// Generate Q/K/V, gate-parameter, and span fixtures into the fixtures dir.
pub fn cmd_gen(cfg: &RunConfig) -> Result<()> {
    let layout = cfg.layout()?;
    let dir = &cfg.fixtures_dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;

    let fx = generate(&FixtureSpec {
        seed: cfg.seed,
        seq_len: cfg.seq_len,
        hidden_width: cfg.hidden_width(),
        layout,
    })?;
    write_tensor(dir.join("q.vnsa"), fx.batch.q())?;
    write_tensor(dir.join("k.vnsa"), fx.batch.k())?;
    write_tensor(dir.join("v.vnsa"), fx.batch.v())?;
    fx.gate_params.save_dir(dir)?;
    write_tensor(dir.join("spans.vnsa"), &spans_to_tensor(&cfg.modality_spans()?)?)?;
    println!(
        "wrote 8 fixture files to {} (seed {}, L {})",
        dir.display(),
        cfg.seed,
        cfg.seq_len
    );
    Ok(())
}

fn load_batch(cfg: &RunConfig, layout: &HeadLayout) -> Result<QkvBatch> {
    let dir = &cfg.fixtures_dir;
    let q = read_tensor(dir.join("q.vnsa"))?;
    let k = read_tensor(dir.join("k.vnsa"))?;
    let v = read_tensor(dir.join("v.vnsa"))?;
    let batch = QkvBatch::new(q, k, v, layout).context("config/fixture mismatch")?;
    if batch.seq_len() != cfg.seq_len {
        bail!(
            "config/fixture mismatch: fixtures have L={}, config says L={}",
            batch.seq_len(),
            cfg.seq_len
        );
    }
    Ok(batch)
}

fn load_spans(cfg: &RunConfig) -> Result<ModalitySpans> {
    let fixture = spans_from_tensor(
        &read_tensor(cfg.fixtures_dir.join("spans.vnsa"))?,
        cfg.seq_len,
    )?;
    let config = cfg.modality_spans()?;
    if fixture != config {
        bail!("config/fixture mismatch: span fixture disagrees with the configuration");
    }
    Ok(config)
}

/// Concatenated per-head query rows, the gate MLP input: [L x heads*d].
fn gate_inputs_from_batch(batch: &QkvBatch, layout: &HeadLayout) -> Result<Tensor> {
    let h = layout.query_heads();
    let d = layout.head_dim();
    let l = batch.seq_len();
    let mut data = Vec::with_capacity(l * h * d);
    for t in 1..=l {
        for head in 0..h {
            data.extend_from_slice(batch.q_row(head, t));
        }
    }
    Ok(Tensor::new(vec![l, h * d], data)?)
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .fold(0.0, f64::max)
}

fn dense_concat(batch: &QkvBatch, layout: &HeadLayout) -> Result<Tensor> {
    let dense = dense_causal_attention(batch, layout)?;
    let heads: Vec<Tensor> = (0..layout.query_heads())
        .map(|h| dense.outer_slice(h))
        .collect();
    Ok(concat_heads(&heads)?)
}

/// Run the hybrid layer over the fixtures; `dense_mode` runs plain dense GQA
/// instead. Writes the output tensor and a summary CSV.
pub fn cmd_attend(cfg: &RunConfig, dense_mode: bool) -> Result<()> {
    let layout = cfg.layout()?;
    let sparse = cfg.sparse()?;
    let batch = load_batch(cfg, &layout)?;
    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let out_path = cfg.out_dir.join("attend_out.vnsa");
    let summary_path = cfg.out_dir.join("attend_summary.csv");

    let mut summary = String::from("metric,value\n");
    if dense_mode {
        let out = dense_concat(&batch, &layout)?;
        write_tensor(&out_path, &out)?;
        summary.push_str("mode,dense\n");
        summary.push_str("max_abs_dev_vs_dense,0\n");
    } else {
        let spans = load_spans(cfg)?;
        let gates = match cfg.gate_override {
            Some(triple) => GateValues::constant(cfg.seq_len, cfg.heads, triple)?,
            None => {
                let params = GateParams::load_dir(&cfg.fixtures_dir)?;
                if params.heads() != cfg.heads || params.input_width() != cfg.hidden_width() {
                    bail!("config/fixture mismatch: gate parameter shapes do not fit the layout");
                }
                GateValues::from_params(&params, &gate_inputs_from_batch(&batch, &layout)?)?
            }
        };
        let out = hybrid_layer_attention(&batch, &layout, &sparse, &gates, &spans)?;
        write_tensor(&out_path, &out)?;

        let dense = dense_concat(&batch, &layout)?;
        let dev = max_abs_diff(out.data(), dense.data());
        summary.push_str("mode,nsa\n");
        for branch in Branch::ALL {
            let mut acc = 0.0f64;
            for t in 1..=cfg.seq_len {
                for head in 0..cfg.heads {
                    acc += gates.get(t, head, branch) as f64;
                }
            }
            let mean = acc / (cfg.seq_len * cfg.heads) as f64;
            writeln!(summary, "gate_mean_{},{}", branch.as_str(), mean)?;
        }
        let vision_len = spans.positions(Modality::Vision).len();
        let counts = branch_op_counts(vision_len, &sparse);
        writeln!(summary, "vision_tokens,{vision_len}")?;
        writeln!(summary, "cmp_scores,{}", counts.cmp_scores)?;
        writeln!(summary, "slc_scores,{}", counts.slc_scores)?;
        writeln!(summary, "slc_attended,{}", counts.slc_attended)?;
        writeln!(summary, "win_attended,{}", counts.win_attended)?;
        writeln!(summary, "max_abs_dev_vs_dense,{dev}")?;
    }
    write_atomic(&summary_path, summary.as_bytes())?;
    println!("wrote {} and {}", out_path.display(), summary_path.display());
    Ok(())
}

/// Profile branch operation counts and wall time across context lengths.
/// Exits with an error if any measured count deviates from the analytic one.
pub fn cmd_bench(cfg: &RunConfig, lengths: &[usize]) -> Result<()> {
    if lengths.is_empty() {
        bail!("no context lengths given");
    }
    if lengths.windows(2).any(|w| w[0] >= w[1]) {
        bail!("context lengths must be strictly ascending");
    }
    let layout = cfg.layout()?;
    let sparse = cfg.sparse()?;
    let mut report = profile_branches(lengths, &sparse, &layout)?;

    // Test hook: zeroed wall clocks make the CSV byte-reproducible.
    let zero_clock = std::env::var("VNSA_ZERO_WALLCLOCK").is_ok();
    if zero_clock {
        for row in &mut report.rows {
            row.wall_ns = 0;
        }
    }

    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let path = cfg.out_dir.join("cost.csv");
    write_atomic(&path, cost_report_csv(&report).as_bytes())?;

    let largest = *lengths.last().unwrap();
    println!(
        "dominant analytic counter at L={largest}: {} (S = {})",
        report.dominant_counter, report.selected_tokens
    );
    if !zero_clock {
        let mut walls: Vec<(&str, u128)> = ["cmp_scores", "slc_scores", "win_attended"]
            .iter()
            .map(|&name| {
                let ns = report
                    .rows
                    .iter()
                    .filter(|r| r.context_len == largest && r.counter == name)
                    .map(|r| r.wall_ns)
                    .next()
                    .unwrap_or(0);
                let branch = match name {
                    "cmp_scores" => "cmp",
                    "slc_scores" => "slc",
                    _ => "win",
                };
                (branch, ns)
            })
            .collect();
        walls.sort_by_key(|&(_, ns)| ns);
        let order: Vec<&str> = walls.iter().map(|&(b, _)| b).collect();
        println!(
            "wall-clock ordering at L={largest} (fastest first, reported only): {}",
            order.join(" <= ")
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

struct SinkSource {
    name: &'static str,
    report: SinkReport,
}

fn sink_sources(
    batch: &QkvBatch,
    layout: &HeadLayout,
    sparse: &SparseConfig,
) -> Result<Vec<SinkSource>> {
    let h = layout.query_heads();
    let g = layout.kv_groups();
    let l = batch.seq_len();

    let token_norm = |pos: usize| -> f64 {
        let mut acc = 0.0f64;
        for group in 0..g {
            let row = batch.v_row(group, pos);
            let mut sq = 0.0f64;
            for &x in row {
                sq += x as f64 * x as f64;
            }
            acc += sq.sqrt();
        }
        acc / g as f64
    };
    let token_norms: Vec<f64> = (1..=l).map(token_norm).collect();

    let mut sources = Vec::new();

    // Dense oracle.
    let mut acc = AlphaAccumulator::new(l);
    for head in 0..h {
        for t in 1..=l {
            let probs = dense_row_probs(batch, layout, head, t)?;
            let keys: Vec<usize> = (1..=t).collect();
            acc.add_row(&keys, &probs)?;
        }
    }
    sources.push(SinkSource {
        name: "dense",
        report: detect_sinks(&acc.finish(), &token_norms)?,
    });

    // Compression branch: the attended population is the compressed blocks.
    let compressed = compress_blocks(batch.k(), batch.v(), sparse.block_size)?;
    let blocks = compressed.num_blocks();
    if blocks > 0 {
        let mut acc = AlphaAccumulator::new(blocks);
        for head in 0..h {
            let group = layout.group_of_head0(head);
            for t in 1..=l {
                let (_, probs) = compression_attention(batch.q_row(head, t), &compressed, group, t);
                if probs.is_empty() {
                    continue;
                }
                let keys: Vec<usize> = (1..=probs.len()).collect();
                acc.add_row(&keys, &probs)?;
            }
        }
        let block_norms: Vec<f64> = (1..=blocks)
            .map(|b| {
                let mut acc = 0.0f64;
                for group in 0..g {
                    let row = compressed.value_row(group, b);
                    let mut sq = 0.0f64;
                    for &x in row {
                        sq += x as f64 * x as f64;
                    }
                    acc += sq.sqrt();
                }
                acc / g as f64
            })
            .collect();
        sources.push(SinkSource {
            name: "cmp",
            report: detect_sinks(&acc.finish(), &block_norms)?,
        });

        // Selection branch over original token positions.
        let mut acc = AlphaAccumulator::new(l);
        for t in 1..=l {
            let probs_per_head: Vec<Vec<f64>> = (0..h)
                .map(|head| {
                    let group = layout.group_of_head0(head);
                    compression_attention(batch.q_row(head, t), &compressed, group, t).1
                })
                .collect();
            let scores = importance_scores(&probs_per_head, layout)?;
            for group in 0..g {
                let entry = select_top_blocks(&scores[group], sparse.select_blocks);
                if entry.blocks.is_empty() {
                    continue;
                }
                let keys = selection_positions(&entry.blocks, sparse.block_size);
                for head in 0..h {
                    if layout.group_of_head0(head) != group {
                        continue;
                    }
                    let (_, probs) = selection_attention(
                        batch.q_row(head, t),
                        batch.k(),
                        batch.v(),
                        group,
                        &entry.blocks,
                        sparse.block_size,
                        t,
                    )?;
                    acc.add_row(&keys, &probs)?;
                }
            }
        }
        sources.push(SinkSource {
            name: "slc",
            report: detect_sinks(&acc.finish(), &token_norms)?,
        });
    }

    // Sliding window branch.
    if sparse.window > 0 {
        let mut acc = AlphaAccumulator::new(l);
        for head in 0..h {
            let group = layout.group_of_head0(head);
            for t in 1..=l {
                let (_, probs) = sliding_window_attention(
                    batch.q_row(head, t),
                    batch.k(),
                    batch.v(),
                    group,
                    sparse.window,
                    t,
                );
                let lo = t.saturating_sub(sparse.window - 1).max(1);
                let keys: Vec<usize> = (lo..=t).collect();
                acc.add_row(&keys, &probs)?;
            }
        }
        sources.push(SinkSource {
            name: "win",
            report: detect_sinks(&acc.finish(), &token_norms)?,
        });
    }

    Ok(sources)
}

/// Detect attention sinks in the dense oracle and each sparse branch; one CSV
/// per attention source.
pub fn cmd_sinks(cfg: &RunConfig) -> Result<()> {
    let layout = cfg.layout()?;
    let sparse = cfg.sparse()?;
    let batch = load_batch(cfg, &layout)?;
    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    for source in sink_sources(&batch, &layout, &sparse)? {
        let path = cfg.out_dir.join(format!("sinks_{}.csv", source.name));
        write_atomic(&path, sink_report_csv(&source.report).as_bytes())?;
        println!(
            "source {}: {} sinks / {} keys (ratio {})",
            source.name,
            source.report.sink_count(),
            source.report.tokens.len(),
            source.report.sink_ratio
        );
    }
    Ok(())
}

/// Gate statistics (mean, IQR, inter-head correlation) per layer and branch.
pub fn cmd_gates(cfg: &RunConfig) -> Result<()> {
    let layout = cfg.layout()?;
    let batch = load_batch(cfg, &layout)?;
    let params = GateParams::load_dir(&cfg.fixtures_dir)?;
    if params.heads() != cfg.heads || params.input_width() != cfg.hidden_width() {
        bail!("config/fixture mismatch: gate parameter shapes do not fit the layout");
    }
    let gates = GateValues::from_params(&params, &gate_inputs_from_batch(&batch, &layout)?)?;
    let stats = GateStats::compute(&[gates])?;
    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let path = cfg.out_dir.join("gate_stats.csv");
    write_atomic(&path, gate_stats_csv(&stats).as_bytes())?;
    println!("wrote {} ({} rows)", path.display(), stats.rows.len());
    Ok(())
}

/// Print the attention-budget arithmetic: K_attn, gamma (percent, 4
/// significant digits), and the local ratio window / K_attn.
pub fn cmd_budget(
    blocks: u64,
    block_size: u64,
    window: u64,
    context_len: Option<u64>,
    frames: Option<u64>,
    tokens_per_frame: Option<u64>,
) -> Result<()> {
    let l = match (context_len, frames, tokens_per_frame) {
        (Some(l), None, None) => l,
        (None, Some(f), Some(t)) => info_context_length(t, f),
        (Some(l), Some(f), Some(t)) => {
            let derived = info_context_length(t, f);
            if derived != l {
                bail!("context length {l} contradicts frames * tokens-per-frame = {derived}");
            }
            l
        }
        _ => bail!("give a context length, or both --frames and --tpf"),
    };
    let budget = attention_budget(blocks, block_size, window);
    let gamma = attention_fraction(blocks, block_size, window, l)?;
    println!("L = {l}");
    println!("K_attn = {budget}");
    println!("gamma = {}%", format_significant(gamma * 100.0, 4));
    if budget > 0 {
        println!(
            "alpha_local = {}",
            format_significant(window as f64 / budget as f64, 4)
        );
    } else {
        println!("alpha_local = n/a");
    }
    Ok(())
}

/// Run the built-in invariant suites; returns false when any suite fails.
/// VNSA_CHECK_TOL_SCALE scales the floating-point tolerances (test hook).
pub fn cmd_check() -> Result<bool> {
    let scale = std::env::var("VNSA_CHECK_TOL_SCALE")
        .ok()
        .and_then(|v| v.parse::<f64>().ok())
        .unwrap_or(1.0);
    let results = selfcheck::run_all(scale);
    let mut all_passed = true;
    for suite in &results {
        if suite.passed {
            println!("PASS {}", suite.name);
        } else {
            all_passed = false;
            println!("FAIL {}: {}", suite.name, suite.detail);
        }
    }
    println!(
        "{}/{} suites passed",
        results.iter().filter(|s| s.passed).count(),
        results.len()
    );
    Ok(all_passed)
}

/// Copy config with output/fixture overrides applied (used by `main`).
pub fn apply_overrides(
    mut cfg: RunConfig,
    seed: Option<u64>,
    out: Option<&Path>,
    gen_mode: bool,
) -> RunConfig {
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(out) = out {
        if gen_mode {
            cfg.fixtures_dir = out.to_path_buf();
        } else {
            cfg.out_dir = out.to_path_buf();
        }
    }
    cfg
}

//! Quantitative analysis apparatus: attention-budget arithmetic, the
//! attention-sink detector, gate statistics, and the branch cost profiler.
//!
//! Quantiles everywhere use linear interpolation at positions q*(N-1) over the
//! sorted sample (zero-indexed), so every statistic is bit-reproducible.

use std::time::Instant;

use crate::branches::{
    branch_op_counts, compress_blocks, compression_attention, select_top_blocks,
    selection_attention, sliding_window_attention, Branch, BranchOpCounts, SparseConfig,
};
use crate::dense::HeadLayout;
use crate::error::{Error, Result};
use crate::fixtures::seeded_batch;
use crate::gating::GateValues;

/// Mean received attention above which a token can qualify as a sink.
pub const SINK_ALPHA_THRESHOLD: f64 = 0.1;

const PROFILE_SEED: u64 = 0xC0;
const PROFILE_REPS: usize = 5;

/// Key-value pairs visible per query: blocks * block_size + window.
pub fn attention_budget(block_count: u64, block_size: u64, window: u64) -> u64 {
    block_count * block_size + window
}

/// Fraction of the dense causal edge count used by the budget:
/// 2 * (blocks * block_size + window) / (L - 1).
pub fn attention_fraction(
    block_count: u64,
    block_size: u64,
    window: u64,
    context_len: u64,
) -> Result<f64> {
    if context_len < 2 {
        return Err(Error::Domain(format!(
            "attention fraction needs a context of at least 2 tokens, got {context_len}"
        )));
    }
    Ok(2.0 * attention_budget(block_count, block_size, window) as f64 / (context_len - 1) as f64)
}

/// Vision context length from tokens-per-frame and frame count.
pub fn info_context_length(tokens_per_frame: u64, frames: u64) -> u64 {
    tokens_per_frame * frames
}

/// Budget bookkeeping for one configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BudgetSpec {
    pub block_count: u64,
    pub block_size: u64,
    pub window: u64,
    pub context_len: u64,
    pub tokens_per_frame: Option<u64>,
    pub frames: Option<u64>,
}

impl BudgetSpec {
    pub fn from_context_len(block_count: u64, block_size: u64, window: u64, context_len: u64) -> Self {
        Self {
            block_count,
            block_size,
            window,
            context_len,
            tokens_per_frame: None,
            frames: None,
        }
    }

    pub fn from_frames(
        block_count: u64,
        block_size: u64,
        window: u64,
        tokens_per_frame: u64,
        frames: u64,
    ) -> Self {
        Self {
            block_count,
            block_size,
            window,
            context_len: info_context_length(tokens_per_frame, frames),
            tokens_per_frame: Some(tokens_per_frame),
            frames: Some(frames),
        }
    }

    pub fn budget(&self) -> u64 {
        attention_budget(self.block_count, self.block_size, self.window)
    }

    pub fn fraction(&self) -> Result<f64> {
        attention_fraction(self.block_count, self.block_size, self.window, self.context_len)
    }

    /// Local share of the budget: window / budget.
    pub fn local_ratio(&self) -> Option<f64> {
        let k = self.budget();
        (k > 0).then(|| self.window as f64 / k as f64)
    }
}

/// Interpolated quantile over a sorted sample.
pub fn interpolated_quantile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty() && (0.0..=1.0).contains(&q));
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn sorted_copy(xs: &[f64]) -> Vec<f64> {
    let mut s = xs.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    s
}

pub fn median(xs: &[f64]) -> f64 {
    interpolated_quantile(&sorted_copy(xs), 0.5)
}

/// Q3 - Q1 under the interpolated quantile convention.
pub fn iqr(xs: &[f64]) -> f64 {
    let s = sorted_copy(xs);
    interpolated_quantile(&s, 0.75) - interpolated_quantile(&s, 0.25)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinkToken {
    /// 1-based token (or block) index within the analyzed population.
    pub index: usize,
    pub alpha: f64,
    pub vnorm: f64,
    pub is_sink: bool,
}

/// Per-token sink flags plus the aggregates derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct SinkReport {
    pub tokens: Vec<SinkToken>,
    /// median(vnorm) - 2 * IQR(vnorm) over the whole population.
    pub norm_threshold: f64,
    pub sink_ratio: f64,
    /// Flagged-token counts over ten equal position bins.
    pub position_histogram: [usize; 10],
}

impl SinkReport {
    pub fn sink_count(&self) -> usize {
        self.tokens.iter().filter(|t| t.is_sink).count()
    }
}

/// Flag token i iff alpha_i > 0.1 and vnorm_i < median(vnorm) - 2*IQR(vnorm),
/// both inequalities strict.
pub fn detect_sinks(alphas: &[f64], vnorms: &[f64]) -> Result<SinkReport> {
    if alphas.len() != vnorms.len() {
        return Err(Error::shape(
            &[alphas.len()],
            &[vnorms.len()],
            "alphas vs value norms",
        ));
    }
    if alphas.is_empty() {
        return Err(Error::Domain("sink detection needs at least one token".into()));
    }
    if alphas.iter().chain(vnorms.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite sink detector input".into()));
    }
    let norm_threshold = median(vnorms) - 2.0 * iqr(vnorms);
    let n = alphas.len();
    let mut tokens = Vec::with_capacity(n);
    let mut position_histogram = [0usize; 10];
    let mut flagged = 0usize;
    for i in 0..n {
        let is_sink = alphas[i] > SINK_ALPHA_THRESHOLD && vnorms[i] < norm_threshold;
        if is_sink {
            flagged += 1;
            position_histogram[i * 10 / n] += 1;
        }
        tokens.push(SinkToken {
            index: i + 1,
            alpha: alphas[i],
            vnorm: vnorms[i],
            is_sink,
        });
    }
    Ok(SinkReport {
        tokens,
        norm_threshold,
        sink_ratio: flagged as f64 / n as f64,
        position_histogram,
    })
}

/// Streaming mean of the attention mass each key receives, over the queries
/// that can see it. Keys are 1-based; rows are added one attention row at a
/// time with their explicit key sets.
#[derive(Debug, Clone)]
pub struct AlphaAccumulator {
    sums: Vec<f64>,
    counts: Vec<u64>,
}

impl AlphaAccumulator {
    pub fn new(num_keys: usize) -> Self {
        Self {
            sums: vec![0.0; num_keys],
            counts: vec![0; num_keys],
        }
    }

    pub fn add_row(&mut self, keys: &[usize], probs: &[f64]) -> Result<()> {
        if keys.len() != probs.len() {
            return Err(Error::shape(&[keys.len()], &[probs.len()], "keys vs probs"));
        }
        if keys.is_empty() {
            return Ok(());
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-4 {
            return Err(Error::Validation(format!(
                "non-normalized attention row (sum = {sum})"
            )));
        }
        for (&k, &p) in keys.iter().zip(probs.iter()) {
            if k == 0 || k > self.sums.len() {
                return Err(Error::IndexOutOfRange {
                    index: k,
                    len: self.sums.len(),
                });
            }
            self.sums[k - 1] += p;
            self.counts[k - 1] += 1;
        }
        Ok(())
    }

    /// Mean received attention per key; keys never visible to any query get 0.
    pub fn finish(&self) -> Vec<f64> {
        self.sums
            .iter()
            .zip(self.counts.iter())
            .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect()
    }
}

/// Mean received attention per key from causal probability rows: row t (one
/// per position, in order) covers keys 1..=t.
pub fn compute_alphas(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut acc = AlphaAccumulator::new(rows.len());
    for (i, row) in rows.iter().enumerate() {
        if row.len() != i + 1 {
            return Err(Error::shape(&[row.len()], &[i + 1], "causal row length"));
        }
        let keys: Vec<usize> = (1..=i + 1).collect();
        acc.add_row(&keys, row)?;
    }
    Ok(acc.finish())
}

/// Mean and interquartile range of one branch's gates over the token x head
/// population of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchMoments {
    pub layer: usize,
    pub branch: Branch,
    pub mean: f64,
    pub iqr: f64,
}

/// Per-layer, per-branch gate moments over the token x head population.
pub fn gate_statistics(layers: &[GateValues]) -> Result<Vec<BranchMoments>> {
    if layers.is_empty() {
        return Err(Error::Domain("gate statistics need at least one layer".into()));
    }
    let mut out = Vec::with_capacity(layers.len() * 3);
    for (layer, gates) in layers.iter().enumerate() {
        for branch in Branch::ALL {
            let mut sample = Vec::with_capacity(gates.seq_len() * gates.heads());
            for t in 1..=gates.seq_len() {
                for head in 0..gates.heads() {
                    sample.push(gates.get(t, head, branch) as f64);
                }
            }
            if sample.is_empty() {
                return Err(Error::Domain("empty gate population".into()));
            }
            let mean = sample.iter().sum::<f64>() / sample.len() as f64;
            out.push(BranchMoments {
                layer,
                branch,
                mean,
                iqr: iqr(&sample),
            });
        }
    }
    Ok(out)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// Mean pairwise Pearson correlation of one branch's gate series across heads,
/// taken over the token dimension. A zero-variance head contributes 0 with
/// every partner.
pub fn inter_head_similarity(gates: &GateValues, branch: Branch) -> Result<f64> {
    let h = gates.heads();
    let l = gates.seq_len();
    if h < 2 || l < 2 {
        return Err(Error::Domain(format!(
            "inter-head similarity needs at least 2 heads and 2 tokens, got {h} heads x {l} tokens"
        )));
    }
    let series: Vec<Vec<f64>> = (0..h)
        .map(|head| {
            (1..=l)
                .map(|t| gates.get(t, head, branch) as f64)
                .collect()
        })
        .collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..h {
        for b in a + 1..h {
            total += pearson(&series[a], &series[b]);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// One CSV row of the combined gate statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct GateStatsRow {
    pub layer: usize,
    pub branch: Branch,
    pub mean: f64,
    pub iqr: f64,
    pub inter_head_corr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateStats {
    pub rows: Vec<GateStatsRow>,
}

impl GateStats {
    pub fn compute(layers: &[GateValues]) -> Result<Self> {
        let moments = gate_statistics(layers)?;
        let mut rows = Vec::with_capacity(moments.len());
        for m in moments {
            let corr = inter_head_similarity(&layers[m.layer], m.branch)?;
            rows.push(GateStatsRow {
                layer: m.layer,
                branch: m.branch,
                mean: m.mean,
                iqr: m.iqr,
                inter_head_corr: corr,
            });
        }
        Ok(Self { rows })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostRow {
    pub context_len: usize,
    pub counter: &'static str,
    pub analytic: u64,
    pub measured: u64,
    pub wall_ns: u128,
}

/// Analytic and measured operation counts per branch per context length.
/// Wall-clock numbers are reported for orientation only; measured counts must
/// equal the analytic counts exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    /// Selected token count S = select_blocks * block_size.
    pub selected_tokens: u64,
    /// Counter with the largest analytic count at the largest context length.
    pub dominant_counter: &'static str,
}

struct SweepMeasurement {
    count: u64,
    wall_ns: u128,
}

fn timed_median<F: FnMut() -> u64>(mut sweep: F) -> SweepMeasurement {
    let mut count = 0;
    let mut times = Vec::with_capacity(PROFILE_REPS);
    for _ in 0..PROFILE_REPS {
        let start = Instant::now();
        count = sweep();
        times.push(start.elapsed().as_nanos());
    }
    times.sort_unstable();
    SweepMeasurement {
        count,
        wall_ns: times[PROFILE_REPS / 2],
    }
}

/// Run every branch over seeded inputs at each context length, single query
/// stream (head 0); record wall time (median of 5 sweeps) and measured counts,
/// and fail if any measured count deviates from `branch_op_counts`.
pub fn profile_branches(
    context_lens: &[usize],
    cfg: &SparseConfig,
    layout: &HeadLayout,
) -> Result<CostReport> {
    if context_lens.is_empty() {
        return Err(Error::Validation("no context lengths to profile".into()));
    }
    for &l in context_lens {
        if l < cfg.block_size {
            return Err(Error::Validation(format!(
                "context length {l} is shorter than one block ({})",
                cfg.block_size
            )));
        }
    }
    let mut rows = Vec::new();
    for &l in context_lens {
        let batch = seeded_batch(PROFILE_SEED, layout, l)?;
        let analytic = branch_op_counts(l, cfg);
        let group_heads = layout.heads_in_group0(0);

        let cmp = timed_median(|| {
            let compressed = compress_blocks(batch.k(), batch.v(), cfg.block_size).unwrap();
            let mut scores = 0u64;
            for t in 1..=l {
                let (_, probs) = compression_attention(batch.q_row(0, t), &compressed, 0, t);
                scores += probs.len() as u64;
            }
            scores
        });

        let mut slc_attended_measured = 0u64;
        let slc = timed_median(|| {
            let compressed = compress_blocks(batch.k(), batch.v(), cfg.block_size).unwrap();
            let mut scores = 0u64;
            let mut attended = 0u64;
            for t in 1..=l {
                let probs: Vec<Vec<f64>> = group_heads
                    .clone()
                    .map(|head| compression_attention(batch.q_row(head, t), &compressed, 0, t).1)
                    .collect();
                scores += probs[0].len() as u64;
                let mut group_scores = vec![0.0f64; probs[0].len()];
                for p in &probs {
                    for (s, v) in group_scores.iter_mut().zip(p.iter()) {
                        *s += v;
                    }
                }
                let entry = select_top_blocks(&group_scores, cfg.select_blocks);
                let (_, sel_probs) = selection_attention(
                    batch.q_row(0, t),
                    batch.k(),
                    batch.v(),
                    0,
                    &entry.blocks,
                    cfg.block_size,
                    t,
                )
                .unwrap();
                attended += sel_probs.len() as u64;
            }
            slc_attended_measured = attended;
            scores
        });

        let win = timed_median(|| {
            let mut attended = 0u64;
            for t in 1..=l {
                let (_, probs) =
                    sliding_window_attention(batch.q_row(0, t), batch.k(), batch.v(), 0, cfg.window, t);
                attended += probs.len() as u64;
            }
            attended
        });

        let measured = [
            ("cmp_scores", cmp.count, cmp.wall_ns),
            ("slc_scores", slc.count, slc.wall_ns),
            ("slc_attended", slc_attended_measured, slc.wall_ns),
            ("win_attended", win.count, win.wall_ns),
        ];
        for (counter, got, wall_ns) in measured {
            let want = analytic.get(counter).unwrap();
            if got != want {
                return Err(Error::CountMismatch {
                    counter,
                    measured: got,
                    analytic: want,
                });
            }
            rows.push(CostRow {
                context_len: l,
                counter,
                analytic: want,
                measured: got,
                wall_ns,
            });
        }
    }

    let largest = *context_lens.last().unwrap();
    let counts_at_largest = branch_op_counts(largest, cfg);
    let dominant_counter = BranchOpCounts::COUNTERS
        .iter()
        .max_by_key(|c| counts_at_largest.get(c).unwrap())
        .unwrap();
    Ok(CostReport {
        rows,
        selected_tokens: (cfg.select_blocks * cfg.block_size) as u64,
        dominant_counter,
    })
}

/// CSV with columns token_index,alpha,vnorm,is_sink.
pub fn sink_report_csv(report: &SinkReport) -> String {
    let mut out = String::from("token_index,alpha,vnorm,is_sink\n");
    for t in &report.tokens {
        out.push_str(&format!("{},{},{},{}\n", t.index, t.alpha, t.vnorm, t.is_sink));
    }
    out
}

/// CSV with columns L,branch,analytic_count,measured_count,wall_ns.
pub fn cost_report_csv(report: &CostReport) -> String {
    let mut out = String::from("L,branch,analytic_count,measured_count,wall_ns\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.context_len, r.counter, r.analytic, r.measured, r.wall_ns
        ));
    }
    out
}

/// CSV with columns layer,branch,mean,iqr,inter_head_corr.
pub fn gate_stats_csv(stats: &GateStats) -> String {
    let mut out = String::from("layer,branch,mean,iqr,inter_head_corr\n");
    for r in &stats.rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.layer,
            r.branch.as_str(),
            r.mean,
            r.iqr,
            r.inter_head_corr
        ));
    }
    out
}

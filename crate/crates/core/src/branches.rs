//! The three sparse KV branches: block compression, top-n block selection,
//! and sliding-window attention, each reporting exact operation counts.
//!
//! Blocks are 1-based; block i covers token positions (i-1)*s+1 ..= i*s and is
//! visible to query position t iff i*s <= t. Trailing partial blocks are
//! dropped from compression and selection; the sliding window still reaches
//! those tokens.

use rayon::prelude::*;

use crate::dense::{attend, HeadLayout, QkvBatch};
use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Compression,
    Selection,
    Window,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Compression, Branch::Selection, Branch::Window];

    pub fn as_str(&self) -> &'static str {
        match self {
            Branch::Compression => "cmp",
            Branch::Selection => "slc",
            Branch::Window => "win",
        }
    }

    pub fn index(&self) -> usize {
        match self {
            Branch::Compression => 0,
            Branch::Selection => 1,
            Branch::Window => 2,
        }
    }
}

/// Sparse branch geometry: block size (compression length = stride), number of
/// selected blocks, sliding-window width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SparseConfig {
    pub block_size: usize,
    pub select_blocks: usize,
    pub window: usize,
}

impl SparseConfig {
    pub fn new(block_size: usize, select_blocks: usize, window: usize) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::Validation("block size must be at least 1".into()));
        }
        Ok(Self {
            block_size,
            select_blocks,
            window,
        })
    }
}

/// Block-mean compressed keys and values: [groups x B x d] with B = floor(L/s).
#[derive(Debug, Clone)]
pub struct CompressedKv {
    keys: Tensor,
    values: Tensor,
    block_size: usize,
    num_blocks: usize,
    groups: usize,
    head_dim: usize,
}

impl CompressedKv {
    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// Last source position covered by 1-based block i.
    pub fn block_end(&self, block: usize) -> usize {
        block * self.block_size
    }

    /// Number of blocks visible to query position t (block_end <= t).
    pub fn visible_blocks(&self, t: usize) -> usize {
        (t / self.block_size).min(self.num_blocks)
    }

    pub fn key_row(&self, group: usize, block: usize) -> &[f32] {
        self.keys.row3(group, block - 1)
    }

    pub fn value_row(&self, group: usize, block: usize) -> &[f32] {
        self.values.row3(group, block - 1)
    }
}

fn mean_rows(t: &Tensor, group: usize, start_pos: usize, count: usize, out: &mut [f32]) {
    let d = out.len();
    for j in 0..d {
        let mut acc = 0.0f64;
        for p in 0..count {
            acc += t.row3(group, start_pos - 1 + p)[j] as f64;
        }
        out[j] = (acc / count as f64) as f32;
    }
}

/// Compress K and V into per-block arithmetic means. A trailing partial block
/// (L mod s tokens) is dropped; L < s yields zero blocks.
pub fn compress_blocks(k: &Tensor, v: &Tensor, block_size: usize) -> Result<CompressedKv> {
    if block_size == 0 {
        return Err(Error::Validation("block size must be at least 1".into()));
    }
    if k.dims().len() != 3 || k.dims() != v.dims() {
        return Err(Error::shape(k.dims(), v.dims(), "compress_blocks K vs V"));
    }
    let groups = k.dims()[0];
    let l = k.dims()[1];
    let d = k.dims()[2];
    let num_blocks = l / block_size;
    // Tensor dims must stay positive; an empty block set keeps 1-row tensors
    // that are never read (visible_blocks is 0 everywhere).
    let rows = num_blocks.max(1);
    let mut kc = Tensor::zeros(vec![groups, rows, d])?;
    let mut vc = Tensor::zeros(vec![groups, rows, d])?;
    let mut buf = vec![0.0f32; d];
    for group in 0..groups {
        for block in 0..num_blocks {
            let start = block * block_size + 1;
            mean_rows(k, group, start, block_size, &mut buf);
            kc.set_row3(group, block, &buf);
            mean_rows(v, group, start, block_size, &mut buf);
            vc.set_row3(group, block, &buf);
        }
    }
    Ok(CompressedKv {
        keys: kc,
        values: vc,
        block_size,
        num_blocks,
        groups,
        head_dim: d,
    })
}

/// Attention of one query over the causally visible compressed blocks.
/// Returns the output and the block probabilities (reused as importance
/// scores). No visible block yields a zero vector and empty probabilities.
pub fn compression_attention(
    q: &[f32],
    compressed: &CompressedKv,
    group: usize,
    t: usize,
) -> (Vec<f32>, Vec<f64>) {
    debug_assert!(group < compressed.groups && q.len() == compressed.head_dim);
    let visible = compressed.visible_blocks(t);
    let keys: Vec<&[f32]> = (1..=visible).map(|b| compressed.key_row(group, b)).collect();
    let values: Vec<&[f32]> = (1..=visible)
        .map(|b| compressed.value_row(group, b))
        .collect();
    attend(q, &keys, &values)
}

/// Per-group importance scores: for each KV group, the sum over its query
/// heads of the compression-attention probabilities. Input is indexed by
/// 0-based head; heads within a group must share one visible-block set.
pub fn importance_scores(
    probs_per_head: &[Vec<f64>],
    layout: &HeadLayout,
) -> Result<Vec<Vec<f64>>> {
    if probs_per_head.len() != layout.query_heads() {
        return Err(Error::shape(
            &[probs_per_head.len()],
            &[layout.query_heads()],
            "importance_scores heads",
        ));
    }
    let mut out = Vec::with_capacity(layout.kv_groups());
    for group in 0..layout.kv_groups() {
        let heads = layout.heads_in_group0(group);
        let width = probs_per_head[heads.start].len();
        let mut scores = vec![0.0f64; width];
        for head in heads {
            let probs = &probs_per_head[head];
            if probs.len() != width {
                return Err(Error::Internal(format!(
                    "inconsistent visible-block sets within group {}: {} vs {}",
                    group + 1,
                    probs.len(),
                    width
                )));
            }
            for (s, p) in scores.iter_mut().zip(probs.iter()) {
                *s += p;
            }
        }
        out.push(scores);
    }
    Ok(out)
}

/// One query position's selected blocks together with the scores that chose them.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionEntry {
    /// 1-based block indices, ascending.
    pub blocks: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Top-n visible blocks by score; ties break toward the lower block index.
/// `scores[i]` belongs to 1-based block i+1; fewer than n blocks selects all.
pub fn select_top_blocks(scores: &[f64], n: usize) -> SelectionEntry {
    debug_assert!(scores.iter().all(|s| s.is_finite() && *s >= 0.0));
    let mut order: Vec<usize> = (1..=scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b - 1]
            .partial_cmp(&scores[a - 1])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut blocks: Vec<usize> = order.into_iter().take(n.min(scores.len())).collect();
    blocks.sort_unstable();
    SelectionEntry {
        blocks,
        scores: scores.to_vec(),
    }
}

/// Token positions covered by the given 1-based blocks, ascending.
pub fn selection_positions(blocks: &[usize], block_size: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(blocks.len() * block_size);
    for &b in blocks {
        let start = (b - 1) * block_size + 1;
        out.extend(start..start + block_size);
    }
    out
}

/// Attention of one query over the original tokens inside the selected blocks.
/// Every selected block must be causally visible; an empty selection yields a
/// zero vector.
pub fn selection_attention(
    q: &[f32],
    k: &Tensor,
    v: &Tensor,
    group: usize,
    blocks: &[usize],
    block_size: usize,
    t: usize,
) -> Result<(Vec<f32>, Vec<f64>)> {
    for &b in blocks {
        if b * block_size > t {
            return Err(Error::Validation(format!(
                "selected block {b} (ends at {}) not visible at position {t}",
                b * block_size
            )));
        }
    }
    let positions = selection_positions(blocks, block_size);
    let keys: Vec<&[f32]> = positions.iter().map(|&p| k.row3(group, p - 1)).collect();
    let values: Vec<&[f32]> = positions.iter().map(|&p| v.row3(group, p - 1)).collect();
    Ok(attend(q, &keys, &values))
}

/// Window of 1-based positions max(1, t-w+1) ..= t; w = 0 is empty.
pub fn window_positions(window: usize, t: usize) -> Vec<usize> {
    if window == 0 {
        return Vec::new();
    }
    let lo = t.saturating_sub(window - 1).max(1);
    (lo..=t).collect()
}

/// Attention of one query over the w most recent tokens.
pub fn sliding_window_attention(
    q: &[f32],
    k: &Tensor,
    v: &Tensor,
    group: usize,
    window: usize,
    t: usize,
) -> (Vec<f32>, Vec<f64>) {
    let positions = window_positions(window, t);
    if positions.is_empty() {
        return (vec![0.0; q.len()], Vec::new());
    }
    let keys: Vec<&[f32]> = positions.iter().map(|&p| k.row3(group, p - 1)).collect();
    let values: Vec<&[f32]> = positions.iter().map(|&p| v.row3(group, p - 1)).collect();
    attend(q, &keys, &values)
}

/// Exact per-branch operation counts for a full causal sweep of one query
/// stream (the counts are identical for every head).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BranchOpCounts {
    /// Compressed keys scored: sum over t of floor(t/s).
    pub cmp_scores: u64,
    /// Block importance scores examined; scoring reuses the compression pass.
    pub slc_scores: u64,
    /// Token keys attended by selection: sum over t of s * min(n, floor(t/s)).
    pub slc_attended: u64,
    /// Token keys attended by the window: sum over t of min(w, t).
    pub win_attended: u64,
}

impl BranchOpCounts {
    pub fn get(&self, counter: &str) -> Option<u64> {
        match counter {
            "cmp_scores" => Some(self.cmp_scores),
            "slc_scores" => Some(self.slc_scores),
            "slc_attended" => Some(self.slc_attended),
            "win_attended" => Some(self.win_attended),
            _ => None,
        }
    }

    pub const COUNTERS: [&'static str; 4] =
        ["cmp_scores", "slc_scores", "slc_attended", "win_attended"];
}

/// Closed-form analytic counts for sequence length L under `cfg`.
pub fn branch_op_counts(seq_len: usize, cfg: &SparseConfig) -> BranchOpCounts {
    let mut c = BranchOpCounts::default();
    for t in 1..=seq_len {
        let visible = (t / cfg.block_size) as u64;
        c.cmp_scores += visible;
        c.slc_scores += visible;
        c.slc_attended += cfg.block_size as u64 * visible.min(cfg.select_blocks as u64);
        c.win_attended += cfg.window.min(t) as u64;
    }
    c
}

/// Outputs of all three branches over a full batch, plus the operation counts
/// measured from the kernel calls of one query stream (head 0).
#[derive(Debug, Clone)]
pub struct BranchOutputs {
    pub compression: Tensor,
    pub selection: Tensor,
    pub window: Tensor,
    pub counts: BranchOpCounts,
}

struct RowSet {
    cmp: Vec<Vec<f32>>,
    slc: Vec<Vec<f32>>,
    win: Vec<Vec<f32>>,
    counts: BranchOpCounts,
}

fn branch_rows_at(
    batch: &QkvBatch,
    layout: &HeadLayout,
    cfg: &SparseConfig,
    compressed: &CompressedKv,
    t: usize,
) -> Result<RowSet> {
    let h = layout.query_heads();
    let mut probs_per_head = Vec::with_capacity(h);
    let mut cmp = Vec::with_capacity(h);
    for head in 0..h {
        let group = layout.group_of_head0(head);
        let (out, probs) = compression_attention(batch.q_row(head, t), compressed, group, t);
        cmp.push(out);
        probs_per_head.push(probs);
    }
    let group_scores = importance_scores(&probs_per_head, layout)?;
    let selections: Vec<SelectionEntry> = group_scores
        .iter()
        .map(|scores| select_top_blocks(scores, cfg.select_blocks))
        .collect();

    let mut counts = BranchOpCounts::default();
    counts.cmp_scores = probs_per_head[0].len() as u64;
    counts.slc_scores = counts.cmp_scores;

    let mut slc = Vec::with_capacity(h);
    let mut win = Vec::with_capacity(h);
    for head in 0..h {
        let group = layout.group_of_head0(head);
        let (out, probs) = selection_attention(
            batch.q_row(head, t),
            batch.k(),
            batch.v(),
            group,
            &selections[group].blocks,
            cfg.block_size,
            t,
        )?;
        if head == 0 {
            counts.slc_attended = probs.len() as u64;
        }
        slc.push(out);
        let (out, probs) = sliding_window_attention(
            batch.q_row(head, t),
            batch.k(),
            batch.v(),
            group,
            cfg.window,
            t,
        );
        if head == 0 {
            counts.win_attended = probs.len() as u64;
        }
        win.push(out);
    }
    Ok(RowSet {
        cmp,
        slc,
        win,
        counts,
    })
}

/// Run all three branches over every (head, position) cell of the batch.
pub fn run_branches(
    batch: &QkvBatch,
    layout: &HeadLayout,
    cfg: &SparseConfig,
) -> Result<BranchOutputs> {
    batch.check_layout(layout)?;
    let h = layout.query_heads();
    let l = batch.seq_len();
    let d = layout.head_dim();
    let compressed = compress_blocks(batch.k(), batch.v(), cfg.block_size)?;

    let rows: Vec<Result<RowSet>> = parallel::pool().install(|| {
        (1..=l)
            .into_par_iter()
            .map(|t| branch_rows_at(batch, layout, cfg, &compressed, t))
            .collect()
    });

    let mut compression = Tensor::zeros(vec![h, l, d])?;
    let mut selection = Tensor::zeros(vec![h, l, d])?;
    let mut window = Tensor::zeros(vec![h, l, d])?;
    let mut counts = BranchOpCounts::default();
    for (i, row) in rows.into_iter().enumerate() {
        let row = row?;
        for head in 0..h {
            compression.set_row3(head, i, &row.cmp[head]);
            selection.set_row3(head, i, &row.slc[head]);
            window.set_row3(head, i, &row.win[head]);
        }
        counts.cmp_scores += row.counts.cmp_scores;
        counts.slc_scores += row.counts.slc_scores;
        counts.slc_attended += row.counts.slc_attended;
        counts.win_attended += row.counts.win_attended;
    }
    Ok(BranchOutputs {
        compression,
        selection,
        window,
        counts,
    })
}

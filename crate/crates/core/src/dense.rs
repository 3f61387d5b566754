//! Dense causal grouped-query attention.
//!
//! This is both the text-token path of the hybrid layer and the correctness
//! reference every sparse branch is checked against. Head indices are 0-based
//! internally; `gqa_group_of_head` follows the 1-based ceil map.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::{dot_f64, softmax_f64, Tensor};

/// Query-head / KV-group geometry shared by every kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadLayout {
    query_heads: usize,
    kv_groups: usize,
    head_dim: usize,
}

impl HeadLayout {
    pub fn new(query_heads: usize, kv_groups: usize, head_dim: usize) -> Result<Self> {
        if query_heads == 0 || kv_groups == 0 || head_dim == 0 {
            return Err(Error::Validation(format!(
                "layout entries must be positive: heads={query_heads}, groups={kv_groups}, dim={head_dim}"
            )));
        }
        if kv_groups > query_heads {
            return Err(Error::Validation(format!(
                "kv groups {kv_groups} exceed query heads {query_heads}"
            )));
        }
        if query_heads % kv_groups != 0 {
            return Err(Error::Validation(format!(
                "query heads {query_heads} not divisible by kv groups {kv_groups}"
            )));
        }
        Ok(Self {
            query_heads,
            kv_groups,
            head_dim,
        })
    }

    pub fn query_heads(&self) -> usize {
        self.query_heads
    }

    pub fn kv_groups(&self) -> usize {
        self.kv_groups
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn heads_per_group(&self) -> usize {
        self.query_heads / self.kv_groups
    }

    /// 0-based group of a 0-based head (the internal-index counterpart of
    /// `gqa_group_of_head`).
    pub fn group_of_head0(&self, head: usize) -> usize {
        head * self.kv_groups / self.query_heads
    }

    /// 0-based heads belonging to a 0-based group.
    pub(crate) fn heads_in_group0(&self, group: usize) -> std::ops::Range<usize> {
        let per = self.heads_per_group();
        group * per..(group + 1) * per
    }
}

/// Group index for a 1-based query head: ceil(head * groups / heads).
pub fn gqa_group_of_head(head: usize, layout: &HeadLayout) -> Result<usize> {
    if head == 0 || head > layout.query_heads() {
        return Err(Error::IndexOutOfRange {
            index: head,
            len: layout.query_heads(),
        });
    }
    Ok((head * layout.kv_groups() + layout.query_heads() - 1) / layout.query_heads())
}

/// Post-projection Q/K/V for one sequence: Q is [heads x L x d], K and V are
/// [groups x L x d]. Positions are 1-based throughout the public API.
#[derive(Debug, Clone)]
pub struct QkvBatch {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    seq_len: usize,
}

impl QkvBatch {
    pub fn new(q: Tensor, k: Tensor, v: Tensor, layout: &HeadLayout) -> Result<Self> {
        let h = layout.query_heads();
        let g = layout.kv_groups();
        let d = layout.head_dim();
        if q.dims().len() != 3 || q.dims()[0] != h || q.dims()[2] != d {
            return Err(Error::shape(q.dims(), &[h, 0, d], "Q vs layout"));
        }
        let l = q.dims()[1];
        if k.dims() != [g, l, d] {
            return Err(Error::shape(k.dims(), &[g, l, d], "K vs layout"));
        }
        if v.dims() != [g, l, d] {
            return Err(Error::shape(v.dims(), &[g, l, d], "V vs layout"));
        }
        Ok(Self { q, k, v, seq_len: l })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn q(&self) -> &Tensor {
        &self.q
    }

    pub fn k(&self) -> &Tensor {
        &self.k
    }

    pub fn v(&self) -> &Tensor {
        &self.v
    }

    pub fn q_row(&self, head: usize, pos: usize) -> &[f32] {
        self.q.row3(head, pos - 1)
    }

    pub fn k_row(&self, group: usize, pos: usize) -> &[f32] {
        self.k.row3(group, pos - 1)
    }

    pub fn v_row(&self, group: usize, pos: usize) -> &[f32] {
        self.v.row3(group, pos - 1)
    }

    pub fn k_row_mut(&mut self, group: usize, pos: usize) -> &mut [f32] {
        self.k.row3_mut(group, pos - 1)
    }

    pub fn v_row_mut(&mut self, group: usize, pos: usize) -> &mut [f32] {
        self.v.row3_mut(group, pos - 1)
    }

    pub(crate) fn check_layout(&self, layout: &HeadLayout) -> Result<()> {
        if self.q.dims()[0] != layout.query_heads()
            || self.k.dims()[0] != layout.kv_groups()
            || self.q.dims()[2] != layout.head_dim()
        {
            return Err(Error::Validation(
                "batch shapes do not match the supplied layout".into(),
            ));
        }
        Ok(())
    }

    /// Sub-batch over the given ascending 1-based positions.
    pub fn gather(&self, positions: &[usize]) -> Result<QkvBatch> {
        if positions.is_empty() {
            return Err(Error::EmptySequence);
        }
        let h = self.q.dims()[0];
        let g = self.k.dims()[0];
        let d = self.q.dims()[2];
        let m = positions.len();
        let mut q = Vec::with_capacity(h * m * d);
        for head in 0..h {
            for &t in positions {
                q.extend_from_slice(self.q_row(head, t));
            }
        }
        let mut k = Vec::with_capacity(g * m * d);
        let mut v = Vec::with_capacity(g * m * d);
        for group in 0..g {
            for &t in positions {
                k.extend_from_slice(self.k_row(group, t));
            }
            for &t in positions {
                v.extend_from_slice(self.v_row(group, t));
            }
        }
        Ok(QkvBatch {
            q: Tensor::new(vec![h, m, d], q)?,
            k: Tensor::new(vec![g, m, d], k)?,
            v: Tensor::new(vec![g, m, d], v)?,
            seq_len: m,
        })
    }
}

/// Scaled-dot-product attention of one query over explicit key/value rows.
/// Empty support returns a zero output and no probabilities.
pub(crate) fn attend(q: &[f32], keys: &[&[f32]], values: &[&[f32]]) -> (Vec<f32>, Vec<f64>) {
    let d = q.len();
    if keys.is_empty() {
        return (vec![0.0; d], Vec::new());
    }
    let scale = 1.0 / (d as f64).sqrt();
    let logits: Vec<f64> = keys.iter().map(|k| dot_f64(q, k) * scale).collect();
    let probs = softmax_f64(&logits);
    let mut acc = vec![0.0f64; d];
    for (p, vrow) in probs.iter().zip(values.iter()) {
        for (a, &x) in acc.iter_mut().zip(vrow.iter()) {
            *a += p * x as f64;
        }
    }
    (acc.into_iter().map(|x| x as f32).collect(), probs)
}

pub(crate) fn causal_row(
    batch: &QkvBatch,
    layout: &HeadLayout,
    head: usize,
    t: usize,
) -> (Vec<f32>, Vec<f64>) {
    let group = layout.group_of_head0(head);
    let keys: Vec<&[f32]> = (1..=t).map(|p| batch.k_row(group, p)).collect();
    let values: Vec<&[f32]> = (1..=t).map(|p| batch.v_row(group, p)).collect();
    attend(batch.q_row(head, t), &keys, &values)
}

/// Causal GQA over the whole batch: output is [heads x L x d].
pub fn dense_causal_attention(batch: &QkvBatch, layout: &HeadLayout) -> Result<Tensor> {
    batch.check_layout(layout)?;
    if batch.seq_len() == 0 {
        return Err(Error::EmptySequence);
    }
    let h = layout.query_heads();
    let l = batch.seq_len();
    let d = layout.head_dim();
    let rows: Vec<Vec<f32>> = parallel::pool().install(|| {
        (0..h * l)
            .into_par_iter()
            .map(|idx| causal_row(batch, layout, idx / l, idx % l + 1).0)
            .collect()
    });
    let mut out = Tensor::zeros(vec![h, l, d])?;
    for (idx, row) in rows.iter().enumerate() {
        out.set_row3(idx / l, idx % l, row);
    }
    Ok(out)
}

/// Attention probabilities of one dense causal row (keys 1..=t).
pub fn dense_row_probs(
    batch: &QkvBatch,
    layout: &HeadLayout,
    head: usize,
    t: usize,
) -> Result<Vec<f64>> {
    batch.check_layout(layout)?;
    if t == 0 || t > batch.seq_len() {
        return Err(Error::IndexOutOfRange {
            index: t,
            len: batch.seq_len(),
        });
    }
    Ok(causal_row(batch, layout, head, t).1)
}

/// Concatenate per-head outputs: row t becomes [head1 | head2 | ...].
pub fn concat_heads(heads: &[Tensor]) -> Result<Tensor> {
    if heads.is_empty() {
        return Err(Error::Validation("no heads to concatenate".into()));
    }
    let dims = heads[0].dims().to_vec();
    if dims.len() != 2 {
        return Err(Error::Validation(format!(
            "per-head output must be 2-D, got {dims:?}"
        )));
    }
    for t in heads.iter().skip(1) {
        if t.dims() != dims {
            return Err(Error::shape(&dims, t.dims(), "per-head output shapes"));
        }
    }
    let (l, d) = (dims[0], dims[1]);
    let mut data = Vec::with_capacity(l * d * heads.len());
    for r in 0..l {
        for head in heads {
            data.extend_from_slice(head.row2(r));
        }
    }
    Tensor::new(vec![l, d * heads.len()], data)
}

/// Inverse of `concat_heads`.
pub fn split_heads(t: &Tensor, heads: usize) -> Result<Vec<Tensor>> {
    if t.dims().len() != 2 || heads == 0 || t.dims()[1] % heads != 0 {
        return Err(Error::Validation(format!(
            "cannot split {:?} into {heads} heads",
            t.dims()
        )));
    }
    let (l, width) = (t.dims()[0], t.dims()[1]);
    let d = width / heads;
    let mut out = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut data = Vec::with_capacity(l * d);
        for r in 0..l {
            let row = t.row2(r);
            data.extend_from_slice(&row[h * d..(h + 1) * d]);
        }
        out.push(Tensor::new(vec![l, d], data)?);
    }
    Ok(out)
}

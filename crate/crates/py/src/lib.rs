//! Python bindings: budget arithmetic, the core kernels on flat lists, and a
//! small engine wrapper for dense-vs-sparse parity experiments.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use vnsa_core::analysis;
use vnsa_core::branches::{self, SparseConfig};
use vnsa_core::dense::{self, HeadLayout};
use vnsa_core::fixtures::seeded_batch;
use vnsa_core::gating::{nsa_attention, GateValues};
use vnsa_core::tensor;

fn err(e: vnsa_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Key-value pairs visible per query: blocks * block_size + window.
#[pyfunction]
fn attention_budget(blocks: u64, block_size: u64, window: u64) -> u64 {
    analysis::attention_budget(blocks, block_size, window)
}

/// Fraction of the dense causal edge count: 2 * budget / (L - 1).
#[pyfunction]
fn attention_fraction(blocks: u64, block_size: u64, window: u64, context_len: u64) -> PyResult<f64> {
    analysis::attention_fraction(blocks, block_size, window, context_len).map_err(err)
}

/// Vision context length from tokens-per-frame and frame count.
#[pyfunction]
fn info_context_length(tokens_per_frame: u64, frames: u64) -> u64 {
    analysis::info_context_length(tokens_per_frame, frames)
}

/// Numerically stable softmax with an optional keep-mask.
#[pyfunction]
#[pyo3(signature = (logits, mask=None))]
fn stable_softmax(logits: Vec<f32>, mask: Option<Vec<bool>>) -> PyResult<Vec<f32>> {
    tensor::stable_softmax(&logits, mask.as_deref()).map_err(err)
}

/// 1-based KV group of a 1-based query head: ceil(head * groups / heads).
#[pyfunction]
fn gqa_group_of_head(head: usize, heads: usize, kv_groups: usize) -> PyResult<usize> {
    let layout = HeadLayout::new(heads, kv_groups, 1).map_err(err)?;
    dense::gqa_group_of_head(head, &layout).map_err(err)
}

/// Analytic per-branch operation counts for a causal sweep:
/// (cmp_scores, slc_scores, slc_attended, win_attended).
#[pyfunction]
fn branch_op_counts(
    seq_len: usize,
    block_size: usize,
    select_blocks: usize,
    window: usize,
) -> PyResult<(u64, u64, u64, u64)> {
    let cfg = SparseConfig::new(block_size, select_blocks, window).map_err(err)?;
    let c = branches::branch_op_counts(seq_len, &cfg);
    Ok((c.cmp_scores, c.slc_scores, c.slc_attended, c.win_attended))
}

/// Sink flags plus the sink ratio for per-token mean received attention and
/// value norms; a token is a sink iff alpha > 0.1 and its norm falls below
/// median - 2*IQR.
#[pyfunction]
fn detect_sinks(alphas: Vec<f64>, vnorms: Vec<f64>) -> PyResult<(Vec<bool>, f64)> {
    let report = analysis::detect_sinks(&alphas, &vnorms).map_err(err)?;
    let flags = report.tokens.iter().map(|t| t.is_sink).collect();
    Ok((flags, report.sink_ratio))
}

/// Attention geometry bundle for parity experiments.
#[pyclass]
#[derive(Clone)]
struct EngineConfig {
    #[pyo3(get)]
    heads: usize,
    #[pyo3(get)]
    kv_groups: usize,
    #[pyo3(get)]
    head_dim: usize,
    #[pyo3(get)]
    block_size: usize,
    #[pyo3(get)]
    select_blocks: usize,
    #[pyo3(get)]
    window: usize,
}

#[pymethods]
impl EngineConfig {
    #[new]
    fn new(
        heads: usize,
        kv_groups: usize,
        head_dim: usize,
        block_size: usize,
        select_blocks: usize,
        window: usize,
    ) -> PyResult<Self> {
        HeadLayout::new(heads, kv_groups, head_dim).map_err(err)?;
        SparseConfig::new(block_size, select_blocks, window).map_err(err)?;
        Ok(Self {
            heads,
            kv_groups,
            head_dim,
            block_size,
            select_blocks,
            window,
        })
    }

    fn budget(&self) -> u64 {
        analysis::attention_budget(
            self.select_blocks as u64,
            self.block_size as u64,
            self.window as u64,
        )
    }

    fn fraction(&self, context_len: u64) -> PyResult<f64> {
        analysis::attention_fraction(
            self.select_blocks as u64,
            self.block_size as u64,
            self.window as u64,
            context_len,
        )
        .map_err(err)
    }

    fn op_counts(&self, seq_len: usize) -> PyResult<(u64, u64, u64, u64)> {
        branch_op_counts(seq_len, self.block_size, self.select_blocks, self.window)
    }

    /// Max-abs deviation of window-gated sparse attention from dense causal
    /// attention on a seeded batch of length `seq_len`.
    fn window_gate_dense_deviation(&self, seed: u64, seq_len: usize) -> PyResult<f64> {
        let layout = HeadLayout::new(self.heads, self.kv_groups, self.head_dim).map_err(err)?;
        let cfg =
            SparseConfig::new(self.block_size, self.select_blocks, self.window).map_err(err)?;
        let batch = seeded_batch(seed, &layout, seq_len).map_err(err)?;
        let gates = GateValues::constant(seq_len, self.heads, [0.0, 0.0, 1.0]).map_err(err)?;
        let sparse_out = nsa_attention(&batch, &layout, &cfg, &gates).map_err(err)?;
        let dense_out = dense::dense_causal_attention(&batch, &layout).map_err(err)?;
        Ok(sparse_out
            .data()
            .iter()
            .zip(dense_out.data().iter())
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .fold(0.0, f64::max))
    }
}

#[pymodule]
fn vnsa_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(attention_budget, m)?)?;
    m.add_function(wrap_pyfunction!(attention_fraction, m)?)?;
    m.add_function(wrap_pyfunction!(info_context_length, m)?)?;
    m.add_function(wrap_pyfunction!(stable_softmax, m)?)?;
    m.add_function(wrap_pyfunction!(gqa_group_of_head, m)?)?;
    m.add_function(wrap_pyfunction!(branch_op_counts, m)?)?;
    m.add_function(wrap_pyfunction!(detect_sinks, m)?)?;
    m.add_class::<EngineConfig>()?;
    Ok(())
}

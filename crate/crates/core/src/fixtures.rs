//! Seeded fixture generation.
//!
//! `generate` mirrors a projection pipeline: hidden states are drawn from the
//! seeded stream, then projected into Q/K/V with seeded square matrices. The
//! draw order is fixed (x, Wq, Wk, Wv, gate W1, b1, W2, b2) so a seed pins
//! every byte of every fixture.

use crate::dense::{HeadLayout, QkvBatch};
use crate::error::{Error, Result};
use crate::gating::GateParams;
use crate::rng::Rng64;
use crate::tensor::{matmul, seeded_uniform, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct FixtureSpec {
    pub seed: u64,
    pub seq_len: usize,
    pub hidden_width: usize,
    pub layout: HeadLayout,
}

#[derive(Debug, Clone)]
pub struct GeneratedFixtures {
    pub batch: QkvBatch,
    pub gate_params: GateParams,
    /// Per-token gate input: the concatenated per-head query row, [L x h*d].
    pub gate_inputs: Tensor,
}

/// Reshape [L x heads*d] row-concatenated heads into [heads x L x d].
fn split_rows_to_heads(t: &Tensor, heads: usize) -> Result<Tensor> {
    let l = t.dims()[0];
    let width = t.dims()[1];
    if width % heads != 0 {
        return Err(Error::Validation(format!(
            "width {width} not divisible by {heads} heads"
        )));
    }
    let d = width / heads;
    let mut data = Vec::with_capacity(l * width);
    for head in 0..heads {
        for r in 0..l {
            let row = t.row2(r);
            data.extend_from_slice(&row[head * d..(head + 1) * d]);
        }
    }
    Tensor::new(vec![heads, l, d], data)
}

/// Q/K/V drawn directly from the seeded stream (no projections); draw order
/// is Q, K, V.
pub fn seeded_batch(seed: u64, layout: &HeadLayout, seq_len: usize) -> Result<QkvBatch> {
    if seq_len == 0 {
        return Err(Error::EmptySequence);
    }
    let h = layout.query_heads();
    let g = layout.kv_groups();
    let d = layout.head_dim();
    let mut rng = Rng64::new(seed);
    let q = seeded_uniform(&mut rng, &[h, seq_len, d])?;
    let k = seeded_uniform(&mut rng, &[g, seq_len, d])?;
    let v = seeded_uniform(&mut rng, &[g, seq_len, d])?;
    QkvBatch::new(q, k, v, layout)
}

/// Full projection-style fixtures: hidden states, Q/K/V projections, and gate
/// parameters, all from one seed.
pub fn generate(spec: &FixtureSpec) -> Result<GeneratedFixtures> {
    if spec.seq_len == 0 {
        return Err(Error::EmptySequence);
    }
    let layout = &spec.layout;
    let h = layout.query_heads();
    let g = layout.kv_groups();
    let d = layout.head_dim();
    let mut rng = Rng64::new(spec.seed);

    let x = seeded_uniform(&mut rng, &[spec.seq_len, spec.hidden_width])?;
    let w_q = seeded_uniform(&mut rng, &[spec.hidden_width, h * d])?;
    let w_k = seeded_uniform(&mut rng, &[spec.hidden_width, g * d])?;
    let w_v = seeded_uniform(&mut rng, &[spec.hidden_width, g * d])?;

    let q2 = matmul(&x, &w_q)?;
    let k2 = matmul(&x, &w_k)?;
    let v2 = matmul(&x, &w_v)?;

    let q = split_rows_to_heads(&q2, h)?;
    let k = split_rows_to_heads(&k2, g)?;
    let v = split_rows_to_heads(&v2, g)?;
    let batch = QkvBatch::new(q, k, v, layout)?;

    let gate_params = GateParams::seeded(&mut rng, h * d, h * d, h)?;

    Ok(GeneratedFixtures {
        batch,
        gate_params,
        gate_inputs: q2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_seed_deterministic() {
        let layout = HeadLayout::new(2, 1, 3).unwrap();
        let spec = FixtureSpec {
            seed: 5,
            seq_len: 4,
            hidden_width: 6,
            layout,
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.batch.q().data(), b.batch.q().data());
        assert_eq!(a.gate_inputs.data(), b.gate_inputs.data());

        let other = generate(&FixtureSpec { seed: 6, ..spec }).unwrap();
        assert_ne!(a.batch.q().data(), other.batch.q().data());
    }

    #[test]
    fn gate_inputs_concatenate_per_head_queries() {
        let layout = HeadLayout::new(2, 2, 3).unwrap();
        let spec = FixtureSpec {
            seed: 9,
            seq_len: 3,
            hidden_width: 6,
            layout,
        };
        let fx = generate(&spec).unwrap();
        for t in 1..=3 {
            let row = fx.gate_inputs.row2(t - 1);
            assert_eq!(&row[0..3], fx.batch.q_row(0, t));
            assert_eq!(&row[3..6], fx.batch.q_row(1, t));
        }
    }

    #[test]
    fn zero_length_sequences_are_rejected() {
        let layout = HeadLayout::new(2, 1, 3).unwrap();
        assert!(matches!(
            seeded_batch(1, &layout, 0),
            Err(Error::EmptySequence)
        ));
    }
}

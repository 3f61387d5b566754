//! Learnable gate (two-layer MLP with sigmoid output), the gated three-branch
//! fusion, and the hybrid layer that routes vision positions through the
//! sparse branches and text positions through dense GQA.

use rayon::prelude::*;

use crate::branches::{run_branches, Branch, SparseConfig};
use crate::dense::{causal_row, concat_heads, HeadLayout, QkvBatch};
use crate::error::{Error, Result};
use crate::parallel;
use crate::rng::Rng64;
use crate::tensor::{seeded_uniform, Tensor};

/// Two-layer gate MLP: hidden = relu(x W1 + b1), out = sigmoid(hidden W2 + b2),
/// with output width 3 branches x heads.
#[derive(Debug, Clone)]
pub struct GateParams {
    w1: Tensor,
    b1: Vec<f32>,
    w2: Tensor,
    b2: Vec<f32>,
}

impl GateParams {
    pub fn new(w1: Tensor, b1: Vec<f32>, w2: Tensor, b2: Vec<f32>) -> Result<Self> {
        if w1.dims().len() != 2 || w2.dims().len() != 2 {
            return Err(Error::shape(w1.dims(), w2.dims(), "gate weights must be 2-D"));
        }
        if w1.dims()[1] != b1.len() {
            return Err(Error::shape(w1.dims(), &[b1.len()], "W1 vs b1"));
        }
        if w2.dims()[0] != w1.dims()[1] {
            return Err(Error::shape(w1.dims(), w2.dims(), "W1 output vs W2 input"));
        }
        if w2.dims()[1] != b2.len() {
            return Err(Error::shape(w2.dims(), &[b2.len()], "W2 vs b2"));
        }
        if b2.len() % 3 != 0 {
            return Err(Error::Validation(format!(
                "gate output width {} is not 3 x heads",
                b2.len()
            )));
        }
        Ok(Self { w1, b1, w2, b2 })
    }

    pub fn seeded(rng: &mut Rng64, input_width: usize, hidden_width: usize, heads: usize) -> Result<Self> {
        let w1 = seeded_uniform(rng, &[input_width, hidden_width])?;
        let b1 = seeded_uniform(rng, &[hidden_width])?.data().to_vec();
        let w2 = seeded_uniform(rng, &[hidden_width, 3 * heads])?;
        let b2 = seeded_uniform(rng, &[3 * heads])?.data().to_vec();
        Self::new(w1, b1, w2, b2)
    }

    pub fn input_width(&self) -> usize {
        self.w1.dims()[0]
    }

    pub fn hidden_width(&self) -> usize {
        self.w1.dims()[1]
    }

    pub fn output_width(&self) -> usize {
        self.b2.len()
    }

    pub fn heads(&self) -> usize {
        self.b2.len() / 3
    }

    pub fn w1(&self) -> &Tensor {
        &self.w1
    }

    pub fn b1(&self) -> &[f32] {
        &self.b1
    }

    pub fn w2(&self) -> &Tensor {
        &self.w2
    }

    pub fn b2(&self) -> &[f32] {
        &self.b2
    }

    /// Store one fixture file per parameter: W1.vnsa, b1.vnsa, W2.vnsa, b2.vnsa.
    pub fn save_dir(&self, dir: impl AsRef<std::path::Path>) -> Result<()> {
        let dir = dir.as_ref();
        crate::io::write_tensor(dir.join("W1.vnsa"), &self.w1)?;
        crate::io::write_tensor(
            dir.join("b1.vnsa"),
            &Tensor::new(vec![self.b1.len()], self.b1.clone())?,
        )?;
        crate::io::write_tensor(dir.join("W2.vnsa"), &self.w2)?;
        crate::io::write_tensor(
            dir.join("b2.vnsa"),
            &Tensor::new(vec![self.b2.len()], self.b2.clone())?,
        )?;
        Ok(())
    }

    pub fn load_dir(dir: impl AsRef<std::path::Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let w1 = crate::io::read_tensor(dir.join("W1.vnsa"))?;
        let b1 = crate::io::read_tensor(dir.join("b1.vnsa"))?.data().to_vec();
        let w2 = crate::io::read_tensor(dir.join("W2.vnsa"))?;
        let b2 = crate::io::read_tensor(dir.join("b2.vnsa"))?.data().to_vec();
        Self::new(w1, b1, w2, b2)
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Round a sigmoid output to f32 while keeping it inside the open interval.
fn round_unit_open(v: f64) -> f32 {
    let f = v as f32;
    if f >= 1.0 {
        1.0 - f32::EPSILON / 2.0
    } else if f <= 0.0 {
        f32::MIN_POSITIVE
    } else {
        f
    }
}

/// Gate forward pass in f64 throughout, without the final f32 rounding.
/// Gradient checks difference this map directly.
pub fn gate_forward_f64(x: &[f32], params: &GateParams) -> Result<Vec<f64>> {
    if x.len() != params.input_width() {
        return Err(Error::shape(
            &[x.len()],
            &[params.input_width()],
            "gate input width",
        ));
    }
    let d_h = params.hidden_width();
    let out_w = params.output_width();
    let mut hidden = vec![0.0f64; d_h];
    for j in 0..d_h {
        let mut acc = params.b1[j] as f64;
        for (i, &xi) in x.iter().enumerate() {
            acc += xi as f64 * params.w1.data()[i * d_h + j] as f64;
        }
        hidden[j] = acc.max(0.0);
    }
    let mut out = vec![0.0f64; out_w];
    for (j, o) in out.iter_mut().enumerate() {
        let mut acc = params.b2[j] as f64;
        for (i, &hi) in hidden.iter().enumerate() {
            acc += hi * params.w2.data()[i * out_w + j] as f64;
        }
        *o = sigmoid(acc);
    }
    Ok(out)
}

/// One token's gate row: 3*heads sigmoid values laid out head-major
/// (cmp, slc, win per head), every entry strictly inside (0, 1).
pub fn gate_forward(x: &[f32], params: &GateParams) -> Result<Vec<f32>> {
    Ok(gate_forward_f64(x, params)?
        .into_iter()
        .map(round_unit_open)
        .collect())
}

/// Analytic gradients of the gate forward map.
#[derive(Debug, Clone)]
pub struct GateGrads {
    pub x: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Backpropagate `upstream` (length 3*heads) through the gate MLP.
/// The relu subgradient at exactly 0 is 0.
pub fn gate_backward(x: &[f32], params: &GateParams, upstream: &[f64]) -> Result<GateGrads> {
    if x.len() != params.input_width() {
        return Err(Error::shape(
            &[x.len()],
            &[params.input_width()],
            "gate input width",
        ));
    }
    if upstream.len() != params.output_width() {
        return Err(Error::shape(
            &[upstream.len()],
            &[params.output_width()],
            "gate upstream width",
        ));
    }
    let d_in = params.input_width();
    let d_h = params.hidden_width();
    let out_w = params.output_width();

    let mut hidden_pre = vec![0.0f64; d_h];
    for j in 0..d_h {
        let mut acc = params.b1[j] as f64;
        for (i, &xi) in x.iter().enumerate() {
            acc += xi as f64 * params.w1.data()[i * d_h + j] as f64;
        }
        hidden_pre[j] = acc;
    }
    let hidden: Vec<f64> = hidden_pre.iter().map(|&z| z.max(0.0)).collect();
    let mut out = vec![0.0f64; out_w];
    for (j, o) in out.iter_mut().enumerate() {
        let mut acc = params.b2[j] as f64;
        for (i, &hi) in hidden.iter().enumerate() {
            acc += hi * params.w2.data()[i * out_w + j] as f64;
        }
        *o = sigmoid(acc);
    }

    let d_opre: Vec<f64> = (0..out_w)
        .map(|j| upstream[j] * out[j] * (1.0 - out[j]))
        .collect();
    let b2_grad = d_opre.clone();
    let mut w2_grad = vec![0.0f64; d_h * out_w];
    let mut d_hidden = vec![0.0f64; d_h];
    for i in 0..d_h {
        for j in 0..out_w {
            w2_grad[i * out_w + j] = hidden[i] * d_opre[j];
            d_hidden[i] += params.w2.data()[i * out_w + j] as f64 * d_opre[j];
        }
    }
    let d_hpre: Vec<f64> = (0..d_h)
        .map(|i| if hidden_pre[i] > 0.0 { d_hidden[i] } else { 0.0 })
        .collect();
    let b1_grad = d_hpre.clone();
    let mut w1_grad = vec![0.0f64; d_in * d_h];
    let mut x_grad = vec![0.0f64; d_in];
    for i in 0..d_in {
        for j in 0..d_h {
            w1_grad[i * d_h + j] = x[i] as f64 * d_hpre[j];
            x_grad[i] += params.w1.data()[i * d_h + j] as f64 * d_hpre[j];
        }
    }
    Ok(GateGrads {
        x: x_grad,
        w1: w1_grad,
        b1: b1_grad,
        w2: w2_grad,
        b2: b2_grad,
    })
}

/// Per-token, per-head, per-branch gate weights in [0, 1]. Values produced by
/// the gate MLP are strictly interior; the closed bounds exist so constant
/// masking gates (0 or 1) can drive the fusion in tests and tools.
#[derive(Debug, Clone, PartialEq)]
pub struct GateValues {
    seq_len: usize,
    heads: usize,
    data: Vec<f32>,
}

impl GateValues {
    pub fn new(seq_len: usize, heads: usize, data: Vec<f32>) -> Result<Self> {
        if seq_len == 0 || heads == 0 {
            return Err(Error::Validation("gate values need tokens and heads".into()));
        }
        if data.len() != seq_len * heads * 3 {
            return Err(Error::shape(
                &[data.len()],
                &[seq_len * heads * 3],
                "gate values length",
            ));
        }
        for &v in &data {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!("gate value {v} outside [0, 1]")));
            }
        }
        Ok(Self {
            seq_len,
            heads,
            data,
        })
    }

    pub fn constant(seq_len: usize, heads: usize, triple: [f32; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(seq_len * heads * 3);
        for _ in 0..seq_len * heads {
            data.extend_from_slice(&triple);
        }
        Self::new(seq_len, heads, data)
    }

    /// Gate rows computed by the MLP for each row of `inputs` ([L x d_in]).
    pub fn from_params(params: &GateParams, inputs: &Tensor) -> Result<Self> {
        if inputs.dims().len() != 2 || inputs.dims()[1] != params.input_width() {
            return Err(Error::shape(
                inputs.dims(),
                &[0, params.input_width()],
                "gate inputs vs params",
            ));
        }
        let l = inputs.dims()[0];
        let mut data = Vec::with_capacity(l * params.output_width());
        for t in 0..l {
            data.extend(gate_forward(inputs.row2(t), params)?);
        }
        Self::new(l, params.heads(), data)
    }

    /// Seeded gates in [0.45, 0.55), handy for statistics fixtures.
    pub fn seeded(seed: u64, seq_len: usize, heads: usize) -> Result<Self> {
        let mut rng = Rng64::new(seed);
        let data: Vec<f32> = (0..seq_len * heads * 3)
            .map(|_| 0.5 + rng.next_unit())
            .collect();
        Self::new(seq_len, heads, data)
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Gate for 1-based position t, 0-based head.
    pub fn get(&self, t: usize, head: usize, branch: Branch) -> f32 {
        self.data[((t - 1) * self.heads + head) * 3 + branch.index()]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Rows at the given ascending 1-based positions.
    pub fn gather(&self, positions: &[usize]) -> Result<Self> {
        let stride = self.heads * 3;
        let mut data = Vec::with_capacity(positions.len() * stride);
        for &t in positions {
            data.extend_from_slice(&self.data[(t - 1) * stride..t * stride]);
        }
        Self::new(positions.len(), self.heads, data)
    }
}

/// Gated fusion of the three branch outputs:
/// out = g_cmp * o_cmp + g_slc * o_slc + g_win * o_win per head and position.
pub fn nsa_attention(
    batch: &QkvBatch,
    layout: &HeadLayout,
    cfg: &SparseConfig,
    gates: &GateValues,
) -> Result<Tensor> {
    if gates.seq_len() != batch.seq_len() || gates.heads() != layout.query_heads() {
        return Err(Error::Validation(format!(
            "gates cover {}x{} but batch needs {}x{}",
            gates.seq_len(),
            gates.heads(),
            batch.seq_len(),
            layout.query_heads()
        )));
    }
    let runs = run_branches(batch, layout, cfg)?;
    let h = layout.query_heads();
    let l = batch.seq_len();
    let d = layout.head_dim();
    let mut out = Tensor::zeros(vec![h, l, d])?;
    for head in 0..h {
        for t in 1..=l {
            let g_cmp = gates.get(t, head, Branch::Compression) as f64;
            let g_slc = gates.get(t, head, Branch::Selection) as f64;
            let g_win = gates.get(t, head, Branch::Window) as f64;
            let cmp = runs.compression.row3(head, t - 1);
            let slc = runs.selection.row3(head, t - 1);
            let win = runs.window.row3(head, t - 1);
            let row: Vec<f32> = (0..d)
                .map(|j| {
                    (g_cmp * cmp[j] as f64 + g_slc * slc[j] as f64 + g_win * win[j] as f64) as f32
                })
                .collect();
            out.set_row3(head, t - 1, &row);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Vision,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    /// 1-based inclusive bounds.
    pub start: usize,
    pub end: usize,
    pub modality: Modality,
}

/// Ordered, disjoint spans covering 1..=L exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalitySpans {
    spans: Vec<Span>,
    seq_len: usize,
}

impl ModalitySpans {
    pub fn new(spans: Vec<Span>, seq_len: usize) -> Result<Self> {
        if spans.is_empty() || seq_len == 0 {
            return Err(Error::Validation("spans must cover a non-empty sequence".into()));
        }
        let mut expected_start = 1;
        for s in &spans {
            if s.start != expected_start || s.end < s.start {
                return Err(Error::Validation(format!(
                    "spans must be ascending, disjoint, and gap-free; got {}..={} where {} was expected",
                    s.start, s.end, expected_start
                )));
            }
            expected_start = s.end + 1;
        }
        if expected_start != seq_len + 1 {
            return Err(Error::Validation(format!(
                "spans cover 1..={} but the sequence has length {seq_len}",
                expected_start - 1
            )));
        }
        Ok(Self { spans, seq_len })
    }

    pub fn uniform(seq_len: usize, modality: Modality) -> Result<Self> {
        Self::new(
            vec![Span {
                start: 1,
                end: seq_len,
                modality,
            }],
            seq_len,
        )
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn positions(&self, modality: Modality) -> Vec<usize> {
        let mut out = Vec::new();
        for s in &self.spans {
            if s.modality == modality {
                out.extend(s.start..=s.end);
            }
        }
        out
    }
}

/// Hybrid layer: vision positions attend through the gated sparse branches
/// over the preceding vision subsequence; text positions attend densely over
/// the full preceding sequence. Outputs are re-interleaved into token order
/// and head-concatenated into [L x heads*d].
pub fn hybrid_layer_attention(
    batch: &QkvBatch,
    layout: &HeadLayout,
    cfg: &SparseConfig,
    gates: &GateValues,
    spans: &ModalitySpans,
) -> Result<Tensor> {
    batch.check_layout(layout)?;
    if spans.seq_len() != batch.seq_len() {
        return Err(Error::Validation(format!(
            "spans cover {} tokens but the batch has {}",
            spans.seq_len(),
            batch.seq_len()
        )));
    }
    if gates.seq_len() != batch.seq_len() || gates.heads() != layout.query_heads() {
        return Err(Error::Validation("gates must cover every (position, head)".into()));
    }
    let h = layout.query_heads();
    let l = batch.seq_len();
    let d = layout.head_dim();
    let vision = spans.positions(Modality::Vision);
    let text = spans.positions(Modality::Text);

    let mut per_head = Tensor::zeros(vec![h, l, d])?;

    if !vision.is_empty() {
        let sub_batch = batch.gather(&vision)?;
        let sub_gates = gates.gather(&vision)?;
        let nsa = nsa_attention(&sub_batch, layout, cfg, &sub_gates)?;
        for head in 0..h {
            for (i, &t) in vision.iter().enumerate() {
                per_head.set_row3(head, t - 1, nsa.row3(head, i));
            }
        }
    }

    if !text.is_empty() {
        let rows: Vec<(usize, Vec<Vec<f32>>)> = parallel::pool().install(|| {
            text.par_iter()
                .map(|&t| {
                    let heads: Vec<Vec<f32>> = (0..h)
                        .map(|head| causal_row(batch, layout, head, t).0)
                        .collect();
                    (t, heads)
                })
                .collect()
        });
        for (t, heads) in rows {
            for (head, row) in heads.into_iter().enumerate() {
                per_head.set_row3(head, t - 1, &row);
            }
        }
    }

    let head_tensors: Vec<Tensor> = (0..h).map(|head| per_head.outer_slice(head)).collect();
    concat_heads(&head_tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::dense_causal_attention;
    use crate::fixtures::seeded_batch;

    fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (*x as f64 - *y as f64).abs())
            .fold(0.0, f64::max)
    }

    fn zero_params(d_in: usize, d_h: usize, heads: usize) -> GateParams {
        GateParams::new(
            Tensor::zeros(vec![d_in, d_h]).unwrap(),
            vec![0.0; d_h],
            Tensor::zeros(vec![d_h, 3 * heads]).unwrap(),
            vec![0.0; 3 * heads],
        )
        .unwrap()
    }

    #[test]
    fn zero_parameters_give_half_gates() {
        let p = zero_params(4, 4, 2);
        let out = gate_forward(&[0.3, -0.2, 0.1, 0.0], &p).unwrap();
        assert_eq!(out, vec![0.5; 6]);
    }

    #[test]
    fn large_bias_saturates_toward_one() {
        let mut p = zero_params(2, 2, 1);
        p.b2[0] = 20.0;
        let out = gate_forward(&[0.0, 0.0], &p).unwrap();
        assert!((out[0] as f64 - 1.0).abs() < 1e-6);
        assert!(out[0] < 1.0, "gate must stay inside the open interval");
    }

    #[test]
    fn forward_matches_naive_extended_precision_oracle() {
        let mut rng = Rng64::new(77);
        let p = GateParams::seeded(&mut rng, 4, 5, 2).unwrap();
        let x: Vec<f32> = (0..4).map(|_| rng.next_unit()).collect();
        let got = gate_forward(&x, &p).unwrap();

        let mut hidden = vec![0.0f64; 5];
        for j in 0..5 {
            let mut acc = p.b1()[j] as f64;
            for i in 0..4 {
                acc += x[i] as f64 * p.w1().data()[i * 5 + j] as f64;
            }
            hidden[j] = acc.max(0.0);
        }
        for j in 0..6 {
            let mut acc = p.b2()[j] as f64;
            for i in 0..5 {
                acc += hidden[i] * p.w2().data()[i * 6 + j] as f64;
            }
            let want = 1.0 / (1.0 + (-acc).exp());
            assert!((got[j] as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_outputs_stay_strictly_inside_unit_interval() {
        let mut rng = Rng64::new(123);
        let p = GateParams::seeded(&mut rng, 6, 6, 2).unwrap();
        for _ in 0..20 {
            let x: Vec<f32> = (0..6).map(|_| rng.next_unit()).collect();
            for g in gate_forward(&x, &p).unwrap() {
                assert!(g > 0.0 && g < 1.0);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Rng64::new(5);
        let p = GateParams::seeded(&mut rng, 3, 3, 1).unwrap();
        let x: Vec<f32> = (0..3).map(|_| rng.next_unit()).collect();
        let g = gate_backward(&x, &p, &vec![0.0; 3]).unwrap();
        assert!(g.x.iter().all(|&v| v == 0.0));
        assert!(g.w1.iter().all(|&v| v == 0.0));
        assert!(g.b1.iter().all(|&v| v == 0.0));
        assert!(g.w2.iter().all(|&v| v == 0.0));
        assert!(g.b2.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_subgradient_at_exact_zero_is_zero() {
        // x = 0 and b1 = 0 put every hidden pre-activation at exactly 0.
        let mut p = zero_params(2, 2, 1);
        p.w2 = Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap();
        let g = gate_backward(&[0.0, 0.0], &p, &[1.0, 1.0, 1.0]).unwrap();
        assert!(g.b1.iter().all(|&v| v == 0.0));
        assert!(g.w1.iter().all(|&v| v == 0.0));
        assert!(g.b2.iter().all(|&v| v != 0.0));
    }

    #[test]
    fn saturated_gate_gradient_is_negligible() {
        let mut p = zero_params(2, 2, 1);
        p.b2[0] = 25.0;
        let g = gate_backward(&[0.1, -0.1], &p, &[1.0, 0.0, 0.0]).unwrap();
        assert!(g.b2[0].abs() < 1e-6, "saturated gradient {}", g.b2[0]);
    }

    // Central differences against the f64 forward map, dividing by the
    // realized f32 step. Hidden biases are pushed away from 0 so no relu
    // pre-activation sits within the differencing step of the kink.
    fn finite_difference_check(seed: u64) -> (usize, usize) {
        let mut rng = Rng64::new(seed);
        let mut p = GateParams::seeded(&mut rng, 4, 4, 2).unwrap();
        for (j, b) in p.b1.iter_mut().enumerate() {
            *b += if j % 2 == 0 { 0.35 } else { -0.35 };
        }
        let x: Vec<f32> = (0..4).map(|_| rng.next_unit()).collect();
        let upstream: Vec<f64> = (0..6).map(|_| rng.next_unit() as f64 * 20.0).collect();
        let grads = gate_backward(&x, &p, &upstream).unwrap();

        let objective = |p: &GateParams, x: &[f32]| -> f64 {
            gate_forward_f64(x, p)
                .unwrap()
                .iter()
                .zip(upstream.iter())
                .map(|(o, u)| o * u)
                .sum()
        };

        let step = 1e-3f32;
        let mut checked = 0usize;
        let mut failed = 0usize;
        let mut check = |analytic: f64, plus: f64, minus: f64, realized: f64| {
            let fd = (plus - minus) / realized;
            let tol = 1e-6f64.max(1e-3 * analytic.abs().max(fd.abs()));
            checked += 1;
            if (fd - analytic).abs() > tol {
                failed += 1;
            }
        };

        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += step;
            xm[i] -= step;
            let realized = xp[i] as f64 - xm[i] as f64;
            check(grads.x[i], objective(&p, &xp), objective(&p, &xm), realized);
        }
        for i in 0..p.w1.len() {
            let mut pp = p.clone();
            let mut pm = p.clone();
            pp.w1.data_mut()[i] += step;
            pm.w1.data_mut()[i] -= step;
            let realized = pp.w1.data()[i] as f64 - pm.w1.data()[i] as f64;
            check(grads.w1[i], objective(&pp, &x), objective(&pm, &x), realized);
        }
        for i in 0..p.b1.len() {
            let mut pp = p.clone();
            let mut pm = p.clone();
            pp.b1[i] += step;
            pm.b1[i] -= step;
            let realized = pp.b1[i] as f64 - pm.b1[i] as f64;
            check(grads.b1[i], objective(&pp, &x), objective(&pm, &x), realized);
        }
        for i in 0..p.w2.len() {
            let mut pp = p.clone();
            let mut pm = p.clone();
            pp.w2.data_mut()[i] += step;
            pm.w2.data_mut()[i] -= step;
            let realized = pp.w2.data()[i] as f64 - pm.w2.data()[i] as f64;
            check(grads.w2[i], objective(&pp, &x), objective(&pm, &x), realized);
        }
        for i in 0..p.b2.len() {
            let mut pp = p.clone();
            let mut pm = p.clone();
            pp.b2[i] += step;
            pm.b2[i] -= step;
            let realized = pp.b2[i] as f64 - pm.b2[i] as f64;
            check(grads.b2[i], objective(&pp, &x), objective(&pm, &x), realized);
        }
        (checked, failed)
    }

    #[test]
    fn analytic_gradients_match_central_differences() {
        for seed in 300..305 {
            let (checked, failed) = finite_difference_check(seed);
            assert!(checked > 0);
            assert_eq!(failed, 0, "seed {seed}: {failed}/{checked} entries failed");
        }
    }

    #[test]
    fn gate_masking_reduces_to_single_branches() {
        let layout = HeadLayout::new(2, 1, 4).unwrap();
        let cfg = SparseConfig::new(4, 2, 6).unwrap();
        let batch = seeded_batch(81, &layout, 16).unwrap();
        let runs = run_branches(&batch, &layout, &cfg).unwrap();

        let only_cmp = GateValues::constant(16, 2, [1.0, 0.0, 0.0]).unwrap();
        let out = nsa_attention(&batch, &layout, &cfg, &only_cmp).unwrap();
        assert_eq!(out.data(), runs.compression.data());

        let only_win = GateValues::constant(16, 2, [0.0, 0.0, 1.0]).unwrap();
        let out = nsa_attention(&batch, &layout, &cfg, &only_win).unwrap();
        assert_eq!(out.data(), runs.window.data());
    }

    #[test]
    fn window_gate_with_full_window_matches_dense() {
        let layout = HeadLayout::new(2, 1, 4).unwrap();
        let cfg = SparseConfig::new(4, 2, 32).unwrap();
        let batch = seeded_batch(83, &layout, 16).unwrap();
        let gates = GateValues::constant(16, 2, [0.0, 0.0, 1.0]).unwrap();
        let out = nsa_attention(&batch, &layout, &cfg, &gates).unwrap();
        let dense = dense_causal_attention(&batch, &layout).unwrap();
        assert!(max_abs_diff(out.data(), dense.data()) < 1e-5);
    }

    #[test]
    fn equal_thirds_at_unit_blocks_match_dense() {
        // Block size 1 makes all three branches full-support and identical to
        // dense at every position; averaging with weights summing to 1 then
        // reproduces dense.
        let layout = HeadLayout::new(2, 1, 4).unwrap();
        let l = 12;
        let cfg = SparseConfig::new(1, l, l).unwrap();
        let batch = seeded_batch(87, &layout, l).unwrap();
        let third = 1.0f32 / 3.0;
        let gates = GateValues::constant(l, 2, [third, third, third]).unwrap();
        let out = nsa_attention(&batch, &layout, &cfg, &gates).unwrap();
        let dense = dense_causal_attention(&batch, &layout).unwrap();
        assert!(max_abs_diff(out.data(), dense.data()) < 2e-5);
    }

    #[test]
    fn fusion_is_linear_in_the_gates() {
        let layout = HeadLayout::new(2, 1, 4).unwrap();
        let cfg = SparseConfig::new(4, 1, 4).unwrap();
        let batch = seeded_batch(91, &layout, 12).unwrap();
        let gates = GateValues::seeded(17, 12, 2).unwrap();
        let lambda = 0.5f32;
        let scaled_data: Vec<f32> = gates.data().iter().map(|g| g * lambda).collect();
        let scaled = GateValues::new(12, 2, scaled_data).unwrap();
        let base = nsa_attention(&batch, &layout, &cfg, &gates).unwrap();
        let out = nsa_attention(&batch, &layout, &cfg, &scaled).unwrap();
        for (a, b) in out.data().iter().zip(base.data().iter()) {
            assert!((*a as f64 - lambda as f64 * *b as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn spans_must_cover_without_gaps_or_overlap() {
        let v = |s, e| Span {
            start: s,
            end: e,
            modality: Modality::Vision,
        };
        assert!(ModalitySpans::new(vec![v(1, 4), v(5, 8)], 8).is_ok());
        assert!(ModalitySpans::new(vec![v(1, 4), v(6, 8)], 8).is_err());
        assert!(ModalitySpans::new(vec![v(1, 4), v(4, 8)], 8).is_err());
        assert!(ModalitySpans::new(vec![v(1, 4)], 8).is_err());
        assert!(ModalitySpans::new(vec![v(2, 8)], 8).is_err());
    }

    #[test]
    fn all_text_hybrid_is_exactly_dense_gqa() {
        let layout = HeadLayout::new(2, 2, 4).unwrap();
        let cfg = SparseConfig::new(4, 2, 4).unwrap();
        let batch = seeded_batch(95, &layout, 10).unwrap();
        let gates = GateValues::seeded(3, 10, 2).unwrap();
        let spans = ModalitySpans::uniform(10, Modality::Text).unwrap();
        let hybrid = hybrid_layer_attention(&batch, &layout, &cfg, &gates, &spans).unwrap();

        let dense = dense_causal_attention(&batch, &layout).unwrap();
        let heads: Vec<Tensor> = (0..2).map(|h| dense.outer_slice(h)).collect();
        let expected = concat_heads(&heads).unwrap();
        let a: Vec<u32> = hybrid.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = expected.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn all_vision_full_support_matches_dense() {
        let layout = HeadLayout::new(2, 1, 4).unwrap();
        let l = 8;
        let cfg = SparseConfig::new(1, l, l).unwrap();
        let batch = seeded_batch(97, &layout, l).unwrap();
        let third = 1.0f32 / 3.0;
        let gates = GateValues::constant(l, 2, [third, third, third]).unwrap();
        let spans = ModalitySpans::uniform(l, Modality::Vision).unwrap();
        let hybrid = hybrid_layer_attention(&batch, &layout, &cfg, &gates, &spans).unwrap();

        let dense = dense_causal_attention(&batch, &layout).unwrap();
        let heads: Vec<Tensor> = (0..2).map(|h| dense.outer_slice(h)).collect();
        let expected = concat_heads(&heads).unwrap();
        assert!(max_abs_diff(hybrid.data(), expected.data()) < 1e-5);
    }

    #[test]
    fn mixed_spans_compose_the_two_paths() {
        let layout = HeadLayout::new(2, 1, 4).unwrap();
        let cfg = SparseConfig::new(4, 1, 4).unwrap();
        let batch = seeded_batch(101, &layout, 12).unwrap();
        let gates = GateValues::seeded(7, 12, 2).unwrap();
        let spans = ModalitySpans::new(
            vec![
                Span {
                    start: 1,
                    end: 8,
                    modality: Modality::Vision,
                },
                Span {
                    start: 9,
                    end: 12,
                    modality: Modality::Text,
                },
            ],
            12,
        )
        .unwrap();
        let hybrid = hybrid_layer_attention(&batch, &layout, &cfg, &gates, &spans).unwrap();

        // Text rows match the dense oracle over the full sequence.
        let dense = dense_causal_attention(&batch, &layout).unwrap();
        for t in 9..=12 {
            for head in 0..2 {
                let got = &hybrid.row2(t - 1)[head * 4..(head + 1) * 4];
                assert!(max_abs_diff(got, dense.row3(head, t - 1)) < 1e-6);
            }
        }

        // Vision rows match a standalone gated run on the vision subsequence.
        let vis: Vec<usize> = (1..=8).collect();
        let sub = batch.gather(&vis).unwrap();
        let sub_gates = gates.gather(&vis).unwrap();
        let nsa = nsa_attention(&sub, &layout, &cfg, &sub_gates).unwrap();
        for (i, t) in (1..=8).enumerate() {
            for head in 0..2 {
                let got = &hybrid.row2(t - 1)[head * 4..(head + 1) * 4];
                assert!(max_abs_diff(got, nsa.row3(head, i)) < 1e-6);
            }
        }
    }

    #[test]
    fn hybrid_reinterleaving_is_a_permutation() {
        let layout = HeadLayout::new(2, 1, 3).unwrap();
        let cfg = SparseConfig::new(2, 1, 2).unwrap();
        let batch = seeded_batch(105, &layout, 10).unwrap();
        let gates = GateValues::seeded(8, 10, 2).unwrap();
        let spans = ModalitySpans::new(
            vec![
                Span {
                    start: 1,
                    end: 4,
                    modality: Modality::Vision,
                },
                Span {
                    start: 5,
                    end: 7,
                    modality: Modality::Text,
                },
                Span {
                    start: 8,
                    end: 10,
                    modality: Modality::Vision,
                },
            ],
            10,
        )
        .unwrap();
        let hybrid = hybrid_layer_attention(&batch, &layout, &cfg, &gates, &spans).unwrap();

        let vision = spans.positions(Modality::Vision);
        let sub = batch.gather(&vision).unwrap();
        let sub_gates = gates.gather(&vision).unwrap();
        let nsa = nsa_attention(&sub, &layout, &cfg, &sub_gates).unwrap();
        let dense = dense_causal_attention(&batch, &layout).unwrap();

        let mut expected_rows: Vec<Vec<u32>> = Vec::new();
        for (i, _) in vision.iter().enumerate() {
            let mut row = Vec::new();
            for head in 0..2 {
                row.extend(nsa.row3(head, i).iter().map(|v| v.to_bits()));
            }
            expected_rows.push(row);
        }
        for &t in &spans.positions(Modality::Text) {
            let mut row = Vec::new();
            for head in 0..2 {
                row.extend(dense.row3(head, t - 1).iter().map(|v| v.to_bits()));
            }
            expected_rows.push(row);
        }
        let mut got_rows: Vec<Vec<u32>> = (0..10)
            .map(|r| hybrid.row2(r).iter().map(|v| v.to_bits()).collect())
            .collect();
        expected_rows.sort();
        got_rows.sort();
        assert_eq!(expected_rows, got_rows);
    }

    #[test]
    fn hybrid_causality_end_to_end() {
        let layout = HeadLayout::new(2, 1, 3).unwrap();
        let cfg = SparseConfig::new(2, 1, 3).unwrap();
        let mut batch = seeded_batch(111, &layout, 10).unwrap();
        let gates = GateValues::seeded(9, 10, 2).unwrap();
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
        let before = hybrid_layer_attention(&batch, &layout, &cfg, &gates, &spans).unwrap();
        let p = 8;
        batch.k_row_mut(0, p)[1] += 5.0;
        batch.v_row_mut(0, p)[2] -= 3.0;
        let after = hybrid_layer_attention(&batch, &layout, &cfg, &gates, &spans).unwrap();
        for t in 0..p - 1 {
            let a: Vec<u32> = before.row2(t).iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = after.row2(t).iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "row {t} changed");
        }
    }

    #[test]
    fn gate_params_roundtrip_through_fixture_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng64::new(55);
        let p = GateParams::seeded(&mut rng, 4, 4, 2).unwrap();
        p.save_dir(dir.path()).unwrap();
        let back = GateParams::load_dir(dir.path()).unwrap();
        assert_eq!(p.w1().data(), back.w1().data());
        assert_eq!(p.b1(), back.b1());
        assert_eq!(p.w2().data(), back.w2().data());
        assert_eq!(p.b2(), back.b2());
    }
}

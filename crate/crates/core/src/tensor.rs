//! Row-major f32 tensors with 64-bit accumulation in every reduction.
//!
//! Every reduction walks its inputs in a fixed left-to-right order, so results
//! are bit-identical across runs and thread counts.

use crate::error::{Error, Result};
use crate::rng::Rng64;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(Error::Validation(format!(
                "tensor dims must be positive, got {dims:?}"
            )));
        }
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::Validation(format!(
                "data length {} does not match dims {:?} (expected {})",
                data.len(),
                dims,
                expected
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let n: usize = dims.iter().product();
        Self::new(dims, vec![0.0; n])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `r` of a 2-D tensor.
    pub fn row2(&self, r: usize) -> &[f32] {
        let cols = self.dims[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    /// Row `r` inside outer slice `outer` of a 3-D tensor.
    pub fn row3(&self, outer: usize, r: usize) -> &[f32] {
        let rows = self.dims[1];
        let cols = self.dims[2];
        let base = (outer * rows + r) * cols;
        &self.data[base..base + cols]
    }

    pub fn row3_mut(&mut self, outer: usize, r: usize) -> &mut [f32] {
        let rows = self.dims[1];
        let cols = self.dims[2];
        let base = (outer * rows + r) * cols;
        &mut self.data[base..base + cols]
    }

    pub fn set_row3(&mut self, outer: usize, r: usize, src: &[f32]) {
        self.row3_mut(outer, r).copy_from_slice(src);
    }

    /// Copy of outer slice `outer` of a 3-D tensor as a 2-D tensor.
    pub fn outer_slice(&self, outer: usize) -> Tensor {
        let rows = self.dims[1];
        let cols = self.dims[2];
        let base = outer * rows * cols;
        Tensor {
            dims: vec![rows, cols],
            data: self.data[base..base + rows * cols].to_vec(),
        }
    }
}

/// Dot product accumulated in f64, left to right.
pub(crate) fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += *x as f64 * *y as f64;
    }
    acc
}

/// Softmax over f64 logits: subtract the max, exponentiate, normalize left to right.
pub(crate) fn softmax_f64(logits: &[f64]) -> Vec<f64> {
    debug_assert!(!logits.is_empty());
    let mut max = f64::NEG_INFINITY;
    for &l in logits {
        if l > max {
            max = l;
        }
    }
    let mut exps = Vec::with_capacity(logits.len());
    let mut denom = 0.0f64;
    for &l in logits {
        let e = (l - max).exp();
        exps.push(e);
        denom += e;
    }
    for e in &mut exps {
        *e /= denom;
    }
    exps
}

/// Numerically stable softmax over f32 logits with an optional keep-mask.
///
/// Masked-out entries are exactly 0 in the output; the unmasked entries sum to
/// 1 within 1e-6. Errors with "empty attention support" when nothing is kept.
pub fn stable_softmax(logits: &[f32], mask: Option<&[bool]>) -> Result<Vec<f32>> {
    if logits.is_empty() {
        return Err(Error::EmptySupport);
    }
    if let Some(m) = mask {
        if m.len() != logits.len() {
            return Err(Error::shape(
                &[logits.len()],
                &[m.len()],
                "softmax logits vs mask",
            ));
        }
    }
    let keep = |i: usize| mask.map_or(true, |m| m[i]);

    let mut max = f64::NEG_INFINITY;
    for (i, &l) in logits.iter().enumerate() {
        if keep(i) && (l as f64) > max {
            max = l as f64;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::EmptySupport);
    }

    let mut exps = vec![0.0f64; logits.len()];
    let mut denom = 0.0f64;
    for (i, &l) in logits.iter().enumerate() {
        if keep(i) {
            let e = ((l as f64) - max).exp();
            exps[i] = e;
            denom += e;
        }
    }
    Ok(exps.into_iter().map(|e| (e / denom) as f32).collect())
}

/// 2-D matrix multiply with f64 accumulation in fixed index order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims().len() != 2 || b.dims().len() != 2 {
        return Err(Error::shape(a.dims(), b.dims(), "matmul expects 2-D inputs"));
    }
    let (m, k) = (a.dims()[0], a.dims()[1]);
    let (kb, n) = (b.dims()[0], b.dims()[1]);
    if k != kb {
        return Err(Error::shape(a.dims(), b.dims(), "matmul inner dimensions"));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = a.row2(i);
        for j in 0..n {
            let mut acc = 0.0f64;
            for p in 0..k {
                acc += arow[p] as f64 * b.data()[p * n + j] as f64;
            }
            out[i * n + j] = acc as f32;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Tensor filled row-major from the splitmix64 stream, values in [-0.05, 0.05).
pub fn seeded_uniform(rng: &mut Rng64, dims: &[usize]) -> Result<Tensor> {
    let mut t = Tensor::zeros(dims.to_vec())?;
    for v in t.data_mut() {
        *v = rng.next_unit();
    }
    Ok(t)
}

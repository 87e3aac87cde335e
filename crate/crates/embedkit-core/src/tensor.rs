//! Dense row-major f64 tensors and the handful of numeric primitives the
//! rest of the crate is built on: L2 normalization, temperature-scaled
//! cosine, stable softmax, and log-sum-exp.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
// Float transcendentals (exp, ln, ...) for pure no_std graphs. Whenever any
// crate in the build graph links std (tests, the std companion crate), the
// inherent f64 methods shadow these and the import sits idle; both states
// are expected.
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};

/// Row-major dense tensor of f64 values.
///
/// Shapes are explicit and every constructor rejects non-finite data, so a
/// NaN produced downstream is a bug in an operation, not an input artifact.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    /// Build a tensor from a shape and a row-major buffer.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::invalid("shape", "rank must be at least 1"));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid("shape", "dimensions must be nonzero"));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                context: "tensor data",
                expected: vec![expected],
                actual: vec![data.len()],
            });
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("tensor data"));
        }
        Ok(Self { shape, data })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw buffer. The finiteness invariant becomes
    /// the caller's responsibility until the next validating operation.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row2(&self, r: usize) -> &[f64] {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn row2_mut(&mut self, r: usize) -> &mut [f64] {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        &mut self.data[r * cols..(r + 1) * cols]
    }

    /// Row `(i, j)` of a rank-3 tensor, i.e. the trailing-axis slice.
    pub fn row3(&self, i: usize, j: usize) -> &[f64] {
        debug_assert_eq!(self.rank(), 3);
        let (m, d) = (self.shape[1], self.shape[2]);
        let start = (i * m + j) * d;
        &self.data[start..start + d]
    }

    pub fn row3_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        debug_assert_eq!(self.rank(), 3);
        let (m, d) = (self.shape[1], self.shape[2]);
        let start = (i * m + j) * d;
        &mut self.data[start..start + d]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c] = v;
    }

    /// `self += scale * other`, shapes must match exactly.
    pub fn add_scaled(&mut self, other: &DenseTensor, scale: f64) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                context: "add_scaled",
                expected: self.shape.clone(),
                actual: other.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for x in &mut self.data {
            *x *= s;
        }
    }
}

/// A rank-2 tensor of similarity scores, `[n_queries, n_candidates]`.
///
/// The wrapper exists so loss and distillation code can say "this is a score
/// table, not an embedding table" in signatures.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix(DenseTensor);

impl ScoreMatrix {
    pub fn new(t: DenseTensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::ShapeMismatch {
                context: "score matrix",
                expected: vec![2],
                actual: vec![t.rank()],
            });
        }
        Ok(Self(t))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput("score matrix rows"));
        }
        let m = rows[0].len();
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::invalid("rows", "ragged score rows"));
        }
        let mut data = Vec::with_capacity(rows.len() * m);
        for r in rows {
            data.extend_from_slice(r);
        }
        Self::new(DenseTensor::new(vec![rows.len(), m], data)?)
    }

    pub fn n(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn m(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row2(i)
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.0.at2(i, j)
    }

    pub fn tensor(&self) -> &DenseTensor {
        &self.0
    }

    pub fn into_tensor(self) -> DenseTensor {
        self.0
    }
}

/// Plain dot product; lengths must match.
pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            context: "dot",
            expected: vec![a.len()],
            actual: vec![b.len()],
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
}

/// Euclidean norm.
pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scale a vector to unit L2 norm. A zero vector has no direction, so it is
/// an error rather than a silent zero output.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::EmptyInput("l2_normalize"));
    }
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("l2_normalize input"));
    }
    let n = l2_norm(v);
    if n == 0.0 {
        return Err(Error::ZeroNorm("l2_normalize"));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Normalize every row of a rank-2 tensor to unit norm.
pub fn l2_normalize_rows(t: &DenseTensor) -> Result<DenseTensor> {
    if t.rank() != 2 {
        return Err(Error::ShapeMismatch {
            context: "l2_normalize_rows",
            expected: vec![2],
            actual: vec![t.rank()],
        });
    }
    let mut out = t.clone();
    for r in 0..t.shape()[0] {
        let unit = l2_normalize(t.row2(r))?;
        out.row2_mut(r).copy_from_slice(&unit);
    }
    Ok(out)
}

/// Temperature-scaled cosine similarity: `cos(a, b) / tau`.
///
/// This is the score function used throughout training and evaluation; the
/// temperature must be strictly positive and both vectors nonzero.
pub fn scaled_cosine(a: &[f64], b: &[f64], tau: f64) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::EmptyInput("scaled_cosine"));
    }
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            context: "scaled_cosine",
            expected: vec![a.len()],
            actual: vec![b.len()],
        });
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid("tau", format!("must be positive, got {tau}")));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("scaled_cosine"));
    }
    Ok(dot(a, b)? / (na * nb * tau))
}

/// Numerically stable log(sum(exp(xs))) via the usual max shift.
///
/// Exact for a single element: the shift makes the argument `exp(0)` and
/// `ln(1)` is exactly zero.
pub fn logsumexp(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::EmptyInput("logsumexp"));
    }
    if !xs.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("logsumexp input"));
    }
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    Ok(m + sum.ln())
}

/// Row-wise softmax of `scores / tau`, shifted by the row max so large
/// logits cannot overflow.
pub fn row_softmax(scores: &ScoreMatrix, tau: f64) -> Result<ScoreMatrix> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid("tau", format!("must be positive, got {tau}")));
    }
    let (n, m) = (scores.n(), scores.m());
    let mut data = Vec::with_capacity(n * m);
    for i in 0..n {
        let row = scores.row(i);
        if !row.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("row_softmax input"));
        }
        let mx = row.iter().map(|x| x / tau).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|x| (x / tau - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        data.extend(exps.iter().map(|e| e / z));
    }
    ScoreMatrix::new(DenseTensor::new(vec![n, m], data)?)
}

/// `out[i][j] = sum_k a[i][k] * b[k][j]` for rank-2 tensors.
pub fn matmul(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::ShapeMismatch {
            context: "matmul",
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = DenseTensor::zeros(vec![n, m])?;
    for i in 0..n {
        let ar = a.row2(i);
        let or = out.row2_mut(i);
        for (kk, &av) in ar.iter().enumerate().take(k) {
            let br = b.row2(kk);
            for j in 0..m {
                or[j] += av * br[j];
            }
        }
    }
    Ok(out)
}

/// `out = a^T b`: `[k, n]^T x [k, m] -> [n, m]`.
pub fn matmul_at_b(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[0] != b.shape()[0] {
        return Err(Error::ShapeMismatch {
            context: "matmul_at_b",
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    let (k, n, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = DenseTensor::zeros(vec![n, m])?;
    for kk in 0..k {
        let ar = a.row2(kk);
        let br = b.row2(kk);
        for (i, &av) in ar.iter().enumerate().take(n) {
            let or = out.row2_mut(i);
            for j in 0..m {
                or[j] += av * br[j];
            }
        }
    }
    Ok(out)
}

/// `out = a b^T`: `[n, k] x [m, k]^T -> [n, m]`.
pub fn matmul_a_bt(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(Error::ShapeMismatch {
            context: "matmul_a_bt",
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    let (n, m) = (a.shape()[0], b.shape()[0]);
    let mut out = DenseTensor::zeros(vec![n, m])?;
    for i in 0..n {
        let ar = a.row2(i);
        let or = out.row2_mut(i);
        for j in 0..m {
            or[j] = dot(ar, b.row2(j))?;
        }
    }
    Ok(out)
}

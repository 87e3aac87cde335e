//! Training losses with hand-derived gradients.
//!
//! All three losses operate on raw (not necessarily normalized) embeddings
//! and score candidates with temperature-scaled cosine similarity, so the
//! gradients here chain directly onto an encoder backward pass.
//!
//! The contrastive loss for example `i` with query `q_i`, mined passages
//! `p_i0..p_im` (index 0 is the positive) is `-log(exp(s_i0) / Z_i)` where
//! the partition function pools four candidate families:
//!
//! ```text
//! Z_i = exp(s(q_i, p_i0))                       the positive
//!     + alpha * sum_{j>0} exp(s(q_i, p_ij))     mined hard negatives
//!     + beta  * sum_{i'!=i} exp(s(q_i, q_i'))   other in-batch queries
//!     + gamma * sum_{j>0} exp(s(p_i0, p_ij))    positive vs. hard negatives
//! ```
//!
//! Everything is evaluated in log space: a weighted exp sum is a plain
//! log-sum-exp over `s + ln(weight)` entries, with zero-weight families
//! skipped outright so disabling a family is exact, not just approximate.

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
use crate::tensor::{dot, l2_norm, logsumexp, row_softmax, DenseTensor, ScoreMatrix};

/// Weights of the contrastive partition function, plus the score temperature.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ContrastiveParams {
    /// Cosine temperature; scores are `cos / tau`.
    pub tau: f64,
    /// Weight on mined hard negatives.
    pub alpha: f64,
    /// Weight on other in-batch queries.
    pub beta: f64,
    /// Weight on positive-to-hard-negative scores.
    pub gamma: f64,
}

impl Default for ContrastiveParams {
    fn default() -> Self {
        Self {
            tau: 0.02,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl ContrastiveParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid("tau", format!("must be positive, got {}", self.tau)));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, format!("must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Distillation parameters: the softmax temperature applied to both score
/// tables, and whether the loss is averaged over rows instead of summed.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KDParams {
    pub tau_kd: f64,
    /// When false (the default) the loss is the sum of per-row
    /// cross-entropies; when true it is the mean.
    pub mean_reduce: bool,
}

impl Default for KDParams {
    fn default() -> Self {
        Self {
            tau_kd: 1.0,
            mean_reduce: false,
        }
    }
}

impl KDParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_kd > 0.0 && self.tau_kd.is_finite()) {
            return Err(Error::invalid(
                "tau_kd",
                format!("must be positive, got {}", self.tau_kd),
            ));
        }
        Ok(())
    }
}

/// Nested-truncation training ladder: each rung trains the first `dims[k]`
/// coordinates of every embedding as if they were the whole vector.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MRLParams {
    /// Prefix widths; `dims[0]` must be the full embedding width.
    pub dims: Vec<usize>,
    /// Per-rung positive weights, same length as `dims`.
    pub weights: Vec<f64>,
}

impl MRLParams {
    pub fn new(dims: Vec<usize>, weights: Vec<f64>) -> Result<Self> {
        let p = Self { dims, weights };
        p.validate()?;
        Ok(p)
    }

    /// Ladder with every rung weighted 1.
    pub fn uniform(dims: Vec<usize>) -> Result<Self> {
        let weights = vec![1.0; dims.len()];
        Self::new(dims, weights)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::EmptyInput("mrl dims"));
        }
        if self.dims.len() != self.weights.len() {
            return Err(Error::ShapeMismatch {
                context: "mrl weights",
                expected: vec![self.dims.len()],
                actual: vec![self.weights.len()],
            });
        }
        let full = self.dims[0];
        for &d in &self.dims {
            if d == 0 || d > full {
                return Err(Error::invalid(
                    "dims",
                    format!("rung {d} outside 1..={full} (dims[0] is the full width)"),
                ));
            }
        }
        if !self.weights.iter().all(|w| *w > 0.0 && w.is_finite()) {
            return Err(Error::invalid("weights", "rung weights must be positive"));
        }
        Ok(())
    }
}

/// One training batch of raw embeddings: queries `[n, d]` and per-query
/// passage lists `[n, m, d]` where column 0 is the positive passage.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    q: DenseTensor,
    p: DenseTensor,
}

impl EmbeddingBatch {
    pub fn new(q: DenseTensor, p: DenseTensor) -> Result<Self> {
        if q.rank() != 2 {
            return Err(Error::ShapeMismatch {
                context: "batch queries",
                expected: vec![2],
                actual: vec![q.rank()],
            });
        }
        if p.rank() != 3 {
            return Err(Error::ShapeMismatch {
                context: "batch passages",
                expected: vec![3],
                actual: vec![p.rank()],
            });
        }
        if p.shape()[0] != q.shape()[0] || p.shape()[2] != q.shape()[1] {
            return Err(Error::ShapeMismatch {
                context: "batch passages",
                expected: vec![q.shape()[0], p.shape()[1], q.shape()[1]],
                actual: p.shape().to_vec(),
            });
        }
        Ok(Self { q, p })
    }

    pub fn n(&self) -> usize {
        self.q.shape()[0]
    }

    /// Passages per query, positive included.
    pub fn m(&self) -> usize {
        self.p.shape()[1]
    }

    pub fn d(&self) -> usize {
        self.q.shape()[1]
    }

    pub fn q(&self) -> &DenseTensor {
        &self.q
    }

    pub fn p(&self) -> &DenseTensor {
        &self.p
    }

    pub fn q_row(&self, i: usize) -> &[f64] {
        self.q.row2(i)
    }

    pub fn p_row(&self, i: usize, j: usize) -> &[f64] {
        self.p.row3(i, j)
    }

    /// Copy of the batch truncated to the first `dim` coordinates.
    fn prefix(&self, dim: usize) -> Result<Self> {
        let (n, m, d) = (self.n(), self.m(), self.d());
        debug_assert!(dim >= 1 && dim <= d);
        let mut q = Vec::with_capacity(n * dim);
        for i in 0..n {
            q.extend_from_slice(&self.q_row(i)[..dim]);
        }
        let mut p = Vec::with_capacity(n * m * dim);
        for i in 0..n {
            for j in 0..m {
                p.extend_from_slice(&self.p_row(i, j)[..dim]);
            }
        }
        Self::new(
            DenseTensor::new(vec![n, dim], q)?,
            DenseTensor::new(vec![n, m, dim], p)?,
        )
    }
}

/// A scalar loss with gradients shaped like the batch it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// Gradient with respect to the query embeddings, `[n, d]`.
    pub grad_q: DenseTensor,
    /// Gradient with respect to the passage embeddings, `[n, m, d]`.
    pub grad_p: DenseTensor,
}

/// Distillation loss plus the gradient with respect to the student scores.
#[derive(Debug, Clone, PartialEq)]
pub struct KdOutput {
    pub loss: f64,
    pub grad: DenseTensor,
}

/// Which two embeddings a partition term connects, from example `i`'s view.
enum Term {
    /// `(q_i, p_i0)` - the numerator score.
    Pos,
    /// `(q_i, p_ij)`, `j >= 1`.
    HardNeg(usize),
    /// `(q_i, q_i2)`, `i2 != i`.
    OtherQuery(usize),
    /// `(p_i0, p_ij)`, `j >= 1`.
    PosVsNeg(usize),
}

struct UnitCache {
    /// Unit vectors, flattened the same way as the source tensor.
    unit: Vec<f64>,
    /// Norm per row.
    norm: Vec<f64>,
    dim: usize,
}

impl UnitCache {
    fn build(data: &[f64], dim: usize, what: &'static str) -> Result<Self> {
        let rows = data.len() / dim;
        let mut unit = Vec::with_capacity(data.len());
        let mut norm = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &data[r * dim..(r + 1) * dim];
            let n = l2_norm(row);
            if n == 0.0 {
                return Err(Error::ZeroNorm(what));
            }
            unit.extend(row.iter().map(|x| x / n));
            norm.push(n);
        }
        Ok(Self { unit, norm, dim })
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.unit[r * self.dim..(r + 1) * self.dim]
    }
}

/// Contrastive loss over a batch, with gradients for every embedding.
///
/// Families with weight exactly 0 contribute nothing to the partition and
/// are skipped, so `alpha = beta = gamma = 0` reduces each row to
/// `-log(exp(s) / exp(s))`: the loss and every gradient are exactly zero.
pub fn contrastive_loss(batch: &EmbeddingBatch, params: &ContrastiveParams) -> Result<LossOutput> {
    params.validate()?;
    let (n, m, d) = (batch.n(), batch.m(), batch.d());
    let tau = params.tau;

    let qc = UnitCache::build(batch.q().data(), d, "contrastive queries")?;
    let pc = UnitCache::build(batch.p().data(), d, "contrastive passages")?;
    let p_idx = |i: usize, j: usize| i * m + j;

    let mut grad_q = DenseTensor::zeros(vec![n, d])?;
    let mut grad_p = DenseTensor::zeros(vec![n, m, d])?;
    let mut total = 0.0;
    let inv_n = 1.0 / n as f64;

    for i in 0..n {
        // Collect (term, cosine, ln weight) for every active family member.
        let mut terms: Vec<(Term, f64, f64)> = Vec::with_capacity(m + n + m);
        let qi = qc.row(i);
        let pi0 = pc.row(p_idx(i, 0));
        terms.push((Term::Pos, dot(qi, pi0)?, 0.0));
        if params.alpha > 0.0 {
            let lnw = params.alpha.ln();
            for j in 1..m {
                terms.push((Term::HardNeg(j), dot(qi, pc.row(p_idx(i, j)))?, lnw));
            }
        }
        if params.beta > 0.0 {
            let lnw = params.beta.ln();
            for i2 in 0..n {
                if i2 != i {
                    terms.push((Term::OtherQuery(i2), dot(qi, qc.row(i2))?, lnw));
                }
            }
        }
        if params.gamma > 0.0 {
            let lnw = params.gamma.ln();
            for j in 1..m {
                terms.push((Term::PosVsNeg(j), dot(pi0, pc.row(p_idx(i, j)))?, lnw));
            }
        }

        let shifted: Vec<f64> = terms.iter().map(|(_, cos, lnw)| cos / tau + lnw).collect();
        let log_z = logsumexp(&shifted)?;
        let s_pos = terms[0].1 / tau;
        total += log_z - s_pos;

        // d loss_i / d s_term = softmax weight of the term in Z, minus 1 for
        // the positive's appearance in the numerator.
        for (t, ((term, cos, _), sh)) in terms.iter().zip(&shifted).enumerate() {
            let mut coeff = (sh - log_z).exp() * inv_n;
            if t == 0 {
                coeff -= inv_n;
            }
            if coeff == 0.0 {
                continue;
            }
            // For a score s = dot(xh, yh) / tau the input gradients are
            //   d s / d x = (yh - cos * xh) / (tau * |x|)   (and symmetrically in y).
            let (xu, xn, yu, yn): (&[f64], f64, &[f64], f64) = match term {
                Term::Pos => (qi, qc.norm[i], pi0, pc.norm[p_idx(i, 0)]),
                Term::HardNeg(j) => (qi, qc.norm[i], pc.row(p_idx(i, *j)), pc.norm[p_idx(i, *j)]),
                Term::OtherQuery(i2) => (qi, qc.norm[i], qc.row(*i2), qc.norm[*i2]),
                Term::PosVsNeg(j) => (
                    pi0,
                    pc.norm[p_idx(i, 0)],
                    pc.row(p_idx(i, *j)),
                    pc.norm[p_idx(i, *j)],
                ),
            };
            let mut dx = vec![0.0; d];
            let mut dy = vec![0.0; d];
            for k in 0..d {
                dx[k] = coeff * (yu[k] - cos * xu[k]) / (tau * xn);
                dy[k] = coeff * (xu[k] - cos * yu[k]) / (tau * yn);
            }
            match term {
                Term::Pos => {
                    accumulate(grad_q.row2_mut(i), &dx);
                    accumulate(grad_p.row3_mut(i, 0), &dy);
                }
                Term::HardNeg(j) => {
                    accumulate(grad_q.row2_mut(i), &dx);
                    accumulate(grad_p.row3_mut(i, *j), &dy);
                }
                Term::OtherQuery(i2) => {
                    accumulate(grad_q.row2_mut(i), &dx);
                    accumulate(grad_q.row2_mut(*i2), &dy);
                }
                Term::PosVsNeg(j) => {
                    accumulate(grad_p.row3_mut(i, 0), &dx);
                    accumulate(grad_p.row3_mut(i, *j), &dy);
                }
            }
        }
    }

    Ok(LossOutput {
        loss: total * inv_n,
        grad_q,
        grad_p,
    })
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Input gradients of `s = cos(a, b) / tau` scaled by an upstream factor:
/// `da = upstream * (b_hat - cos * a_hat) / (tau * |a|)` and symmetrically
/// for `b`. This is the same pair rule the contrastive loss applies
/// internally; exposed for losses that are defined directly on score tables
/// (distillation).
pub fn scaled_cosine_backward(
    a: &[f64],
    b: &[f64],
    tau: f64,
    upstream: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            context: "scaled_cosine_backward",
            expected: vec![a.len()],
            actual: vec![b.len()],
        });
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid("tau", format!("must be positive, got {tau}")));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("scaled_cosine_backward"));
    }
    let ah: Vec<f64> = a.iter().map(|x| x / na).collect();
    let bh: Vec<f64> = b.iter().map(|x| x / nb).collect();
    let cos = dot(&ah, &bh)?;
    let da = ah
        .iter()
        .zip(&bh)
        .map(|(av, bv)| upstream * (bv - cos * av) / (tau * na))
        .collect();
    let db = ah
        .iter()
        .zip(&bh)
        .map(|(av, bv)| upstream * (av - cos * bv) / (tau * nb))
        .collect();
    Ok((da, db))
}

/// Rewrite a batch so every other example's positive passage becomes an
/// explicit extra candidate: row `i` of the result holds
/// `[p_i0, p_i1..p_im, p_00, .., p_(n-1)0]` with `p_i0` itself skipped from
/// the tail, preserving ascending example order.
pub fn expand_in_batch_negatives(batch: &EmbeddingBatch) -> Result<EmbeddingBatch> {
    let (n, m, d) = (batch.n(), batch.m(), batch.d());
    if n < 2 {
        return Err(Error::invalid(
            "batch",
            "in-batch expansion needs at least two examples",
        ));
    }
    let m_out = m + n - 1;
    let mut p = Vec::with_capacity(n * m_out * d);
    for i in 0..n {
        for j in 0..m {
            p.extend_from_slice(batch.p_row(i, j));
        }
        for i2 in 0..n {
            if i2 != i {
                p.extend_from_slice(batch.p_row(i2, 0));
            }
        }
    }
    EmbeddingBatch::new(
        batch.q().clone(),
        DenseTensor::new(vec![n, m_out, d], p)?,
    )
}

/// Row-stochastic similarity distribution over candidates: softmax of the
/// score table at the given temperature.
pub fn similarity_distribution(scores: &ScoreMatrix, tau: f64) -> Result<ScoreMatrix> {
    row_softmax(scores, tau)
}

/// Distillation cross-entropy between a teacher's and a student's candidate
/// distributions, plus the gradient with respect to the student scores.
///
/// Both tables are softmaxed at `tau_kd`; the loss is
/// `-sum_i sum_j T_ij ln S_ij` (summed over rows unless `mean_reduce`), and
/// the student-score gradient is `(S - T) / tau_kd`.
pub fn kd_loss(
    student_scores: &ScoreMatrix,
    teacher_scores: &ScoreMatrix,
    params: &KDParams,
) -> Result<KdOutput> {
    params.validate()?;
    if student_scores.n() != teacher_scores.n() || student_scores.m() != teacher_scores.m() {
        return Err(Error::ShapeMismatch {
            context: "kd scores",
            expected: vec![student_scores.n(), student_scores.m()],
            actual: vec![teacher_scores.n(), teacher_scores.m()],
        });
    }
    let (n, m) = (student_scores.n(), student_scores.m());
    let tau = params.tau_kd;
    let teacher = row_softmax(teacher_scores, tau)?;
    // The gradient uses probabilities from the very same softmax routine for
    // both sides, so distilling a table into itself cancels bitwise.
    let student = row_softmax(student_scores, tau)?;

    let mut grad = DenseTensor::zeros(vec![n, m])?;
    let mut loss = 0.0;
    for i in 0..n {
        // Stable log-probabilities for the student row (for the loss value).
        let scaled: Vec<f64> = student_scores.row(i).iter().map(|x| x / tau).collect();
        let lse = logsumexp(&scaled)?;
        let g = grad.row2_mut(i);
        for j in 0..m {
            let log_s = scaled[j] - lse;
            let t = teacher.at(i, j);
            loss -= t * log_s;
            g[j] = (student.at(i, j) - t) / tau;
        }
    }
    if params.mean_reduce {
        loss /= n as f64;
        grad.scale_in_place(1.0 / n as f64);
    }
    Ok(KdOutput { loss, grad })
}

/// Matryoshka contrastive loss: the contrastive loss evaluated on each
/// prefix rung, combined as a weighted mean. Truncating and re-normalizing
/// is implicit because the contrastive score is a cosine.
///
/// Prefix gradients embed back into the leading coordinates of the full
/// embeddings; coordinates past a rung's width receive nothing from it.
pub fn mrl_loss(
    batch: &EmbeddingBatch,
    cparams: &ContrastiveParams,
    mparams: &MRLParams,
) -> Result<LossOutput> {
    mparams.validate()?;
    let d = batch.d();
    if mparams.dims[0] != d {
        return Err(Error::invalid(
            "dims",
            format!("dims[0] = {} must equal the embedding width {d}", mparams.dims[0]),
        ));
    }
    let (n, m) = (batch.n(), batch.m());
    let mut grad_q = DenseTensor::zeros(vec![n, d])?;
    let mut grad_p = DenseTensor::zeros(vec![n, m, d])?;
    let mut total = 0.0;
    let weight_sum: f64 = mparams.weights.iter().sum();

    for (&dim, &w) in mparams.dims.iter().zip(&mparams.weights) {
        let rung = batch.prefix(dim)?;
        let out = contrastive_loss(&rung, cparams)?;
        total += w * out.loss;
        for i in 0..n {
            let src = out.grad_q.row2(i);
            let dst = grad_q.row2_mut(i);
            for k in 0..dim {
                dst[k] += w * src[k];
            }
            for j in 0..m {
                let src = out.grad_p.row3(i, j);
                let dst = grad_p.row3_mut(i, j);
                for k in 0..dim {
                    dst[k] += w * src[k];
                }
            }
        }
    }

    grad_q.scale_in_place(1.0 / weight_sum);
    grad_p.scale_in_place(1.0 / weight_sum);
    Ok(LossOutput {
        loss: total / weight_sum,
        grad_q,
        grad_p,
    })
}

//! A small bi-encoder with an analytic backward pass.
//!
//! The stack is deliberately conventional: token embeddings, pre-norm
//! transformer blocks (RMSNorm, rotary positions, multi-head attention,
//! gated-nothing FFN — no bias terms anywhere), pooling, a linear projection
//! head, and L2 normalization. Two things are slightly unusual:
//!
//! * attention alternates between **global** layers and **sliding-window**
//!   layers: layer `l` (0-based) attends globally iff
//!   `(l + 1) % global_every_k == 0`, otherwise position `i` only sees
//!   positions `j` with `|i - j| < local_window`;
//! * `layers = 0` is a supported fast path — mean token embedding, projected
//!   and normalized — handy as a bag-of-words baseline and for oracle tests.
//!
//! The backward pass is hand-written vector-Jacobian code, checked against
//! central finite differences in the test suite.

use alloc::borrow::ToOwned;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
// Float transcendentals (exp, ln, ...) for pure no_std graphs. Whenever any
// crate in the build graph links std (tests, the std companion crate), the
// inherent f64 methods shadow these and the import sits idle; both states
// are expected.
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{dot, l2_norm, matmul, matmul_a_bt, matmul_at_b, DenseTensor};

const RMS_EPS: f64 = 1e-6;

/// Token id conventionally reserved for the CLS slot; prepended to every
/// sequence when `pooling = cls`.
pub const CLS_TOKEN_ID: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Activation {
    Gelu,
    Silu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Pooling {
    Cls,
    Mean,
    LastToken,
}

/// Architecture hyperparameters. The default is a desk-scale toy that trains
/// in minutes on one core.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub activation: Activation,
    pub max_len: usize,
    pub rope_theta: f64,
    /// Every k-th layer (1-based) attends globally.
    pub global_every_k: usize,
    /// Sliding-window half-width for the remaining layers: position i
    /// attends to j iff |i - j| < local_window.
    pub local_window: usize,
    pub pooling: Pooling,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            dim: 32,
            layers: 2,
            heads: 4,
            ffn_dim: 128,
            activation: Activation::Gelu,
            max_len: 64,
            rope_theta: 10_000.0,
            global_every_k: 3,
            local_window: 32,
            pooling: Pooling::Mean,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("dim", self.dim),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("max_len", self.max_len),
            ("global_every_k", self.global_every_k),
            ("local_window", self.local_window),
        ] {
            if v == 0 {
                return Err(Error::invalid(name, "must be positive"));
            }
        }
        if self.dim % self.heads != 0 {
            return Err(Error::invalid(
                "heads",
                format!("dim {} not divisible by heads {}", self.dim, self.heads),
            ));
        }
        if (self.dim / self.heads) % 2 != 0 {
            return Err(Error::invalid(
                "heads",
                format!(
                    "per-head width {} must be even for rotary pairs",
                    self.dim / self.heads
                ),
            ));
        }
        if self.local_window > self.max_len {
            return Err(Error::invalid(
                "local_window",
                format!("window {} exceeds max_len {}", self.local_window, self.max_len),
            ));
        }
        if !(self.rope_theta > 0.0 && self.rope_theta.is_finite()) {
            return Err(Error::invalid("rope_theta", "must be positive and finite"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// True when layer `l` (0-based) uses global attention.
pub fn layer_is_global(config: &EncoderConfig, layer: usize) -> bool {
    (layer + 1) % config.global_every_k == 0
}

/// A token id sequence, validated non-empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::EmptyInput("token sequence"));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false // non-empty by construction
    }

    /// Copy truncated to at most `max` tokens.
    pub fn truncated(&self, max: usize) -> Result<Self> {
        if max == 0 {
            return Err(Error::invalid("max", "cannot truncate to zero tokens"));
        }
        Ok(Self {
            ids: self.ids[..self.ids.len().min(max)].to_vec(),
        })
    }
}

/// Named weight tensors. The name set and shapes are fixed by the config;
/// see [`EncoderWeights::shape_table`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    tensors: BTreeMap<String, DenseTensor>,
}

impl EncoderWeights {
    /// The full (name, shape) table implied by a config, in initialization
    /// order. With `layers = 0` only the embedding and projection exist.
    pub fn shape_table(config: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
        let d = config.dim;
        let mut t = vec![("token_embedding".to_owned(), vec![config.vocab_size, d])];
        for l in 0..config.layers {
            t.push((format!("layers.{l}.attn_norm.gain"), vec![d]));
            for w in ["wq", "wk", "wv", "wo"] {
                t.push((format!("layers.{l}.attn.{w}"), vec![d, d]));
            }
            t.push((format!("layers.{l}.ffn_norm.gain"), vec![d]));
            t.push((format!("layers.{l}.ffn.w1"), vec![d, config.ffn_dim]));
            t.push((format!("layers.{l}.ffn.w2"), vec![config.ffn_dim, d]));
        }
        if config.layers > 0 {
            t.push(("final_norm.gain".to_owned(), vec![d]));
        }
        t.push(("projection".to_owned(), vec![d, d]));
        t
    }

    /// Wrap an existing tensor map, validating it against the config's shape
    /// table (exact name set, exact shapes).
    pub fn from_tensors(tensors: BTreeMap<String, DenseTensor>, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let table = Self::shape_table(config);
        if tensors.len() != table.len() {
            return Err(Error::invalid(
                "weights",
                format!("expected {} tensors, got {}", table.len(), tensors.len()),
            ));
        }
        for (name, shape) in &table {
            match tensors.get(name) {
                None => return Err(Error::UnknownName(name.clone())),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::ShapeMismatch {
                        context: "weight tensor",
                        expected: shape.clone(),
                        actual: t.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
        Ok(Self { tensors })
    }

    /// All-zero tensors in the shape of a config; the accumulator for
    /// gradients.
    pub fn zeros(config: &EncoderConfig) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for (name, shape) in Self::shape_table(config) {
            tensors.insert(name, DenseTensor::zeros(shape)?);
        }
        Ok(Self { tensors })
    }

    pub fn get(&self, name: &str) -> Result<&DenseTensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownName(name.to_owned()))
    }

    pub fn tensors(&self) -> &BTreeMap<String, DenseTensor> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut BTreeMap<String, DenseTensor> {
        &mut self.tensors
    }

    pub fn into_tensors(self) -> BTreeMap<String, DenseTensor> {
        self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    fn get_mut(&mut self, name: &str) -> &mut DenseTensor {
        self.tensors.get_mut(name).expect("tensor name")
    }
}

/// Deterministic weight init: uniform in `[-1/sqrt(dim), 1/sqrt(dim))` for
/// matrices, ones for norm gains. Tensors are drawn in shape-table order so
/// a (config, seed) pair always yields bitwise-identical weights.
pub fn init_weights(config: &EncoderConfig, seed: u64) -> Result<EncoderWeights> {
    config.validate()?;
    let scale = 1.0 / (config.dim as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for (name, shape) in EncoderWeights::shape_table(config) {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = if name.ends_with(".gain") {
            vec![1.0; n]
        } else {
            (0..n).map(|_| rng.random_range(-scale..scale)).collect()
        };
        tensors.insert(name, DenseTensor::new(shape, data)?);
    }
    Ok(EncoderWeights { tensors })
}

/// Rotate one head-width row in place. `sign = -1` applies the inverse
/// rotation (used by the backward pass).
fn rotate_row(seg: &mut [f64], pos: f64, theta: f64, sign: f64) {
    let hd = seg.len();
    for t in 0..hd / 2 {
        let inv_freq = theta.powf(-2.0 * t as f64 / hd as f64);
        let angle = pos * inv_freq;
        let (sin, cos) = (sign * angle.sin(), angle.cos());
        let (x, y) = (seg[2 * t], seg[2 * t + 1]);
        seg[2 * t] = x * cos - y * sin;
        seg[2 * t + 1] = x * sin + y * cos;
    }
}

/// Rotary position encoding for one head: dimension pair `(2t, 2t+1)` at
/// position `p` is rotated by the angle `p * theta^(-2t / head_dim)`.
/// Position 0 passes through unchanged and every pair keeps its norm.
pub fn rope_apply(block: &DenseTensor, positions: &[usize], theta: f64) -> Result<DenseTensor> {
    if block.rank() != 2 {
        return Err(Error::ShapeMismatch {
            context: "rope block",
            expected: vec![2],
            actual: vec![block.rank()],
        });
    }
    let (seq, hd) = (block.shape()[0], block.shape()[1]);
    if hd % 2 != 0 {
        return Err(Error::invalid("head_dim", format!("must be even, got {hd}")));
    }
    if positions.len() != seq {
        return Err(Error::ShapeMismatch {
            context: "rope positions",
            expected: vec![seq],
            actual: vec![positions.len()],
        });
    }
    if !(theta > 0.0 && theta.is_finite()) {
        return Err(Error::invalid("theta", "must be positive and finite"));
    }
    let mut out = block.clone();
    for r in 0..seq {
        rotate_row(out.row2_mut(r), positions[r] as f64, theta, 1.0);
    }
    Ok(out)
}

/// New config for continued training at longer contexts: same architecture,
/// larger rotary base and a max length that may only grow.
pub fn rope_rescale(config: &EncoderConfig, new_theta: f64, new_max_len: usize) -> Result<EncoderConfig> {
    config.validate()?;
    if !(new_theta > 0.0 && new_theta.is_finite()) {
        return Err(Error::invalid("new_theta", "must be positive and finite"));
    }
    if new_max_len < config.max_len {
        return Err(Error::invalid(
            "new_max_len",
            format!("cannot shrink max_len from {} to {new_max_len}", config.max_len),
        ));
    }
    Ok(EncoderConfig {
        rope_theta: new_theta,
        max_len: new_max_len,
        ..config.clone()
    })
}

fn activation(kind: Activation, x: f64) -> f64 {
    match kind {
        // Exact (erf-based) GELU.
        Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x / core::f64::consts::SQRT_2)),
        Activation::Silu => x / (1.0 + (-x).exp()),
    }
}

fn activation_deriv(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::Gelu => {
            let phi_big = 0.5 * (1.0 + libm::erf(x / core::f64::consts::SQRT_2));
            let phi_small = (-0.5 * x * x).exp() / (2.0 * core::f64::consts::PI).sqrt();
            phi_big + x * phi_small
        }
        Activation::Silu => {
            let s = 1.0 / (1.0 + (-x).exp());
            s * (1.0 + x * (1.0 - s))
        }
    }
}

/// RMSNorm over each row: `y = gain * x / sqrt(mean(x^2) + eps)`.
/// Returns the normalized rows and the per-row denominator.
fn rms_norm_rows(x: &DenseTensor, gain: &[f64]) -> (DenseTensor, Vec<f64>) {
    let (rows, d) = (x.shape()[0], x.shape()[1]);
    let mut out = x.clone();
    let mut rms = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row2(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let denom = (ms + RMS_EPS).sqrt();
        let o = out.row2_mut(r);
        for k in 0..d {
            o[k] = gain[k] * row[k] / denom;
        }
        rms.push(denom);
    }
    (out, rms)
}

/// VJP of [`rms_norm_rows`]: accumulates into `dx` and `dgain`.
fn rms_norm_backward(
    x: &DenseTensor,
    gain: &[f64],
    rms: &[f64],
    dy: &DenseTensor,
    dx: &mut DenseTensor,
    dgain: &mut [f64],
) {
    let (rows, d) = (x.shape()[0], x.shape()[1]);
    for r in 0..rows {
        let xr = x.row2(r);
        let dyr = dy.row2(r);
        let denom = rms[r];
        // sum_k dy_k * gain_k * x_k, shared by every dx coordinate.
        let mut s = 0.0;
        for k in 0..d {
            s += dyr[k] * gain[k] * xr[k];
            dgain[k] += dyr[k] * xr[k] / denom;
        }
        let dxr = dx.row2_mut(r);
        let c = s / (d as f64 * denom * denom * denom);
        for k in 0..d {
            dxr[k] += gain[k] * dyr[k] / denom - xr[k] * c;
        }
    }
}

/// Per-layer forward intermediates kept for the backward pass.
struct LayerTape {
    x_in: DenseTensor,
    h1: DenseTensor,
    rms1: Vec<f64>,
    v: DenseTensor,
    /// Rotated projections; the backward pass recovers raw q/k gradients by
    /// applying the inverse rotation, so the unrotated values aren't kept.
    qr: DenseTensor,
    kr: DenseTensor,
    /// Attention probabilities per head, `[L, L]` with masked entries 0.
    probs: Vec<DenseTensor>,
    ctx: DenseTensor,
    x_mid: DenseTensor,
    h2: DenseTensor,
    rms2: Vec<f64>,
    a: DenseTensor,
    act_a: DenseTensor,
}

struct SeqTape {
    ids: Vec<u32>,
    layers: Vec<LayerTape>,
    /// Final-norm intermediates; absent on the layers=0 fast path.
    final_norm: Option<(DenseTensor, DenseTensor, Vec<f64>)>, // (input, normed, rms)
    pooled: Vec<f64>,
    y_norm: f64,
    out: Vec<f64>,
}

fn check_sequence(seq: &TokenSequence, config: &EncoderConfig) -> Result<()> {
    if seq.len() > config.max_len {
        return Err(Error::SequenceTooLong {
            len: seq.len(),
            max: config.max_len,
        });
    }
    for &id in seq.ids() {
        if id as usize >= config.vocab_size {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: config.vocab_size,
            });
        }
    }
    Ok(())
}

/// The token ids actually fed to the stack: CLS-pooling prepends the
/// reserved CLS id (it does not count against max_len).
fn effective_ids(seq: &TokenSequence, config: &EncoderConfig) -> Vec<u32> {
    if config.layers > 0 && config.pooling == Pooling::Cls {
        let mut ids = Vec::with_capacity(seq.len() + 1);
        ids.push(CLS_TOKEN_ID);
        ids.extend_from_slice(seq.ids());
        ids
    } else {
        seq.ids().to_vec()
    }
}

fn forward_one(weights: &EncoderWeights, config: &EncoderConfig, seq: &TokenSequence) -> Result<SeqTape> {
    check_sequence(seq, config)?;
    let ids = effective_ids(seq, config);
    let (len, d) = (ids.len(), config.dim);
    let emb = weights.get("token_embedding")?;

    let mut x0 = DenseTensor::zeros(vec![len, d])?;
    for (p, &id) in ids.iter().enumerate() {
        x0.row2_mut(p).copy_from_slice(emb.row2(id as usize));
    }

    // layers = 0: bag of embeddings -> projection -> normalize.
    if config.layers == 0 {
        let mut pooled = vec![0.0; d];
        for p in 0..len {
            let row = x0.row2(p);
            for k in 0..d {
                pooled[k] += row[k];
            }
        }
        for v in &mut pooled {
            *v /= len as f64;
        }
        return finish_tape(weights, ids, Vec::new(), None, pooled);
    }

    let heads = config.heads;
    let hd = config.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut x = x0;
    let mut layers = Vec::with_capacity(config.layers);

    for l in 0..config.layers {
        let x_in = x.clone();
        let g1 = weights.get(&format!("layers.{l}.attn_norm.gain"))?.data();
        let (h1, rms1) = rms_norm_rows(&x_in, g1);

        let mut qr = matmul(&h1, weights.get(&format!("layers.{l}.attn.wq"))?)?;
        let mut kr = matmul(&h1, weights.get(&format!("layers.{l}.attn.wk"))?)?;
        let v = matmul(&h1, weights.get(&format!("layers.{l}.attn.wv"))?)?;
        for p in 0..len {
            for t in 0..heads {
                rotate_row(&mut qr.row2_mut(p)[t * hd..(t + 1) * hd], p as f64, config.rope_theta, 1.0);
                rotate_row(&mut kr.row2_mut(p)[t * hd..(t + 1) * hd], p as f64, config.rope_theta, 1.0);
            }
        }

        let global = layer_is_global(config, l);
        let allowed = |i: usize, j: usize| global || i.abs_diff(j) < config.local_window;

        let mut probs = Vec::with_capacity(heads);
        let mut ctx = DenseTensor::zeros(vec![len, d])?;
        for t in 0..heads {
            let cols = t * hd..(t + 1) * hd;
            let mut pm = DenseTensor::zeros(vec![len, len])?;
            for i in 0..len {
                // Masked, max-shifted softmax over the allowed positions.
                let qi = &qr.row2(i)[cols.clone()];
                let mut z = vec![f64::NEG_INFINITY; len];
                let mut mx = f64::NEG_INFINITY;
                for (j, zj) in z.iter_mut().enumerate() {
                    if allowed(i, j) {
                        *zj = dot(qi, &kr.row2(j)[cols.clone()])? * scale;
                        mx = mx.max(*zj);
                    }
                }
                let mut sum = 0.0;
                let pr = pm.row2_mut(i);
                for (j, &zj) in z.iter().enumerate() {
                    if zj > f64::NEG_INFINITY {
                        pr[j] = (zj - mx).exp();
                        sum += pr[j];
                    }
                }
                for pj in pr.iter_mut() {
                    *pj /= sum;
                }
            }
            for i in 0..len {
                for j in 0..len {
                    let w = pm.at2(i, j);
                    if w == 0.0 {
                        continue;
                    }
                    let vj = &v.row2(j)[cols.clone()];
                    let cr = &mut ctx.row2_mut(i)[cols.clone()];
                    for (c, &vv) in vj.iter().enumerate() {
                        cr[c] += w * vv;
                    }
                }
            }
            probs.push(pm);
        }

        let attn_out = matmul(&ctx, weights.get(&format!("layers.{l}.attn.wo"))?)?;
        let mut x_mid = x_in.clone();
        x_mid.add_scaled(&attn_out, 1.0)?;

        let g2 = weights.get(&format!("layers.{l}.ffn_norm.gain"))?.data();
        let (h2, rms2) = rms_norm_rows(&x_mid, g2);
        let a = matmul(&h2, weights.get(&format!("layers.{l}.ffn.w1"))?)?;
        let mut act_a = a.clone();
        for v in act_a.data_mut() {
            *v = activation(config.activation, *v);
        }
        let ffn_out = matmul(&act_a, weights.get(&format!("layers.{l}.ffn.w2"))?)?;
        let mut x_out = x_mid.clone();
        x_out.add_scaled(&ffn_out, 1.0)?;

        layers.push(LayerTape {
            x_in,
            h1,
            rms1,
            v,
            qr,
            kr,
            probs,
            ctx,
            x_mid,
            h2,
            rms2,
            a,
            act_a,
        });
        x = x_out;
    }

    let gf = weights.get("final_norm.gain")?.data();
    let (hf, rmsf) = rms_norm_rows(&x, gf);
    let pooled = match config.pooling {
        Pooling::Cls => hf.row2(0).to_vec(),
        Pooling::LastToken => hf.row2(len - 1).to_vec(),
        Pooling::Mean => {
            let mut m = vec![0.0; d];
            for p in 0..len {
                let row = hf.row2(p);
                for k in 0..d {
                    m[k] += row[k];
                }
            }
            for v in &mut m {
                *v /= len as f64;
            }
            m
        }
    };
    finish_tape(weights, ids, layers, Some((x, hf, rmsf)), pooled)
}

/// Projection and normalization shared by both forward paths.
fn finish_tape(
    weights: &EncoderWeights,
    ids: Vec<u32>,
    layers: Vec<LayerTape>,
    final_norm: Option<(DenseTensor, DenseTensor, Vec<f64>)>,
    pooled: Vec<f64>,
) -> Result<SeqTape> {
    let proj = weights.get("projection")?;
    let d = pooled.len();
    let mut y = vec![0.0; d];
    for (k, &u) in pooled.iter().enumerate() {
        let prow = proj.row2(k);
        for j in 0..d {
            y[j] += u * prow[j];
        }
    }
    let y_norm = l2_norm(&y);
    if y_norm == 0.0 {
        return Err(Error::ZeroNorm("encoder output"));
    }
    let out = y.iter().map(|v| v / y_norm).collect();
    Ok(SeqTape {
        ids,
        layers,
        final_norm,
        pooled,
        y_norm,
        out,
    })
}

/// Encode a batch of sequences into unit-norm embedding rows `[n, dim]`.
pub fn encode(weights: &EncoderWeights, config: &EncoderConfig, batch: &[TokenSequence]) -> Result<DenseTensor> {
    config.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptyInput("encode batch"));
    }
    let mut out = DenseTensor::zeros(vec![batch.len(), config.dim])?;
    for (i, seq) in batch.iter().enumerate() {
        let tape = forward_one(weights, config, seq)?;
        out.row2_mut(i).copy_from_slice(&tape.out);
    }
    Ok(out)
}

/// Analytic gradients of `sum_ij grad_output[i][j] * encode(...)[i][j]` with
/// respect to every weight tensor. Re-runs the forward pass internally to
/// rebuild intermediates.
pub fn encode_backward(
    weights: &EncoderWeights,
    config: &EncoderConfig,
    batch: &[TokenSequence],
    grad_output: &DenseTensor,
) -> Result<EncoderWeights> {
    config.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptyInput("encode batch"));
    }
    if grad_output.shape() != [batch.len(), config.dim] {
        return Err(Error::ShapeMismatch {
            context: "grad_output",
            expected: vec![batch.len(), config.dim],
            actual: grad_output.shape().to_vec(),
        });
    }
    let mut grads = EncoderWeights::zeros(config)?;
    for (i, seq) in batch.iter().enumerate() {
        let tape = forward_one(weights, config, seq)?;
        backward_one(weights, config, &tape, grad_output.row2(i), &mut grads)?;
    }
    Ok(grads)
}

fn backward_one(
    weights: &EncoderWeights,
    config: &EncoderConfig,
    tape: &SeqTape,
    dout: &[f64],
    grads: &mut EncoderWeights,
) -> Result<()> {
    let d = config.dim;
    let len = tape.ids.len();

    // out = y / |y|  =>  dy = (dout - (dout . out) * out) / |y|.
    let douty = dot(dout, &tape.out)?;
    let dy: Vec<f64> = dout
        .iter()
        .zip(&tape.out)
        .map(|(g, o)| (g - douty * o) / tape.y_norm)
        .collect();

    // y = pooled x projection.
    let proj = weights.get("projection")?;
    let mut dpooled = vec![0.0; d];
    {
        let dproj = grads.get_mut("projection");
        for k in 0..d {
            let prow = proj.row2(k);
            let drow = dproj.row2_mut(k);
            let u = tape.pooled[k];
            let mut acc = 0.0;
            for j in 0..d {
                drow[j] += u * dy[j];
                acc += prow[j] * dy[j];
            }
            dpooled[k] = acc;
        }
    }

    if config.layers == 0 {
        // pooled = mean of embedding rows.
        let demb = grads.get_mut("token_embedding");
        let inv = 1.0 / len as f64;
        for &id in &tape.ids {
            let row = demb.row2_mut(id as usize);
            for k in 0..d {
                row[k] += dpooled[k] * inv;
            }
        }
        return Ok(());
    }

    // Pooling backward into the final normed rows.
    let (x_last, hf, rmsf) = tape.final_norm.as_ref().expect("final norm tape");
    let mut dhf = DenseTensor::zeros(vec![len, d])?;
    match config.pooling {
        Pooling::Cls => {
            let r = dhf.row2_mut(0);
            r.copy_from_slice(&dpooled);
        }
        Pooling::LastToken => {
            let r = dhf.row2_mut(len - 1);
            r.copy_from_slice(&dpooled);
        }
        Pooling::Mean => {
            let inv = 1.0 / len as f64;
            for p in 0..len {
                let r = dhf.row2_mut(p);
                for k in 0..d {
                    r[k] = dpooled[k] * inv;
                }
            }
        }
    }
    let _ = hf; // normed rows themselves are not needed by the backward

    let mut dx = DenseTensor::zeros(vec![len, d])?;
    {
        let gf = weights.get("final_norm.gain")?.data().to_vec();
        let dgf = grads.get_mut("final_norm.gain");
        rms_norm_backward(x_last, &gf, rmsf, &dhf, &mut dx, dgf.data_mut());
    }

    let heads = config.heads;
    let hd = config.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    for l in (0..config.layers).rev() {
        let lt = &tape.layers[l];
        // x_out = x_mid + act(a) W2: split the incoming gradient.
        let dffn_out = dx.clone(); // gradient w.r.t. ffn output
        let w2 = weights.get(&format!("layers.{l}.ffn.w2"))?;
        grads
            .get_mut(&format!("layers.{l}.ffn.w2"))
            .add_scaled(&matmul_at_b(&lt.act_a, &dffn_out)?, 1.0)?;
        let dact = matmul_a_bt(&dffn_out, w2)?;
        let mut da = dact;
        for (g, &av) in da.data_mut().iter_mut().zip(lt.a.data()) {
            *g *= activation_deriv(config.activation, av);
        }
        let w1 = weights.get(&format!("layers.{l}.ffn.w1"))?;
        grads
            .get_mut(&format!("layers.{l}.ffn.w1"))
            .add_scaled(&matmul_at_b(&lt.h2, &da)?, 1.0)?;
        let dh2 = matmul_a_bt(&da, w1)?;

        // dx currently holds d/d x_out; x_mid receives it via the residual
        // plus the ffn-norm path.
        let mut dx_mid = dx;
        {
            let g2 = weights.get(&format!("layers.{l}.ffn_norm.gain"))?.data().to_vec();
            let dg2 = grads.get_mut(&format!("layers.{l}.ffn_norm.gain"));
            rms_norm_backward(&lt.x_mid, &g2, &lt.rms2, &dh2, &mut dx_mid, dg2.data_mut());
        }

        // x_mid = x_in + ctx Wo.
        let dattn_out = dx_mid.clone();
        let wo = weights.get(&format!("layers.{l}.attn.wo"))?;
        grads
            .get_mut(&format!("layers.{l}.attn.wo"))
            .add_scaled(&matmul_at_b(&lt.ctx, &dattn_out)?, 1.0)?;
        let dctx = matmul_a_bt(&dattn_out, wo)?;

        let mut dqr = DenseTensor::zeros(vec![len, d])?;
        let mut dkr = DenseTensor::zeros(vec![len, d])?;
        let mut dv = DenseTensor::zeros(vec![len, d])?;
        for t in 0..heads {
            let cols = t * hd..(t + 1) * hd;
            let pm = &lt.probs[t];
            for i in 0..len {
                let dctx_i = &dctx.row2(i)[cols.clone()];
                // dprobs and the softmax VJP for row i of this head.
                let mut dp = vec![0.0; len];
                let mut inner = 0.0;
                for j in 0..len {
                    let w = pm.at2(i, j);
                    if w > 0.0 {
                        dp[j] = dot(dctx_i, &lt.v.row2(j)[cols.clone()])?;
                        inner += dp[j] * w;
                        // dv_j += w * dctx_i
                        let dvj = &mut dv.row2_mut(j)[cols.clone()];
                        for (c, &g) in dctx_i.iter().enumerate() {
                            dvj[c] += w * g;
                        }
                    }
                }
                for j in 0..len {
                    let w = pm.at2(i, j);
                    if w > 0.0 {
                        let dz = w * (dp[j] - inner) * scale;
                        let kj = &lt.kr.row2(j)[cols.clone()];
                        let dqi = &mut dqr.row2_mut(i)[cols.clone()];
                        for (c, &kv) in kj.iter().enumerate() {
                            dqi[c] += dz * kv;
                        }
                        let qi = &lt.qr.row2(i)[cols.clone()];
                        let dkj = &mut dkr.row2_mut(j)[cols.clone()];
                        for (c, &qv) in qi.iter().enumerate() {
                            dkj[c] += dz * qv;
                        }
                    }
                }
            }
        }

        // Undo the rotations: the inverse of a rotation is its transpose.
        let mut dq = dqr;
        let mut dk = dkr;
        for p in 0..len {
            for t in 0..heads {
                rotate_row(&mut dq.row2_mut(p)[t * hd..(t + 1) * hd], p as f64, config.rope_theta, -1.0);
                rotate_row(&mut dk.row2_mut(p)[t * hd..(t + 1) * hd], p as f64, config.rope_theta, -1.0);
            }
        }

        // q/k/v = h1 x W{q,k,v}.
        let mut dh1 = DenseTensor::zeros(vec![len, d])?;
        for (mat, dmat) in [("wq", &dq), ("wk", &dk), ("wv", &dv)] {
            let w = weights.get(&format!("layers.{l}.attn.{mat}"))?;
            grads
                .get_mut(&format!("layers.{l}.attn.{mat}"))
                .add_scaled(&matmul_at_b(&lt.h1, dmat)?, 1.0)?;
            dh1.add_scaled(&matmul_a_bt(dmat, w)?, 1.0)?;
        }

        // Residual: d x_in accumulates the straight-through part plus the
        // attn-norm path.
        let mut dx_in = dx_mid;
        {
            let g1 = weights.get(&format!("layers.{l}.attn_norm.gain"))?.data().to_vec();
            let dg1 = grads.get_mut(&format!("layers.{l}.attn_norm.gain"));
            rms_norm_backward(&lt.x_in, &g1, &lt.rms1, &dh1, &mut dx_in, dg1.data_mut());
        }
        dx = dx_in;
    }

    // Embedding rows: multiple occurrences of a token accumulate.
    let demb = grads.get_mut("token_embedding");
    for (p, &id) in tape.ids.iter().enumerate() {
        let src = dx.row2(p);
        let dst = demb.row2_mut(id as usize);
        for k in 0..d {
            dst[k] += src[k];
        }
    }
    Ok(())
}

//! Deterministic single-core training loops: language-homogeneous batching,
//! decoupled-weight-decay Adam, and the three fine-tuning stages
//! (contrastive, teacher-routed distillation, context extension).
//!
//! Determinism is load-bearing: batch plans come from a seeded ChaCha8
//! stream, every map iterates in sorted order, and gradient reduction is a
//! fixed left-to-right sum, so two runs from the same (seed, config, data
//! ordering) produce bitwise-identical weights and loss traces.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
// Float transcendentals (exp, ln, ...) for pure no_std graphs. Whenever any
// crate in the build graph links std (tests, the std companion crate), the
// inherent f64 methods shadow these and the import sits idle; both states
// are expected.
#[allow(unused_imports)]
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{encode, encode_backward, EncoderConfig, EncoderWeights, TokenSequence};
use crate::error::{Error, Result};
use crate::losses::{
    contrastive_loss, expand_in_batch_negatives, kd_loss, mrl_loss, scaled_cosine_backward,
    ContrastiveParams, EmbeddingBatch, KDParams, MRLParams,
};
use crate::tensor::{scaled_cosine, DenseTensor, ScoreMatrix};

/// Which fine-tuning stage a config drives. Each loop refuses a config
/// labeled for a different stage, so presets can't be crossed by accident.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TrainStage {
    ContrastiveFt,
    ContrastiveKd,
    ContextExtension,
}

impl TrainStage {
    pub fn label(&self) -> &'static str {
        match self {
            TrainStage::ContrastiveFt => "contrastive_ft",
            TrainStage::ContrastiveKd => "contrastive_kd",
            TrainStage::ContextExtension => "context_extension",
        }
    }
}

/// Loop hyperparameters shared by all three stages.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Number of optimizer steps. Zero is allowed and makes the loop a
    /// validated no-op (handy for dry runs).
    pub steps: usize,
    pub seed: u64,
    /// Sequences are clipped to this many tokens before encoding.
    pub max_seq_len: usize,
    pub stage: TrainStage,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(
                "learning_rate",
                format!("must be positive, got {}", self.learning_rate),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if self.max_seq_len == 0 {
            return Err(Error::invalid("max_seq_len", "must be positive"));
        }
        Ok(())
    }

    /// First-stage defaults: short sequences, larger batches.
    pub fn contrastive_preset(seed: u64) -> Self {
        Self {
            learning_rate: 5e-3,
            batch_size: 32,
            steps: 200,
            seed,
            max_seq_len: 64,
            stage: TrainStage::ContrastiveFt,
        }
    }

    /// Distillation defaults: same shape as the contrastive stage but more
    /// steps, since the signal per step is softer.
    pub fn distill_preset(seed: u64) -> Self {
        Self {
            learning_rate: 5e-3,
            batch_size: 32,
            steps: 300,
            seed,
            max_seq_len: 64,
            stage: TrainStage::ContrastiveKd,
        }
    }

    /// Final-stage defaults: 4x longer window, smaller batches, lower LR.
    pub fn context_extension_preset(seed: u64) -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 8,
            steps: 200,
            seed,
            max_seq_len: 256,
            stage: TrainStage::ContextExtension,
        }
    }
}

/// One retrieval training record: a query, its positive, mined negatives,
/// and a language tag used for batch routing. The id keys precomputed
/// teacher scores and shows up in error messages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingExample {
    pub id: String,
    pub query: TokenSequence,
    pub positive: TokenSequence,
    pub negatives: Vec<TokenSequence>,
    pub language: String,
}

impl TrainingExample {
    pub fn new(
        id: impl Into<String>,
        query: TokenSequence,
        positive: TokenSequence,
        negatives: Vec<TokenSequence>,
        language: impl Into<String>,
    ) -> Result<Self> {
        let id = id.into();
        let language = language.into();
        if id.is_empty() {
            return Err(Error::invalid("id", "must be non-empty"));
        }
        if language.is_empty() {
            return Err(Error::invalid("language", "must be non-empty"));
        }
        Ok(Self {
            id,
            query,
            positive,
            negatives,
            language,
        })
    }

    /// Candidates per query: the positive plus the mined negatives.
    pub fn candidates(&self) -> usize {
        1 + self.negatives.len()
    }
}

/// One planned batch: a language tag and the indices of its examples in the
/// original data slice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub language: String,
    pub indices: Vec<usize>,
}

/// Split examples into language-homogeneous batches.
///
/// Per language (processed in sorted order) the example indices are shuffled
/// by a seeded generator and chunked; trailing partial batches are kept. The
/// finished plan list is shuffled once more so languages interleave instead
/// of running in alphabetical blocks.
pub fn build_batches(
    data: &[TrainingExample],
    batch_size: usize,
    seed: u64,
) -> Result<Vec<BatchPlan>> {
    if data.is_empty() {
        return Err(Error::EmptyInput("training data"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch_size", "must be positive"));
    }
    let mut by_language: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, ex) in data.iter().enumerate() {
        if ex.language.is_empty() {
            return Err(Error::invalid("language", format!("example {} has an empty tag", ex.id)));
        }
        by_language.entry(ex.language.as_str()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plans = Vec::new();
    for (language, mut indices) in by_language {
        indices.shuffle(&mut rng);
        for chunk in indices.chunks(batch_size) {
            plans.push(BatchPlan {
                language: language.to_string(),
                indices: chunk.to_vec(),
            });
        }
    }
    plans.shuffle(&mut rng);
    Ok(plans)
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam hyperparameters with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamHyper {
    /// Community defaults with the caller's learning rate.
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", format!("must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(name, format!("must be in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::invalid("eps", format!("must be positive, got {}", self.eps)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid(
                "weight_decay",
                format!("must be non-negative, got {}", self.weight_decay),
            ));
        }
        Ok(())
    }
}

/// First/second moment accumulators, keyed like the weight tensors. Moments
/// materialize lazily as zeros the first time a tensor is updated.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One decoupled-weight-decay Adam step, in place:
/// `w -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * w)`.
///
/// The gradient map must cover exactly the weight tensor names; a missing or
/// extra name is an error rather than a silently stale parameter.
pub fn adamw_step(
    weights: &mut BTreeMap<String, DenseTensor>,
    grads: &BTreeMap<String, DenseTensor>,
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    hyper.validate()?;
    if grads.len() != weights.len() {
        return Err(Error::invalid(
            "grads",
            format!(
                "gradient set must cover every weight tensor: {} grads vs {} weights",
                grads.len(),
                weights.len()
            ),
        ));
    }
    state.step += 1;
    let bc1 = 1.0 - hyper.beta1.powi(state.step as i32);
    let bc2 = 1.0 - hyper.beta2.powi(state.step as i32);
    for (name, g) in grads {
        let w = weights
            .get_mut(name)
            .ok_or_else(|| Error::UnknownName(name.clone()))?;
        if w.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                context: "adamw gradient",
                expected: w.shape().to_vec(),
                actual: g.shape().to_vec(),
            });
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.data().len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.data().len()]);
        let wd = w.data_mut();
        for (k, gk) in g.data().iter().enumerate() {
            m[k] = hyper.beta1 * m[k] + (1.0 - hyper.beta1) * gk;
            v[k] = hyper.beta2 * v[k] + (1.0 - hyper.beta2) * gk * gk;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            wd[k] -= hyper.lr * (m_hat / (v_hat.sqrt() + hyper.eps) + hyper.weight_decay * wd[k]);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Teachers
// ---------------------------------------------------------------------------

/// A scorer that can stand in for a stronger model during distillation:
/// given a query and its candidate passages, produce one logit per passage.
pub trait TeacherScorer {
    fn name(&self) -> &str;

    /// One finite logit per passage. `example_id` lets file-backed teachers
    /// look up precomputed rows; model-backed teachers ignore it.
    fn score(
        &self,
        example_id: &str,
        query: &TokenSequence,
        passages: &[TokenSequence],
    ) -> Result<Vec<f64>>;
}

/// A live encoder acting as teacher: scores are plain cosines (temperature
/// 1) between its own encodings of the query and each passage. Inputs are
/// clipped to the teacher's context window, which may differ from the
/// student's.
pub struct EncoderTeacher {
    name: String,
    weights: EncoderWeights,
    config: EncoderConfig,
}

impl EncoderTeacher {
    pub fn new(name: impl Into<String>, weights: EncoderWeights, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            name: name.into(),
            weights,
            config,
        })
    }
}

impl TeacherScorer for EncoderTeacher {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(
        &self,
        _example_id: &str,
        query: &TokenSequence,
        passages: &[TokenSequence],
    ) -> Result<Vec<f64>> {
        if passages.is_empty() {
            return Err(Error::EmptyInput("teacher passages"));
        }
        let mut seqs = Vec::with_capacity(1 + passages.len());
        seqs.push(query.truncated(self.config.max_len)?);
        for p in passages {
            seqs.push(p.truncated(self.config.max_len)?);
        }
        let emb = encode(&self.weights, &self.config, &seqs)?;
        (1..seqs.len())
            .map(|r| scaled_cosine(emb.row2(0), emb.row2(r), 1.0))
            .collect()
    }
}

/// A file-backed teacher: a table of logit rows keyed by example id.
pub struct PrecomputedTeacher {
    name: String,
    table: BTreeMap<String, Vec<f64>>,
}

impl PrecomputedTeacher {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            table: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, example_id: impl Into<String>, scores: Vec<f64>) -> Result<()> {
        for s in &scores {
            if !s.is_finite() {
                return Err(Error::NonFinite("precomputed teacher scores"));
            }
        }
        self.table.insert(example_id.into(), scores);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl TeacherScorer for PrecomputedTeacher {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(
        &self,
        example_id: &str,
        _query: &TokenSequence,
        passages: &[TokenSequence],
    ) -> Result<Vec<f64>> {
        let row = self
            .table
            .get(example_id)
            .ok_or_else(|| Error::UnknownName(example_id.to_string()))?;
        if row.len() != passages.len() {
            return Err(Error::ShapeMismatch {
                context: "precomputed teacher scores",
                expected: vec![passages.len()],
                actual: vec![row.len()],
            });
        }
        Ok(row.clone())
    }
}

/// Language-keyed teacher routing with an optional fallback.
#[derive(Default)]
pub struct TeacherSet {
    by_language: BTreeMap<String, Box<dyn TeacherScorer>>,
    default: Option<Box<dyn TeacherScorer>>,
}

impl TeacherSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, language: impl Into<String>, teacher: Box<dyn TeacherScorer>) {
        self.by_language.insert(language.into(), teacher);
    }

    pub fn set_default(&mut self, teacher: Box<dyn TeacherScorer>) {
        self.default = Some(teacher);
    }

    /// The teacher for a language: the exact mapping if present, else the
    /// default, else an error naming the language.
    pub fn resolve(&self, language: &str) -> Result<&dyn TeacherScorer> {
        if let Some(t) = self.by_language.get(language) {
            return Ok(t.as_ref());
        }
        self.default
            .as_deref()
            .ok_or_else(|| Error::MissingTeacher(language.to_string()))
    }
}

/// One routing decision: which teacher scored which batch.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RoutingRecord {
    pub step: usize,
    pub language: String,
    pub teacher: String,
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

/// What a training loop hands back: final weights plus per-step diagnostics.
/// `routing` stays empty outside distillation.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: EncoderWeights,
    /// One loss value per optimizer step.
    pub loss_trace: Vec<f64>,
    /// Global L2 norm of the full gradient at each step, pre-update.
    pub grad_norms: Vec<f64>,
    pub routing: Vec<RoutingRecord>,
}

fn expect_stage(tconfig: &TrainConfig, want: TrainStage) -> Result<()> {
    if tconfig.stage != want {
        return Err(Error::invalid(
            "stage",
            format!("this loop requires {}, config says {}", want.label(), tconfig.stage.label()),
        ));
    }
    Ok(())
}

/// Clip and collect one batch's query and candidate sequences. Candidate
/// counts must agree across the batch so passages form a dense `[n, m, d]`
/// block.
fn batch_sequences(
    examples: &[&TrainingExample],
    max_seq_len: usize,
) -> Result<(Vec<TokenSequence>, Vec<TokenSequence>, usize)> {
    let m = examples[0].candidates();
    let mut q_seqs = Vec::with_capacity(examples.len());
    let mut p_seqs = Vec::with_capacity(examples.len() * m);
    for ex in examples {
        if ex.candidates() != m {
            return Err(Error::invalid(
                "negatives",
                format!(
                    "examples in a batch must have equal candidate counts: {} has {}, expected {}",
                    ex.id,
                    ex.candidates(),
                    m
                ),
            ));
        }
        q_seqs.push(ex.query.truncated(max_seq_len)?);
        p_seqs.push(ex.positive.truncated(max_seq_len)?);
        for neg in &ex.negatives {
            p_seqs.push(neg.truncated(max_seq_len)?);
        }
    }
    Ok((q_seqs, p_seqs, m))
}

/// Undo [`expand_in_batch_negatives`] on a passage gradient: slots `< m` of
/// row `i` map straight back, and tail slot `m + t` accumulates onto
/// candidate 0 of the `t`-th other example (ascending order, skipping `i`),
/// mirroring the expansion layout exactly.
fn fold_expanded_passage_grads(grad: &DenseTensor, m: usize) -> Result<DenseTensor> {
    let n = grad.shape()[0];
    let d = grad.shape()[2];
    if grad.shape()[1] != m + n - 1 {
        return Err(Error::ShapeMismatch {
            context: "expanded passage gradient",
            expected: vec![n, m + n - 1, d],
            actual: grad.shape().to_vec(),
        });
    }
    let mut out = DenseTensor::zeros(vec![n, m, d])?;
    for i in 0..n {
        for j in 0..m {
            let src = grad.row3(i, j);
            let dst = out.row3_mut(i, j);
            for k in 0..d {
                dst[k] += src[k];
            }
        }
        let mut t = 0;
        for i2 in 0..n {
            if i2 == i {
                continue;
            }
            let src = grad.row3(i, m + t);
            let dst = out.row3_mut(i2, 0);
            for k in 0..d {
                dst[k] += src[k];
            }
            t += 1;
        }
    }
    Ok(out)
}

fn accumulate_grads(
    into: &mut BTreeMap<String, DenseTensor>,
    from: BTreeMap<String, DenseTensor>,
) -> Result<()> {
    for (name, t) in from {
        match into.get_mut(&name) {
            Some(dst) => dst.add_scaled(&t, 1.0)?,
            None => {
                into.insert(name, t);
            }
        }
    }
    Ok(())
}

fn grad_global_norm(grads: &BTreeMap<String, DenseTensor>) -> f64 {
    let mut sq = 0.0;
    for t in grads.values() {
        for v in t.data() {
            sq += v * v;
        }
    }
    sq.sqrt()
}

struct StepGrads {
    loss: f64,
    grads: BTreeMap<String, DenseTensor>,
}

/// Loss and full weight gradient for one contrastive (or prefix-laddered)
/// step: encode, expand in-batch negatives, evaluate the loss, fold the
/// expanded passage gradient back, and push both sides through the encoder
/// backward pass.
fn contrastive_step_grads(
    weights: &EncoderWeights,
    config: &EncoderConfig,
    examples: &[&TrainingExample],
    max_seq_len: usize,
    cparams: &ContrastiveParams,
    mrl: Option<&MRLParams>,
) -> Result<StepGrads> {
    let (q_seqs, p_seqs, m) = batch_sequences(examples, max_seq_len)?;
    let n = examples.len();
    let q_emb = encode(weights, config, &q_seqs)?;
    let p_emb = encode(weights, config, &p_seqs)?;
    let d = q_emb.shape()[1];
    let p3 = DenseTensor::new(vec![n, m, d], p_emb.data().to_vec())?;
    let batch = EmbeddingBatch::new(q_emb.clone(), p3)?;
    // A singleton batch (trailing partial) has no in-batch negatives to add.
    let (loss, grad_q, grad_p) = if n >= 2 {
        let expanded = expand_in_batch_negatives(&batch)?;
        let out = match mrl {
            Some(mp) => mrl_loss(&expanded, cparams, mp)?,
            None => contrastive_loss(&expanded, cparams)?,
        };
        let folded = fold_expanded_passage_grads(&out.grad_p, m)?;
        (out.loss, out.grad_q, folded)
    } else {
        let out = match mrl {
            Some(mp) => mrl_loss(&batch, cparams, mp)?,
            None => contrastive_loss(&batch, cparams)?,
        };
        (out.loss, out.grad_q, out.grad_p)
    };
    let grad_p_flat = DenseTensor::new(vec![n * m, d], grad_p.data().to_vec())?;
    let mut grads = encode_backward(weights, config, &q_seqs, &grad_q)?.into_tensors();
    let p_side = encode_backward(weights, config, &p_seqs, &grad_p_flat)?.into_tensors();
    accumulate_grads(&mut grads, p_side)?;
    Ok(StepGrads { loss, grads })
}

fn run_contrastive_loop(
    mut weights: EncoderWeights,
    config: &EncoderConfig,
    data: &[TrainingExample],
    tconfig: &TrainConfig,
    cparams: &ContrastiveParams,
    mrl: Option<&MRLParams>,
) -> Result<TrainOutcome> {
    tconfig.validate()?;
    config.validate()?;
    cparams.validate()?;
    let plans = build_batches(data, tconfig.batch_size, tconfig.seed)?;
    let hyper = AdamHyper::with_lr(tconfig.learning_rate);
    let mut state = AdamState::new();
    let mut loss_trace = Vec::with_capacity(tconfig.steps);
    let mut grad_norms = Vec::with_capacity(tconfig.steps);
    for step in 0..tconfig.steps {
        let plan = &plans[step % plans.len()];
        let examples: Vec<&TrainingExample> = plan.indices.iter().map(|&i| &data[i]).collect();
        let sg = contrastive_step_grads(&weights, config, &examples, tconfig.max_seq_len, cparams, mrl)?;
        grad_norms.push(grad_global_norm(&sg.grads));
        adamw_step(weights.tensors_mut(), &sg.grads, &mut state, &hyper)?;
        loss_trace.push(sg.loss);
    }
    Ok(TrainOutcome {
        weights,
        loss_trace,
        grad_norms,
        routing: Vec::new(),
    })
}

/// Contrastive fine-tuning. Each step encodes one planned batch, adds the
/// other examples' positives as in-batch negatives, evaluates the
/// contrastive loss (or its prefix ladder when `mrl` is given), and applies
/// one optimizer update. Cycles over the batch plans when `steps` exceeds
/// the plan count.
pub fn train_contrastive(
    weights: EncoderWeights,
    config: &EncoderConfig,
    data: &[TrainingExample],
    tconfig: &TrainConfig,
    cparams: &ContrastiveParams,
    mrl: Option<&MRLParams>,
) -> Result<TrainOutcome> {
    expect_stage(tconfig, TrainStage::ContrastiveFt)?;
    run_contrastive_loop(weights, config, data, tconfig, cparams, mrl)
}

/// Context-extension continuation: the same loop as [`train_contrastive`],
/// run on a config that has already been rescaled to the longer window (see
/// `rope_rescale`) with longer sequences and a lower learning rate.
/// Sequences beyond the extended window still error out of `encode`.
pub fn train_context_extension(
    weights: EncoderWeights,
    config: &EncoderConfig,
    data: &[TrainingExample],
    tconfig: &TrainConfig,
    cparams: &ContrastiveParams,
) -> Result<TrainOutcome> {
    expect_stage(tconfig, TrainStage::ContextExtension)?;
    run_contrastive_loop(weights, config, data, tconfig, cparams, None)
}

/// Loss and gradient for one distillation step: student logits are plain
/// cosines (temperature 1) over its own encodings of each example's
/// candidates, the teacher scores the same clipped sequences, and the
/// distillation gradient chains back through each cosine pair.
fn distill_step_grads(
    weights: &EncoderWeights,
    config: &EncoderConfig,
    teacher: &dyn TeacherScorer,
    examples: &[&TrainingExample],
    max_seq_len: usize,
    kdparams: &KDParams,
) -> Result<StepGrads> {
    let (q_seqs, p_seqs, m) = batch_sequences(examples, max_seq_len)?;
    let n = examples.len();
    let q_emb = encode(weights, config, &q_seqs)?;
    let p_emb = encode(weights, config, &p_seqs)?;
    let d = q_emb.shape()[1];
    let mut s_rows = Vec::with_capacity(n);
    let mut t_rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = Vec::with_capacity(m);
        for j in 0..m {
            row.push(scaled_cosine(q_emb.row2(i), p_emb.row2(i * m + j), 1.0)?);
        }
        s_rows.push(row);
        let candidates = &p_seqs[i * m..(i + 1) * m];
        t_rows.push(teacher.score(&examples[i].id, &q_seqs[i], candidates)?);
    }
    let student = ScoreMatrix::from_rows(&s_rows)?;
    let teacher_scores = ScoreMatrix::from_rows(&t_rows)?;
    let kd = kd_loss(&student, &teacher_scores, kdparams)?;
    let mut grad_q = DenseTensor::zeros(vec![n, d])?;
    let mut grad_p = DenseTensor::zeros(vec![n * m, d])?;
    for i in 0..n {
        for j in 0..m {
            let g = kd.grad.at2(i, j);
            // Skipping exact zeros keeps self-distillation a true no-op.
            if g == 0.0 {
                continue;
            }
            let (dq, dp) = scaled_cosine_backward(q_emb.row2(i), p_emb.row2(i * m + j), 1.0, g)?;
            let qd = grad_q.row2_mut(i);
            for k in 0..d {
                qd[k] += dq[k];
            }
            let pd = grad_p.row2_mut(i * m + j);
            for k in 0..d {
                pd[k] += dp[k];
            }
        }
    }
    let mut grads = encode_backward(weights, config, &q_seqs, &grad_q)?.into_tensors();
    let p_side = encode_backward(weights, config, &p_seqs, &grad_p)?.into_tensors();
    accumulate_grads(&mut grads, p_side)?;
    Ok(StepGrads { loss: kd.loss, grads })
}

/// Teacher-routed distillation. Each batch is scored by the teacher mapped
/// to its language (or the default), so no teacher ever sees another
/// language's batch; every routing decision is recorded in the outcome.
pub fn train_distill(
    weights: EncoderWeights,
    config: &EncoderConfig,
    data: &[TrainingExample],
    teachers: &TeacherSet,
    tconfig: &TrainConfig,
    kdparams: &KDParams,
) -> Result<TrainOutcome> {
    expect_stage(tconfig, TrainStage::ContrastiveKd)?;
    tconfig.validate()?;
    config.validate()?;
    kdparams.validate()?;
    let plans = build_batches(data, tconfig.batch_size, tconfig.seed)?;
    // Fail before touching any weights if some language cannot be routed.
    for plan in &plans {
        teachers.resolve(&plan.language)?;
    }
    let hyper = AdamHyper::with_lr(tconfig.learning_rate);
    let mut state = AdamState::new();
    let mut weights = weights;
    let mut loss_trace = Vec::with_capacity(tconfig.steps);
    let mut grad_norms = Vec::with_capacity(tconfig.steps);
    let mut routing = Vec::with_capacity(tconfig.steps);
    for step in 0..tconfig.steps {
        let plan = &plans[step % plans.len()];
        let teacher = teachers.resolve(&plan.language)?;
        routing.push(RoutingRecord {
            step,
            language: plan.language.clone(),
            teacher: teacher.name().to_string(),
        });
        let examples: Vec<&TrainingExample> = plan.indices.iter().map(|&i| &data[i]).collect();
        let sg = distill_step_grads(&weights, config, teacher, &examples, tconfig.max_seq_len, kdparams)?;
        grad_norms.push(grad_global_norm(&sg.grads));
        adamw_step(weights.tensors_mut(), &sg.grads, &mut state, &hyper)?;
        loss_trace.push(sg.loss);
    }
    Ok(TrainOutcome {
        weights,
        loss_trace,
        grad_norms,
        routing,
    })
}

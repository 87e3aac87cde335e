//! Central finite-difference verification of every analytic gradient in the
//! crate, plus seeded instance generators for reproducible check batteries.
//!
//! The relative-error measure is
//! `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`, maximized
//! over all perturbed coordinates.
//!
//! A note on instance geometry: at sharp temperatures (the default
//! `tau = 0.02`) the partition softmax saturates for arbitrary random
//! embeddings — most gradient coordinates land around `1e-8..1e-15`, where
//! central differences at `eps = 1e-5` are pure cancellation noise and the
//! comparison measures the checker, not the gradient. The generators below
//! therefore draw embeddings from a tight cone around a shared direction,
//! keeping logit spreads small enough that every gradient coordinate stays
//! well above the noise floor, while still exercising all code paths.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{encode, encode_backward, EncoderConfig, EncoderWeights, TokenSequence};
use crate::error::{Error, Result};
use crate::losses::{
    contrastive_loss, kd_loss, mrl_loss, ContrastiveParams, EmbeddingBatch, KDParams, MRLParams,
};
use crate::tensor::{dot, l2_normalize, DenseTensor, ScoreMatrix};

/// One loss evaluation point: everything needed to compute the loss and its
/// gradient.
#[derive(Debug, Clone)]
pub enum LossInstance {
    Contrastive {
        batch: EmbeddingBatch,
        params: ContrastiveParams,
    },
    Kd {
        student: ScoreMatrix,
        teacher: ScoreMatrix,
        params: KDParams,
    },
    Mrl {
        batch: EmbeddingBatch,
        cparams: ContrastiveParams,
        mparams: MRLParams,
    },
}

impl LossInstance {
    pub fn kind(&self) -> &'static str {
        match self {
            LossInstance::Contrastive { .. } => "contrastive",
            LossInstance::Kd { .. } => "kd",
            LossInstance::Mrl { .. } => "mrl",
        }
    }
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckReport {
    /// Worst relative error over all coordinates.
    pub max_rel_err: f64,
    /// Number of coordinates perturbed.
    pub coords: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

fn validate_eps(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::invalid(
            "epsilon",
            format!("must lie in (0, 1e-2], got {epsilon}"),
        ));
    }
    Ok(())
}

/// Compare the analytic gradient of a loss against central differences over
/// every input coordinate (embeddings for the contrastive/MRL losses,
/// student scores for distillation).
pub fn finite_difference_check(instance: &LossInstance, epsilon: f64) -> Result<CheckReport> {
    validate_eps(epsilon)?;
    match instance {
        LossInstance::Contrastive { batch, params } => {
            let out = contrastive_loss(batch, params)?;
            check_batch_coords(batch, epsilon, &out.grad_q, &out.grad_p, |b| {
                Ok(contrastive_loss(b, params)?.loss)
            })
        }
        LossInstance::Mrl {
            batch,
            cparams,
            mparams,
        } => {
            let out = mrl_loss(batch, cparams, mparams)?;
            check_batch_coords(batch, epsilon, &out.grad_q, &out.grad_p, |b| {
                Ok(mrl_loss(b, cparams, mparams)?.loss)
            })
        }
        LossInstance::Kd {
            student,
            teacher,
            params,
        } => {
            let out = kd_loss(student, teacher, params)?;
            let mut worst = 0.0f64;
            let mut data = student.tensor().data().to_vec();
            let shape = student.tensor().shape().to_vec();
            for idx in 0..data.len() {
                let orig = data[idx];
                data[idx] = orig + epsilon;
                let up = kd_loss(
                    &ScoreMatrix::new(DenseTensor::new(shape.clone(), data.clone())?)?,
                    teacher,
                    params,
                )?
                .loss;
                data[idx] = orig - epsilon;
                let dn = kd_loss(
                    &ScoreMatrix::new(DenseTensor::new(shape.clone(), data.clone())?)?,
                    teacher,
                    params,
                )?
                .loss;
                data[idx] = orig;
                worst = worst.max(rel_err(out.grad.data()[idx], (up - dn) / (2.0 * epsilon)));
            }
            Ok(CheckReport {
                max_rel_err: worst,
                coords: data.len(),
            })
        }
    }
}

fn check_batch_coords(
    batch: &EmbeddingBatch,
    epsilon: f64,
    grad_q: &DenseTensor,
    grad_p: &DenseTensor,
    f: impl Fn(&EmbeddingBatch) -> Result<f64>,
) -> Result<CheckReport> {
    let mut worst = 0.0f64;
    let mut q = batch.q().clone();
    let mut p = batch.p().clone();
    for idx in 0..q.len() {
        let orig = q.data()[idx];
        q.data_mut()[idx] = orig + epsilon;
        let up = f(&EmbeddingBatch::new(q.clone(), p.clone())?)?;
        q.data_mut()[idx] = orig - epsilon;
        let dn = f(&EmbeddingBatch::new(q.clone(), p.clone())?)?;
        q.data_mut()[idx] = orig;
        worst = worst.max(rel_err(grad_q.data()[idx], (up - dn) / (2.0 * epsilon)));
    }
    for idx in 0..p.len() {
        let orig = p.data()[idx];
        p.data_mut()[idx] = orig + epsilon;
        let up = f(&EmbeddingBatch::new(q.clone(), p.clone())?)?;
        p.data_mut()[idx] = orig - epsilon;
        let dn = f(&EmbeddingBatch::new(q.clone(), p.clone())?)?;
        p.data_mut()[idx] = orig;
        worst = worst.max(rel_err(grad_p.data()[idx], (up - dn) / (2.0 * epsilon)));
    }
    Ok(CheckReport {
        max_rel_err: worst,
        coords: q.len() + p.len(),
    })
}

/// Finite-difference check of `encode_backward` against the scalar objective
/// `sum(cotangent * encode(batch))`, perturbing every weight coordinate.
pub fn check_encoder(
    weights: &EncoderWeights,
    config: &EncoderConfig,
    batch: &[TokenSequence],
    cotangent: &DenseTensor,
    epsilon: f64,
) -> Result<CheckReport> {
    validate_eps(epsilon)?;
    let grads = encode_backward(weights, config, batch, cotangent)?;
    let objective = |w: &EncoderWeights| -> Result<f64> {
        dot(encode(w, config, batch)?.data(), cotangent.data())
    };
    let mut worst = 0.0f64;
    let mut coords = 0usize;
    let mut work = weights.clone();
    let names: Vec<_> = weights.tensors().keys().cloned().collect();
    for name in &names {
        let len = weights.get(name)?.len();
        coords += len;
        for idx in 0..len {
            let orig = work.get(name)?.data()[idx];
            work.tensors_mut().get_mut(name).unwrap().data_mut()[idx] = orig + epsilon;
            let up = objective(&work)?;
            work.tensors_mut().get_mut(name).unwrap().data_mut()[idx] = orig - epsilon;
            let dn = objective(&work)?;
            work.tensors_mut().get_mut(name).unwrap().data_mut()[idx] = orig;
            worst = worst.max(rel_err(grads.get(name)?.data()[idx], (up - dn) / (2.0 * epsilon)));
        }
    }
    Ok(CheckReport {
        max_rel_err: worst,
        coords,
    })
}

/// Embeddings drawn from a tight cone: `normalize(center + spread * noise)`.
/// See the module docs for why sharp-temperature checks need this shape.
pub fn clustered_batch(seed: u64, n: usize, m: usize, d: usize, spread: f64) -> Result<EmbeddingBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center: Vec<f64> = l2_normalize(
        &(0..d)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect::<Vec<f64>>(),
    )?;
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let v: Vec<f64> = center
            .iter()
            .map(|c| c + spread * rng.random_range(-1.0..1.0))
            .collect();
        v
    };
    let mut q = Vec::with_capacity(n * d);
    for _ in 0..n {
        q.extend(draw(&mut rng));
    }
    let mut p = Vec::with_capacity(n * m * d);
    for _ in 0..n * m {
        p.extend(draw(&mut rng));
    }
    EmbeddingBatch::new(
        DenseTensor::new(vec![n, d], q)?,
        DenseTensor::new(vec![n, m, d], p)?,
    )
}

/// Seeded contrastive instance at the production-default sharp temperature.
pub fn contrastive_instance(seed: u64) -> Result<LossInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9));
    let n = rng.random_range(2..=4);
    let m = rng.random_range(2..=4);
    let d = [4, 8][rng.random_range(0..2usize)];
    Ok(LossInstance::Contrastive {
        batch: clustered_batch(seed, n, m, d, 0.15)?,
        params: ContrastiveParams::default(),
    })
}

/// Seeded distillation instance with moderate logit ranges.
pub fn kd_instance(seed: u64, tau_kd: f64) -> Result<LossInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995);
    let n = rng.random_range(2..=4);
    let m = rng.random_range(2..=4);
    let mut fill = |len: usize| -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-2.0..2.0)).collect()
    };
    let student = ScoreMatrix::new(DenseTensor::new(vec![n, m], fill(n * m))?)?;
    let teacher = ScoreMatrix::new(DenseTensor::new(vec![n, m], fill(n * m))?)?;
    Ok(LossInstance::Kd {
        student,
        teacher,
        params: KDParams {
            tau_kd,
            mean_reduce: false,
        },
    })
}

/// Seeded matryoshka instance over the `[8, 4, 2]` ladder.
pub fn mrl_instance(seed: u64) -> Result<LossInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc2b2_ae35);
    let n = rng.random_range(2..=4);
    let m = rng.random_range(2..=3);
    Ok(LossInstance::Mrl {
        batch: clustered_batch(seed ^ 0xff, n, m, 8, 0.15)?,
        cparams: ContrastiveParams::default(),
        mparams: MRLParams::uniform(vec![8, 4, 2])?,
    })
}

/// Seeded small-encoder instance: a config within the checkable envelope
/// (layers <= 2, dim <= 16), fresh weights, a short batch, and a random
/// cotangent.
pub fn encoder_instance(
    seed: u64,
) -> Result<(EncoderWeights, EncoderConfig, Vec<TokenSequence>, DenseTensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x27d4_eb2f);
    let layers = rng.random_range(1..=2);
    let config = EncoderConfig {
        vocab_size: 12,
        dim: 8,
        layers,
        heads: 2,
        ffn_dim: 10,
        activation: if rng.random_range(0..2) == 0 {
            crate::encoder::Activation::Gelu
        } else {
            crate::encoder::Activation::Silu
        },
        max_len: 6,
        rope_theta: 100.0,
        global_every_k: 2,
        local_window: 3,
        pooling: match rng.random_range(0..3) {
            0 => crate::encoder::Pooling::Cls,
            1 => crate::encoder::Pooling::Mean,
            _ => crate::encoder::Pooling::LastToken,
        },
    };
    let weights = crate::encoder::init_weights(&config, seed)?;
    let n = rng.random_range(1..=2);
    let batch: Vec<TokenSequence> = (0..n)
        .map(|_| {
            let len = rng.random_range(2..=5);
            TokenSequence::new(
                (0..len)
                    .map(|_| rng.random_range(0..config.vocab_size as u32))
                    .collect(),
            )
        })
        .collect::<Result<_>>()?;
    let mut cot = DenseTensor::zeros(vec![batch.len(), config.dim])?;
    for v in cot.data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    Ok((weights, config, batch, cot))
}

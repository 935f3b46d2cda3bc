//! Loss, grouped-learning-rate SGD, the source-domain training loop, and
//! checkpoint IO.

use std::collections::BTreeMap;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{FeatureExtractor, ToyEncoder};
use crate::error::{Error, Result};
use crate::mask_module::{gate_grads, MaskGrads, MaskSnapshot};
use crate::model::{ModelConfig, QaModel};
use crate::numkernel::{log_sum_exp, softmax_positions, RealMatrix, RealVector, SeededRng, Stream, TensorData};
use crate::qa_task::{QASample, SpanLabel};
use crate::util;

/// Cross-entropy plus the mask sparsity penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub sparsity: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn zero() -> Self {
        Self {
            ce: 0.0,
            sparsity: 0.0,
            total: 0.0,
        }
    }

    pub fn add(&mut self, other: &LossBreakdown) {
        self.ce += other.ce;
        self.sparsity += other.sparsity;
        self.total += other.total;
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            ce: self.ce * factor,
            sparsity: self.sparsity * factor,
            total: self.total * factor,
        }
    }
}

/// Learning-rate groups, sparsity weight, and loop sizes.
///
/// `lr_mask` drives the whole mask module (mask logits, bottleneck, head);
/// `lr_encoder` drives the feature extractor and is kept much smaller, which
/// is what bounds how far the encoder drifts during adaptation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr_mask: f64,
    pub lr_encoder: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub epochs_source: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr_mask: 0.1,
            lr_encoder: 0.01,
            lambda: 0.75,
            batch_size: 32,
            epochs_source: 30,
            seed: 42,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_mask <= 0.0 || self.lr_encoder <= 0.0 {
            return Err(Error::Config(format!(
                "learning rates must be positive, got lr_mask={} lr_encoder={}",
                self.lr_mask, self.lr_encoder
            )));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Span cross-entropy averaged over the start and end heads, plus the
/// sparsity penalty `lambda * sum(mask) / b`. Returns the exact gradient of
/// the cross-entropy part with respect to the logits; the sparsity gradient
/// goes straight to the mask logits and is the caller's job.
pub fn qa_loss(
    logits: &RealMatrix,
    gold: &SpanLabel,
    mask: &RealVector,
    lambda: f64,
    context_interval: Range<usize>,
) -> Result<(LossBreakdown, RealMatrix)> {
    if gold.start < context_interval.start || gold.end >= context_interval.end {
        return Err(Error::Label(format!(
            "gold span ({}, {}) lies outside the context interval {}..{}",
            gold.start, gold.end, context_interval.start, context_interval.end
        )));
    }
    let len = logits.rows();
    if context_interval.end > len || logits.cols() != 2 {
        return Err(Error::Shape {
            op: "qa_loss",
            left: format!("logits {}", logits.shape_string()),
            right: format!(
                "interval {}..{}",
                context_interval.start, context_interval.end
            ),
        });
    }
    let start_logits = RealVector::from_vec((0..len).map(|t| logits.get(t, 0)).collect());
    let end_logits = RealVector::from_vec((0..len).map(|t| logits.get(t, 1)).collect());
    let lse_start = log_sum_exp(&start_logits, context_interval.clone())?;
    let lse_end = log_sum_exp(&end_logits, context_interval.clone())?;
    let ce = 0.5
        * ((lse_start - start_logits.get(gold.start)) + (lse_end - end_logits.get(gold.end)));

    let p_start = softmax_positions(&start_logits, context_interval.clone())?;
    let p_end = softmax_positions(&end_logits, context_interval.clone())?;
    let mut grad = RealMatrix::zeros(len, 2);
    for t in context_interval {
        let mut gs = 0.5 * p_start.get(t);
        let mut ge = 0.5 * p_end.get(t);
        if t == gold.start {
            gs -= 0.5;
        }
        if t == gold.end {
            ge -= 0.5;
        }
        grad.set(t, 0, gs);
        grad.set(t, 1, ge);
    }

    let sparsity = lambda * mask.sum() / mask.len() as f64;
    Ok((
        LossBreakdown {
            ce,
            sparsity,
            total: ce + sparsity,
        },
        grad,
    ))
}

/// Gradients for every trainable tensor of a model.
pub struct ModelGrads<E: FeatureExtractor> {
    pub encoder: E::Grads,
    pub mask: MaskGrads,
}

impl<E: FeatureExtractor> ModelGrads<E> {
    pub fn zeros(model: &QaModel<E>) -> Self {
        Self {
            encoder: model.encoder.zero_grads(),
            mask: MaskGrads::zeros(model.mask.bottleneck_dim(), model.mask.feature_dim()),
        }
    }

    pub fn add(&mut self, other: &ModelGrads<E>) -> Result<()> {
        E::add_grads(&mut self.encoder, &other.encoder)?;
        self.mask.add(&other.mask)
    }

    pub fn scale(&mut self, factor: f64) {
        E::scale_grads(&mut self.encoder, factor);
        self.mask.scale(factor);
    }
}

/// Full pipeline loss and gradients for one labelled sample. The gold span is
/// checked against the packed context window, so labels lost to truncation
/// surface as errors instead of silent nonsense.
pub fn sample_loss_and_grads<E: FeatureExtractor>(
    model: &QaModel<E>,
    sample: &QASample,
    lambda: f64,
) -> Result<(LossBreakdown, ModelGrads<E>)> {
    let gold = sample
        .answer
        .ok_or_else(|| Error::Data(format!("sample {} has no label", sample.id)))?;
    let fwd = model.forward_sample(sample)?;
    let mask_values = model.mask.mask_values();
    let lambda_eff = if model.mask.is_enabled() { lambda } else { 0.0 };
    let (loss, grad_logits) = qa_loss(
        &fwd.logits,
        &gold,
        &mask_values,
        lambda_eff,
        0..fwd.input.context_len(),
    )?;
    let (mut mask_grads, grad_features) = model.mask.backward(&grad_logits, &fwd.cache)?;
    if model.mask.is_enabled() && lambda_eff != 0.0 {
        let k = model.mask.sharpness();
        let b = mask_values.len() as f64;
        for (g, &m) in mask_grads
            .mask_logits
            .data_mut()
            .iter_mut()
            .zip(mask_values.data())
        {
            *g += lambda_eff / b * k * m * (1.0 - m);
        }
    }
    let encoder_grads = model.encoder.backward(&fwd.input, &grad_features)?;
    Ok((
        loss,
        ModelGrads {
            encoder: encoder_grads,
            mask: mask_grads,
        },
    ))
}

/// One SGD step. With a gate present the mask-module gradients are scaled by
/// the snapshot complement first; mask tensors use `lr_mask`, encoder tensors
/// `lr_encoder`.
pub fn apply_updates<E: FeatureExtractor>(
    model: &mut QaModel<E>,
    grads: &ModelGrads<E>,
    cfg: &OptimizerConfig,
    gate: Option<&MaskSnapshot>,
) -> Result<()> {
    match gate {
        Some(snapshot) => {
            let gated = gate_grads(&grads.mask, snapshot);
            model.mask.sgd_step(&gated, cfg.lr_mask)?;
        }
        None => model.mask.sgd_step(&grads.mask, cfg.lr_mask)?,
    }
    model.encoder.sgd_step(&grads.encoder, cfg.lr_encoder)
}

/// Mean batch loss and gradients; samples fan out across the thread pool,
/// the reduction is sequential and therefore bit-stable.
pub fn batch_loss_and_grads<E>(
    model: &QaModel<E>,
    samples: &[&QASample],
    lambda: f64,
) -> Result<(LossBreakdown, ModelGrads<E>)>
where
    E: FeatureExtractor + Sync,
    E::Grads: Send,
{
    let per_sample: Vec<(LossBreakdown, ModelGrads<E>)> = util::pool().install(|| {
        samples
            .par_iter()
            .map(|s| sample_loss_and_grads(model, s, lambda))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut total = LossBreakdown::zero();
    let mut grads = ModelGrads::zeros(model);
    for (loss, g) in &per_sample {
        total.add(loss);
        grads.add(g)?;
    }
    let inv = 1.0 / samples.len() as f64;
    grads.scale(inv);
    Ok((total.scaled(inv), grads))
}

/// Per-epoch training log record.
#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub ce: f64,
    pub sparsity: f64,
    pub total: f64,
    pub active_fraction: f64,
}

/// Shuffled mini-batch SGD on labelled source data, no gating. On completion
/// the mask snapshot is captured (unless the mask is disabled) and stored on
/// the model.
pub fn train_source<E>(
    model: &mut QaModel<E>,
    data: &[QASample],
    cfg: &OptimizerConfig,
) -> Result<(Option<MaskSnapshot>, Vec<EpochStats>)>
where
    E: FeatureExtractor + Sync,
    E::Grads: Send,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("source training set is empty".into()));
    }
    for s in data {
        if s.answer.is_none() {
            return Err(Error::Data(format!(
                "unlabelled sample {} in source training data",
                s.id
            )));
        }
    }
    let mut rng = SeededRng::new(cfg.seed, Stream::Shuffle);
    let mut log = Vec::with_capacity(cfg.epochs_source);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.epochs_source {
        rng.shuffle(&mut order);
        let mut epoch_loss = LossBreakdown::zero();
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let samples: Vec<&QASample> = batch.iter().map(|&i| &data[i]).collect();
            let (loss, grads) = batch_loss_and_grads(model, &samples, cfg.lambda)?;
            apply_updates(model, &grads, cfg, None)?;
            epoch_loss.add(&loss);
            batches += 1;
        }
        let mean = epoch_loss.scaled(1.0 / batches as f64);
        log.push(EpochStats {
            epoch,
            ce: mean.ce,
            sparsity: mean.sparsity,
            total: mean.total,
            active_fraction: model.mask.active_fraction(),
        });
    }
    let snapshot = if model.mask.is_enabled() {
        let snap = model.mask.snapshot();
        model.snapshot = Some(snap.clone());
        Some(snap)
    } else {
        model.snapshot = None;
        None
    };
    Ok((snapshot, log))
}

/// Write the training log as CSV: epoch, ce, sparsity, total, active_fraction.
pub fn write_train_log<P: AsRef<Path>>(log: &[EpochStats], path: P) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["epoch", "ce", "sparsity", "total", "active_fraction"])
        .map_err(csv_err)?;
    for row in log {
        w.write_record([
            row.epoch.to_string(),
            row.ce.to_string(),
            row.sparsity.to_string(),
            row.total.to_string(),
            row.active_fraction.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv error: {e}"))
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// JSON checkpoint envelope. Tensors are base64 little-endian f64 payloads,
/// so `load(save(x))` is bit-identical.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ModelConfig,
    pub tensors: BTreeMap<String, TensorData>,
    pub snapshot: Option<MaskSnapshot>,
    pub optimizer: OptimizerConfig,
    /// Master seed the run was driven by; stream labels are fixed in code.
    pub rng_seed: u64,
}

impl Checkpoint {
    pub fn capture(model: &QaModel<ToyEncoder>, optimizer: &OptimizerConfig) -> Self {
        let mut tensors = model.encoder.named_tensors();
        tensors.extend(model.mask.named_tensors());
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model: model.config.clone(),
            tensors,
            snapshot: model.snapshot.clone(),
            optimizer: optimizer.clone(),
            rng_seed: optimizer.seed,
        }
    }

    pub fn restore(self) -> Result<QaModel<ToyEncoder>> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Version {
                found: self.format_version,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        let mut model = QaModel::new(self.model.clone(), 0)?;
        model.encoder.load_tensors(&self.tensors)?;
        model.mask.load_tensors(&self.tensors)?;
        model.snapshot = self.snapshot;
        Ok(model)
    }
}

pub fn save_checkpoint<P: AsRef<Path>>(path: P, ckpt: &Checkpoint) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    serde_json::to_writer(&mut w, ckpt)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// The version field is checked before anything else is decoded, so an
/// incompatible file yields a version error and no partial state.
pub fn load_checkpoint<P: AsRef<Path>>(path: P) -> Result<Checkpoint> {
    let raw = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&raw)?;
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Data("checkpoint has no format_version field".into()))?;
    if found != CHECKPOINT_FORMAT_VERSION as u64 {
        return Err(Error::Version {
            found: found as u32,
            expected: CHECKPOINT_FORMAT_VERSION,
        });
    }
    Ok(serde_json::from_value(value)?)
}

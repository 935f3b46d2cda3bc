//! Target-domain adaptation: span decoding with confidence scores,
//! pseudo-label filtering, and the iterative self-training loop with
//! snapshot-gated updates.

use rayon::prelude::*;
use serde::Serialize;

use crate::encoder::FeatureExtractor;
use crate::error::{Error, Result};
use crate::mask_module::MaskSnapshot;
use crate::model::QaModel;
use crate::numkernel::{softmax_positions, RealVector, SeededRng, Stream};
use crate::qa_task::{QASample, SpanLabel};
use crate::training::{apply_updates, batch_loss_and_grads, LossBreakdown, OptimizerConfig};
use crate::util;

/// A decoded span and the product of its start and end probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoredPrediction {
    pub span: SpanLabel,
    pub score: f64,
}

/// One target sample with the model's own prediction attached as its label.
#[derive(Debug, Clone)]
pub struct PseudoLabel {
    pub sample: QASample,
    pub span: SpanLabel,
    pub score: f64,
}

/// The pseudo-labelled subset of the target data for one round.
#[derive(Debug, Clone)]
pub struct PseudoLabeledSet {
    pub entries: Vec<PseudoLabel>,
    pub round: usize,
    pub threshold: f64,
}

impl PseudoLabeledSet {
    pub fn mean_score(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries.iter().map(|e| e.score).sum::<f64>() / self.entries.len() as f64
    }
}

/// Adaptation knobs. The learning rates override the source-phase values;
/// the mask-module rate gets a 5x boost by default so fresh kernels can open
/// before the sharp sigmoid saturates.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdaptConfig {
    /// Confidence threshold; predictions with score strictly above it become
    /// pseudo-labels. Kept constant across rounds.
    pub alpha: f64,
    /// Number of self-training rounds.
    pub rounds: usize,
    pub lr_mask: f64,
    pub lr_encoder: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            rounds: 5,
            lr_mask: 0.5,
            lr_encoder: 0.01,
            batch_size: 2,
            seed: 43,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Domain(format!(
                "alpha must lie strictly inside (0,1), got {}",
                self.alpha
            )));
        }
        if self.rounds < 1 {
            return Err(Error::Domain("at least one adaptation round is required".into()));
        }
        if self.lr_mask <= 0.0 || self.lr_encoder <= 0.0 {
            return Err(Error::Domain("learning rates must be positive".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Domain("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Decode the best valid span: argmax of `p_start[s] * p_end[e]` over all
/// pairs with `s <= e` and `e - s < max_answer_len`. Ties break toward the
/// smaller start, then the smaller end.
pub fn predict_span<E: FeatureExtractor>(
    model: &QaModel<E>,
    sample: &QASample,
) -> Result<ScoredPrediction> {
    let fwd = model.forward_sample(sample)?;
    let len = fwd.input.context_len();
    let start_logits = RealVector::from_vec((0..len).map(|t| fwd.logits.get(t, 0)).collect());
    let end_logits = RealVector::from_vec((0..len).map(|t| fwd.logits.get(t, 1)).collect());
    let p_start = softmax_positions(&start_logits, 0..len)?;
    let p_end = softmax_positions(&end_logits, 0..len)?;
    best_pair(p_start.data(), p_end.data(), model.config.max_answer_len)
}

/// Argmax over valid (start, end) pairs with strict improvement, so the
/// first-seen pair wins ties.
pub(crate) fn best_pair(
    p_start: &[f64],
    p_end: &[f64],
    max_answer_len: usize,
) -> Result<ScoredPrediction> {
    let len = p_start.len();
    if len == 0 {
        return Err(Error::Input("cannot decode a span from an empty context".into()));
    }
    let mut best = (0usize, 0usize);
    let mut best_score = f64::NEG_INFINITY;
    for s in 0..len {
        let e_hi = (s + max_answer_len).min(len);
        for e in s..e_hi {
            let score = p_start[s] * p_end[e];
            if score > best_score {
                best_score = score;
                best = (s, e);
            }
        }
    }
    Ok(ScoredPrediction {
        span: SpanLabel {
            start: best.0,
            end: best.1,
        },
        score: best_score,
    })
}

/// Predict every target sample and keep exactly those whose score is
/// strictly above `alpha`, in input order.
pub fn generate_pseudo_labels<E>(
    model: &QaModel<E>,
    targets: &[QASample],
    alpha: f64,
) -> Result<PseudoLabeledSet>
where
    E: FeatureExtractor + Sync,
{
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!(
            "alpha must lie strictly inside (0,1), got {alpha}"
        )));
    }
    let predictions: Vec<ScoredPrediction> = util::pool().install(|| {
        targets
            .par_iter()
            .map(|s| predict_span(model, s))
            .collect::<Result<Vec<_>>>()
    })?;
    let entries = targets
        .iter()
        .zip(predictions)
        .filter(|(_, p)| p.score > alpha)
        .map(|(s, p)| PseudoLabel {
            sample: s.clone(),
            span: p.span,
            score: p.score,
        })
        .collect();
    Ok(PseudoLabeledSet {
        entries,
        round: 0,
        threshold: alpha,
    })
}

/// Per-round adaptation log record.
#[derive(Debug, Clone, Serialize)]
pub struct RoundStats {
    pub round: usize,
    pub n_pseudo: usize,
    pub qualified_fraction: f64,
    pub mean_score: f64,
    pub ce: f64,
    pub sparsity: f64,
    pub total: f64,
}

/// The self-training loop. Each round regenerates the pseudo-labelled set
/// with the current model under the same threshold, then runs one shuffled
/// mini-batch pass over it; every update is gated by the snapshot. Rounds
/// with an empty set are recorded and skipped.
///
/// `gate` may only be `None` for a model whose mask is disabled (the
/// ablation); a masked model without a snapshot is a precondition error.
pub fn adapt<E>(
    model: &mut QaModel<E>,
    gate: Option<&MaskSnapshot>,
    targets: &[QASample],
    cfg: &AdaptConfig,
    lambda: f64,
) -> Result<Vec<RoundStats>>
where
    E: FeatureExtractor + Sync,
    E::Grads: Send,
{
    cfg.validate()?;
    if model.mask.is_enabled() && gate.is_none() {
        return Err(Error::Precondition(
            "adaptation of a masked model requires the mask snapshot from source training".into(),
        ));
    }
    if targets.is_empty() {
        return Err(Error::Data("target set is empty".into()));
    }
    for t in targets {
        if t.answer.is_some() {
            return Err(Error::Data(format!(
                "target sample {} carries a label; adaptation expects unlabelled data",
                t.id
            )));
        }
    }
    let optimizer = OptimizerConfig {
        lr_mask: cfg.lr_mask,
        lr_encoder: cfg.lr_encoder,
        lambda,
        batch_size: cfg.batch_size,
        epochs_source: 0,
        seed: cfg.seed,
    };
    let mut rng = SeededRng::new(cfg.seed, Stream::Shuffle);
    let mut log = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let mut set = generate_pseudo_labels(model, targets, cfg.alpha)?;
        set.round = round;
        let n_pseudo = set.entries.len();
        let qualified_fraction = n_pseudo as f64 / targets.len() as f64;
        let mean_score = set.mean_score();
        if n_pseudo == 0 {
            log.push(RoundStats {
                round,
                n_pseudo: 0,
                qualified_fraction: 0.0,
                mean_score: 0.0,
                ce: 0.0,
                sparsity: 0.0,
                total: 0.0,
            });
            continue;
        }
        let labelled: Vec<QASample> = set
            .entries
            .iter()
            .map(|e| {
                let mut s = e.sample.clone();
                s.answer = Some(e.span);
                s
            })
            .collect();
        let mut order: Vec<usize> = (0..labelled.len()).collect();
        rng.shuffle(&mut order);
        let mut round_loss = LossBreakdown::zero();
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let samples: Vec<&QASample> = batch.iter().map(|&i| &labelled[i]).collect();
            let (loss, grads) = batch_loss_and_grads(model, &samples, lambda)?;
            apply_updates(model, &grads, &optimizer, gate)?;
            round_loss.add(&loss);
            batches += 1;
        }
        let mean = round_loss.scaled(1.0 / batches as f64);
        log.push(RoundStats {
            round,
            n_pseudo,
            qualified_fraction,
            mean_score,
            ce: mean.ce,
            sparsity: mean.sparsity,
            total: mean.total,
        });
    }
    Ok(log)
}

/// Write the per-round log as CSV:
/// round, n_pseudo, qualified_fraction, mean_score, ce, sparsity, total.
pub fn write_round_log<P: AsRef<std::path::Path>>(log: &[RoundStats], path: P) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(crate::training::csv_err)?;
    w.write_record([
        "round",
        "n_pseudo",
        "qualified_fraction",
        "mean_score",
        "ce",
        "sparsity",
        "total",
    ])
    .map_err(crate::training::csv_err)?;
    for r in log {
        w.write_record([
            r.round.to_string(),
            r.n_pseudo.to_string(),
            r.qualified_fraction.to_string(),
            r.mean_score.to_string(),
            r.ce.to_string(),
            r.sparsity.to_string(),
            r.total.to_string(),
        ])
        .map_err(crate::training::csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ToyEncoder;
    use crate::model::ModelConfig;
    use crate::qa_task::{generate_corpus, DomainSpec};
    use approx::assert_abs_diff_eq;

    fn tiny_model(seed: u64) -> QaModel<ToyEncoder> {
        let config = ModelConfig {
            vocab_size: 200,
            embed_dim: 8,
            feature_dim: 8,
            bottleneck_dim: 12,
            sharpness: 100.0,
            max_len: 128,
            max_answer_len: 8,
            mask_enabled: true,
        };
        QaModel::new(config, seed).unwrap()
    }

    #[test]
    fn best_pair_hand_example() {
        let p_start = [0.7, 0.2, 0.1];
        let p_end = [0.1, 0.3, 0.6];
        let pred = best_pair(&p_start, &p_end, 8).unwrap();
        assert_eq!(pred.span, SpanLabel { start: 0, end: 2 });
        assert_abs_diff_eq!(pred.score, 0.42, epsilon = 1e-12);
    }

    #[test]
    fn best_pair_degenerate_one_hot() {
        let p_start = [0.0, 1.0, 0.0];
        let p_end = [0.0, 1.0, 0.0];
        let pred = best_pair(&p_start, &p_end, 8).unwrap();
        assert_eq!(pred.span, SpanLabel { start: 1, end: 1 });
        assert_eq!(pred.score, 1.0);
    }

    #[test]
    fn best_pair_breaks_ties_toward_the_earlier_span() {
        // Pairs (0,0) and (1,1) tie; (0,0) must win.
        let p_start = [0.5, 0.5];
        let p_end = [0.5, 0.5];
        let pred = best_pair(&p_start, &p_end, 1).unwrap();
        assert_eq!(pred.span, SpanLabel { start: 0, end: 0 });
        // (0,1) ties with (0,0) at max_answer_len 2; smaller end wins.
        let pred = best_pair(&p_start, &p_end, 2).unwrap();
        assert_eq!(pred.span, SpanLabel { start: 0, end: 0 });
    }

    #[test]
    fn best_pair_respects_the_length_cap() {
        let p_start = [1.0, 0.0, 0.0, 0.0];
        let p_end = [0.0, 0.0, 0.0, 1.0];
        let pred = best_pair(&p_start, &p_end, 2).unwrap();
        assert!(pred.span.end - pred.span.start < 2);
    }

    #[test]
    fn predict_span_matches_exhaustive_search() {
        let model = tiny_model(11);
        let spec = DomainSpec {
            context_len_range: (12, 20),
            ..DomainSpec::default()
        };
        for sample in generate_corpus(&spec, 50).unwrap() {
            let pred = predict_span(&model, &sample).unwrap();
            // Independent route: enumerate every pair from the probability
            // vectors, sort by (score desc, start asc, end asc).
            let fwd = model.forward_sample(&sample).unwrap();
            let len = fwd.input.context_len();
            let sl = RealVector::from_vec((0..len).map(|t| fwd.logits.get(t, 0)).collect());
            let el = RealVector::from_vec((0..len).map(|t| fwd.logits.get(t, 1)).collect());
            let ps = softmax_positions(&sl, 0..len).unwrap();
            let pe = softmax_positions(&el, 0..len).unwrap();
            let mut pairs = Vec::new();
            for s in 0..len {
                for e in s..len {
                    if e - s < model.config.max_answer_len {
                        pairs.push((ps.get(s) * pe.get(e), s, e));
                    }
                }
            }
            pairs.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap()
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });
            let (score, s, e) = pairs[0];
            assert_eq!(pred.span, SpanLabel { start: s, end: e });
            assert_abs_diff_eq!(pred.score, score, epsilon = 1e-15);
        }
    }

    #[test]
    fn pseudo_label_threshold_is_strict() {
        // Stub-free check of the filter rule itself.
        let scores = [0.8, 0.5, 0.51];
        let kept: Vec<usize> = scores
            .iter()
            .enumerate()
            .filter(|(_, &s)| s > 0.5)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(kept, vec![0, 2]);
    }

    #[test]
    fn pseudo_labels_preserve_order_and_respect_alpha_limits() {
        let model = tiny_model(12);
        let spec = DomainSpec::default();
        let targets: Vec<QASample> = generate_corpus(&spec, 20)
            .unwrap()
            .into_iter()
            .map(|s| s.without_answer())
            .collect();
        // A threshold close to 1 keeps (almost) nothing from an untrained
        // model; a tiny threshold keeps everything.
        let high = generate_pseudo_labels(&model, &targets, 0.999_999).unwrap();
        assert!(high.entries.len() < targets.len());
        let low = generate_pseudo_labels(&model, &targets, 1e-12).unwrap();
        assert_eq!(low.entries.len(), targets.len());
        let ids: Vec<&str> = low.entries.iter().map(|e| e.sample.id.as_str()).collect();
        let expect: Vec<&str> = targets.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, expect);
        for e in &low.entries {
            assert!(e.score > 1e-12);
        }
    }

    #[test]
    fn adapt_requires_a_snapshot_for_masked_models() {
        let mut model = tiny_model(13);
        let targets: Vec<QASample> = generate_corpus(&DomainSpec::default(), 4)
            .unwrap()
            .into_iter()
            .map(|s| s.without_answer())
            .collect();
        let err = adapt(&mut model, None, &targets, &AdaptConfig::default(), 0.75).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn adapt_rejects_labelled_targets() {
        let mut model = tiny_model(14);
        let snap = model.mask.snapshot();
        let targets = generate_corpus(&DomainSpec::default(), 4).unwrap();
        let err = adapt(&mut model, Some(&snap), &targets, &AdaptConfig::default(), 0.75)
            .unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn adapt_rejects_alpha_outside_the_open_interval() {
        let mut model = tiny_model(15);
        let snap = model.mask.snapshot();
        let targets: Vec<QASample> = generate_corpus(&DomainSpec::default(), 4)
            .unwrap()
            .into_iter()
            .map(|s| s.without_answer())
            .collect();
        for alpha in [0.0, 1.0, -0.2, 1.5] {
            let cfg = AdaptConfig {
                alpha,
                ..AdaptConfig::default()
            };
            assert!(adapt(&mut model, Some(&snap), &targets, &cfg, 0.75).is_err());
        }
    }

    #[test]
    fn adapt_is_bit_reproducible() {
        let targets: Vec<QASample> = generate_corpus(
            &DomainSpec {
                shift: 0.5,
                seed: 2,
                ..DomainSpec::default()
            },
            24,
        )
        .unwrap()
        .into_iter()
        .map(|s| s.without_answer())
        .collect();
        let cfg = AdaptConfig {
            rounds: 2,
            alpha: 0.1,
            ..AdaptConfig::default()
        };
        let run = || {
            let mut model = tiny_model(16);
            let (snap, _) = crate::training::train_source(
                &mut model,
                &generate_corpus(&DomainSpec::default(), 16).unwrap(),
                &crate::training::OptimizerConfig {
                    epochs_source: 2,
                    ..Default::default()
                },
            )
            .unwrap();
            let log = adapt(&mut model, snap.as_ref(), &targets, &cfg, 0.75).unwrap();
            (
                serde_json::to_string(&log).unwrap(),
                serde_json::to_string(&crate::training::Checkpoint::capture(
                    &model,
                    &Default::default(),
                ))
                .unwrap(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn every_logged_round_exists_even_when_empty() {
        let mut model = tiny_model(17);
        let snap = model.mask.snapshot();
        let targets: Vec<QASample> = generate_corpus(&DomainSpec::default(), 6)
            .unwrap()
            .into_iter()
            .map(|s| s.without_answer())
            .collect();
        // An untrained model is nowhere near this confident, so every round
        // is recorded as empty and skipped.
        let cfg = AdaptConfig {
            alpha: 0.999_999,
            rounds: 3,
            ..AdaptConfig::default()
        };
        let log = adapt(&mut model, Some(&snap), &targets, &cfg, 0.75).unwrap();
        assert_eq!(log.len(), 3);
        assert!(log.iter().all(|r| r.n_pseudo == 0));
    }
}

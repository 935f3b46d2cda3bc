//! Exact-match and token-level F1 over span indices, plus dataset-level
//! evaluation. F1 works on token positions directly; the synthetic task has
//! no surface normalization to worry about.

use rayon::prelude::*;
use serde::Serialize;

use crate::encoder::FeatureExtractor;
use crate::error::{Error, Result};
use crate::model::QaModel;
use crate::qa_task::{QASample, SpanLabel};
use crate::selftrain::{predict_span, ScoredPrediction};
use crate::util;

/// 1 iff both endpoints match.
pub fn exact_match(pred: &SpanLabel, gold: &SpanLabel) -> u32 {
    u32::from(pred == gold)
}

/// Harmonic mean of token precision and recall of the span overlap; 0 when
/// the spans are disjoint.
pub fn token_f1(pred: &SpanLabel, gold: &SpanLabel) -> f64 {
    let lo = pred.start.max(gold.start);
    let hi = pred.end.min(gold.end);
    if lo > hi {
        return 0.0;
    }
    let overlap = (hi - lo + 1) as f64;
    let precision = overlap / pred.len() as f64;
    let recall = overlap / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Anything that maps a sample to a scored span. Lets evaluation run against
/// the real model or a stub.
pub trait SpanPredictor {
    fn predict(&self, sample: &QASample) -> Result<ScoredPrediction>;
}

impl<E: FeatureExtractor> SpanPredictor for QaModel<E> {
    fn predict(&self, sample: &QASample) -> Result<ScoredPrediction> {
        predict_span(self, sample)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleMetrics {
    pub id: String,
    pub em: f64,
    pub f1: f64,
    pub pred: SpanLabel,
    pub gold: SpanLabel,
    pub score: f64,
}

/// Aggregate report; `em` and `f1` are percentages in [0, 100].
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub em: f64,
    pub f1: f64,
    pub n: usize,
    pub per_sample: Vec<SampleMetrics>,
}

/// Predict every labelled sample and aggregate mean EM and F1 (x100).
pub fn evaluate<P>(predictor: &P, data: &[QASample]) -> Result<MetricsReport>
where
    P: SpanPredictor + Sync,
{
    if data.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    for s in data {
        if s.answer.is_none() {
            return Err(Error::Data(format!(
                "unlabelled sample {} in evaluation data",
                s.id
            )));
        }
    }
    let predictions: Vec<ScoredPrediction> = util::pool().install(|| {
        data.par_iter()
            .map(|s| predictor.predict(s))
            .collect::<Result<Vec<_>>>()
    })?;
    let per_sample: Vec<SampleMetrics> = data
        .iter()
        .zip(predictions)
        .map(|(s, p)| {
            let gold = s.answer.unwrap();
            SampleMetrics {
                id: s.id.clone(),
                em: exact_match(&p.span, &gold) as f64,
                f1: token_f1(&p.span, &gold),
                pred: p.span,
                gold,
                score: p.score,
            }
        })
        .collect();
    let n = per_sample.len();
    let em = 100.0 * per_sample.iter().map(|m| m.em).sum::<f64>() / n as f64;
    let f1 = 100.0 * per_sample.iter().map(|m| m.f1).sum::<f64>() / n as f64;
    Ok(MetricsReport {
        em,
        f1,
        n,
        per_sample,
    })
}

impl MetricsReport {
    /// Per-sample CSV with the exact columns
    /// id,em,f1,pred_start,pred_end,gold_start,gold_end,score.
    pub fn write_csv<P: AsRef<std::path::Path>>(&self, path: P) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(crate::training::csv_err)?;
        w.write_record([
            "id",
            "em",
            "f1",
            "pred_start",
            "pred_end",
            "gold_start",
            "gold_end",
            "score",
        ])
        .map_err(crate::training::csv_err)?;
        for m in &self.per_sample {
            w.write_record([
                m.id.clone(),
                m.em.to_string(),
                m.f1.to_string(),
                m.pred.start.to_string(),
                m.pred.end.to_string(),
                m.gold.start.to_string(),
                m.gold.end.to_string(),
                m.score.to_string(),
            ])
            .map_err(crate::training::csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Aggregate JSON (em, f1, n).
    pub fn write_json<P: AsRef<std::path::Path>>(&self, path: P) -> Result<()> {
        #[derive(Serialize)]
        struct Aggregate<'a> {
            em: f64,
            f1: f64,
            n: usize,
            per_sample: &'a [SampleMetrics],
        }
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        serde_json::to_writer_pretty(
            &mut w,
            &Aggregate {
                em: self.em,
                f1: self.f1,
                n: self.n,
                per_sample: &self.per_sample,
            },
        )?;
        use std::io::Write;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

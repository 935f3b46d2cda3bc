//! Extractive-QA data model, JSONL IO, and a synthetic corpus generator with
//! a scalar source-to-target domain-shift knob.
//!
//! A sample's context contains exactly one occurrence of a trigger template
//! (a short token pattern) followed by an answer span of 1-4 tokens. Answer
//! tokens come from dedicated vocabulary regions (start / body / end /
//! singleton), and draws inside every answer region follow a fixed Zipf-like
//! frequency ranking, so corpora have common and rare answer ids the way
//! text has common and rare entities. The span is recoverable from the
//! surface form alone, which gives an exact brute-force oracle for every
//! gold label.
//!
//! The `shift` knob in [0,1] remaps a matching fraction of each answer
//! region through a fixed permutation into a reserve region the source
//! distribution never emits, and reweights template choice, the length
//! distributions, and the filler frequency ranking. At shift=0 the source
//! distribution is reproduced exactly; a shifted domain keeps the trigger
//! templates and filler vocabulary but replaces a growing share of the
//! answer vocabulary with ids the source model has never seen, while the
//! filler word frequencies drift.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{SeededRng, Stream};

/// Ids 0..4 are reserved for the four special tokens.
pub mod special {
    /// `<s>`
    pub const BOS: u32 = 0;
    /// `</s>`
    pub const EOS: u32 = 1;
    /// `<pad>`
    pub const PAD: u32 = 2;
    /// `<unk>`
    pub const UNK: u32 = 3;
    pub const COUNT: u32 = 4;
}

/// Integer token. The synthetic task has no tokenizer; ids are the surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn value(self) -> u32 {
        self.0
    }
}

/// Inclusive answer span in context token coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanLabel {
    pub start: usize,
    pub end: usize,
}

impl SpanLabel {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start > end {
            return Err(Error::Label(format!(
                "span start {start} is after end {end}"
            )));
        }
        Ok(Self { start, end })
    }

    /// Number of tokens covered.
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// One (context, question, optional answer) record; the unit of all training
/// and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QASample {
    pub id: String,
    pub context: Vec<TokenId>,
    pub question: Vec<TokenId>,
    pub answer: Option<SpanLabel>,
}

impl QASample {
    pub fn validate(&self) -> Result<()> {
        if self.context.is_empty() {
            return Err(Error::Validation {
                id: self.id.clone(),
                msg: "context is empty".into(),
            });
        }
        if self.question.is_empty() {
            return Err(Error::Validation {
                id: self.id.clone(),
                msg: "question is empty".into(),
            });
        }
        if let Some(ans) = &self.answer {
            if ans.start > ans.end {
                return Err(Error::Validation {
                    id: self.id.clone(),
                    msg: format!("answer start {} is after end {}", ans.start, ans.end),
                });
            }
            if ans.end >= self.context.len() {
                return Err(Error::Validation {
                    id: self.id.clone(),
                    msg: format!(
                        "answer end {} is outside context of length {}",
                        ans.end,
                        self.context.len()
                    ),
                });
            }
        }
        Ok(())
    }

    /// Copy with the label removed (the adaptation-side view of a target
    /// sample).
    pub fn without_answer(&self) -> QASample {
        QASample {
            id: self.id.clone(),
            context: self.context.clone(),
            question: self.question.clone(),
            answer: None,
        }
    }
}

/// Generator configuration for one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub vocab_size: u32,
    /// Domain-shift knob in [0,1]; 0 is the canonical source distribution.
    pub shift: f64,
    /// Short token patterns that deterministically precede answers. Patterns
    /// sharing their first token form a group; the last token is what
    /// identifies a template within its group.
    pub trigger_templates: Vec<Vec<TokenId>>,
    /// Inclusive (min, max) context length in tokens.
    pub context_len_range: (usize, usize),
    /// Inclusive (min, max) question length in tokens.
    pub question_len_range: (usize, usize),
    pub seed: u64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        let trigger_templates = (0..8)
            .map(|i| vec![TokenId(4 + 2 * i), TokenId(5 + 2 * i)])
            .collect();
        Self {
            vocab_size: 200,
            shift: 0.0,
            trigger_templates,
            context_len_range: (16, 32),
            question_len_range: (3, 6),
            seed: 1,
        }
    }
}

/// Fixed seed for vocabulary layout and the shift permutation. Independent of
/// the corpus seed so that every corpus drawn from the same vocabulary shares
/// one permutation.
const LAYOUT_SEED: u64 = 0x4d41_534b_5141_4231;

/// Answer span length bounds emitted by the generator.
pub const MIN_GOLD_ANSWER_LEN: usize = 1;
pub const MAX_GOLD_ANSWER_LEN: usize = 4;

/// Per-slot probability that a filler position carries a hapax token: an id
/// from the never-swapped part of the reserve region. Hapax tokens teach the
/// model to treat the whole untrained-embedding cloud as non-answer, which
/// keeps unlucky initializations from producing confident spans at unseen
/// ids.
const HAPAX_PROB: f64 = 0.012;

/// Derived partition of the vocabulary plus the shift permutation.
///
/// Content ids (everything past the specials and template tokens) split into
/// answer-start, answer-body, answer-end, answer-singleton, filler, and
/// reserve regions. The permutation swaps a shift fraction of each answer
/// region, and the rare tail of the filler frequency ranking, with reserve
/// ids; reserve is sized so the swap never runs out of fresh ids. Swapping
/// the filler tail spreads the unseen filler mass over many distinct ids,
/// each individually rare.
#[derive(Debug, Clone)]
pub struct VocabLayout {
    pub start_ids: Vec<u32>,
    pub body_ids: Vec<u32>,
    pub end_ids: Vec<u32>,
    pub singleton_ids: Vec<u32>,
    pub filler_ids: Vec<u32>,
    pub reserve_ids: Vec<u32>,
    /// Fixed frequency orders of the answer regions; Zipf draw weights are
    /// defined over these.
    start_order: Vec<u32>,
    body_order: Vec<u32>,
    end_order: Vec<u32>,
    singleton_order: Vec<u32>,
    filler_order: Vec<u32>,
    /// Reserve ids that no shift value ever swaps; the hapax pool.
    hapax_ids: Vec<u32>,
    remap: Vec<u32>,
}

impl VocabLayout {
    /// Image of a token under the shift permutation (identity off the
    /// selected ids).
    pub fn remap(&self, t: TokenId) -> TokenId {
        TokenId(self.remap[t.0 as usize])
    }

    /// All ids that answer spans can contain in this domain (after the
    /// permutation). Used by the label-recovery oracle.
    pub fn answer_token_ids(&self) -> BTreeSet<u32> {
        self.start_ids
            .iter()
            .chain(&self.body_ids)
            .chain(&self.end_ids)
            .chain(&self.singleton_ids)
            .map(|&x| self.remap[x as usize])
            .collect()
    }

    /// Zipf-like draw weights over an answer-region frequency order.
    pub fn rank_weights(n: usize) -> Vec<f64> {
        (0..n).map(|i| 1.0 / (1.0 + i as f64)).collect()
    }

    pub fn start_order(&self) -> &[u32] {
        &self.start_order
    }

    pub fn body_order(&self) -> &[u32] {
        &self.body_order
    }

    pub fn end_order(&self) -> &[u32] {
        &self.end_order
    }

    pub fn singleton_order(&self) -> &[u32] {
        &self.singleton_order
    }

    pub fn hapax_ids(&self) -> &[u32] {
        &self.hapax_ids
    }

    pub fn filler_order(&self) -> &[u32] {
        &self.filler_order
    }

    /// Filler draw weights: a fixed frequency ranking at shift=0 that
    /// interpolates toward the reversed ranking at shift=1. This moves the
    /// filler unigram distribution without introducing any unseen id.
    pub fn filler_weights(&self, shift: f64) -> Vec<f64> {
        let n = self.filler_order.len();
        (0..n)
            .map(|i| {
                let src = 1.0 / (1.0 + i as f64);
                let tgt = 1.0 / (n - i) as f64;
                (1.0 - shift) * src + shift * tgt
            })
            .collect()
    }
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.shift) {
            return Err(Error::Config(format!(
                "shift must lie in [0,1], got {}",
                self.shift
            )));
        }
        if self.trigger_templates.is_empty() {
            return Err(Error::Config("at least one trigger template is required".into()));
        }
        let (cmin, cmax) = self.context_len_range;
        let (qmin, qmax) = self.question_len_range;
        if cmin < 1 || cmin > cmax {
            return Err(Error::Config(format!(
                "invalid context length range ({cmin}, {cmax})"
            )));
        }
        if qmin < 1 || qmin > qmax {
            return Err(Error::Config(format!(
                "invalid question length range ({qmin}, {qmax})"
            )));
        }
        let mut seen = BTreeSet::new();
        for tpl in &self.trigger_templates {
            if tpl.is_empty() {
                return Err(Error::Config("empty trigger template".into()));
            }
            if tpl.len() > cmin {
                return Err(Error::Config(format!(
                    "trigger template of length {} does not fit the minimum context length {}",
                    tpl.len(),
                    cmin
                )));
            }
            if tpl.len() + MAX_GOLD_ANSWER_LEN > cmin {
                return Err(Error::Config(format!(
                    "trigger template of length {} plus a {MAX_GOLD_ANSWER_LEN}-token answer \
                     does not fit the minimum context length {cmin}",
                    tpl.len()
                )));
            }
            if tpl.len() > qmin {
                return Err(Error::Config(format!(
                    "trigger template of length {} does not fit the minimum question length {qmin}",
                    tpl.len()
                )));
            }
            for t in tpl {
                if t.0 < special::COUNT || t.0 >= self.vocab_size {
                    return Err(Error::Config(format!(
                        "template token {} is outside the non-special vocabulary [4, {})",
                        t.0, self.vocab_size
                    )));
                }
            }
            if !seen.insert(tpl.clone()) {
                return Err(Error::Config("duplicate trigger template".into()));
            }
        }
        self.vocab_layout()?;
        Ok(())
    }

    /// Partition the vocabulary and build the shift permutation.
    pub fn vocab_layout(&self) -> Result<VocabLayout> {
        let template_ids: BTreeSet<u32> = self
            .trigger_templates
            .iter()
            .flatten()
            .map(|t| t.0)
            .collect();
        let content: Vec<u32> = (special::COUNT..self.vocab_size)
            .filter(|x| !template_ids.contains(x))
            .collect();
        let region = content.len() / 22;
        if region < 2 {
            return Err(Error::Config(format!(
                "vocab_size {} leaves only {} content ids; at least 44 are needed",
                self.vocab_size,
                content.len()
            )));
        }
        let filler_n = (4 * region).min((content.len() - 8 * region) / 2);
        let mut at = 0usize;
        let mut take = |n: usize| {
            let out = content[at..at + n].to_vec();
            at += n;
            out
        };
        let start_ids = take(region);
        let body_ids = take(region);
        let end_ids = take(region);
        let singleton_ids = take(region);
        let filler_ids = take(filler_n);
        let reserve_ids = content[at..].to_vec();

        let mut rng = SeededRng::new(LAYOUT_SEED, Stream::VocabLayout);
        fn shuffled(rng: &mut SeededRng, ids: &[u32]) -> Vec<u32> {
            let mut v = ids.to_vec();
            rng.shuffle(&mut v);
            v
        }
        let start_order = shuffled(&mut rng, &start_ids);
        let body_order = shuffled(&mut rng, &body_ids);
        let end_order = shuffled(&mut rng, &end_ids);
        let singleton_order = shuffled(&mut rng, &singleton_ids);
        let filler_order = shuffled(&mut rng, &filler_ids);

        // Answer-region remap selection uses its own shuffles, independent
        // of the frequency ranks, so common and rare ids are equally likely
        // to move; the filler selection walks in from the rare end of the
        // ranking. Either way the permuted set at a lower shift is nested
        // inside the set at a higher shift.
        let regions = [
            shuffled(&mut rng, &start_ids),
            shuffled(&mut rng, &body_ids),
            shuffled(&mut rng, &end_ids),
            shuffled(&mut rng, &singleton_ids),
        ];
        let reserve_order = shuffled(&mut rng, &reserve_ids);

        // Worst-case number of swap partners, independent of this spec's
        // shift, so the hapax pool is identical across domains.
        let capacity: usize =
            regions.iter().map(|ids| ids.len()).sum::<usize>() + filler_order.len();
        let mut selected = Vec::new();
        for ids in &regions {
            let k = (self.shift * ids.len() as f64).floor() as usize;
            selected.extend_from_slice(&ids[..k.min(ids.len())]);
        }
        let k_filler = (self.shift * filler_order.len() as f64).floor() as usize;
        for i in 0..k_filler {
            selected.push(filler_order[filler_order.len() - 1 - i]);
        }
        if capacity > reserve_order.len() {
            return Err(Error::Config(format!(
                "a full shift would select {} ids but only {} reserve ids exist",
                capacity,
                reserve_order.len()
            )));
        }
        let hapax_ids = reserve_order[capacity..].to_vec();
        if hapax_ids.is_empty() {
            return Err(Error::Config(
                "vocab_size leaves no reserve ids for hapax tokens".into(),
            ));
        }
        let mut remap: Vec<u32> = (0..self.vocab_size).collect();
        for (sel, r) in selected.iter().zip(&reserve_order) {
            remap[*sel as usize] = *r;
            remap[*r as usize] = *sel;
        }
        Ok(VocabLayout {
            start_ids,
            body_ids,
            end_ids,
            singleton_ids,
            filler_ids,
            reserve_ids,
            start_order,
            body_order,
            end_order,
            singleton_order,
            filler_order,
            hapax_ids,
            remap,
        })
    }
}

/// Length draw whose weights interpolate from uniform (shift=0) toward a
/// ramp favoring the top of the range (shift=1).
fn sample_len(rng: &mut SeededRng, range: (usize, usize), shift: f64) -> Result<usize> {
    let (lo, hi) = range;
    if lo == hi {
        return Ok(lo);
    }
    let n = hi - lo + 1;
    let weights: Vec<f64> = (0..n)
        .map(|i| {
            let ramp = 2.0 * i as f64 / (n - 1) as f64;
            (1.0 - shift) + shift * ramp
        })
        .collect();
    Ok(lo + rng.weighted_choice(&weights)?)
}

/// Template weights interpolate between favoring low indices (source) and
/// favoring high indices (target).
fn template_weights(n: usize, shift: f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let src = 1.0 / (1.0 + i as f64);
            let tgt = 1.0 / (n - i) as f64;
            (1.0 - shift) * src + shift * tgt
        })
        .collect()
}

/// Generate `n` labelled samples. Pure function of `(spec, n)`: identical
/// inputs give identical output, and the first `k` samples of a length-`n`
/// run equal the length-`k` run.
pub fn generate_corpus(spec: &DomainSpec, n: usize) -> Result<Vec<QASample>> {
    if n < 1 {
        return Err(Error::Config("corpus size must be at least 1".into()));
    }
    spec.validate()?;
    let layout = spec.vocab_layout()?;
    let tpl_weights = template_weights(spec.trigger_templates.len(), spec.shift);
    let filler_weights = layout.filler_weights(spec.shift);
    let mut rng = SeededRng::new(spec.seed, Stream::DataGen);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        samples.push(generate_one(spec, &layout, &tpl_weights, &filler_weights, &mut rng, i)?);
    }
    Ok(samples)
}

fn generate_one(
    spec: &DomainSpec,
    layout: &VocabLayout,
    tpl_weights: &[f64],
    filler_weights: &[f64],
    rng: &mut SeededRng,
    index: usize,
) -> Result<QASample> {
    let ctx_len = sample_len(rng, spec.context_len_range, spec.shift)?;
    let q_len = sample_len(rng, spec.question_len_range, spec.shift)?;
    let t_idx = rng.weighted_choice(tpl_weights)?;
    let template = &spec.trigger_templates[t_idx];
    let ans_len = MIN_GOLD_ANSWER_LEN + rng.weighted_choice(&[0.35, 0.30, 0.20, 0.15])?;

    fn pick_ranked(layout: &VocabLayout, rng: &mut SeededRng, order: &[u32]) -> Result<TokenId> {
        let weights = VocabLayout::rank_weights(order.len());
        Ok(layout.remap(TokenId(order[rng.weighted_choice(&weights)?])))
    }
    let pick_filler = |rng: &mut SeededRng| -> Result<TokenId> {
        if rng.uniform(0.0, 1.0) < HAPAX_PROB {
            Ok(TokenId(layout.hapax_ids()[rng.below(layout.hapax_ids().len())]))
        } else {
            let id = layout.filler_order()[rng.weighted_choice(filler_weights)?];
            Ok(layout.remap(TokenId(id)))
        }
    };

    // Filler everywhere (with the occasional hapax token), then the template
    // and the answer written over it. Filler, answer, template, and hapax
    // ids come from disjoint regions, so the context contains exactly one
    // template occurrence and the answer span is exactly the run of
    // answer-region ids behind it.
    let mut context = Vec::with_capacity(ctx_len);
    for _ in 0..ctx_len {
        let t = pick_filler(rng)?;
        context.push(t);
    }
    let place = rng.range_inclusive(0, ctx_len - template.len() - ans_len);
    context[place..place + template.len()].copy_from_slice(template);
    let ans_start = place + template.len();
    for k in 0..ans_len {
        context[ans_start + k] = match (ans_len, k) {
            (1, _) => pick_ranked(layout, rng, layout.singleton_order())?,
            (_, 0) => pick_ranked(layout, rng, layout.start_order())?,
            (l, k) if k == l - 1 => pick_ranked(layout, rng, layout.end_order())?,
            _ => pick_ranked(layout, rng, layout.body_order())?,
        };
    }

    let mut question: Vec<TokenId> = template.clone();
    while question.len() < q_len {
        let t = pick_filler(rng)?;
        question.push(t);
    }

    let answer = SpanLabel::new(ans_start, ans_start + ans_len - 1)?;
    let sample = QASample {
        id: format!("s{}-{:06}", spec.seed, index),
        context,
        question,
        answer: Some(answer),
    };
    sample.validate()?;
    Ok(sample)
}

/// A sample packed for the model: `[<s>; question; </s></s>; context; </s>]`
/// plus the interval of context tokens inside the packed sequence. The
/// context tail is truncated when the budget runs out.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub tokens: Vec<TokenId>,
    pub context_span: Range<usize>,
    pub question_span: Range<usize>,
}

impl ModelInput {
    /// Number of context tokens that survived packing.
    pub fn context_len(&self) -> usize {
        self.context_span.len()
    }

    pub fn context_tokens(&self) -> &[TokenId] {
        &self.tokens[self.context_span.clone()]
    }

    pub fn question_tokens(&self) -> &[TokenId] {
        &self.tokens[self.question_span.clone()]
    }

    /// Map a packed-coordinate span back to context coordinates.
    pub fn to_context_coords(&self, packed_start: usize, packed_end: usize) -> (usize, usize) {
        (
            packed_start - self.context_span.start,
            packed_end - self.context_span.start,
        )
    }
}

/// Delimiter overhead of the packed layout: `<s>`, `</s></s>`, final `</s>`.
pub const PACKED_OVERHEAD: usize = 4;

pub fn build_input(sample: &QASample, max_len: usize) -> Result<ModelInput> {
    let q_len = sample.question.len();
    let budget = max_len.saturating_sub(q_len + PACKED_OVERHEAD);
    if budget == 0 {
        return Err(Error::Input(format!(
            "question of length {q_len} plus delimiters leaves no room for context within max_len {max_len}"
        )));
    }
    let keep = sample.context.len().min(budget);
    let mut tokens = Vec::with_capacity(q_len + keep + PACKED_OVERHEAD);
    tokens.push(TokenId(special::BOS));
    tokens.extend_from_slice(&sample.question);
    tokens.push(TokenId(special::EOS));
    tokens.push(TokenId(special::EOS));
    let ctx_start = tokens.len();
    tokens.extend_from_slice(&sample.context[..keep]);
    tokens.push(TokenId(special::EOS));
    Ok(ModelInput {
        tokens,
        context_span: ctx_start..ctx_start + keep,
        question_span: 1..1 + q_len,
    })
}

/// One JSON object per line: `{"id", "context", "question", "answer"}` with
/// `answer` either `{"start", "end"}` or `null`. UTF-8, LF line endings.
pub fn write_jsonl<P: AsRef<Path>>(samples: &[QASample], path: P) -> Result<()> {
    for s in samples {
        s.validate()?;
    }
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<P: AsRef<Path>>(path: P) -> Result<Vec<QASample>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: QASample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        sample.validate()?;
        samples.push(sample);
    }
    Ok(samples)
}

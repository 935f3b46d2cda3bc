//! Composition of a feature extractor and the masked bottleneck into one QA
//! model.

use serde::{Deserialize, Serialize};

use crate::encoder::{FeatureExtractor, ToyEncoder};
use crate::error::Result;
use crate::mask_module::{ForwardCache, MaskModule, MaskSnapshot};
use crate::numkernel::{RealMatrix, SeededRng, Stream};
use crate::qa_task::{build_input, ModelInput, QASample};

/// Architecture and decoding knobs. `sharpness` defaults to 100; drop it to
/// 20 if mask learning stalls on a custom task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub feature_dim: usize,
    pub bottleneck_dim: usize,
    pub sharpness: f64,
    /// Packing budget for `[<s>; question; </s></s>; context; </s>]`.
    pub max_len: usize,
    /// Longest span considered by the decoder, in tokens.
    pub max_answer_len: usize,
    /// False selects the ablation without the mask mechanism.
    pub mask_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 200,
            embed_dim: 32,
            feature_dim: 32,
            bottleneck_dim: 64,
            sharpness: 100.0,
            max_len: 256,
            max_answer_len: 8,
            mask_enabled: true,
        }
    }
}

/// QA model: encoder -> masked bottleneck -> span head. Generic over the
/// feature extractor; the toy encoder is the reference implementation.
#[derive(Debug, Clone)]
pub struct QaModel<E: FeatureExtractor = ToyEncoder> {
    pub encoder: E,
    pub mask: MaskModule,
    pub snapshot: Option<MaskSnapshot>,
    pub config: ModelConfig,
}

/// Everything one forward pass produces.
pub struct SampleForward {
    pub input: ModelInput,
    pub logits: RealMatrix,
    pub cache: ForwardCache,
}

impl QaModel<ToyEncoder> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = SeededRng::new(seed, Stream::Init);
        let encoder = ToyEncoder::new(config.vocab_size, config.embed_dim, config.feature_dim, &mut rng)?;
        let mut mask = MaskModule::new(
            config.bottleneck_dim,
            config.feature_dim,
            config.sharpness,
            &mut rng,
        )?;
        mask.set_enabled(config.mask_enabled);
        Ok(Self {
            encoder,
            mask,
            snapshot: None,
            config,
        })
    }
}

impl<E: FeatureExtractor> QaModel<E> {
    /// Pack, encode, and run the masked bottleneck on one sample.
    pub fn forward_sample(&self, sample: &QASample) -> Result<SampleForward> {
        let input = build_input(sample, self.config.max_len)?;
        let features = self.encoder.encode(&input)?;
        let (logits, cache) = self.mask.forward(&features)?;
        Ok(SampleForward {
            input,
            logits,
            cache,
        })
    }
}

//! Pluggable feature extractor plus a toy reference implementation with
//! hand-derived gradients. The toy encoder conditions each context token on
//! the mean question embedding; that is enough to solve the synthetic task
//! while keeping every derivative auditable.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numkernel::{RealMatrix, RealVector, SeededRng, TensorData};
use crate::qa_task::ModelInput;

/// A feature extractor maps a packed input to one feature row per context
/// token and owns its trainable parameters under the "encoder" learning-rate
/// group.
pub trait FeatureExtractor {
    /// Gradients for this extractor's parameters.
    type Grads;

    /// Name of the learning-rate group these parameters belong to.
    const LR_GROUP: &'static str = "encoder";

    /// Feature width `a`.
    fn output_dim(&self) -> usize;

    /// Produce a `(context_len x a)` feature matrix.
    fn encode(&self, input: &ModelInput) -> Result<RealMatrix>;

    /// Exact parameter gradients for `grad_features` of the same shape
    /// `encode` produced.
    fn backward(&self, input: &ModelInput, grad_features: &RealMatrix) -> Result<Self::Grads>;

    fn zero_grads(&self) -> Self::Grads;

    fn add_grads(acc: &mut Self::Grads, delta: &Self::Grads) -> Result<()>;

    fn scale_grads(grads: &mut Self::Grads, factor: f64);

    /// Plain SGD step: `w <- w - lr * g`.
    fn sgd_step(&mut self, grads: &Self::Grads, lr: f64) -> Result<()>;

    /// Named parameter tensors for checkpointing.
    fn named_tensors(&self) -> BTreeMap<String, TensorData>;

    fn load_tensors(&mut self, tensors: &BTreeMap<String, TensorData>) -> Result<()>;
}

/// Stand-in for a pretrained language model at desk scale.
///
/// Per context token t: `u_t = tanh(W_e [emb(p_t); q_mean] + b_e)` where
/// `q_mean` is the mean question-token embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder {
    /// vocab_size x d embedding table.
    embedding: RealMatrix,
    /// a x 2d projection.
    proj: RealMatrix,
    /// Length-a bias.
    bias: RealVector,
    embed_dim: usize,
    feature_dim: usize,
}

#[derive(Debug, Clone)]
pub struct ToyEncoderGrads {
    pub embedding: RealMatrix,
    pub proj: RealMatrix,
    pub bias: RealVector,
}

impl ToyEncoder {
    /// All parameters are initialized from seeded uniform(-0.1, 0.1).
    pub fn new(vocab_size: usize, embed_dim: usize, feature_dim: usize, rng: &mut SeededRng) -> Result<Self> {
        let emb = rng.sample_uniform(-0.1, 0.1, vocab_size * embed_dim)?;
        let proj = rng.sample_uniform(-0.1, 0.1, feature_dim * 2 * embed_dim)?;
        let bias = rng.sample_uniform(-0.1, 0.1, feature_dim)?;
        Ok(Self {
            embedding: RealMatrix::from_vec(vocab_size, embed_dim, emb.data().to_vec())?,
            proj: RealMatrix::from_vec(feature_dim, 2 * embed_dim, proj.data().to_vec())?,
            bias,
            embed_dim,
            feature_dim,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn check_ids(&self, input: &ModelInput) -> Result<()> {
        for t in input.context_tokens().iter().chain(input.question_tokens()) {
            if t.0 as usize >= self.vocab_size() {
                return Err(Error::Input(format!(
                    "token id {} is outside the vocabulary of size {}",
                    t.0,
                    self.vocab_size()
                )));
            }
        }
        Ok(())
    }

    fn question_mean(&self, input: &ModelInput) -> RealVector {
        let q = input.question_tokens();
        let mut mean = vec![0.0; self.embed_dim];
        for t in q {
            let row = self.embedding.row(t.0 as usize);
            for (m, e) in mean.iter_mut().zip(row) {
                *m += e;
            }
        }
        let inv = 1.0 / q.len() as f64;
        for m in mean.iter_mut() {
            *m *= inv;
        }
        RealVector::from_vec(mean)
    }

    /// Concatenated per-token input [emb(p_t); q_mean].
    fn packed_input(&self, token: u32, q_mean: &RealVector) -> Vec<f64> {
        let mut x = Vec::with_capacity(2 * self.embed_dim);
        x.extend_from_slice(self.embedding.row(token as usize));
        x.extend_from_slice(q_mean.data());
        x
    }
}

impl FeatureExtractor for ToyEncoder {
    type Grads = ToyEncoderGrads;

    fn output_dim(&self) -> usize {
        self.feature_dim
    }

    fn encode(&self, input: &ModelInput) -> Result<RealMatrix> {
        self.check_ids(input)?;
        if input.question_tokens().is_empty() {
            return Err(Error::Input("packed input has no question tokens".into()));
        }
        let q_mean = self.question_mean(input);
        let ctx = input.context_tokens();
        let mut out = RealMatrix::zeros(ctx.len(), self.feature_dim);
        for (t, token) in ctx.iter().enumerate() {
            let x = self.packed_input(token.0, &q_mean);
            let pre = self.proj.mul_vec(&x)?;
            let row = out.row_mut(t);
            for (o, (p, b)) in row.iter_mut().zip(pre.data().iter().zip(self.bias.data())) {
                *o = (p + b).tanh();
            }
        }
        Ok(out)
    }

    fn backward(&self, input: &ModelInput, grad_features: &RealMatrix) -> Result<Self::Grads> {
        self.check_ids(input)?;
        let ctx = input.context_tokens();
        if grad_features.shape() != (ctx.len(), self.feature_dim) {
            return Err(Error::Shape {
                op: "encoder_backward",
                left: format!("{}x{}", ctx.len(), self.feature_dim),
                right: grad_features.shape_string(),
            });
        }
        let q = input.question_tokens();
        let q_mean = self.question_mean(input);
        let mut grads = self.zero_grads();
        let mut grad_q_mean = vec![0.0; self.embed_dim];
        for (t, token) in ctx.iter().enumerate() {
            let x = self.packed_input(token.0, &q_mean);
            let pre = self.proj.mul_vec(&x)?;
            // d/dpre of tanh(pre + b) is 1 - u^2.
            let mut dpre = vec![0.0; self.feature_dim];
            for (i, d) in dpre.iter_mut().enumerate() {
                let u = (pre.get(i) + self.bias.get(i)).tanh();
                *d = grad_features.get(t, i) * (1.0 - u * u);
            }
            grads.proj.add_outer(1.0, &dpre, &x)?;
            for (b, d) in grads.bias.data_mut().iter_mut().zip(&dpre) {
                *b += d;
            }
            let dx = self.proj.tmul_vec(&dpre)?;
            let row = grads.embedding.row_mut(token.0 as usize);
            for (g, d) in row.iter_mut().zip(&dx.data()[..self.embed_dim]) {
                *g += d;
            }
            for (g, d) in grad_q_mean.iter_mut().zip(&dx.data()[self.embed_dim..]) {
                *g += d;
            }
        }
        let inv = 1.0 / q.len() as f64;
        for token in q {
            let row = grads.embedding.row_mut(token.0 as usize);
            for (g, d) in row.iter_mut().zip(&grad_q_mean) {
                *g += inv * d;
            }
        }
        Ok(grads)
    }

    fn zero_grads(&self) -> Self::Grads {
        ToyEncoderGrads {
            embedding: RealMatrix::zeros(self.vocab_size(), self.embed_dim),
            proj: RealMatrix::zeros(self.feature_dim, 2 * self.embed_dim),
            bias: RealVector::zeros(self.feature_dim),
        }
    }

    fn add_grads(acc: &mut Self::Grads, delta: &Self::Grads) -> Result<()> {
        acc.embedding.add_scaled(1.0, &delta.embedding)?;
        acc.proj.add_scaled(1.0, &delta.proj)?;
        acc.bias.add_scaled(1.0, &delta.bias)?;
        Ok(())
    }

    fn scale_grads(grads: &mut Self::Grads, factor: f64) {
        grads.embedding.scale(factor);
        grads.proj.scale(factor);
        grads.bias.scale(factor);
    }

    fn sgd_step(&mut self, grads: &Self::Grads, lr: f64) -> Result<()> {
        self.embedding.add_scaled(-lr, &grads.embedding)?;
        self.proj.add_scaled(-lr, &grads.proj)?;
        self.bias.add_scaled(-lr, &grads.bias)?;
        Ok(())
    }

    fn named_tensors(&self) -> BTreeMap<String, TensorData> {
        let mut map = BTreeMap::new();
        map.insert("encoder.embedding".into(), TensorData::from_matrix(&self.embedding));
        map.insert("encoder.proj".into(), TensorData::from_matrix(&self.proj));
        map.insert("encoder.bias".into(), TensorData::from_vector(&self.bias));
        map
    }

    fn load_tensors(&mut self, tensors: &BTreeMap<String, TensorData>) -> Result<()> {
        let get = |name: &str| {
            tensors
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Data(format!("checkpoint is missing tensor {name}")))
        };
        let embedding = get("encoder.embedding")?.into_matrix()?;
        let proj = get("encoder.proj")?.into_matrix()?;
        let bias = get("encoder.bias")?.into_vector()?;
        if embedding.shape() != self.embedding.shape()
            || proj.shape() != self.proj.shape()
            || bias.len() != self.bias.len()
        {
            return Err(Error::Shape {
                op: "load_tensors",
                left: format!(
                    "encoder {} / {} / {}",
                    self.embedding.shape_string(),
                    self.proj.shape_string(),
                    self.bias.len()
                ),
                right: format!(
                    "checkpoint {} / {} / {}",
                    embedding.shape_string(),
                    proj.shape_string(),
                    bias.len()
                ),
            });
        }
        self.embedding = embedding;
        self.proj = proj;
        self.bias = bias;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::Stream;
    use crate::qa_task::{build_input, QASample, TokenId};

    fn sample(context: Vec<u32>, question: Vec<u32>) -> QASample {
        QASample {
            id: "t".into(),
            context: context.into_iter().map(TokenId).collect(),
            question: question.into_iter().map(TokenId).collect(),
            answer: None,
        }
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let mut rng = SeededRng::new(1, Stream::Init);
        let mut enc = ToyEncoder::new(16, 3, 4, &mut rng).unwrap();
        enc.embedding = RealMatrix::zeros(16, 3);
        enc.proj = RealMatrix::zeros(4, 6);
        enc.bias = RealVector::zeros(4);
        let input = build_input(&sample(vec![5, 6], vec![7]), 32).unwrap();
        let out = enc.encode(&input).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn question_order_does_not_matter() {
        let mut rng = SeededRng::new(2, Stream::Init);
        let enc = ToyEncoder::new(16, 3, 4, &mut rng).unwrap();
        let a = build_input(&sample(vec![5, 6, 7], vec![8, 9, 10]), 32).unwrap();
        let b = build_input(&sample(vec![5, 6, 7], vec![10, 8, 9]), 32).unwrap();
        assert_eq!(enc.encode(&a).unwrap(), enc.encode(&b).unwrap());
    }

    #[test]
    fn out_of_vocab_token_is_an_input_error() {
        let mut rng = SeededRng::new(3, Stream::Init);
        let enc = ToyEncoder::new(16, 3, 4, &mut rng).unwrap();
        let input = build_input(&sample(vec![99], vec![5]), 32).unwrap();
        assert!(matches!(enc.encode(&input), Err(Error::Input(_))));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_parameter_gradients() {
        let mut rng = SeededRng::new(4, Stream::Init);
        let enc = ToyEncoder::new(16, 3, 4, &mut rng).unwrap();
        let input = build_input(&sample(vec![5, 6], vec![7]), 32).unwrap();
        let grads = enc.backward(&input, &RealMatrix::zeros(2, 4)).unwrap();
        assert!(grads.embedding.data().iter().all(|&x| x == 0.0));
        assert!(grads.proj.data().iter().all(|&x| x == 0.0));
        assert!(grads.bias.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn untouched_embedding_rows_get_no_gradient() {
        let mut rng = SeededRng::new(5, Stream::Init);
        let enc = ToyEncoder::new(16, 3, 4, &mut rng).unwrap();
        let input = build_input(&sample(vec![5, 6], vec![7]), 32).unwrap();
        let mut grad = RealMatrix::zeros(2, 4);
        grad.set(0, 0, 1.0);
        grad.set(1, 2, -0.5);
        let grads = enc.backward(&input, &grad).unwrap();
        // Row 9 is not in the input.
        assert!(grads.embedding.row(9).iter().all(|&x| x == 0.0));
        assert!(grads.embedding.row(5).iter().any(|&x| x != 0.0));
        assert!(grads.embedding.row(7).iter().any(|&x| x != 0.0));
    }
}

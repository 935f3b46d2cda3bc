//! The masked bottleneck: a linear layer `f` whose per-kernel outputs are
//! gated by a learned near-binary vector `M = sigmoid(sharpness * logits)`,
//! followed by a 2-output span head `h`. The snapshot of `M` taken after
//! source training gates every adaptation gradient so that kernels carrying
//! source knowledge barely move.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{sigmoid, RealMatrix, RealVector, SeededRng, TensorData};

/// Kernels with a snapshot value above `1 - DEFAULT_ACTIVE_TOLERANCE` count
/// as active.
pub const DEFAULT_ACTIVE_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct MaskModule {
    /// Learnable mask logits, length b.
    mask_logits: RealVector,
    /// Sharpness factor; large values make the mask nearly binary.
    sharpness: f64,
    /// Bottleneck weight, b x a.
    bottleneck_w: RealMatrix,
    /// Bottleneck bias, length b.
    bottleneck_b: RealVector,
    /// Span head weight, 2 x b. Row 0 scores answer starts, row 1 ends.
    head_w: RealMatrix,
    /// Span head bias, length 2.
    head_b: RealVector,
    /// When false the mask is pinned to all-ones and receives no gradient
    /// (the ablation without the mask mechanism).
    enabled: bool,
}

/// Gradients for every mask-module tensor.
#[derive(Debug, Clone)]
pub struct MaskGrads {
    pub mask_logits: RealVector,
    pub bottleneck_w: RealMatrix,
    pub bottleneck_b: RealVector,
    pub head_w: RealMatrix,
    pub head_b: RealVector,
}

impl MaskGrads {
    pub fn zeros(bottleneck_dim: usize, feature_dim: usize) -> Self {
        Self {
            mask_logits: RealVector::zeros(bottleneck_dim),
            bottleneck_w: RealMatrix::zeros(bottleneck_dim, feature_dim),
            bottleneck_b: RealVector::zeros(bottleneck_dim),
            head_w: RealMatrix::zeros(2, bottleneck_dim),
            head_b: RealVector::zeros(2),
        }
    }

    pub fn add(&mut self, other: &MaskGrads) -> Result<()> {
        self.mask_logits.add_scaled(1.0, &other.mask_logits)?;
        self.bottleneck_w.add_scaled(1.0, &other.bottleneck_w)?;
        self.bottleneck_b.add_scaled(1.0, &other.bottleneck_b)?;
        self.head_w.add_scaled(1.0, &other.head_w)?;
        self.head_b.add_scaled(1.0, &other.head_b)?;
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.mask_logits.scale(factor);
        self.bottleneck_w.scale(factor);
        self.bottleneck_b.scale(factor);
        self.head_w.scale(factor);
        self.head_b.scale(factor);
    }
}

/// Intermediates cached by `forward` for the matching `backward`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    features: RealMatrix,
    bottleneck_pre: RealMatrix,
    mask: RealVector,
}

/// Frozen copy of the mask taken at the end of source training. Immutable;
/// its complement scales adaptation gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSnapshot {
    values: TensorData,
    active_tolerance: f64,
    taken_at: String,
}

impl MaskSnapshot {
    pub fn values(&self) -> &[f64] {
        &self.values.data
    }

    pub fn len(&self) -> usize {
        self.values.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.data.is_empty()
    }

    pub fn active_tolerance(&self) -> f64 {
        self.active_tolerance
    }

    /// Kernels whose snapshot value exceeds `1 - active_tolerance`.
    pub fn active_kernels(&self) -> Vec<usize> {
        self.values
            .data
            .iter()
            .enumerate()
            .filter(|(_, &m)| m > 1.0 - self.active_tolerance)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn active_fraction(&self) -> f64 {
        self.active_kernels().len() as f64 / self.len() as f64
    }
}

impl MaskModule {
    /// Mask logits start from seeded uniform(-0.5, 0.5); weights from
    /// uniform(-0.1, 0.1); biases at zero.
    pub fn new(
        bottleneck_dim: usize,
        feature_dim: usize,
        sharpness: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if sharpness <= 0.0 {
            return Err(Error::Config(format!(
                "mask sharpness must be positive, got {sharpness}"
            )));
        }
        let mask_logits = rng.sample_uniform(-0.5, 0.5, bottleneck_dim)?;
        let w_f = rng.sample_uniform(-0.1, 0.1, bottleneck_dim * feature_dim)?;
        let w_h = rng.sample_uniform(-0.1, 0.1, 2 * bottleneck_dim)?;
        Ok(Self {
            mask_logits,
            sharpness,
            bottleneck_w: RealMatrix::from_vec(bottleneck_dim, feature_dim, w_f.data().to_vec())?,
            bottleneck_b: RealVector::zeros(bottleneck_dim),
            head_w: RealMatrix::from_vec(2, bottleneck_dim, w_h.data().to_vec())?,
            head_b: RealVector::zeros(2),
            enabled: true,
        })
    }

    pub fn bottleneck_dim(&self) -> usize {
        self.bottleneck_w.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.bottleneck_w.cols()
    }

    pub fn sharpness(&self) -> f64 {
        self.sharpness
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn set_enabled(&mut self, enabled: bool) {
        self.enabled = enabled;
    }

    pub fn mask_logits(&self) -> &RealVector {
        &self.mask_logits
    }

    pub fn mask_logits_mut(&mut self) -> &mut RealVector {
        &mut self.mask_logits
    }

    /// Current mask values `sigmoid(sharpness * logits)`, or all-ones when
    /// the mask is disabled. Extreme logits saturate to exactly 0.0 / 1.0 in
    /// f64, which downstream gating relies on.
    pub fn mask_values(&self) -> RealVector {
        if !self.enabled {
            return RealVector::ones(self.bottleneck_dim());
        }
        RealVector::from_vec(
            self.mask_logits
                .data()
                .iter()
                .map(|&n| sigmoid(self.sharpness * n))
                .collect(),
        )
    }

    /// Fraction of kernels whose current mask value exceeds
    /// `1 - DEFAULT_ACTIVE_TOLERANCE`.
    pub fn active_fraction(&self) -> f64 {
        let m = self.mask_values();
        m.data()
            .iter()
            .filter(|&&x| x > 1.0 - DEFAULT_ACTIVE_TOLERANCE)
            .count() as f64
            / m.len() as f64
    }

    /// Per token t: `z_t = W_f u_t + b_f`, `g_t = M .* z_t`,
    /// `logits_t = W_h g_t + b_h`. Returns the `(L x 2)` logits (column 0 is
    /// the start score, column 1 the end score) plus the cache for backward.
    pub fn forward(&self, features: &RealMatrix) -> Result<(RealMatrix, ForwardCache)> {
        if features.cols() != self.feature_dim() {
            return Err(Error::Shape {
                op: "mask_forward",
                left: format!("features {}", features.shape_string()),
                right: format!("bottleneck expecting width {}", self.feature_dim()),
            });
        }
        let mask = self.mask_values();
        let len = features.rows();
        let b = self.bottleneck_dim();
        let mut pre = RealMatrix::zeros(len, b);
        let mut logits = RealMatrix::zeros(len, 2);
        for t in 0..len {
            let z = self.bottleneck_w.mul_vec(features.row(t))?;
            for i in 0..b {
                pre.set(t, i, z.get(i) + self.bottleneck_b.get(i));
            }
            let gated: Vec<f64> = pre
                .row(t)
                .iter()
                .zip(mask.data())
                .map(|(z, m)| z * m)
                .collect();
            let out = self.head_w.mul_vec(&gated)?;
            logits.set(t, 0, out.get(0) + self.head_b.get(0));
            logits.set(t, 1, out.get(1) + self.head_b.get(1));
        }
        Ok((
            logits,
            ForwardCache {
                features: features.clone(),
                bottleneck_pre: pre,
                mask,
            },
        ))
    }

    /// Exact gradients for every parameter and for the input features. The
    /// mask-logit gradient covers the data path only; the sparsity-loss term
    /// is added by the training loop.
    pub fn backward(
        &self,
        grad_logits: &RealMatrix,
        cache: &ForwardCache,
    ) -> Result<(MaskGrads, RealMatrix)> {
        let len = cache.features.rows();
        if grad_logits.shape() != (len, 2) {
            return Err(Error::Shape {
                op: "mask_backward",
                left: format!("{}x2 from cache", len),
                right: grad_logits.shape_string(),
            });
        }
        if cache.bottleneck_pre.shape() != (len, self.bottleneck_dim())
            || cache.mask.len() != self.bottleneck_dim()
        {
            return Err(Error::Precondition(
                "forward cache does not match this module".into(),
            ));
        }
        let b = self.bottleneck_dim();
        let mut grads = MaskGrads::zeros(b, self.feature_dim());
        let mut grad_features = RealMatrix::zeros(len, self.feature_dim());
        let mut grad_mask = vec![0.0; b];
        for t in 0..len {
            let gl = grad_logits.row(t);
            let z = cache.bottleneck_pre.row(t);
            let gated: Vec<f64> = z.iter().zip(cache.mask.data()).map(|(z, m)| z * m).collect();
            grads.head_w.add_outer(1.0, gl, &gated)?;
            grads.head_b.data_mut()[0] += gl[0];
            grads.head_b.data_mut()[1] += gl[1];
            let grad_gated = self.head_w.tmul_vec(gl)?;
            let mut grad_z = vec![0.0; b];
            for i in 0..b {
                grad_mask[i] += grad_gated.get(i) * z[i];
                grad_z[i] = grad_gated.get(i) * cache.mask.get(i);
            }
            grads.bottleneck_w.add_outer(1.0, &grad_z, cache.features.row(t))?;
            for (gb, gz) in grads.bottleneck_b.data_mut().iter_mut().zip(&grad_z) {
                *gb += gz;
            }
            let gf = self.bottleneck_w.tmul_vec(&grad_z)?;
            grad_features.row_mut(t).copy_from_slice(gf.data());
        }
        if self.enabled {
            // dM/dN = k * M * (1 - M); exactly zero at saturation.
            for i in 0..b {
                let m = cache.mask.get(i);
                grads.mask_logits.data_mut()[i] = grad_mask[i] * self.sharpness * m * (1.0 - m);
            }
        }
        Ok((grads, grad_features))
    }

    /// Deep copy of the current mask values, taken at the end of source
    /// training.
    pub fn snapshot(&self) -> MaskSnapshot {
        MaskSnapshot {
            values: TensorData::from_vector(&self.mask_values()),
            active_tolerance: DEFAULT_ACTIVE_TOLERANCE,
            taken_at: "end_of_source_training".into(),
        }
    }

    pub fn sgd_step(&mut self, grads: &MaskGrads, lr: f64) -> Result<()> {
        if self.enabled {
            self.mask_logits.add_scaled(-lr, &grads.mask_logits)?;
        }
        self.bottleneck_w.add_scaled(-lr, &grads.bottleneck_w)?;
        self.bottleneck_b.add_scaled(-lr, &grads.bottleneck_b)?;
        self.head_w.add_scaled(-lr, &grads.head_w)?;
        self.head_b.add_scaled(-lr, &grads.head_b)?;
        Ok(())
    }

    pub fn named_tensors(&self) -> std::collections::BTreeMap<String, TensorData> {
        let mut map = std::collections::BTreeMap::new();
        map.insert("mask.logits".into(), TensorData::from_vector(&self.mask_logits));
        map.insert("mask.bottleneck_w".into(), TensorData::from_matrix(&self.bottleneck_w));
        map.insert("mask.bottleneck_b".into(), TensorData::from_vector(&self.bottleneck_b));
        map.insert("mask.head_w".into(), TensorData::from_matrix(&self.head_w));
        map.insert("mask.head_b".into(), TensorData::from_vector(&self.head_b));
        map
    }

    pub fn load_tensors(
        &mut self,
        tensors: &std::collections::BTreeMap<String, TensorData>,
    ) -> Result<()> {
        let get = |name: &str| {
            tensors
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Data(format!("checkpoint is missing tensor {name}")))
        };
        let mask_logits = get("mask.logits")?.into_vector()?;
        let bottleneck_w = get("mask.bottleneck_w")?.into_matrix()?;
        let bottleneck_b = get("mask.bottleneck_b")?.into_vector()?;
        let head_w = get("mask.head_w")?.into_matrix()?;
        let head_b = get("mask.head_b")?.into_vector()?;
        if bottleneck_w.shape() != self.bottleneck_w.shape()
            || mask_logits.len() != self.mask_logits.len()
            || head_w.shape() != self.head_w.shape()
        {
            return Err(Error::Shape {
                op: "load_tensors",
                left: format!("mask module {}", self.bottleneck_w.shape_string()),
                right: format!("checkpoint {}", bottleneck_w.shape_string()),
            });
        }
        self.mask_logits = mask_logits;
        self.bottleneck_w = bottleneck_w;
        self.bottleneck_b = bottleneck_b;
        self.head_w = head_w;
        self.head_b = head_b;
        Ok(())
    }
}

/// Gated copies of the gradients: bottleneck rows, bottleneck bias entries,
/// and head columns of kernel i are scaled by `1 - snapshot[i]`; mask logits
/// and the head bias pass through unscaled.
pub fn gate_grads(grads: &MaskGrads, snapshot: &MaskSnapshot) -> MaskGrads {
    let mut out = grads.clone();
    let b = snapshot.len();
    for i in 0..b {
        let keep = 1.0 - snapshot.values()[i];
        for g in out.bottleneck_w.row_mut(i) {
            *g *= keep;
        }
        out.bottleneck_b.data_mut()[i] *= keep;
        for r in 0..2 {
            let v = out.head_w.get(r, i) * keep;
            out.head_w.set(r, i, v);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::Stream;
    use approx::assert_abs_diff_eq;

    fn module(b: usize, a: usize, k: f64, seed: u64) -> MaskModule {
        let mut rng = SeededRng::new(seed, Stream::Init);
        MaskModule::new(b, a, k, &mut rng).unwrap()
    }

    #[test]
    fn mask_values_reference_points() {
        let mut m = module(3, 2, 100.0, 1);
        m.mask_logits = RealVector::from_vec(vec![0.0, 0.05, -0.5]);
        let v = m.mask_values();
        assert_eq!(v.get(0), 0.5);
        // sigmoid(5), frozen from direct evaluation.
        assert_abs_diff_eq!(v.get(1), 0.993307149075715, epsilon = 1e-12);
        assert!(v.get(2) < 1e-21);
    }

    #[test]
    fn all_off_mask_blocks_every_feature() {
        let mut m = module(4, 3, 100.0, 2);
        m.mask_logits = RealVector::from_vec(vec![-5.0; 4]);
        m.head_b = RealVector::from_vec(vec![0.7, -0.3]);
        let features = RealMatrix::from_rows(&[&[1.0, -2.0, 0.5], &[0.1, 0.2, 0.3]]).unwrap();
        let (logits, _) = m.forward(&features).unwrap();
        for t in 0..2 {
            assert_eq!(logits.get(t, 0), 0.7);
            assert_eq!(logits.get(t, 1), -0.3);
        }
    }

    #[test]
    fn identity_bottleneck_with_open_mask_reduces_to_the_head() {
        let mut m = module(3, 3, 100.0, 3);
        m.mask_logits = RealVector::from_vec(vec![5.0; 3]);
        m.bottleneck_w = RealMatrix::identity(3);
        m.bottleneck_b = RealVector::zeros(3);
        let features = RealMatrix::from_rows(&[&[0.3, -0.4, 0.9]]).unwrap();
        let (logits, _) = m.forward(&features).unwrap();
        let direct = m.head_w.mul_vec(features.row(0)).unwrap();
        assert_abs_diff_eq!(logits.get(0, 0), direct.get(0) + m.head_b.get(0), epsilon = 1e-12);
        assert_abs_diff_eq!(logits.get(0, 1), direct.get(1) + m.head_b.get(1), epsilon = 1e-12);
    }

    #[test]
    fn forward_matches_independent_recomputation() {
        let m = module(2, 2, 20.0, 4);
        let features = RealMatrix::from_rows(&[&[0.2, -0.7], &[1.1, 0.4], &[-0.3, 0.9]]).unwrap();
        let (logits, _) = m.forward(&features).unwrap();
        let mask = m.mask_values();
        for t in 0..3 {
            for r in 0..2 {
                let mut expect = m.head_b.get(r);
                for i in 0..2 {
                    let mut z = m.bottleneck_b.get(i);
                    for j in 0..2 {
                        z += m.bottleneck_w.get(i, j) * features.get(t, j);
                    }
                    expect += m.head_w.get(r, i) * mask.get(i) * z;
                }
                assert_abs_diff_eq!(logits.get(t, r), expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_grad_logits_give_zero_grads() {
        let m = module(4, 3, 50.0, 5);
        let features = RealMatrix::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap();
        let (_, cache) = m.forward(&features).unwrap();
        let (grads, gf) = m.backward(&RealMatrix::zeros(1, 2), &cache).unwrap();
        assert!(grads.mask_logits.data().iter().all(|&x| x == 0.0));
        assert!(grads.bottleneck_w.data().iter().all(|&x| x == 0.0));
        assert!(grads.head_w.data().iter().all(|&x| x == 0.0));
        assert!(gf.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn saturated_mask_logits_get_vanishing_data_gradient() {
        let mut m = module(2, 2, 100.0, 6);
        m.mask_logits = RealVector::from_vec(vec![0.5, -0.5]);
        let features = RealMatrix::from_rows(&[&[1.0, 1.0]]).unwrap();
        let (_, cache) = m.forward(&features).unwrap();
        let mut gl = RealMatrix::zeros(1, 2);
        gl.set(0, 0, 1.0);
        gl.set(0, 1, 1.0);
        let (grads, _) = m.backward(&gl, &cache).unwrap();
        // sigmoid'(50) is below 2e-22, so the data-path gradient is crushed.
        for i in 0..2 {
            assert!(grads.mask_logits.get(i).abs() <= 1e-18);
        }
    }

    #[test]
    fn snapshot_is_immutable_under_later_training() {
        let mut m = module(3, 2, 100.0, 7);
        let snap = m.snapshot();
        let before = snap.values().to_vec();
        assert_eq!(before, m.mask_values().data());
        m.mask_logits = RealVector::from_vec(vec![9.0, 9.0, 9.0]);
        assert_eq!(snap.values(), &before[..]);
    }

    #[test]
    fn snapshot_complement_of_half_mask() {
        let mut m = module(2, 2, 100.0, 8);
        m.mask_logits = RealVector::from_vec(vec![0.0, 0.0]);
        let snap = m.snapshot();
        for &v in snap.values() {
            assert_eq!(1.0 - v, 0.5);
        }
    }

    #[test]
    fn active_kernels_apply_the_threshold() {
        let mut m = module(3, 2, 100.0, 9);
        m.mask_logits = RealVector::from_vec(vec![0.1, -0.1, 0.0]);
        let snap = m.snapshot();
        // sigmoid(10) = 0.9999546 > 0.99 active; others not.
        assert_eq!(snap.active_kernels(), vec![0]);
        m.mask_logits = RealVector::from_vec(vec![0.0; 3]);
        assert!(m.snapshot().active_kernels().is_empty());
    }

    #[test]
    fn gating_scales_rows_columns_and_bias() {
        let mut grads = MaskGrads::zeros(3, 2);
        for v in grads.bottleneck_w.data_mut() {
            *v = 2.0;
        }
        for v in grads.head_w.data_mut() {
            *v = 4.0;
        }
        for v in grads.bottleneck_b.data_mut() {
            *v = 1.0;
        }
        for v in grads.mask_logits.data_mut() {
            *v = 3.0;
        }
        grads.head_b = RealVector::from_vec(vec![5.0, 6.0]);
        let snapshot = MaskSnapshot {
            values: TensorData::from_vector(&RealVector::from_vec(vec![
                1.0,
                0.0,
                0.993307149075715,
            ])),
            active_tolerance: DEFAULT_ACTIVE_TOLERANCE,
            taken_at: "end_of_source_training".into(),
        };
        let gated = gate_grads(&grads, &snapshot);
        // Frozen kernel: exactly zero.
        assert!(gated.bottleneck_w.row(0).iter().all(|&x| x == 0.0));
        assert_eq!(gated.head_w.get(0, 0), 0.0);
        assert_eq!(gated.head_w.get(1, 0), 0.0);
        assert_eq!(gated.bottleneck_b.get(0), 0.0);
        // Fully inactive kernel: identity.
        assert_eq!(gated.bottleneck_w.row(1), &[2.0, 2.0]);
        assert_eq!(gated.head_w.get(0, 1), 4.0);
        // Nearly-active kernel: scaled by 1 - 0.993307... = 0.006692850924284857.
        let keep = 1.0 - 0.993307149075715;
        assert_abs_diff_eq!(gated.bottleneck_w.get(2, 0), 2.0 * keep, epsilon = 1e-15);
        assert_abs_diff_eq!(gated.head_w.get(0, 2), 4.0 * keep, epsilon = 1e-15);
        // Mask logits and head bias pass through.
        assert_eq!(gated.mask_logits.data(), &[3.0, 3.0, 3.0]);
        assert_eq!(gated.head_b.data(), &[5.0, 6.0]);
    }

    #[test]
    fn disabled_mask_is_all_ones_and_gets_no_gradient() {
        let mut m = module(3, 2, 100.0, 11);
        m.set_enabled(false);
        assert_eq!(m.mask_values().data(), &[1.0, 1.0, 1.0]);
        let features = RealMatrix::from_rows(&[&[1.0, -1.0]]).unwrap();
        let (_, cache) = m.forward(&features).unwrap();
        let mut gl = RealMatrix::zeros(1, 2);
        gl.set(0, 0, 1.0);
        let (grads, _) = m.backward(&gl, &cache).unwrap();
        assert!(grads.mask_logits.data().iter().all(|&x| x == 0.0));
        assert!(grads.bottleneck_w.data().iter().any(|&x| x != 0.0));
    }
}

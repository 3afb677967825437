//! The multi-ROI regression model and the single-ROI baselines.
//!
//! All 7 ROIs of a sample run through one shared encoder; each pooled
//! feature goes through one shared regression head, and the 7 features
//! concatenated go through a separate head. Training minimizes the mean of
//! the 8 per-head MSE terms; at test time the concatenated-feature head is
//! the output.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::encoders::{build_encoder, Encoder, EncoderSpec};
use super::layers::{Grads, Linear, ParamSet};
use super::tensor::{Mat, Tensor4};
use super::NetworkError;
use crate::geometry::{RoiCropSet, RoiKind};
use crate::scalar::Real;

/// Number of ground-truth vertebrae, L1..L4.
pub const N_VERTEBRAE: usize = 4;
const N_ROIS: usize = 7;
const N_HEADS: f64 = 8.0;

/// Batch of ROI image stacks, one [n, 1, H, W] tensor per kind.
#[derive(Debug, Clone)]
pub struct RoiBatch<F> {
    kinds: Vec<RoiKind>,
    tensors: Vec<Tensor4<F>>,
}

impl<F: Real> RoiBatch<F> {
    pub fn new(kinds: Vec<RoiKind>, tensors: Vec<Tensor4<F>>) -> Self {
        assert_eq!(kinds.len(), tensors.len());
        Self { kinds, tensors }
    }

    /// Stack full crop sets into a 7-kind batch.
    pub fn from_crop_sets(sets: &[RoiCropSet<F>]) -> Self {
        let kinds: Vec<RoiKind> = RoiKind::ALL.to_vec();
        let tensors = kinds
            .iter()
            .map(|&kind| {
                let first = sets[0].get(kind);
                let (h, w) = (first.height(), first.width());
                let mut t = Tensor4::zeros(sets.len(), 1, h, w);
                for (i, set) in sets.iter().enumerate() {
                    t.sample_mut(i).copy_from_slice(set.get(kind).as_slice());
                }
                t
            })
            .collect();
        Self { kinds, tensors }
    }

    pub fn len(&self) -> usize {
        self.tensors.first().map(|t| t.n).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, kind: RoiKind) -> Result<&Tensor4<F>, NetworkError> {
        self.kinds
            .iter()
            .position(|&k| k == kind)
            .map(|i| &self.tensors[i])
            .ok_or(NetworkError::MissingRoi(kind))
    }
}

/// Replicate a single-channel stack to 3 channels; data files stay
/// single-channel and the adapter lives inside the model.
fn triplicate<F: Real>(x: &Tensor4<F>) -> Tensor4<F> {
    assert_eq!(x.c, 1);
    let plane = x.h * x.w;
    let mut out = Tensor4::zeros(x.n, 3, x.h, x.w);
    for i in 0..x.n {
        let src = x.sample(i);
        let dst = out.sample_mut(i);
        for c in 0..3 {
            dst[c * plane..(c + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

/// Per-head predictions of one forward pass: 7 per-ROI BMD vectors plus the
/// concatenated-feature prediction, each [n × 4].
#[derive(Debug, Clone)]
pub struct MultiHeadPrediction<F> {
    pub per_roi: Vec<Mat<F>>,
    pub concat: Mat<F>,
}

impl<F: Real> MultiHeadPrediction<F> {
    pub fn all_finite(&self) -> bool {
        self.per_roi.iter().all(|m| m.all_finite()) && self.concat.all_finite()
    }
}

/// MSE over batch and vertebrae for one head.
pub fn head_mse<F: Real>(pred: &Mat<F>, targets: &Mat<F>) -> Result<F, NetworkError> {
    if pred.rows != targets.rows || pred.cols != targets.cols {
        return Err(NetworkError::ShapeMismatch {
            expected: (targets.rows, targets.cols),
            got: (pred.rows, pred.cols),
        });
    }
    let n = (pred.rows * pred.cols) as f64;
    let mut acc = F::zero();
    for (&p, &t) in pred.data.iter().zip(&targets.data) {
        let d = p - t;
        acc += d * d;
    }
    Ok(acc * F::from_f64(1.0 / n))
}

/// Training loss: the unweighted mean of the 8 per-head MSE terms.
pub fn average_mse_loss<F: Real>(
    pred: &MultiHeadPrediction<F>,
    targets: &Mat<F>,
) -> Result<F, NetworkError> {
    if !targets.all_finite() {
        return Err(NetworkError::NonFiniteActivation);
    }
    let mut acc = F::zero();
    for head in &pred.per_roi {
        acc += head_mse(head, targets)?;
    }
    acc += head_mse(&pred.concat, targets)?;
    Ok(acc * F::from_f64(1.0 / N_HEADS))
}

fn head_grad<F: Real>(pred: &Mat<F>, targets: &Mat<F>, head_weight: f64) -> Mat<F> {
    // d/dp of head_weight · mean((p-t)²) = head_weight · 2(p-t)/len.
    let scale = F::from_f64(head_weight * 2.0 / (pred.rows * pred.cols) as f64);
    let mut g = Mat::zeros(pred.rows, pred.cols);
    for ((gv, &p), &t) in g.data.iter_mut().zip(&pred.data).zip(&targets.data) {
        *gv = (p - t) * scale;
    }
    g
}

/// The multi-ROI model: shared encoder, shared per-ROI head, concat head.
pub struct MultiRoiModel<F> {
    pub params: ParamSet<F>,
    pub spec: EncoderSpec,
    encoder: Encoder,
    shared_head: Linear,
    concat_head: Linear,
}

fn init_linear<F: Real>(
    params: &mut ParamSet<F>,
    rng: &mut ChaCha12Rng,
    name: &str,
    in_dim: usize,
    out_dim: usize,
) -> Linear {
    use rand::Rng;
    let limit = (1.0 / in_dim as f64).sqrt();
    let w: Vec<F> = (0..in_dim * out_dim)
        .map(|_| F::from_f64(rng.random_range(-limit..limit)))
        .collect();
    let w = params.add(format!("{name}.w"), vec![out_dim, in_dim], w);
    let b = params.add(format!("{name}.b"), vec![out_dim], vec![F::zero(); out_dim]);
    Linear {
        in_dim,
        out_dim,
        w,
        b,
    }
}

impl<F: Real> MultiRoiModel<F> {
    pub fn new(encoder_name: &str, seed: u64) -> Result<Self, NetworkError> {
        let spec = EncoderSpec::by_name(encoder_name)?;
        let mut params = ParamSet::default();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let encoder = build_encoder(&spec, &mut params, &mut rng)?;
        let d = spec.feature_dim;
        let shared_head = init_linear(&mut params, &mut rng, "shared_head", d, N_VERTEBRAE);
        let concat_head = init_linear(&mut params, &mut rng, "concat_head", N_ROIS * d, N_VERTEBRAE);
        Ok(Self {
            params,
            spec,
            encoder,
            shared_head,
            concat_head,
        })
    }

    pub fn min_input(&self) -> usize {
        self.encoder.min_input
    }

    pub fn concat_width(&self) -> usize {
        self.concat_head.in_dim
    }

    /// Encode one ROI stack to pooled feature vectors [n × feature_dim].
    pub fn encode(&self, crops: &Tensor4<F>) -> Result<Mat<F>, NetworkError> {
        if crops.h < self.encoder.min_input || crops.w < self.encoder.min_input {
            return Err(NetworkError::SpatialTooSmall {
                height: crops.h,
                width: crops.w,
            });
        }
        let feat = self.encoder.forward_infer(triplicate(crops), &self.params)?;
        if !feat.all_finite() {
            return Err(NetworkError::NonFiniteActivation);
        }
        Ok(feat)
    }

    /// Full forward pass producing all 8 heads.
    pub fn forward(&self, batch: &RoiBatch<F>) -> Result<MultiHeadPrediction<F>, NetworkError> {
        let mut feats = Vec::with_capacity(N_ROIS);
        for kind in RoiKind::ALL {
            feats.push(self.encode(batch.get(kind)?)?);
        }
        let per_roi: Vec<Mat<F>> = feats
            .iter()
            .map(|f| self.shared_head.forward(f, &self.params))
            .collect();
        let refs: Vec<&Mat<F>> = feats.iter().collect();
        let concat = self.concat_head.forward(&Mat::hstack(&refs), &self.params);
        Ok(MultiHeadPrediction { per_roi, concat })
    }

    /// Test-time output: the concatenated-feature head.
    pub fn predict(&self, batch: &RoiBatch<F>) -> Result<Mat<F>, NetworkError> {
        Ok(self.forward(batch)?.concat)
    }

    /// Loss + full parameter gradients for one batch.
    pub fn loss_and_grads(
        &self,
        batch: &RoiBatch<F>,
        targets: &Mat<F>,
    ) -> Result<(F, Grads<F>), NetworkError> {
        let mut feats = Vec::with_capacity(N_ROIS);
        let mut caches = Vec::with_capacity(N_ROIS);
        for kind in RoiKind::ALL {
            let crops = batch.get(kind)?;
            if crops.h < self.encoder.min_input || crops.w < self.encoder.min_input {
                return Err(NetworkError::SpatialTooSmall {
                    height: crops.h,
                    width: crops.w,
                });
            }
            let (feat, cache) = self
                .encoder
                .forward_train(triplicate(crops), &self.params)?;
            feats.push(feat);
            caches.push(cache);
        }
        let per_roi: Vec<Mat<F>> = feats
            .iter()
            .map(|f| self.shared_head.forward(f, &self.params))
            .collect();
        let refs: Vec<&Mat<F>> = feats.iter().collect();
        let concat_feat = Mat::hstack(&refs);
        let concat = self.concat_head.forward(&concat_feat, &self.params);

        let pred = MultiHeadPrediction { per_roi, concat };
        let loss = average_mse_loss(&pred, targets)?;
        if !loss.is_finite() {
            return Err(NetworkError::NonFiniteActivation);
        }

        let mut grads = Grads::zeros_like(&self.params);
        let head_weight = 1.0 / N_HEADS;
        let dconcat_pred = head_grad(&pred.concat, targets, head_weight);
        let dconcat_feat =
            self.concat_head
                .backward(&dconcat_pred, &concat_feat, &self.params, &mut grads);

        let d = self.spec.feature_dim;
        for (ri, ((feat, cache), head_pred)) in feats
            .iter()
            .zip(&caches)
            .zip(&pred.per_roi)
            .enumerate()
        {
            let dpred = head_grad(head_pred, targets, head_weight);
            let mut dfeat = self.shared_head.backward(&dpred, feat, &self.params, &mut grads);
            // Add this ROI's block of the concat-feature gradient.
            for r in 0..dfeat.rows {
                let src = &dconcat_feat.row(r)[ri * d..(ri + 1) * d];
                for (v, &g) in dfeat.row_mut(r).iter_mut().zip(src) {
                    *v += g;
                }
            }
            self.encoder.backward(&dfeat, cache, &self.params, &mut grads);
        }
        Ok((loss, grads))
    }

    /// Loss without gradients (finite-difference probes).
    pub fn loss_only(&self, batch: &RoiBatch<F>, targets: &Mat<F>) -> Result<F, NetworkError> {
        average_mse_loss(&self.forward(batch)?, targets)
    }

    /// Gradient of the summed concat output with respect to each ROI's
    /// feature block, as block L2 norms. Nonzero entries certify that every
    /// ROI feeds the concatenated head.
    pub fn concat_feature_sensitivity(&self, batch: &RoiBatch<F>) -> Result<Vec<f64>, NetworkError> {
        let n = batch.len();
        let d = self.spec.feature_dim;
        // d(sum of outputs)/d(concat_feat) = column sums of the head weight,
        // independent of the input; batch only fixes shapes.
        let w = self.params.get(self.concat_head.w);
        let mut norms = vec![0.0f64; N_ROIS];
        for (ri, norm) in norms.iter_mut().enumerate() {
            let mut acc = 0.0;
            for col in ri * d..(ri + 1) * d {
                let mut colsum = 0.0;
                for o in 0..N_VERTEBRAE {
                    colsum += w[o * self.concat_head.in_dim + col].as_f64();
                }
                acc += colsum * colsum;
            }
            *norm = (acc * n as f64).sqrt();
        }
        Ok(norms)
    }
}

/// Single-ROI baseline: encoder + GAP + one FC head. Two-input variants
/// (clavicle, ribcage) share the encoder and head across both sides and
/// average the two head outputs.
pub struct SingleRoiModel<F> {
    pub params: ParamSet<F>,
    pub spec: EncoderSpec,
    pub inputs: Vec<RoiKind>,
    encoder: Encoder,
    head: Linear,
}

impl<F: Real> SingleRoiModel<F> {
    pub fn new(inputs: Vec<RoiKind>, encoder_name: &str, seed: u64) -> Result<Self, NetworkError> {
        assert!(!inputs.is_empty() && inputs.len() <= 2, "1 or 2 input ROIs");
        let spec = EncoderSpec::by_name(encoder_name)?;
        let mut params = ParamSet::default();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let encoder = build_encoder(&spec, &mut params, &mut rng)?;
        let head = init_linear(&mut params, &mut rng, "head", spec.feature_dim, N_VERTEBRAE);
        Ok(Self {
            params,
            spec,
            inputs,
            encoder,
            head,
        })
    }

    pub fn min_input(&self) -> usize {
        self.encoder.min_input
    }

    pub fn predict(&self, batch: &RoiBatch<F>) -> Result<Mat<F>, NetworkError> {
        let mut out: Option<Mat<F>> = None;
        for &kind in &self.inputs {
            let feat = self.encoder.forward_infer(triplicate(batch.get(kind)?), &self.params)?;
            let pred = self.head.forward(&feat, &self.params);
            out = Some(match out {
                None => pred,
                Some(mut acc) => {
                    for (v, &p) in acc.data.iter_mut().zip(&pred.data) {
                        *v += p;
                    }
                    acc
                }
            });
        }
        let mut pred = out.unwrap();
        if self.inputs.len() > 1 {
            let scale = F::from_f64(1.0 / self.inputs.len() as f64);
            for v in &mut pred.data {
                *v *= scale;
            }
        }
        if !pred.all_finite() {
            return Err(NetworkError::NonFiniteActivation);
        }
        Ok(pred)
    }

    pub fn loss_and_grads(
        &self,
        batch: &RoiBatch<F>,
        targets: &Mat<F>,
    ) -> Result<(F, Grads<F>), NetworkError> {
        let mut feats = Vec::new();
        let mut caches = Vec::new();
        for &kind in &self.inputs {
            let (feat, cache) = self
                .encoder
                .forward_train(triplicate(batch.get(kind)?), &self.params)?;
            feats.push(feat);
            caches.push(cache);
        }
        let preds: Vec<Mat<F>> = feats
            .iter()
            .map(|f| self.head.forward(f, &self.params))
            .collect();
        let k = self.inputs.len();
        let scale = F::from_f64(1.0 / k as f64);
        let mut mean_pred = Mat::zeros(preds[0].rows, preds[0].cols);
        for p in &preds {
            for (v, &x) in mean_pred.data.iter_mut().zip(&p.data) {
                *v += x * scale;
            }
        }
        let loss = head_mse(&mean_pred, targets)?;
        if !loss.is_finite() {
            return Err(NetworkError::NonFiniteActivation);
        }
        let mut grads = Grads::zeros_like(&self.params);
        let dmean = head_grad(&mean_pred, targets, 1.0);
        for ((feat, cache), _) in feats.iter().zip(&caches).zip(&preds) {
            let mut dpred = dmean.clone();
            for v in &mut dpred.data {
                *v *= scale;
            }
            let dfeat = self.head.backward(&dpred, feat, &self.params, &mut grads);
            self.encoder.backward(&dfeat, cache, &self.params, &mut grads);
        }
        Ok((loss, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_batch(n: usize, size: usize, seed: u64) -> (RoiBatch<f64>, Mat<f64>) {
        let mut rng = StdRng::seed_from_u64(seed);
        let tensors = RoiKind::ALL
            .iter()
            .map(|_| {
                let data = (0..n * size * size).map(|_| rng.random_range(0.0..1.0)).collect();
                Tensor4::from_vec(n, 1, size, size, data)
            })
            .collect();
        let targets = Mat::from_vec(
            n,
            4,
            (0..n * 4).map(|_| rng.random_range(0.6..1.4)).collect(),
        );
        (RoiBatch::new(RoiKind::ALL.to_vec(), tensors), targets)
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let model = MultiRoiModel::<f64>::new("tiny", 11).unwrap();
        let (batch, _) = random_batch(3, 16, 2);
        let pred = model.forward(&batch).unwrap();
        assert_eq!(pred.per_roi.len(), 7);
        for head in &pred.per_roi {
            assert_eq!((head.rows, head.cols), (3, 4));
        }
        assert_eq!((pred.concat.rows, pred.concat.cols), (3, 4));
        let again = model.forward(&batch).unwrap();
        assert_eq!(pred.concat.data, again.concat.data);
    }

    #[test]
    fn predict_equals_forward_concat() {
        let model = MultiRoiModel::<f32>::new("tiny", 4).unwrap();
        let mut rng = StdRng::seed_from_u64(8);
        let tensors = RoiKind::ALL
            .iter()
            .map(|_| {
                let data = (0..2 * 16 * 16).map(|_| rng.random_range(0.0f32..1.0)).collect();
                Tensor4::from_vec(2, 1, 16, 16, data)
            })
            .collect();
        let batch = RoiBatch::new(RoiKind::ALL.to_vec(), tensors);
        let fwd = model.forward(&batch).unwrap();
        let pred = model.predict(&batch).unwrap();
        assert_eq!(fwd.concat.data, pred.data);
    }

    #[test]
    fn missing_roi_is_reported() {
        let model = MultiRoiModel::<f64>::new("tiny", 11).unwrap();
        let (batch, _) = random_batch(1, 16, 3);
        let partial = RoiBatch::new(
            vec![RoiKind::Cervical],
            vec![batch.get(RoiKind::Cervical).unwrap().clone()],
        );
        assert!(matches!(
            model.forward(&partial),
            Err(NetworkError::MissingRoi(_))
        ));
    }

    #[test]
    fn loss_examples_hold() {
        let n = 2;
        let targets = Mat::from_vec(n, 4, vec![1.0f64; n * 4]);
        let exact = MultiHeadPrediction {
            per_roi: (0..7).map(|_| targets.clone()).collect(),
            concat: targets.clone(),
        };
        assert_eq!(average_mse_loss(&exact, &targets).unwrap(), 0.0);

        // Concat off by +1 everywhere: single unit-MSE term out of 8.
        let mut off = exact.concat.clone();
        for v in &mut off.data {
            *v += 1.0;
        }
        let one_off = MultiHeadPrediction {
            per_roi: (0..7).map(|_| targets.clone()).collect(),
            concat: off,
        };
        let loss = average_mse_loss(&one_off, &targets).unwrap();
        assert!((loss - 0.125).abs() < 1e-9);

        // Every head off by +0.1: constant-offset MSE = 0.01.
        let mut bump = targets.clone();
        for v in &mut bump.data {
            *v += 0.1;
        }
        let all_off = MultiHeadPrediction {
            per_roi: (0..7).map(|_| bump.clone()).collect(),
            concat: bump.clone(),
        };
        let loss = average_mse_loss(&all_off, &targets).unwrap();
        assert!((loss - 0.01).abs() < 1e-9);
    }

    #[test]
    fn loss_is_mean_of_per_head_mses() {
        let model = MultiRoiModel::<f64>::new("tiny", 21).unwrap();
        let (batch, targets) = random_batch(2, 16, 9);
        let pred = model.forward(&batch).unwrap();
        let loss = average_mse_loss(&pred, &targets).unwrap();
        let mut acc = 0.0;
        for head in &pred.per_roi {
            acc += head_mse(head, &targets).unwrap();
        }
        acc += head_mse(&pred.concat, &targets).unwrap();
        let mean = acc / 8.0;
        assert!((loss - mean).abs() / mean.abs().max(1e-12) < 1e-6);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let pred = MultiHeadPrediction {
            per_roi: (0..7).map(|_| Mat::<f64>::zeros(2, 4)).collect(),
            concat: Mat::zeros(2, 4),
        };
        let bad_targets = Mat::zeros(3, 4);
        assert!(matches!(
            average_mse_loss(&pred, &bad_targets),
            Err(NetworkError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn parameters_are_shared_not_duplicated() {
        // One encoder + one shared head + one concat head; no per-ROI copies.
        let model = MultiRoiModel::<f64>::new("tiny", 5).unwrap();
        let names: Vec<&str> = model.params.tensors.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names.iter().filter(|n| n.starts_with("shared_head")).count(), 2);
        assert_eq!(names.iter().filter(|n| n.starts_with("concat_head")).count(), 2);
        let unique: std::collections::HashSet<&&str> = names.iter().collect();
        assert_eq!(unique.len(), names.len(), "duplicate parameter names");

        // Perturbing one shared encoder weight must move every per-ROI head.
        let (batch, _) = random_batch(1, 16, 7);
        let before = model.forward(&batch).unwrap();
        let mut model = model;
        model.params.tensors[0].data[0] += 0.5;
        let after = model.forward(&batch).unwrap();
        for (b, a) in before.per_roi.iter().zip(&after.per_roi) {
            assert_ne!(b.data, a.data, "a per-ROI head ignored the shared encoder");
        }
    }

    #[test]
    fn concat_head_sees_every_feature_block() {
        let model = MultiRoiModel::<f64>::new("tiny", 99).unwrap();
        let (batch, _) = random_batch(2, 16, 1);
        let norms = model.concat_feature_sensitivity(&batch).unwrap();
        assert_eq!(norms.len(), 7);
        for (i, n) in norms.iter().enumerate() {
            assert!(*n > 0.0, "roi block {i} has zero concat sensitivity");
        }
    }

    #[test]
    fn single_roi_model_outputs_four_values() {
        let model = SingleRoiModel::<f64>::new(vec![RoiKind::ChestGlobal], "tiny", 2).unwrap();
        let (batch, _) = random_batch(3, 16, 4);
        let pred = model.predict(&batch).unwrap();
        assert_eq!((pred.rows, pred.cols), (3, 4));

        let two = SingleRoiModel::<f64>::new(
            vec![RoiKind::ClavicleL, RoiKind::ClavicleR],
            "tiny",
            2,
        )
        .unwrap();
        let pred2 = two.predict(&batch).unwrap();
        assert_eq!((pred2.rows, pred2.cols), (3, 4));
    }

    #[test]
    fn batch_permutation_equivariance() {
        let model = MultiRoiModel::<f64>::new("tiny", 13).unwrap();
        let (batch, _) = random_batch(3, 16, 5);
        let pred = model.predict(&batch).unwrap();

        // Reverse the batch: outputs must reverse identically.
        let perm: Vec<usize> = vec![2, 1, 0];
        let tensors: Vec<Tensor4<f64>> = RoiKind::ALL
            .iter()
            .map(|&k| {
                let src = batch.get(k).unwrap();
                let mut t = Tensor4::zeros(3, 1, src.h, src.w);
                for (dst_i, &src_i) in perm.iter().enumerate() {
                    t.sample_mut(dst_i).copy_from_slice(src.sample(src_i));
                }
                t
            })
            .collect();
        let permuted = RoiBatch::new(RoiKind::ALL.to_vec(), tensors);
        let pred_p = model.predict(&permuted).unwrap();
        for (dst_i, &src_i) in perm.iter().enumerate() {
            assert_eq!(pred_p.row(dst_i), pred.row(src_i));
        }
    }

    #[test]
    fn encode_checks_minimum_size_and_finiteness() {
        let model = MultiRoiModel::<f64>::new("tiny", 3).unwrap();
        let too_small = Tensor4::zeros(1, 1, 4, 4);
        assert!(matches!(
            model.encode(&too_small),
            Err(NetworkError::SpatialTooSmall { .. })
        ));
        let zeros = Tensor4::zeros(2, 1, 16, 16);
        let feat = model.encode(&zeros).unwrap();
        assert!(feat.all_finite());
        assert_eq!((feat.rows, feat.cols), (2, 8));
        assert_eq!(feat.row(0), feat.row(1));
    }
}

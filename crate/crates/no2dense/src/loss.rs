//! Training losses: squared error at the single annotated pixel, class-
//! weighted cross-entropy over the land-cover mask, and their weighted
//! combination.
//!
//! The squared-error term reads exactly one pixel of the regression plane.
//! The cross-entropy term reduces over pixels with a weighted mean (sum of
//! weighted per-pixel terms divided by the sum of applied weights), which
//! makes the value invariant under uniform scaling of the class weights.

use candle_core::{DType, Device, Tensor};
use candle_nn::ops::log_softmax;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::datamodel::{DatasetManifest, Split, NUM_CLASSES};
use crate::error::{Error, Result};

/// Combined-loss configuration: the balance parameter and per-class weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the segmentation term in the combined loss.
    pub lambda: f64,
    /// Per-class cross-entropy weights; absent classes may carry weight 0.
    pub class_weights: Vec<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.1,
            class_weights: vec![1.0; NUM_CLASSES],
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if self.class_weights.len() != NUM_CLASSES {
            return Err(Error::Config(format!(
                "expected {NUM_CLASSES} class weights, got {}",
                self.class_weights.len()
            )));
        }
        if self.class_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("class weights must be finite and >= 0".into()));
        }
        if self.class_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("at least one class weight must be positive".into()));
        }
        Ok(())
    }
}

/// Squared error between the target and the plane value at the annotated
/// pixel. Reads exactly one pixel; every other pixel has zero gradient.
pub fn sel(y: &Tensor, plane: &Tensor, gt_cropped: (usize, usize)) -> Result<Tensor> {
    let (_, h, w) = plane.dims3()?;
    let (i, j) = gt_cropped;
    if i >= h || j >= w {
        return Err(Error::Index(format!(
            "gt pixel ({i}, {j}) outside the {h}x{w} plane"
        )));
    }
    let pixel = plane.narrow(1, i, 1)?.narrow(2, j, 1)?.flatten_all()?.squeeze(0)?;
    Ok(y.sub(&pixel)?.sqr()?)
}

/// Batched squared error at the annotated pixels, averaged over the batch.
pub fn sel_batch(targets: &Tensor, preds: &Tensor) -> Result<Tensor> {
    Ok(targets.sub(preds)?.sqr()?.mean_all()?)
}

fn mask_constants(
    masks: &[&Array2<u8>],
    weights: &[f64],
    dtype: DType,
    device: &Device,
    h: usize,
    w: usize,
) -> Result<(Tensor, Tensor)> {
    let b = masks.len();
    let mut onehot = vec![0f64; b * NUM_CLASSES * h * w];
    let mut wplane = vec![0f64; b * h * w];
    for (k, mask) in masks.iter().enumerate() {
        if mask.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "mask {k} has dims {:?}, logits expect {h}x{w}",
                mask.dim()
            )));
        }
        for r in 0..h {
            for c in 0..w {
                let class = mask[[r, c]] as usize;
                if class >= NUM_CLASSES {
                    return Err(Error::Label(format!(
                        "mask value {class} outside [0, {}] at ({r}, {c})",
                        NUM_CLASSES - 1
                    )));
                }
                onehot[((k * NUM_CLASSES + class) * h + r) * w + c] = 1.0;
                wplane[(k * h + r) * w + c] = weights[class];
            }
        }
    }
    let onehot = Tensor::from_vec(onehot, (b, NUM_CLASSES, h, w), device)?.to_dtype(dtype)?;
    let wplane = Tensor::from_vec(wplane, (b, h, w), device)?.to_dtype(dtype)?;
    Ok((onehot, wplane))
}

/// Class-weighted cross-entropy over a batch of masks, reduced with a
/// weighted mean over all pixels of the batch.
pub fn weighted_cel_batch(
    logits: &Tensor,
    masks: &[&Array2<u8>],
    weights: &[f64],
) -> Result<Tensor> {
    let (b, c, h, w) = logits.dims4()?;
    if c != NUM_CLASSES {
        return Err(Error::Shape(format!(
            "logits must have {NUM_CLASSES} channels, got {c}"
        )));
    }
    if masks.len() != b {
        return Err(Error::Shape(format!(
            "batch size mismatch: {b} logit maps, {} masks",
            masks.len()
        )));
    }
    if weights.len() != NUM_CLASSES {
        return Err(Error::Config(format!(
            "expected {NUM_CLASSES} class weights, got {}",
            weights.len()
        )));
    }
    let (onehot, wplane) = mask_constants(masks, weights, logits.dtype(), logits.device(), h, w)?;
    let weight_sum = wplane.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if weight_sum <= 0.0 {
        return Err(Error::Label(
            "all pixels carry zero class weight; cross-entropy undefined".into(),
        ));
    }
    let logp = log_softmax(logits, 1)?;
    // per-pixel: -w[class] * log p(class)
    let picked = logp.mul(&onehot)?.sum(1)?;
    let weighted = picked.mul(&wplane)?.sum_all()?;
    let loss = weighted.affine(-1.0 / weight_sum, 0.0)?;
    Ok(loss)
}

/// Class-weighted cross-entropy for a single (C, H, W) logit map, per the
/// weighted-mean reduction.
pub fn weighted_cel(logits: &Tensor, mask: &Array2<u8>, weights: &[f64]) -> Result<Tensor> {
    let batched = logits.unsqueeze(0)?;
    weighted_cel_batch(&batched, &[mask], weights)
}

/// Inverse-frequency class weights normalized by the number of present
/// classes: `w_i = N_total / (C_present * N_i)`, absent classes get 0.
pub fn class_weights_from_counts(counts: &[u64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let total: u64 = counts.iter().sum();
    let present = counts.iter().filter(|&&n| n > 0).count();
    let mut weights = [0f64; NUM_CLASSES];
    if total == 0 || present == 0 {
        return weights;
    }
    for (w, &n) in weights.iter_mut().zip(counts) {
        if n > 0 {
            *w = total as f64 / (present as f64 * n as f64);
        }
    }
    weights
}

/// Counts land-cover pixels over the train split and derives class weights.
pub fn class_weights_from_frequencies(manifest: &DatasetManifest) -> Result<[f64; NUM_CLASSES]> {
    let mut counts = [0u64; NUM_CLASSES];
    let mut seen = false;
    for entry in manifest.entries(Split::Train) {
        let scene = crate::datamodel::load_scene(&manifest.sample_dir(entry))?;
        let lc = scene
            .landcover
            .as_ref()
            .ok_or_else(|| Error::MissingLabel(entry.station_id.clone()))?;
        for &v in lc.iter() {
            counts[v as usize] += 1;
        }
        seen = true;
    }
    if !seen {
        return Err(Error::EmptySplit("train split is empty".into()));
    }
    Ok(class_weights_from_counts(&counts))
}

/// The three parts of the combined loss. `total = sel + lambda * cel`.
pub struct CombinedLoss {
    pub total: Tensor,
    pub sel_part: Tensor,
    pub cel_part: Tensor,
}

/// Combined loss for a single sample: squared error at the annotated pixel
/// of the cropped plane plus `lambda` times the weighted cross-entropy.
pub fn combined_loss(
    y: &Tensor,
    plane: &Tensor,
    gt_cropped: (usize, usize),
    logits: &Tensor,
    mask: &Array2<u8>,
    cfg: &LossConfig,
) -> Result<CombinedLoss> {
    cfg.validate()?;
    let sel_part = sel(y, plane, gt_cropped)?;
    let cel_part = weighted_cel(logits, mask, &cfg.class_weights)?;
    let total = sel_part.add(&cel_part.affine(cfg.lambda, 0.0)?)?;
    Ok(CombinedLoss {
        total,
        sel_part,
        cel_part,
    })
}

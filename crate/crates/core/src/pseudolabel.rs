//! Pseudo-labels for the unlabeled pool.
//!
//! Confident predictions (top probability at least `tau`) keep their argmax.
//! For the rest, the label is the argmax of the mean prediction over `k`
//! randomly augmented copies of the image. Augmentation is a random integer
//! translation with zero fill followed by clamped Gaussian pixel noise, and
//! all passes run in eval mode.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::model::{Mlp, ModelError, INFERENCE_CHUNK};
use crate::prob::{argmax, max_prob, mean_distribution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoLabelConfig {
    pub tau: f64,
    pub k: usize,
    /// Translations are drawn uniformly from `-max_shift..=max_shift` per axis.
    pub max_shift: usize,
    pub noise_std: f64,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self { tau: 0.9, k: 5, max_shift: 2, noise_std: 0.05 }
    }
}

impl PseudoLabelConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(format!("tau must lie in [0, 1], got {}", self.tau));
        }
        if self.k == 0 {
            return Err("k must be at least 1".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(format!("noise_std must be >= 0, got {}", self.noise_std));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelReport {
    pub labels: Vec<usize>,
    pub used_augmentation: Vec<bool>,
    /// Top probability of the direct (un-augmented) prediction.
    pub confidence: Vec<f64>,
    pub tau: f64,
    pub k: usize,
}

/// Shift an image by `dx` columns and `dy` rows, filling with zeros.
pub fn translate(image: ArrayView2<f64>, dx: isize, dy: isize) -> Array2<f64> {
    let (h, w) = image.dim();
    let mut out = Array2::zeros((h, w));
    for r in 0..h as isize {
        let src_r = r - dy;
        if src_r < 0 || src_r >= h as isize {
            continue;
        }
        for c in 0..w as isize {
            let src_c = c - dx;
            if src_c >= 0 && src_c < w as isize {
                out[[r as usize, c as usize]] = image[[src_r as usize, src_c as usize]];
            }
        }
    }
    out
}

/// Translate by a fixed offset, add `N(0, noise_std)` noise, clamp to `[0, 1]`.
pub fn augment_with<R: Rng + ?Sized>(
    image: ArrayView2<f64>,
    dx: isize,
    dy: isize,
    noise_std: f64,
    rng: &mut R,
) -> Array2<f64> {
    let mut out = translate(image, dx, dy);
    if noise_std > 0.0 {
        let noise = Normal::new(0.0, noise_std).expect("validated std");
        out.mapv_inplace(|v| (v + noise.sample(rng)).clamp(0.0, 1.0));
    } else {
        out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }
    out
}

pub fn augment<R: Rng + ?Sized>(image: ArrayView2<f64>, config: &PseudoLabelConfig, rng: &mut R) -> Array2<f64> {
    let m = config.max_shift as i64;
    let dx = rng.random_range(-m..=m) as isize;
    let dy = rng.random_range(-m..=m) as isize;
    augment_with(image, dx, dy, config.noise_std, rng)
}

/// The label decision for one sample, given its direct prediction and
/// (when needed) the predictions on its augmented copies.
pub fn decide(direct: ArrayView1<f64>, augmented: &[ArrayView1<f64>], tau: f64) -> (usize, bool) {
    if max_prob(direct) >= tau || augmented.is_empty() {
        (argmax(direct), false)
    } else {
        let mean: Array1<f64> = mean_distribution(augmented.iter().copied());
        (argmax(mean.view()), true)
    }
}

/// Refine pseudo-labels for the samples `ids` of `images` (`[N, H, W]`),
/// whose eval-mode predictions are already known (row `j` of `direct_probs`
/// belongs to `ids[j]`).
pub fn refine_with_probs<R: Rng + ?Sized>(
    model: &Mlp,
    images: ArrayView3<f64>,
    ids: &[usize],
    direct_probs: ArrayView2<f64>,
    config: &PseudoLabelConfig,
    rng: &mut R,
) -> Result<PseudoLabelReport, ModelError> {
    config.validate().map_err(ModelError::ShapeMismatch)?;
    let (total, h, w) = images.dim();
    let n = ids.len();
    if direct_probs.nrows() != n {
        return Err(ModelError::ShapeMismatch(format!("{} predictions for {n} ids", direct_probs.nrows())));
    }
    if let Some(&id) = ids.iter().find(|&&id| id >= total) {
        return Err(ModelError::ShapeMismatch(format!("id {id} out of {total} images")));
    }
    let confidence: Vec<f64> = direct_probs.axis_iter(Axis(0)).map(max_prob).collect();
    let unsure: Vec<usize> = (0..n).filter(|&j| confidence[j] < config.tau).collect();
    let mut labels: Vec<usize> = direct_probs.axis_iter(Axis(0)).map(argmax).collect();
    let mut used_augmentation = vec![false; n];

    // k augmented copies per unsure sample, evaluated in chunks
    let per_chunk = (INFERENCE_CHUNK / config.k).max(1);
    for group in unsure.chunks(per_chunk) {
        let mut batch = Array3::zeros((group.len() * config.k, h, w));
        for (g, &j) in group.iter().enumerate() {
            for a in 0..config.k {
                let aug = augment(images.index_axis(Axis(0), ids[j]), config, rng);
                batch.index_axis_mut(Axis(0), g * config.k + a).assign(&aug);
            }
        }
        let flat = batch.into_shape_with_order((group.len() * config.k, h * w)).expect("contiguous");
        let probs = model.predict_proba(flat.view())?;
        for (g, &j) in group.iter().enumerate() {
            let block = probs.slice(s![g * config.k..(g + 1) * config.k, ..]);
            let rows: Vec<ArrayView1<f64>> = block.axis_iter(Axis(0)).collect();
            let (label, used) = decide(direct_probs.row(j), &rows, config.tau);
            labels[j] = label;
            used_augmentation[j] = used;
        }
    }
    Ok(PseudoLabelReport { labels, used_augmentation, confidence, tau: config.tau, k: config.k })
}

/// Refine pseudo-labels for `images`, computing the direct predictions first.
pub fn refine_labels<R: Rng + ?Sized>(
    model: &Mlp,
    images: ArrayView3<f64>,
    config: &PseudoLabelConfig,
    rng: &mut R,
) -> Result<PseudoLabelReport, ModelError> {
    let (n, h, w) = images.dim();
    let flat = images.as_standard_layout().into_owned().into_shape_with_order((n, h * w)).expect("contiguous");
    let probs = model.predict_proba(flat.view())?;
    let ids: Vec<usize> = (0..n).collect();
    refine_with_probs(model, images, &ids, probs.view(), config, rng)
}

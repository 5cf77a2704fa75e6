//! Mixup baseline: a private image linearly combined with public pool images,
//! followed by a random per-pixel sign flip.
//!
//! Weights come from a symmetric Dirichlet(1) draw with the largest weight
//! moved onto the private image. This approximates the published scheme and
//! is meant only as a comparison point.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{derive_seed, stream, SeededRng};

#[derive(Debug, Clone, PartialEq)]
pub struct MixRecord {
    /// Indices into the pool of the mixed-in images.
    pub pool_indices: Vec<usize>,
    /// `weights[0]` belongs to the private image, `weights[j]` to
    /// `pool_indices[j - 1]`.
    pub weights: Vec<f64>,
    /// One sign per pixel value, each `-1` or `+1`.
    pub signs: Vec<i8>,
}

/// `sign * sum_j weight_j * x_j` elementwise.
pub fn mix_images(images: &[&Image], weights: &[f64], signs: &[i8]) -> Result<Image> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidParameter("nothing to mix".into()))?;
    if images.len() != weights.len() {
        return Err(Error::InvalidParameter(format!(
            "{} images but {} weights",
            images.len(),
            weights.len()
        )));
    }
    if let Some(bad) = images.iter().find(|im| !im.same_shape(first)) {
        return Err(Error::Dimension(format!(
            "mixup inputs differ in shape: {:?} vs {:?}",
            first.dims(),
            bad.dims()
        )));
    }
    if signs.len() != first.len() {
        return Err(Error::Dimension(format!(
            "{} signs for {} pixel values",
            signs.len(),
            first.len()
        )));
    }
    let mut acc = vec![0.0; first.len()];
    for (img, &w) in images.iter().zip(weights) {
        for (a, v) in acc.iter_mut().zip(img.to_f64()) {
            *a += w * v;
        }
    }
    for (a, &s) in acc.iter_mut().zip(signs) {
        *a *= f64::from(s);
    }
    let (c, l, m) = first.dims();
    Ok(Image::from_real(c, l, m, acc)?.with_label(first.label()))
}

fn dominant_dirichlet(rng: &mut SeededRng, k: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..k).map(|_| -(1.0 - rng.uniform()).ln()).collect();
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        w.iter_mut().for_each(|x| *x /= total);
    } else {
        w.iter_mut().for_each(|x| *x = 1.0 / k as f64);
    }
    let max_at = (0..k).fold(0, |best, j| if w[j] > w[best] { j } else { best });
    w.swap(0, max_at);
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

/// Mixes `private` with `k_mix - 1` distinct pool images chosen uniformly.
pub fn mixup_disguise(
    private: &Image,
    pool: &[Image],
    k_mix: usize,
    seed: u64,
) -> Result<(Image, MixRecord)> {
    if pool.is_empty() {
        return Err(Error::InvalidParameter("mixup pool is empty".into()));
    }
    if k_mix < 2 {
        return Err(Error::InvalidParameter(format!(
            "k_mix must be at least 2, got {k_mix}"
        )));
    }
    if pool.len() < k_mix - 1 {
        return Err(Error::InvalidParameter(format!(
            "pool of {} images cannot supply {} distinct partners",
            pool.len(),
            k_mix - 1
        )));
    }
    let mut rng = SeededRng::new(derive_seed(seed, &[stream::MIXUP]));
    let mut order: Vec<usize> = (0..pool.len()).collect();
    // Partial Fisher-Yates: the first k_mix - 1 entries are a uniform sample.
    for i in 0..k_mix - 1 {
        let j = i + rng.below(pool.len() - i);
        order.swap(i, j);
    }
    let pool_indices: Vec<usize> = order[..k_mix - 1].to_vec();
    let weights = dominant_dirichlet(&mut rng, k_mix);
    let signs: Vec<i8> = (0..private.len())
        .map(|_| if rng.uniform() < 0.5 { -1 } else { 1 })
        .collect();

    let mut inputs: Vec<&Image> = vec![private];
    inputs.extend(pool_indices.iter().map(|&i| &pool[i]));
    let out = mix_images(&inputs, &weights, &signs)?.with_label(private.label());
    Ok((
        out,
        MixRecord {
            pool_indices,
            weights,
            signs,
        },
    ))
}

//! Segmentation backbone: the network, softmax, input noise and augmentation.

mod augment;
pub mod ops;
mod params;
mod unet;

pub use augment::{augment, AugmentConfig};
pub use params::{ParamEntry, ParamVector};
pub use unet::{norm_groups, Mode, Network, NetworkConfig, NormKind, Trace};

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::float::Real;
use crate::tensor::{Image, ProbMap, Tensor};

/// Per-pixel softmax over the channel axis, shifted by the pixel maximum.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if !logits.is_finite() {
        return Err(Error::Input("logits contain non-finite values".into()));
    }
    let hw = logits.h * logits.w;
    let c = logits.c;
    let mut out = logits.clone();
    for i in 0..logits.n {
        let item = out.item_mut(i);
        for p in 0..hw {
            let mut max = T::neg_infinity();
            for k in 0..c {
                max = max.max(item[k * hw + p]);
            }
            let mut sum = T::zero();
            for k in 0..c {
                let e = (item[k * hw + p] - max).exp();
                item[k * hw + p] = e;
                sum += e;
            }
            for k in 0..c {
                item[k * hw + p] /= sum;
            }
        }
    }
    Ok(out)
}

/// Softmax of a single image's logits.
pub fn softmax_map<T: Real>(logits: &ProbMap<T>) -> Result<ProbMap<T>> {
    let t = Tensor::from_vec(1, logits.classes, logits.height, logits.width, logits.data.clone())?;
    Ok(softmax(&t)?.prob_map(0))
}

/// Chain rule through softmax: `dz_c = p_c (dp_c - sum_k p_k dp_k)`.
pub fn softmax_backward<T: Real>(probs: &Tensor<T>, grad_probs: &Tensor<T>) -> Result<Tensor<T>> {
    if !probs.same_shape(grad_probs) {
        return Err(Error::dim("softmax backward: shape mismatch"));
    }
    let hw = probs.h * probs.w;
    let c = probs.c;
    let mut out = grad_probs.clone();
    for i in 0..probs.n {
        let p = probs.item(i);
        let g = grad_probs.item(i);
        let o = out.item_mut(i);
        for px in 0..hw {
            let dot: T = (0..c).map(|k| p[k * hw + px] * g[k * hw + px]).sum();
            for k in 0..c {
                o[k * hw + px] = p[k * hw + px] * (g[k * hw + px] - dot);
            }
        }
    }
    Ok(out)
}

/// Adds i.i.d. Gaussian noise and clamps to [0, 1].
pub fn perturb<R: rand::Rng + ?Sized>(image: &Image, sigma: f64, rng: &mut R) -> Result<Image> {
    let noise = perturbation(image.len(), sigma, rng)?;
    let data = image
        .data
        .iter()
        .zip(noise)
        .map(|(&v, n)| (v + n).clamp(0.0, 1.0))
        .collect();
    Ok(Image {
        height: image.height,
        width: image.width,
        data,
    })
}

/// The raw noise field used by [`perturb`], before clamping.
pub fn perturbation<R: rand::Rng + ?Sized>(len: usize, sigma: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::config(format!("noise sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(vec![0.0; len]);
    }
    let dist = Normal::new(0.0, sigma).expect("valid sigma");
    Ok((0..len).map(|_| dist.sample(rng)).collect())
}

/// Uniform draw helper shared by augmentation.
pub(crate) fn uniform<R: rand::Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

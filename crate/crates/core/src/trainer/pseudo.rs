use crate::error::{Error, Result};
use crate::float::Real;
use crate::segnet::{softmax, Network};
use crate::tensor::{Image, LabelMap, ProbMap, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub image: Image,
    pub label: LabelMap,
    /// Pixels that count towards the loss.
    pub mask: Vec<bool>,
}

/// Hard label and confidence mask from one probability map.
pub fn pseudo_label_from_probs<T: Real>(probs: &ProbMap<T>, threshold: f64) -> (LabelMap, Vec<bool>) {
    let label = probs.argmax();
    let thr = T::lit(threshold);
    let mask = probs.max_prob().into_iter().map(|p| p >= thr).collect();
    (label, mask)
}

/// Eval-mode predictions of `model` turned into pseudo labels.
pub fn generate_pseudo_labels<T: Real>(model: &Network<T>, images: &[Image], threshold: f64) -> Result<Vec<PseudoLabel>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::config(format!("pseudo-label threshold must lie in [0, 1], got {threshold}")));
    }
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(8) {
        let refs: Vec<&Image> = chunk.iter().collect();
        let probs = softmax(&model.forward(&Tensor::from_images(&refs)?)?)?;
        for (i, image) in chunk.iter().enumerate() {
            let (label, mask) = pseudo_label_from_probs(&probs.prob_map(i), threshold);
            out.push(PseudoLabel {
                image: image.clone(),
                label,
                mask,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_probs_and_threshold() {
        let p = ProbMap::<f64>::uniform(5, 2, 3);
        let (_, mask) = pseudo_label_from_probs(&p, 0.5);
        assert!(mask.iter().all(|&m| !m));
        let (label, mask) = pseudo_label_from_probs(&p, 0.0);
        assert!(mask.iter().all(|&m| m));
        assert!(label.data.iter().all(|&l| l == 0));
    }
}

//! Appearance alignment: source-to-target intensity translation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Image;

pub const HISTOGRAM_BINS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranslatorKind {
    Identity,
    HistogramMatch,
}

/// Image translator fitted on unlabeled target-domain intensities only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Translator {
    pub kind: TranslatorKind,
    /// Pooled target histogram, present iff `kind` is histogram matching.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub histogram: Option<Vec<u64>>,
}

#[inline]
pub fn bin_of(v: f64) -> usize {
    ((v.clamp(0.0, 1.0) * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)
}

#[inline]
pub fn bin_center(bin: usize) -> f64 {
    (bin as f64 + 0.5) / HISTOGRAM_BINS as f64
}

pub fn histogram(image: &Image) -> Vec<u64> {
    let mut h = vec![0u64; HISTOGRAM_BINS];
    for &v in &image.data {
        h[bin_of(v)] += 1;
    }
    h
}

fn cumulative(hist: &[u64]) -> Vec<u64> {
    hist.iter()
        .scan(0u64, |acc, &c| {
            *acc += c;
            Some(*acc)
        })
        .collect()
}

impl Translator {
    pub fn identity() -> Self {
        Translator {
            kind: TranslatorKind::Identity,
            histogram: None,
        }
    }

    pub fn fit(target_images: &[&Image], kind: TranslatorKind) -> Result<Self> {
        match kind {
            TranslatorKind::Identity => Ok(Translator::identity()),
            TranslatorKind::HistogramMatch => {
                if target_images.is_empty() || target_images.iter().all(|i| i.is_empty()) {
                    return Err(Error::config("histogram matching needs at least one target image"));
                }
                let mut pooled = vec![0u64; HISTOGRAM_BINS];
                for img in target_images {
                    for (p, c) in pooled.iter_mut().zip(histogram(img)) {
                        *p += c;
                    }
                }
                Ok(Translator {
                    kind,
                    histogram: Some(pooled),
                })
            }
        }
    }

    /// Reference CDF of the fitted target histogram.
    pub fn reference_cdf(&self) -> Option<Vec<f64>> {
        let h = self.histogram.as_ref()?;
        let total = h.iter().sum::<u64>() as f64;
        Some(cumulative(h).into_iter().map(|c| c as f64 / total).collect())
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, &self.histogram) {
            (TranslatorKind::Identity, None) => Ok(()),
            (TranslatorKind::Identity, Some(_)) => Err(Error::State("identity translator carries a histogram".into())),
            (TranslatorKind::HistogramMatch, None) => Err(Error::State("histogram translator has not been fitted".into())),
            (TranslatorKind::HistogramMatch, Some(h)) => {
                if h.len() != HISTOGRAM_BINS || h.iter().all(|&c| c == 0) {
                    Err(Error::State(format!(
                        "histogram must have {HISTOGRAM_BINS} bins and non-zero mass"
                    )))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Monotone map of `image` onto the target intensity distribution.
    ///
    /// Each source bin goes to the lowest target bin whose CDF reaches the
    /// source image's own CDF at that bin.
    pub fn translate(&self, image: &Image) -> Result<Image> {
        self.validate()?;
        let reference = match (self.kind, &self.histogram) {
            (TranslatorKind::Identity, _) => return Ok(image.clone()),
            (_, Some(h)) => h,
            _ => unreachable!("validated above"),
        };
        if image.is_empty() {
            return Ok(image.clone());
        }
        let ref_cum = cumulative(reference);
        let ref_total = *ref_cum.last().unwrap() as u128;
        let src_cum = cumulative(&histogram(image));
        let src_total = image.len() as u128;
        // compare src_cum/src_total <= ref_cum/ref_total in exact integer arithmetic
        let mut lut = [0usize; HISTOGRAM_BINS];
        let mut j = 0;
        for (b, slot) in lut.iter_mut().enumerate() {
            let need = src_cum[b] as u128 * ref_total;
            while j + 1 < HISTOGRAM_BINS && (ref_cum[j] as u128) * src_total < need {
                j += 1;
            }
            *slot = j;
        }
        let data = image.data.iter().map(|&v| bin_center(lut[bin_of(v)])).collect();
        Ok(Image {
            height: image.height,
            width: image.width,
            data,
        })
    }
}

pub fn fit_translator(target_images: &[&Image], kind: TranslatorKind) -> Result<Translator> {
    Translator::fit(target_images, kind)
}

pub fn translate(tr: &Translator, image: &Image) -> Result<Image> {
    tr.translate(image)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_bit_exact() {
        let img = Image::new(1, 3, vec![0.1, 0.123456789, 0.9]).unwrap();
        let t = fit_translator(&[], TranslatorKind::Identity).unwrap();
        assert!(t.histogram.is_none());
        assert_eq!(t.translate(&img).unwrap(), img);
    }

    #[test]
    fn empty_fit_and_unfitted_use_are_errors() {
        assert!(matches!(fit_translator(&[], TranslatorKind::HistogramMatch), Err(Error::Config(_))));
        let unfitted = Translator {
            kind: TranslatorKind::HistogramMatch,
            histogram: None,
        };
        assert!(matches!(unfitted.translate(&Image::filled(1, 1, 0.5)), Err(Error::State(_))));
    }

    #[test]
    fn constant_reference_is_a_step_cdf() {
        let img = Image::filled(4, 4, 0.5);
        let t = fit_translator(&[&img], TranslatorKind::HistogramMatch).unwrap();
        let cdf = t.reference_cdf().unwrap();
        let b = bin_of(0.5);
        assert!(cdf[..b].iter().all(|&c| c == 0.0));
        assert!(cdf[b..].iter().all(|&c| c == 1.0));
        // everything maps onto the single reference bin
        let out = t.translate(&Image::new(1, 3, vec![0.0, 0.3, 1.0]).unwrap()).unwrap();
        assert!(out.data.iter().all(|&v| (v - bin_center(b)).abs() < 1e-12));
    }

    #[test]
    fn translator_json_round_trip() {
        let img = Image::new(1, 4, vec![0.1, 0.2, 0.2, 0.9]).unwrap();
        let t = fit_translator(&[&img], TranslatorKind::HistogramMatch).unwrap();
        let json = serde_json::to_string(&t).unwrap();
        assert!(json.contains("histogram_match"));
        let back: Translator = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
    }
}

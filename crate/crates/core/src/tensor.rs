//! Image, label and probability containers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::Real;

/// Single-channel intensity grid, row-major, values nominally in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim(format!(
                "image buffer has {} values, expected {}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Image {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Class-index grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim(format!(
                "label buffer has {} values, expected {}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        LabelMap {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn max_class(&self) -> Option<u8> {
        self.data.iter().copied().max()
    }
}

/// Per-pixel class distribution stored class-major: `data[c * H * W + i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap<T> {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> ProbMap<T> {
    pub fn new(classes: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != classes * height * width {
            return Err(Error::dim(format!(
                "probability buffer has {} values, expected {}x{}x{}",
                data.len(),
                classes,
                height,
                width
            )));
        }
        Ok(ProbMap {
            classes,
            height,
            width,
            data,
        })
    }

    pub fn zeros(classes: usize, height: usize, width: usize) -> Self {
        ProbMap {
            classes,
            height,
            width,
            data: vec![T::zero(); classes * height * width],
        }
    }

    pub fn uniform(classes: usize, height: usize, width: usize) -> Self {
        let p = T::one() / T::from_usize(classes).unwrap();
        ProbMap {
            classes,
            height,
            width,
            data: vec![p; classes * height * width],
        }
    }

    /// One-hot encoding of a label map.
    pub fn one_hot(label: &LabelMap, classes: usize) -> Result<Self> {
        let n = label.len();
        let mut data = vec![T::zero(); classes * n];
        for (i, &c) in label.data.iter().enumerate() {
            let c = c as usize;
            if c >= classes {
                return Err(Error::Input(format!("label {c} out of range for {classes} classes")));
            }
            data[c * n + i] = T::one();
        }
        ProbMap::new(classes, label.height, label.width, data)
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn at(&self, class: usize, pixel: usize) -> T {
        self.data[class * self.pixels() + pixel]
    }

    pub fn channel(&self, class: usize) -> &[T] {
        let n = self.pixels();
        &self.data[class * n..(class + 1) * n]
    }

    pub fn same_shape(&self, other: &ProbMap<T>) -> bool {
        self.classes == other.classes && self.height == other.height && self.width == other.width
    }

    /// Per-pixel argmax; ties go to the lowest class index.
    pub fn argmax(&self) -> LabelMap {
        let n = self.pixels();
        let data = (0..n)
            .map(|i| {
                let mut best = 0;
                let mut best_p = self.data[i];
                for c in 1..self.classes {
                    let p = self.data[c * n + i];
                    if p > best_p {
                        best = c;
                        best_p = p;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Per-pixel maximum probability.
    pub fn max_prob(&self) -> Vec<T> {
        let n = self.pixels();
        (0..n)
            .map(|i| {
                (0..self.classes)
                    .map(|c| self.data[c * n + i])
                    .fold(T::neg_infinity(), T::max)
            })
            .collect()
    }

    /// Largest deviation of any pixel's probability sum from 1.
    pub fn simplex_error(&self) -> T {
        let n = self.pixels();
        (0..n)
            .map(|i| {
                let s: T = (0..self.classes).map(|c| self.data[c * n + i]).sum();
                (s - T::one()).abs()
            })
            .fold(T::zero(), T::max)
    }

    pub fn cast<U: Real>(&self) -> ProbMap<U> {
        ProbMap {
            classes: self.classes,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64().unwrap()).unwrap()).collect(),
        }
    }
}

/// Dense NCHW batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![T::zero(); n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::dim(format!(
                "tensor buffer has {} values, expected {}x{}x{}x{}",
                data.len(),
                n,
                c,
                h,
                w
            )));
        }
        Ok(Tensor { n, c, h, w, data })
    }

    /// Stacks single-channel images into an N×1×H×W batch.
    pub fn from_images(images: &[&Image]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Input("empty image batch".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * h * w);
        for img in images {
            if img.height != h || img.width != w {
                return Err(Error::dim(format!(
                    "batch mixes {}x{} and {}x{} images",
                    h, w, img.height, img.width
                )));
            }
            data.extend(img.data.iter().map(|&v| T::from_f64(v).unwrap()));
        }
        Ok(Tensor {
            n: images.len(),
            c: 1,
            h,
            w,
            data,
        })
    }

    #[inline]
    pub fn item_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn item(&self, i: usize) -> &[T] {
        let l = self.item_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [T] {
        let l = self.item_len();
        &mut self.data[i * l..(i + 1) * l]
    }

    pub fn same_shape(&self, other: &Tensor<T>) -> bool {
        self.n == other.n && self.c == other.c && self.h == other.h && self.w == other.w
    }

    pub fn prob_map(&self, i: usize) -> ProbMap<T> {
        ProbMap {
            classes: self.c,
            height: self.h,
            width: self.w,
            data: self.item(i).to_vec(),
        }
    }

    pub fn from_prob_maps(maps: &[ProbMap<T>]) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::Input("empty probability batch".into()))?;
        let mut data = Vec::with_capacity(maps.len() * first.data.len());
        for m in maps {
            if !m.same_shape(first) {
                return Err(Error::dim("probability maps in a batch differ in shape"));
            }
            data.extend_from_slice(&m.data);
        }
        Ok(Tensor {
            n: maps.len(),
            c: first.classes,
            h: first.height,
            w: first.width,
            data,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_and_argmax_invert() {
        let label = LabelMap::new(2, 2, vec![0, 2, 1, 2]).unwrap();
        let p: ProbMap<f64> = ProbMap::one_hot(&label, 3).unwrap();
        assert_eq!(p.argmax(), label);
        assert_eq!(p.simplex_error(), 0.0);
    }

    #[test]
    fn one_hot_rejects_out_of_range_label() {
        let label = LabelMap::new(1, 2, vec![0, 5]).unwrap();
        assert!(ProbMap::<f64>::one_hot(&label, 3).is_err());
    }

    #[test]
    fn bad_buffer_length_is_dimension_error() {
        assert!(matches!(Image::new(2, 2, vec![0.0; 3]), Err(Error::Dimension(_))));
        assert!(matches!(
            ProbMap::<f32>::new(2, 2, 2, vec![0.0; 7]),
            Err(Error::Dimension(_))
        ));
    }
}

//! On-the-fly random affine augmentation for labeled samples.

use serde::{Deserialize, Serialize};

use super::uniform;
use crate::tensor::{Image, LabelMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub max_rotation_deg: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    pub max_shift_px: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_rotation_deg: 15.0,
            min_scale: 0.9,
            max_scale: 1.1,
            max_shift_px: 4.0,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            max_rotation_deg: 0.0,
            min_scale: 1.0,
            max_scale: 1.0,
            max_shift_px: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.max_rotation_deg == 0.0 && self.min_scale == 1.0 && self.max_scale == 1.0 && self.max_shift_px == 0.0
    }
}

/// Applies one random rotation/scale/shift to an image and its label.
///
/// Intensities are resampled bilinearly and labels by nearest neighbour; both
/// replicate the border outside the frame.
pub fn augment<R: rand::Rng + ?Sized>(
    image: &Image,
    label: &LabelMap,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> (Image, LabelMap) {
    let angle = uniform(rng, -cfg.max_rotation_deg, cfg.max_rotation_deg).to_radians();
    let scale = uniform(rng, cfg.min_scale, cfg.max_scale);
    let tx = uniform(rng, -cfg.max_shift_px, cfg.max_shift_px);
    let ty = uniform(rng, -cfg.max_shift_px, cfg.max_shift_px);
    if angle == 0.0 && scale == 1.0 && tx == 0.0 && ty == 0.0 {
        return (image.clone(), label.clone());
    }
    let (h, w) = (image.height, image.width);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (cos, sin) = (angle.cos(), angle.sin());
    let mut out_img = Vec::with_capacity(h * w);
    let mut out_lab = Vec::with_capacity(h * w);
    let clampi = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    for y in 0..h {
        for x in 0..w {
            // inverse map: output pixel centre -> source coordinates
            let dx = x as f64 + 0.5 - cx - tx;
            let dy = y as f64 + 0.5 - cy - ty;
            let sx = (cos * dx + sin * dy) / scale + cx - 0.5;
            let sy = (-sin * dx + cos * dy) / scale + cy - 0.5;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let (x0, y0) = (x0 as isize, y0 as isize);
            let px = |xx: isize, yy: isize| image.get(clampi(yy, h), clampi(xx, w));
            let v = (1.0 - fy) * ((1.0 - fx) * px(x0, y0) + fx * px(x0 + 1, y0))
                + fy * ((1.0 - fx) * px(x0, y0 + 1) + fx * px(x0 + 1, y0 + 1));
            out_img.push(v.clamp(0.0, 1.0));
            let nx = clampi(sx.round() as isize, w);
            let ny = clampi(sy.round() as isize, h);
            out_lab.push(label.get(ny, nx));
        }
    }
    (
        Image {
            height: h,
            width: w,
            data: out_img,
        },
        LabelMap {
            height: h,
            width: w,
            data: out_lab,
        },
    )
}

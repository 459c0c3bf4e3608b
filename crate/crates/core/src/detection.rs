//! Shadow masks: ingestion from disk and a global-threshold fallback detector.
//!
//! Masks are soft, `1.0` inside the shadow. The fallback detector assumes a
//! light page, so dark paper will be flagged as shadow.

use std::path::Path;

use crate::dataio::ImageTensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ShadowMask {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ShadowMask {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("mask value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self::new(height, width, vec![value; height * width]).expect("value in range")
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// `M' = 1 - M`.
    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|m| 1.0 - m).collect(),
        }
    }

    /// Sum of mask values over all pixels.
    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub(crate) fn pad_reflect(&self, height: usize, width: usize) -> Self {
        let data = crate::dataio::reflect_grid(&self.data, self.height, self.width, 1, height, width);
        Self {
            height,
            width,
            data,
        }
    }
}

/// Intersection over union of the supports (`value >= 0.5`) of two masks.
pub fn iou(a: &ShadowMask, b: &ShadowMask) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &q) in a.data.iter().zip(&b.data) {
        let (p, q) = (p >= 0.5, q >= 0.5);
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Read an 8-bit grayscale PNG as a soft mask (`byte / 255`).
pub fn load_mask(path: impl AsRef<Path>, expected: (usize, usize)) -> Result<ShadowMask> {
    let path = path.as_ref();
    let img = crate::dataio::open_png(path)?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::Image {
                path: path.into(),
                message: format!("mask must be 8-bit grayscale, found {:?}", other.color()),
            })
        }
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    if (h, w) != expected {
        return Err(Error::Validation(format!(
            "mask {} is {h}x{w}, expected {}x{}",
            path.display(),
            expected.0,
            expected.1
        )));
    }
    let data = gray.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    ShadowMask::new(h, w, data)
}

pub fn save_mask(mask: &ShadowMask, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = mask.data.iter().map(|&v| crate::dataio::quantize(v)).collect();
    crate::dataio::write_png(path.as_ref(), &bytes, mask.width, mask.height, image::ColorType::L8)
}

/// 256-bin luminance histogram with the BT.601 weights.
fn luminance_bins(img: &ImageTensor) -> Vec<u8> {
    img.data()
        .chunks(3)
        .map(|p| {
            let y = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
            (y.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect()
}

/// Otsu threshold on a 256-bin histogram.
///
/// Returns `t` such that bins `< t` form the dark class, or `None` when the
/// histogram has a single occupied bin.
pub fn otsu_threshold(hist: &[u64; 256]) -> Option<usize> {
    let total: u64 = hist.iter().sum();
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let total_f = total as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best = (f64::NEG_INFINITY, 1);
    for t in 1..256 {
        w0 += hist[t - 1] as f64;
        sum0 += (t - 1) as f64 * hist[t - 1] as f64;
        let w1 = total_f - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if between > best.0 {
            best = (between, t);
        }
    }
    Some(best.1)
}

/// Binary mask of pixels darker than the Otsu luminance threshold.
/// A single-valued image yields the empty mask.
pub fn otsu_detect(img: &ImageTensor) -> ShadowMask {
    let bins = luminance_bins(img);
    let mut hist = [0u64; 256];
    for &b in &bins {
        hist[b as usize] += 1;
    }
    let (h, w) = (img.height(), img.width());
    match otsu_threshold(&hist) {
        None => ShadowMask::zeros(h, w),
        Some(t) => {
            let data = bins
                .iter()
                .map(|&b| if (b as usize) < t { 1.0 } else { 0.0 })
                .collect();
            ShadowMask::new(h, w, data).expect("binary mask")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> ImageTensor {
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let v = f(y, x);
                data.extend([v, v, v]);
            }
        }
        ImageTensor::new(h, w, data).unwrap()
    }

    #[test]
    fn constant_image_has_no_shadow() {
        let m = otsu_detect(&gray(6, 5, |_, _| 0.37));
        assert_eq!(m, ShadowMask::zeros(6, 5));
    }

    /// Brute-force between-class variance over all 256 cut points.
    fn exhaustive_best(values: &[u8]) -> Vec<usize> {
        let score = |t: usize| {
            let (dark, light): (Vec<f64>, Vec<f64>) = {
                let d = values.iter().filter(|&&v| (v as usize) < t).map(|&v| v as f64).collect();
                let l = values.iter().filter(|&&v| (v as usize) >= t).map(|&v| v as f64).collect();
                (d, l)
            };
            if dark.is_empty() || light.is_empty() {
                return f64::NEG_INFINITY;
            }
            let m0 = dark.iter().sum::<f64>() / dark.len() as f64;
            let m1 = light.iter().sum::<f64>() / light.len() as f64;
            dark.len() as f64 * light.len() as f64 * (m0 - m1).powi(2)
        };
        let best = (1..256).map(score).fold(f64::NEG_INFINITY, f64::max);
        (1..256).filter(|&t| score(t) >= best * (1.0 - 1e-12)).collect()
    }

    #[test]
    fn bimodal_image_splits_between_modes() {
        let img = gray(8, 8, |y, x| if (y * 8 + x) % 3 == 0 { 0.2 } else { 0.8 });
        let bins = luminance_bins(&img);
        let mut hist = [0u64; 256];
        bins.iter().for_each(|&b| hist[b as usize] += 1);
        let t = otsu_threshold(&hist).unwrap();
        assert!(exhaustive_best(&bins).contains(&t));
        assert!(t > 51 && t <= 204, "threshold {t}");
        let m = otsu_detect(&img);
        for y in 0..8 {
            for x in 0..8 {
                let dark = (y * 8 + x) % 3 == 0;
                assert_eq!(m.get(y, x), if dark { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn two_level_masks_survive_monotone_relabeling() {
        let pattern = |y: usize, x: usize| (x * 7 + y * 3) % 5 < 2;
        let reference = otsu_detect(&gray(12, 12, |y, x| if pattern(y, x) { 0.2 } else { 0.8 }));
        for (lo, hi) in [(0.05, 0.95), (0.4, 0.45), (0.0, 1.0), (0.6, 0.7)] {
            let m = otsu_detect(&gray(12, 12, |y, x| if pattern(y, x) { lo } else { hi }));
            assert_eq!(m, reference);
        }
    }

    #[test]
    fn detector_output_is_binary() {
        let img = gray(9, 9, |y, x| ((y * 13 + x * 7) % 17) as f64 / 16.0);
        assert!(otsu_detect(&img).is_binary());
    }

    #[test]
    fn complement_and_bounds() {
        let m = ShadowMask::new(1, 3, vec![0.0, 0.25, 1.0]).unwrap();
        assert_eq!(m.complement().data(), &[1.0, 0.75, 0.0]);
        assert!(ShadowMask::new(1, 1, vec![1.5]).is_err());
        assert!(ShadowMask::new(2, 2, vec![0.0; 3]).is_err());
    }
}

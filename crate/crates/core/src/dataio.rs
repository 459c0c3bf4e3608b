//! PNG image I/O, the on-disk dataset layout, and the synthetic
//! uniform-attenuation shadow generator.
//!
//! A dataset root holds `input/`, `target/` and optionally `mask/`, each with
//! 8-bit PNGs matched by file stem.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ColorType, DynamicImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detection::{self, ShadowMask};
use crate::error::{Error, Result};
use crate::numerics::{Element, Tensor};

/// `H×W×3` image with values in `[0, 1]`, stored row-major, channels last.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape(format!(
                "image {height}x{width}x3 needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * 3],
        }
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// `[H·W, 3]` tensor (one row per pixel).
    pub fn to_pixels<T: Element>(&self) -> Tensor<T> {
        Tensor::from_f64([self.height * self.width, 3], &self.data).expect("pixel layout")
    }

    /// `[3, H, W]` tensor.
    pub fn to_planes<T: Element>(&self) -> Tensor<T> {
        let hw = self.height * self.width;
        let mut out = vec![T::zero(); 3 * hw];
        for (p, px) in self.data.chunks(3).enumerate() {
            for c in 0..3 {
                out[c * hw + p] = T::of(px[c]);
            }
        }
        Tensor::new([3, self.height, self.width], out).expect("plane layout")
    }

    /// Inverse of [`ImageTensor::to_pixels`]; accepts `[H·W, 3]` or `[H, W, 3]`.
    pub fn from_pixels<T: Element>(t: &Tensor<T>, height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, t.data().iter().map(|v| v.as_f64()).collect())
    }

    pub(crate) fn pad_reflect(&self, height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: reflect_grid(&self.data, self.height, self.width, 3, height, width),
        }
    }

    pub(crate) fn crop(&self, height: usize, width: usize) -> Self {
        let data = (0..height)
            .flat_map(|y| {
                let row = y * self.width * 3;
                self.data[row..row + width * 3].iter().copied()
            })
            .collect();
        Self {
            height,
            width,
            data,
        }
    }
}

fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Extend a channels-last grid to `out_h × out_w` by mirror reflection
/// (edge pixel not repeated) along the bottom and right borders.
pub(crate) fn reflect_grid(
    data: &[f64],
    h: usize,
    w: usize,
    channels: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(out_h * out_w * channels);
    for y in 0..out_h {
        let sy = reflect_index(y, h);
        for x in 0..out_w {
            let sx = reflect_index(x, w);
            let i = (sy * w + sx) * channels;
            out.extend_from_slice(&data[i..i + channels]);
        }
    }
    out
}

/// Clamp to `[0, 1]` and round half up onto a byte.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub(crate) fn open_png(path: &Path) -> Result<DynamicImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|e| {
        Error::Image {
            path: path.into(),
            message: e.to_string(),
        }
    })
}

pub(crate) fn write_png(path: &Path, bytes: &[u8], width: usize, height: usize, color: ColorType) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    image::save_buffer_with_format(
        path,
        bytes,
        width as u32,
        height as u32,
        color,
        image::ImageFormat::Png,
    )
    .map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.into(),
            message: other.to_string(),
        },
    })
}

/// Load an 8-bit RGB(A) or grayscale PNG; gray is broadcast to three channels
/// and alpha is ignored.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let img = open_png(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageLuma8(g) => g
            .into_raw()
            .into_iter()
            .flat_map(|b| [b as f64 / 255.0; 3])
            .collect(),
        DynamicImage::ImageLumaA8(g) => g
            .into_raw()
            .chunks(2)
            .flat_map(|p| [p[0] as f64 / 255.0; 3])
            .collect(),
        DynamicImage::ImageRgb8(rgb) => rgb.into_raw().into_iter().map(|b| b as f64 / 255.0).collect(),
        DynamicImage::ImageRgba8(rgba) => rgba
            .into_raw()
            .chunks(4)
            .flat_map(|p| [p[0], p[1], p[2]].map(|b| b as f64 / 255.0))
            .collect(),
        other => {
            return Err(Error::Image {
                path: path.into(),
                message: format!("unsupported pixel format {:?}; expected 8-bit PNG", other.color()),
            })
        }
    };
    ImageTensor::new(h, w, data)
}

/// Write an 8-bit RGB PNG (values clamped, rounded half up).
pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    write_png(path.as_ref(), &bytes, img.width, img.height, ColorType::Rgb8)
}

/// Shadow image, its shadow-free ground truth, and the shadow mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub input: ImageTensor,
    pub target: ImageTensor,
    pub mask: ShadowMask,
}

impl Triplet {
    pub fn new(input: ImageTensor, target: ImageTensor, mask: ShadowMask) -> Result<Self> {
        if input.size() != target.size() || input.size() != mask.size() {
            return Err(Error::Validation(format!(
                "triplet sizes differ: input {:?}, target {:?}, mask {:?}",
                input.size(),
                target.size(),
                mask.size()
            )));
        }
        Ok(Self {
            input,
            target,
            mask,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Sizes must be multiples of this and at least twice it.
    pub patch_size: usize,
    pub s_min: f64,
    pub s_max: f64,
    /// Gaussian blur of the mask edge, in pixels; 0 keeps it binary.
    pub sigma: f64,
    /// Probability that a glyph slot on a text line is inked.
    pub glyph_density: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            patch_size: 8,
            s_min: 0.3,
            s_max: 0.7,
            sigma: 0.0,
            glyph_density: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if !(self.s_min > 0.0 && self.s_max < 1.0) {
            return bad(format!(
                "attenuation range [{}, {}] must lie inside (0, 1)",
                self.s_min, self.s_max
            ));
        }
        if self.s_min > self.s_max {
            return bad(format!("s_min {} exceeds s_max {}", self.s_min, self.s_max));
        }
        if self.patch_size == 0
            || !self.height.is_multiple_of(self.patch_size)
            || !self.width.is_multiple_of(self.patch_size)
            || self.height < 2 * self.patch_size
            || self.width < 2 * self.patch_size
        {
            return bad(format!(
                "size {}x{} must be a multiple of patch {} and at least twice it",
                self.height, self.width, self.patch_size
            ));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma {} must be finite and >= 0", self.sigma));
        }
        if !(0.0..=1.0).contains(&self.glyph_density) {
            return bad(format!("glyph density {} outside [0, 1]", self.glyph_density));
        }
        Ok(())
    }

    /// Generator for sample `index`; independent of how many samples are drawn.
    pub fn rng_for(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }
}

/// A generated triplet together with the attenuation used inside the shadow.
#[derive(Clone, Debug, PartialEq)]
pub struct Synthesized {
    pub triplet: Triplet,
    pub attenuation: f64,
}

fn render_page(cfg: &SynthConfig, rng: &mut impl Rng) -> Vec<f64> {
    let (h, w) = (cfg.height, cfg.width);
    let mut page = vec![1.0; h * w * 3];
    let base: f64 = rng.random_range(0.05..0.25);
    let ink = [
        base + rng.random_range(0.0..0.1),
        base + rng.random_range(0.0..0.1),
        base + rng.random_range(0.0..0.15),
    ];
    let mut paint = |y: usize, x: usize, color: [f64; 3]| {
        let i = (y * w + x) * 3;
        page[i..i + 3].copy_from_slice(&color);
    };

    let margin_x = (w / 10).max(1);
    let pitch = (h / 12).max(6);
    let glyph_h = (pitch * 3 / 5).max(3);
    let mut line_top = margin_x.min(h / 8);
    while line_top + glyph_h < h.saturating_sub(2) {
        let mut x = margin_x + rng.random_range(0..3);
        let right = w.saturating_sub(margin_x);
        let line_end = right - rng.random_range(0..(right - x).max(1) / 3 + 1);
        while x + 2 < line_end {
            let gw = rng.random_range(2..=4usize).min(line_end - x);
            if rng.random_bool(cfg.glyph_density) {
                // a glyph is one or two strokes inside its cell
                let strokes = rng.random_range(1..=2);
                for _ in 0..strokes {
                    if rng.random_bool(0.6) {
                        let sx = x + rng.random_range(0..gw);
                        let (y0, y1) = (line_top + rng.random_range(0..2), line_top + glyph_h);
                        (y0..y1).for_each(|y| paint(y, sx, ink));
                    } else {
                        let sy = line_top + rng.random_range(0..glyph_h);
                        (x..x + gw).for_each(|xx| paint(sy, xx, ink));
                    }
                }
            }
            x += gw + 1;
            if rng.random_bool(0.15) {
                x += 2; // word gap
            }
        }
        line_top += pitch;
    }

    // occasional solid block (figure / table rule)
    if rng.random_bool(0.3) {
        let bh = rng.random_range(2..=(h / 8).max(3));
        let bw = rng.random_range(w / 6..=(w / 2).max(w / 6 + 1));
        let y0 = rng.random_range(0..h - bh);
        let x0 = rng.random_range(0..w - bw);
        let shade = rng.random_range(0.3..0.7);
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                paint(y, x, [shade; 3]);
            }
        }
    }
    page
}

fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn polygon_mask(cfg: &SynthConfig, rng: &mut impl Rng) -> Vec<f64> {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let side = h.min(w);
    loop {
        let cx = rng.random_range(0.1..0.9) * w;
        let cy = rng.random_range(0.1..0.9) * h;
        let n = rng.random_range(3..=7);
        let pts: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                let r = rng.random_range(0.3..0.8) * side;
                (cx + r * a.cos(), cy + r * a.sin())
            })
            .collect();
        let hull = convex_hull(pts);
        if hull.len() < 3 {
            continue;
        }
        let mut mask = vec![0.0; cfg.height * cfg.width];
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                let p = (x as f64 + 0.5, y as f64 + 0.5);
                let inside = (0..hull.len()).all(|i| {
                    let (a, b) = (hull[i], hull[(i + 1) % hull.len()]);
                    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0) >= 0.0
                });
                if inside {
                    mask[y * cfg.width + x] = 1.0;
                }
            }
        }
        let coverage = mask.iter().sum::<f64>() / mask.len() as f64;
        if (0.1..=0.7).contains(&coverage) {
            return mask;
        }
    }
}

/// Separable Gaussian blur with clamped borders.
fn gaussian_blur(data: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, d) in kernel.iter().zip(-radius..=radius) {
                    let (sy, sx) = if horizontal {
                        (y as isize, (x as isize + d).clamp(0, w as isize - 1))
                    } else {
                        ((y as isize + d).clamp(0, h as isize - 1), x as isize)
                    };
                    acc += k * src[sy as usize * w + sx as usize];
                }
                out[y * w + x] = acc.clamp(0.0, 1.0);
            }
        }
        out
    };
    pass(&pass(data, true), false)
}

/// Draw one synthetic triplet: a white page with dark glyphs, a convex
/// polygon shadow (optionally blurred), and a single attenuation `s` so that
/// `input = target · (s·M + 1 − M)`.
pub fn synth_sample(cfg: &SynthConfig, rng: &mut impl Rng) -> Result<Synthesized> {
    cfg.validate()?;
    let target = render_page(cfg, rng);
    let mask = gaussian_blur(&polygon_mask(cfg, rng), cfg.height, cfg.width, cfg.sigma);
    let s = if cfg.s_min == cfg.s_max {
        cfg.s_min
    } else {
        rng.random_range(cfg.s_min..=cfg.s_max)
    };
    let input = target
        .chunks(3)
        .zip(&mask)
        .flat_map(|(px, &m)| {
            // exact at m = 0 (factor 1) and m = 1 (factor s)
            let factor = s * m + (1.0 - m);
            px.iter().map(move |v| v * factor).collect::<Vec<_>>()
        })
        .collect();
    let (h, w) = (cfg.height, cfg.width);
    Ok(Synthesized {
        triplet: Triplet::new(
            ImageTensor::new(h, w, input)?,
            ImageTensor::new(h, w, target)?,
            ShadowMask::new(h, w, mask)?,
        )?,
        attenuation: s,
    })
}

/// Samples `0..count` of the stream defined by `cfg.seed`.
pub fn synth_batch(cfg: &SynthConfig, count: usize) -> Result<Vec<Synthesized>> {
    (0..count)
        .map(|i| synth_sample(cfg, &mut cfg.rng_for(i as u64)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub stem: String,
    pub input: ImageTensor,
    pub target: ImageTensor,
    /// Absent when no mask file exists; callers fall back to the detector.
    pub mask: Option<ShadowMask>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn from_synthesized(items: Vec<Synthesized>) -> Self {
        let samples = items
            .into_iter()
            .enumerate()
            .map(|(i, s)| Sample {
                stem: stem_for(i),
                input: s.triplet.input,
                target: s.triplet.target,
                mask: Some(s.triplet.mask),
            })
            .collect();
        Self {
            root: PathBuf::new(),
            samples,
        }
    }
}

pub fn stem_for(index: usize) -> String {
    format!("{index:05}")
}

/// Sorted stems of the `*.png` files in `dir` (empty if `dir` is missing).
pub fn png_stems(dir: &Path) -> Result<BTreeSet<String>> {
    if !dir.is_dir() {
        return Ok(BTreeSet::new());
    }
    let mut stems = BTreeSet::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.insert(stem.to_owned());
            }
        }
    }
    Ok(stems)
}

/// Load `root/{input,target,mask}/*.png`, aligned by stem.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    let inputs = png_stems(&root.join("input"))?;
    let targets = png_stems(&root.join("target"))?;
    let masks = png_stems(&root.join("mask"))?;
    let missing: Vec<&str> = inputs.difference(&targets).map(String::as_str).collect();
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "stems without a target in {}: {}",
            root.display(),
            missing.join(", ")
        )));
    }
    let mut samples = Vec::with_capacity(inputs.len());
    for stem in &inputs {
        let file = format!("{stem}.png");
        let input = load_image(root.join("input").join(&file))?;
        let target = load_image(root.join("target").join(&file))?;
        if input.size() != target.size() {
            return Err(Error::Validation(format!(
                "stem {stem}: input {:?} and target {:?} differ in size",
                input.size(),
                target.size()
            )));
        }
        let mask = if masks.contains(stem) {
            let path = root.join("mask").join(&file);
            Some(detection::load_mask(&path, input.size()).map_err(|e| match e {
                Error::Validation(m) => Error::Validation(format!("stem {stem}: {m}")),
                other => other,
            })?)
        } else {
            None
        };
        samples.push(Sample {
            stem: stem.clone(),
            input,
            target,
            mask,
        });
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        samples,
    })
}

/// Write triplets in the dataset layout under `root`.
pub fn write_dataset(root: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let root = root.as_ref();
    for s in samples {
        let file = format!("{}.png", s.stem);
        save_image(&s.input, root.join("input").join(&file))?;
        save_image(&s.target, root.join("target").join(&file))?;
        if let Some(m) = &s.mask {
            detection::save_mask(m, root.join("mask").join(&file))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_rule() {
        assert_eq!(quantize(1.2), 255);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(-0.3), 0);
        for b in 0..=255u8 {
            assert_eq!(quantize(b as f64 / 255.0), b);
        }
    }

    #[test]
    fn reflect_padding_mirrors_without_repeating_edge() {
        let src = [1.0, 2.0, 3.0];
        assert_eq!(reflect_grid(&src, 1, 3, 1, 1, 6), vec![1.0, 2.0, 3.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn synth_exactness_with_hard_mask() {
        let cfg = SynthConfig {
            height: 32,
            width: 48,
            ..Default::default()
        };
        for i in 0..5 {
            let s = synth_sample(&cfg, &mut cfg.rng_for(i)).unwrap();
            let t = &s.triplet;
            assert!(t.mask.is_binary());
            for (p, &m) in t.mask.data().iter().enumerate() {
                for c in 0..3 {
                    let (inp, tgt) = (t.input.data()[p * 3 + c], t.target.data()[p * 3 + c]);
                    if m == 0.0 {
                        assert_eq!(inp, tgt);
                    } else {
                        assert_eq!(inp, s.attenuation * tgt);
                    }
                }
            }
        }
    }

    #[test]
    fn synth_is_deterministic() {
        let cfg = SynthConfig {
            sigma: 1.5,
            seed: 42,
            height: 32,
            width: 32,
            ..Default::default()
        };
        assert_eq!(synth_batch(&cfg, 3).unwrap(), synth_batch(&cfg, 3).unwrap());
        let other = SynthConfig { seed: 43, ..cfg.clone() };
        assert_ne!(synth_batch(&cfg, 1).unwrap(), synth_batch(&other, 1).unwrap());
    }

    #[test]
    fn synth_rejects_bad_configs() {
        let base = SynthConfig::default();
        for cfg in [
            SynthConfig { s_min: 0.9, s_max: 0.1, ..base.clone() },
            SynthConfig { s_min: 0.0, ..base.clone() },
            SynthConfig { height: 12, ..base.clone() },
            SynthConfig { width: 8, ..base.clone() },
            SynthConfig { sigma: -1.0, ..base.clone() },
        ] {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn convex_hull_drops_interior_points() {
        let hull = convex_hull(vec![(0.0, 0.0), (2.0, 0.0), (1.0, 0.5), (2.0, 2.0), (0.0, 2.0)]);
        assert_eq!(hull.len(), 4);
        assert!(!hull.contains(&(1.0, 0.5)));
    }
}

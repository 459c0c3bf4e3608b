//! Image quality metrics on the 0–255 scale, OCR edit distance, and
//! dataset-level reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::dataio::{load_image, png_stems, ImageTensor};
use crate::error::{Error, Result};
use crate::jobs::map_jobs;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn same_size(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.size() != b.size() {
        return Err(Error::shape(format!("images {:?} and {:?} differ", a.size(), b.size())));
    }
    Ok(())
}

pub fn rmse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_size(a, b)?;
    let n = a.data().len();
    if n == 0 {
        return Err(Error::shape("rmse of empty images"));
    }
    let sq: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = 255.0 * x - 255.0 * y;
            d * d
        })
        .sum();
    Ok((sq / n as f64).sqrt())
}

pub fn psnr_from_rmse(rmse: f64) -> f64 {
    if rmse == 0.0 {
        PSNR_CAP
    } else {
        20.0 * (255.0 / rmse).log10()
    }
}

pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    rmse(a, b).map(psnr_from_rmse)
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let x = i as f64 - r;
        *t = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Valid-mode separable Gaussian filter of an `h×w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&src[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for (i, t) in taps.iter().enumerate() {
            let src = &rows[(y + i) * ow..(y + i + 1) * ow];
            for (o, v) in out[y * ow..(y + 1) * ow].iter_mut().zip(src) {
                *o += t * v;
            }
        }
    }
    out
}

/// Mean SSIM over channels and valid 11×11 Gaussian windows.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_size(a, b)?;
    let (h, w) = a.size();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let c1 = (0.01 * 255.0f64).powi(2);
    let c2 = (0.03 * 255.0f64).powi(2);
    let taps = gaussian_taps();
    let mut total = 0.0;
    for ch in 0..3 {
        let pa: Vec<f64> = a.data().iter().skip(ch).step_by(3).map(|v| v * 255.0).collect();
        let pb: Vec<f64> = b.data().iter().skip(ch).step_by(3).map(|v| v * 255.0).collect();
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mu_a = filter_valid(&pa, h, w, &taps);
        let mu_b = filter_valid(&pb, h, w, &taps);
        let e_aa = filter_valid(&prod(&pa, &pa), h, w, &taps);
        let e_bb = filter_valid(&prod(&pb, &pb), h, w, &taps);
        let e_ab = filter_valid(&prod(&pa, &pb), h, w, &taps);
        let mut acc = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += acc / mu_a.len() as f64;
    }
    Ok(total / 3.0)
}

/// Character-level edit distance.
pub fn levenshtein(s: &str, t: &str) -> usize {
    let t: Vec<char> = t.chars().collect();
    let mut prev: Vec<usize> = (0..=t.len()).collect();
    let mut cur = vec![0; t.len() + 1];
    for (i, a) in s.chars().enumerate() {
        cur[0] = i + 1;
        for (j, &b) in t.iter().enumerate() {
            let sub = prev[j] + usize::from(a != b);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[t.len()]
}

/// Runs of whitespace become one space; ends are trimmed.
pub fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Levenshtein distance after whitespace collapsing.
pub fn text_distance(s: &str, t: &str) -> usize {
    levenshtein(&collapse_whitespace(s), &collapse_whitespace(t))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub name: String,
    pub rmse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub edit_distance: Option<usize>,
}

impl MetricsRow {
    pub fn compute(name: impl Into<String>, pred: &ImageTensor, target: &ImageTensor) -> Result<Self> {
        let r = rmse(pred, target)?;
        Ok(Self {
            name: name.into(),
            rmse: r,
            psnr: psnr_from_rmse(r),
            ssim: ssim(pred, target)?,
            edit_distance: None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsMeans {
    pub count: usize,
    pub rmse: f64,
    pub psnr: f64,
    pub ssim: f64,
    /// Mean over the rows that carry an edit distance.
    pub edit_distance: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub checkpoint: Option<String>,
    pub dataset: String,
    /// Seconds since the Unix epoch; `SOURCE_DATE_EPOCH` wins when set.
    pub timestamp: u64,
}

impl ReportMeta {
    pub fn new(dataset: impl Into<String>, checkpoint: Option<String>) -> Self {
        let timestamp = std::env::var("SOURCE_DATE_EPOCH")
            .ok()
            .and_then(|v| v.trim().parse().ok())
            .unwrap_or_else(|| {
                SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0)
            });
        Self {
            checkpoint,
            dataset: dataset.into(),
            timestamp,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub meta: ReportMeta,
    pub rows: Vec<MetricsRow>,
    pub means: MetricsMeans,
    /// Stems that could not be paired, with the side they were missing from.
    pub missing: Vec<String>,
}

impl MetricsReport {
    pub fn from_rows(meta: ReportMeta, rows: Vec<MetricsRow>, missing: Vec<String>) -> Self {
        let n = rows.len();
        let mean = |f: &dyn Fn(&MetricsRow) -> f64| {
            if n == 0 {
                f64::NAN
            } else {
                rows.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let edits: Vec<f64> = rows.iter().filter_map(|r| r.edit_distance.map(|d| d as f64)).collect();
        let means = MetricsMeans {
            count: n,
            rmse: mean(&|r| r.rmse),
            psnr: mean(&|r| r.psnr),
            ssim: mean(&|r| r.ssim),
            edit_distance: (!edits.is_empty()).then(|| edits.iter().sum::<f64>() / edits.len() as f64),
        };
        Self {
            meta,
            rows,
            means,
            missing,
        }
    }

    /// Per-image rows followed by a `mean` row.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let wrap = |e: csv::Error| Error::io(path, e.into());
        let mut w = csv::Writer::from_path(path).map_err(wrap)?;
        w.write_record(["name", "rmse", "psnr", "ssim", "edit_distance"]).map_err(wrap)?;
        let opt = |v: Option<String>| v.unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.name.clone(),
                r.rmse.to_string(),
                r.psnr.to_string(),
                r.ssim.to_string(),
                opt(r.edit_distance.map(|d| d.to_string())),
            ])
            .map_err(wrap)?;
        }
        let m = &self.means;
        w.write_record([
            "mean".to_string(),
            m.rmse.to_string(),
            m.psnr.to_string(),
            m.ssim.to_string(),
            opt(m.edit_distance.map(|d| d.to_string())),
        ])
        .map_err(wrap)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// One-line summary with fixed precision.
    pub fn summary(&self) -> String {
        let m = &self.means;
        let mut s = format!(
            "images {}  RMSE {:.2}  SSIM {:.4}  PSNR {:.2}",
            m.count, m.rmse, m.ssim, m.psnr
        );
        if let Some(e) = m.edit_distance {
            s.push_str(&format!("  EDIT {e:.2}"));
        }
        s
    }
}

/// Directories of OCR text, `{stem}.txt`, for predictions and ground truth.
#[derive(Clone, Debug)]
pub struct TextDirs {
    pub pred: PathBuf,
    pub gt: PathBuf,
}

fn read_text(path: &Path) -> Result<Option<String>> {
    match fs::read_to_string(path) {
        Ok(s) => Ok(Some(s)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Compare stem-aligned PNGs in `pred` and `gt`. Rows come back sorted by
/// stem regardless of `jobs`.
pub fn evaluate_dirs(
    pred: &Path,
    gt: &Path,
    text: Option<&TextDirs>,
    meta: ReportMeta,
    jobs: usize,
) -> Result<MetricsReport> {
    let ps = png_stems(pred)?;
    let gs = png_stems(gt)?;
    let mut missing: Vec<String> = gs
        .difference(&ps)
        .map(|s| format!("{s} (prediction)"))
        .chain(ps.difference(&gs).map(|s| format!("{s} (ground truth)")))
        .collect();
    let stems: Vec<&String> = ps.intersection(&gs).collect();

    let row_for = |stem: &String| -> Result<(MetricsRow, Option<String>)> {
        let file = format!("{stem}.png");
        let a = load_image(pred.join(&file))?;
        let b = load_image(gt.join(&file))?;
        let mut row = MetricsRow::compute(stem.clone(), &a, &b)?;
        let mut gap = None;
        if let Some(t) = text {
            let file = format!("{stem}.txt");
            match (read_text(&t.pred.join(&file))?, read_text(&t.gt.join(&file))?) {
                (Some(p), Some(g)) => row.edit_distance = Some(text_distance(&p, &g)),
                _ => gap = Some(format!("{stem} (text)")),
            }
        }
        Ok((row, gap))
    };
    let results = map_jobs(&stems, jobs, |s| row_for(s))?;
    let mut rows = Vec::with_capacity(results.len());
    for (row, gap) in results {
        rows.push(row);
        missing.extend(gap);
    }
    Ok(MetricsReport::from_rows(meta, rows, missing))
}

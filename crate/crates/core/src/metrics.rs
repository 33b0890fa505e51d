//! PSNR, SSIM and dataset reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{load_eval_pairs, DatasetSpec, EvalPair};
use crate::error::{shape_err, Error, Result};
use crate::image::Image;
use crate::network::Model;

/// Reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn same_dims(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err!("images differ in size: {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

/// `10·log10(1/MSE)` over all channels, peak 1.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    let (x, y) = (a.tensor().data(), b.tensor().data());
    let mse = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.len() as f64;
    Ok(if mse == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    })
}

fn ssim_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let taps: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Valid-mode separable filtering of one `h×w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Gaussian-window SSIM (11×11, σ 1.5), averaged over valid positions and
/// the three channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Argument(format!(
            "ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {h}×{w}"
        )));
    }
    let taps = ssim_taps();
    let (c1, c2) = (K1 * K1, K2 * K2);
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let x = &a.tensor().data()[c * plane..(c + 1) * plane];
        let y = &b.tensor().data()[c * plane..(c + 1) * plane];
        let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> { x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect() };
        let mx = filter_valid(x, h, w, &taps);
        let my = filter_valid(y, h, w, &taps);
        let mxx = filter_valid(&prod(|p, _| p * p), h, w, &taps);
        let myy = filter_valid(&prod(|_, q| q * q), h, w, &taps);
        let mxy = filter_valid(&prod(|p, q| p * q), h, w, &taps);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cov = mxy[i] - ux * uy;
            total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        count += mx.len();
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub count: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub images: Vec<ImageMetrics>,
}

impl MetricReport {
    pub fn from_images(dataset: impl Into<String>, images: Vec<ImageMetrics>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Argument("cannot report on an empty dataset".into()));
        }
        let n = images.len() as f64;
        Ok(MetricReport {
            dataset: dataset.into(),
            count: images.len(),
            mean_psnr: images.iter().map(|m| m.psnr).sum::<f64>() / n,
            mean_ssim: images.iter().map(|m| m.ssim).sum::<f64>() / n,
            images,
        })
    }

    /// One row per image, then a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,psnr,ssim\n");
        for m in &self.images {
            s += &format!("{},{},{}\n", m.name, m.psnr, m.ssim);
        }
        s += &format!("mean,{},{}\n", self.mean_psnr, self.mean_ssim);
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `<stem>.csv` and `<stem>.json` next to each other.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (ext, body) in [("csv", self.to_csv()), ("json", self.to_json())] {
            let path = dir.join(format!("{stem}.{ext}"));
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Scores `restore(I)` against `T` for every pair, in the given order.
pub fn evaluate_pairs(
    dataset: &str,
    pairs: &[EvalPair],
    mut restore: impl FnMut(&Image) -> Result<Image>,
) -> Result<MetricReport> {
    let images = pairs
        .iter()
        .map(|p| {
            let pred = restore(&p.blended)?;
            Ok(ImageMetrics {
                name: p.name.clone(),
                psnr: psnr(&pred, &p.transmission)?,
                ssim: ssim(&pred, &p.transmission)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_images(dataset, images)
}

/// Inference-mode evaluation of `model` on a paired folder.
pub fn evaluate_dataset(model: &Model, spec: &DatasetSpec) -> Result<MetricReport> {
    let pairs = load_eval_pairs(spec)?;
    evaluate_pairs(&spec.display_name(), &pairs, |i| model.infer(i))
}

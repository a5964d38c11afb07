//! Image-quality metrics and per-image reports.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::{Arc, LazyLock};

use serde::Serialize;

use crate::registry::Registry;
use crate::{Error, ImageTensor, Result};

fn check_same(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Input(format!("metric inputs differ in shape: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `10·log10(1/MSE)` for `[0, 1]` data; `+∞` for identical images.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_same(a, b)?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data().len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalised 1-D Gaussian of `size` taps.
fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-(i as f64 - mid).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Gaussian-windowed SSIM over valid window positions, averaged over
/// positions and channels. The window shrinks to the image size for inputs
/// smaller than 11 pixels.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_same(a, b)?;
    let (h, w, c) = a.dims();
    let (kh, kw) = (SSIM_WINDOW.min(h), SSIM_WINDOW.min(w));
    let (gy, gx) = (gaussian_taps(kh, SSIM_SIGMA), gaussian_taps(kw, SSIM_SIGMA));
    let mut total = 0.0;
    let positions = (h - kh + 1) * (w - kw + 1);
    for ch in 0..c {
        for y0 in 0..=h - kh {
            for x0 in 0..=w - kw {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (dy, wy) in gy.iter().enumerate() {
                    for (dx, wx) in gx.iter().enumerate() {
                        let wt = wy * wx;
                        let (va, vb) = (a.get(y0 + dy, x0 + dx, ch), b.get(y0 + dy, x0 + dx, ch));
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * va * va;
                        sbb += wt * vb * vb;
                        sab += wt * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            }
        }
    }
    Ok(total / (positions * c) as f64)
}

pub const LOE_GRID: usize = 50;

/// Max-channel lightness at a `min(50, H) × min(50, W)` grid of pixel centres.
fn loe_lightness(img: &ImageTensor) -> Vec<f64> {
    let (h, w, c) = img.dims();
    let (gh, gw) = (LOE_GRID.min(h), LOE_GRID.min(w));
    let mut out = Vec::with_capacity(gh * gw);
    for i in 0..gh {
        let y = (2 * i + 1) * h / (2 * gh);
        for j in 0..gw {
            let x = (2 * j + 1) * w / (2 * gw);
            out.push((0..c).map(|ch| img.get(y, x, ch)).fold(f64::MIN, f64::max));
        }
    }
    out
}

/// Lightness-order error: over all ordered pairs of grid points, the fraction
/// whose `≥` relation differs between the two images, times 1000.
pub fn loe(original: &ImageTensor, enhanced: &ImageTensor) -> Result<f64> {
    if !original.same_size(enhanced) {
        return Err(Error::Input(format!("LOE inputs differ in size: {:?} vs {:?}", original.dims(), enhanced.dims())));
    }
    let (lo, le) = (loe_lightness(original), loe_lightness(enhanced));
    let m = lo.len();
    let mut flips = 0usize;
    for i in 0..m {
        for j in 0..m {
            if (lo[i] >= lo[j]) != (le[i] >= le[j]) {
                flips += 1;
            }
        }
    }
    Ok(flips as f64 / (m * m) as f64 * 1000.0)
}

/// The images one metric evaluation may look at.
pub struct EvalPair<'a> {
    pub reference: &'a ImageTensor,
    pub candidate: &'a ImageTensor,
    /// The unenhanced input; LOE falls back to `reference` without it.
    pub original: Option<&'a ImageTensor>,
}

pub trait Metric: Send + Sync {
    fn evaluate(&self, pair: &EvalPair<'_>) -> Result<f64>;
}

struct Psnr;
struct Ssim;
struct Loe;

impl Metric for Psnr {
    fn evaluate(&self, p: &EvalPair<'_>) -> Result<f64> {
        psnr(p.candidate, p.reference)
    }
}

impl Metric for Ssim {
    fn evaluate(&self, p: &EvalPair<'_>) -> Result<f64> {
        ssim(p.candidate, p.reference)
    }
}

impl Metric for Loe {
    fn evaluate(&self, p: &EvalPair<'_>) -> Result<f64> {
        loe(p.original.unwrap_or(p.reference), p.candidate)
    }
}

/// Metrics by name: `psnr`, `ssim`, `loe`.
pub fn metrics() -> &'static Registry<dyn Metric> {
    static R: LazyLock<Registry<dyn Metric>> = LazyLock::new(|| {
        let mut r: Registry<dyn Metric> = Registry::new("metric");
        r.register("psnr", Arc::new(Psnr));
        r.register("ssim", Arc::new(Ssim));
        r.register("loe", Arc::new(Loe));
        r
    });
    &R
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub id: String,
    pub values: Vec<f64>,
}

/// Per-image values of a fixed metric list plus their means.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub metrics: Vec<String>,
    pub images: Vec<ImageMetrics>,
    pub mean: Vec<f64>,
    /// Free-form run details (paths, seed) printed above the table.
    pub metadata: Vec<(String, String)>,
}

fn fmt_value(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{v:.4}")
    }
}

impl MetricReport {
    pub fn new(metrics: &[&str]) -> Result<Self> {
        for m in metrics {
            self::metrics().get(m)?;
        }
        Ok(Self {
            metrics: metrics.iter().map(|s| s.to_string()).collect(),
            images: Vec::new(),
            mean: vec![0.0; metrics.len()],
            metadata: Vec::new(),
        })
    }

    /// Evaluates every metric on one image and refreshes the means.
    pub fn push(&mut self, id: impl Into<String>, pair: &EvalPair<'_>) -> Result<()> {
        let values = self.metrics.iter().map(|m| metrics().get(m)?.evaluate(pair)).collect::<Result<Vec<f64>>>()?;
        self.images.push(ImageMetrics { id: id.into(), values });
        let n = self.images.len() as f64;
        self.mean =
            (0..self.metrics.len()).map(|k| self.images.iter().map(|im| im.values[k]).sum::<f64>() / n).collect();
        Ok(())
    }

    pub fn mean_of(&self, metric: &str) -> Option<f64> {
        self.metrics.iter().position(|m| m == metric).map(|k| self.mean[k])
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header: Vec<&str> = std::iter::once("id").chain(self.metrics.iter().map(String::as_str)).collect();
        let csv_err = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(&header).map_err(csv_err)?;
        for im in &self.images {
            let row: Vec<String> =
                std::iter::once(im.id.clone()).chain(im.values.iter().map(|v| v.to_string())).collect();
            w.write_record(&row).map_err(csv_err)?;
        }
        let mean: Vec<String> =
            std::iter::once("mean".to_string()).chain(self.mean.iter().map(|v| v.to_string())).collect();
        w.write_record(&mean).map_err(csv_err)?;
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv writes utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::file(path, e))
    }

    /// Aligned text table with a trailing mean row.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.metadata {
            let _ = writeln!(out, "{k}: {v}");
        }
        let idw = self.images.iter().map(|i| i.id.len()).max().unwrap_or(0).max(4);
        let _ = write!(out, "{:<idw$}", "id");
        for m in &self.metrics {
            let _ = write!(out, "  {m:>10}");
        }
        out.push('\n');
        let rows = self.images.iter().map(|i| (i.id.as_str(), &i.values)).chain(std::iter::once(("mean", &self.mean)));
        for (id, values) in rows {
            let _ = write!(out, "{id:<idw$}");
            for v in values {
                let _ = write!(out, "  {:>10}", fmt_value(*v));
            }
            out.push('\n');
        }
        out
    }
}

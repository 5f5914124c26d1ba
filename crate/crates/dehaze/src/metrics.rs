//! Luminance-channel PSNR and SSIM, and the metric report format.

use std::fmt::Write as _;

use ndarray::Array2;

use crate::error::{DehazeError, Result};
use crate::image::ImageArray;
use crate::tensor::Element;

/// Declared PSNR for identical images, in dB.
pub const PSNR_CAP_DB: f64 = 100.0;

/// SSIM window size (reference defaults: 11x11 Gaussian, sigma 1.5).
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Dynamic range of `[0, 1]` images.
pub const SSIM_L: f64 = 1.0;

/// Normalized 11x11 Gaussian window.
pub fn gaussian_window() -> Array2<f64> {
    let n = SSIM_WINDOW;
    let c = (n as f64 - 1.0) / 2.0;
    let mut w = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let dy = i as f64 - c;
            let dx = j as f64 - c;
            w[[i, j]] = (-(dy * dy + dx * dx) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        }
    }
    let total: f64 = w.iter().sum();
    w.mapv(|v| v / total)
}

fn luminance_plane<El: Element>(img: &ImageArray<El>) -> Result<Array2<f64>> {
    let lum = if img.channels() == 3 {
        img.to_luminance()?
    } else {
        img.clone()
    };
    let (h, w, _) = lum.data().dim();
    Ok(Array2::from_shape_fn((h, w), |(i, j)| {
        lum.data()[[i, j, 0]].as_f64()
    }))
}

/// Peak signal-to-noise ratio in dB over the luminance channel, peak 1.0.
pub fn psnr<El: Element>(a: &ImageArray<El>, b: &ImageArray<El>) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(DehazeError::invalid("psnr: shape mismatch"));
    }
    let pa = luminance_plane(a)?;
    let pb = luminance_plane(b)?;
    let n = pa.len() as f64;
    let mse: f64 = pa
        .iter()
        .zip(pb.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Mean windowed SSIM over the luminance channel (valid-region windows).
pub fn ssim<El: Element>(a: &ImageArray<El>, b: &ImageArray<El>) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(DehazeError::invalid("ssim: shape mismatch"));
    }
    let pa = luminance_plane(a)?;
    let pb = luminance_plane(b)?;
    ssim_planes(&pa, &pb)
}

pub(crate) fn ssim_planes(pa: &Array2<f64>, pb: &Array2<f64>) -> Result<f64> {
    let (h, w) = pa.dim();
    let n = SSIM_WINDOW;
    if h < n || w < n {
        return Err(DehazeError::invalid(format!(
            "ssim: image {h}x{w} smaller than {n}x{n} window"
        )));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * SSIM_L) * (SSIM_K1 * SSIM_L);
    let c2 = (SSIM_K2 * SSIM_L) * (SSIM_K2 * SSIM_L);

    let mut acc = 0.0;
    let mut count = 0usize;
    for oy in 0..=h - n {
        for ox in 0..=w - n {
            let mut mx = 0.0;
            let mut my = 0.0;
            let mut mxx = 0.0;
            let mut myy = 0.0;
            let mut mxy = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let g = win[[i, j]];
                    let x = pa[[oy + i, ox + j]];
                    let y = pb[[oy + i, ox + j]];
                    mx += g * x;
                    my += g * y;
                    mxx += g * x * x;
                    myy += g * y * y;
                    mxy += g * x * y;
                }
            }
            let vx = mxx - mx * mx;
            let vy = myy - my * my;
            let cov = mxy - mx * my;
            let val = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            acc += val;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// Per-image metric rows plus their arithmetic-mean aggregate.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub per_image: Vec<(String, f64, f64)>,
    pub failures: Vec<(String, String)>,
}

impl MetricReport {
    pub fn push(&mut self, id: impl Into<String>, psnr_db: f64, ssim: f64) {
        self.per_image.push((id.into(), psnr_db, ssim));
    }

    pub fn push_failure(&mut self, id: impl Into<String>, reason: impl Into<String>) {
        self.failures.push((id.into(), reason.into()));
    }

    pub fn mean_psnr(&self) -> f64 {
        mean(self.per_image.iter().map(|r| r.1))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.per_image.iter().map(|r| r.2))
    }

    /// Key/value text: one record per image, then the aggregate.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (id, p, q) in &self.per_image {
            writeln!(s, "image {id} psnr_db {p} ssim {q}").unwrap();
        }
        writeln!(
            s,
            "aggregate count {} psnr_db {} ssim {}",
            self.per_image.len(),
            self.mean_psnr(),
            self.mean_ssim()
        )
        .unwrap();
        writeln!(s, "failures {}", self.failures.len()).unwrap();
        for (id, reason) in &self.failures {
            writeln!(s, "failure {id} {reason}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut report = MetricReport::default();
        for line in text.lines() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.first() {
                Some(&"image") if fields.len() == 6 => {
                    let p: f64 = fields[3]
                        .parse()
                        .map_err(|_| DehazeError::invalid("bad psnr field"))?;
                    let q: f64 = fields[5]
                        .parse()
                        .map_err(|_| DehazeError::invalid("bad ssim field"))?;
                    report.push(fields[1], p, q);
                }
                Some(&"failure") if fields.len() >= 2 => {
                    report.push_failure(fields[1], fields[2..].join(" "));
                }
                _ => {}
            }
        }
        Ok(report)
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in it {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

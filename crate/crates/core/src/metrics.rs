//! PSNR, SSIM and region-restricted PSNR for `[0, 1]` images.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

/// Reported PSNR when the inputs are identical.
pub const PSNR_CAP_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 8;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub region: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pixel_count: Option<usize>,
}

impl MetricReport {
    pub fn compare(a: &ImageTensor, b: &ImageTensor) -> Result<Self> {
        Ok(Self {
            psnr_db: psnr(a, b)?,
            ssim: ssim(a, b)?,
            region: None,
            pixel_count: None,
        })
    }
}

fn same_shape(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("image {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Decibels from a mean squared error with peak 1, capped.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
}

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_shape(a, b)?;
    let sum: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.as_slice().len() as f64)
}

pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// PSNR over the pixels where `mask` (an `height x width` grid, row-major)
/// is set, across all channels.
pub fn region_psnr(a: &ImageTensor, b: &ImageTensor, mask: &[bool]) -> Result<f64> {
    same_shape(a, b)?;
    let (c, h, w) = a.shape();
    if mask.len() != h * w {
        return Err(Error::Shape(format!("mask of {} cells for a {h}x{w} image", mask.len())));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Usage("region mask is empty".into()));
    }
    let mut sum = 0.0;
    for ch in 0..c {
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let idx = ch * h * w + i;
            let d = a.as_slice()[idx] as f64 - b.as_slice()[idx] as f64;
            sum += d * d;
        }
    }
    Ok(psnr_from_mse(sum / (count * c) as f64))
}

/// Single-scale SSIM with uniform 8x8 windows at stride 1, population
/// statistics, averaged over windows and channels.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_shape(a, b)?;
    let (c, h, w) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Usage(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for ch in 0..c {
        for y0 in 0..=h - SSIM_WINDOW {
            for x0 in 0..=w - SSIM_WINDOW {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + SSIM_WINDOW {
                    for x in x0..x0 + SSIM_WINDOW {
                        let (p, q) = (a.get(ch, y, x) as f64, b.get(ch, y, x) as f64);
                        sa += p;
                        sb += q;
                        saa += p * p;
                        sbb += q * q;
                        sab += p * q;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = saa / n - ma * ma;
                let vb = sbb / n - mb * mb;
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                    / ((ma * ma + mb * mb + C1) * (va + vb + C2));
                windows += 1;
            }
        }
    }
    Ok(total / windows as f64)
}

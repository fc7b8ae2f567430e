//! PSNR and SSIM for images in `[0, 1]`.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Reported in place of an infinite PSNR for identical images.
pub const PSNR_CAP: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "image shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.f64() - y.f64()).powi(2))
        .sum();
    Ok(s / a.len().max(1) as f64)
}

/// `10·log10(1/MSE)`, capped at [`PSNR_CAP`].
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / m).log10()).min(PSNR_CAP)
    })
}

fn gaussian(size: usize) -> Vec<f64> {
    let r = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|x| x / s).collect()
}

/// Separable "valid" Gaussian filter of an `h×w` plane.
fn filter(plane: &[f64], h: usize, w: usize, g: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = g.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|k| g[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|k| g[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5), averaged over
/// channels. Images smaller than the window use a window of their size.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let [c, h, w] = a.shape()[..] else {
        return Err(Error::shape(format!(
            "SSIM expects C×H×W, got {:?}",
            a.shape()
        )));
    };
    let size = SSIM_WINDOW.min(h).min(w);
    let size = if size % 2 == 0 { size - 1 } else { size };
    if size == 0 {
        return Err(Error::shape("SSIM of an empty image"));
    }
    let g = gaussian(size);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mut total = 0.0;
    for ch in 0..c {
        let pa: Vec<f64> = a.data()[ch * h * w..(ch + 1) * h * w]
            .iter()
            .map(|v| v.f64())
            .collect();
        let pb: Vec<f64> = b.data()[ch * h * w..(ch + 1) * h * w]
            .iter()
            .map(|v| v.f64())
            .collect();
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
        let (ma, oh, ow) = filter(&pa, h, w, &g);
        let (mb, ..) = filter(&pb, h, w, &g);
        let (saa, ..) = filter(&prod(&pa, &pa), h, w, &g);
        let (sbb, ..) = filter(&prod(&pb, &pb), h, w, &g);
        let (sab, ..) = filter(&prod(&pa, &pb), h, w, &g);
        let mut acc = 0.0;
        for i in 0..oh * ow {
            let (mx, my) = (ma[i], mb[i]);
            let vx = saa[i] - mx * mx;
            let vy = sbb[i] - my * my;
            let cov = sab[i] - mx * my;
            acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
        total += acc / (oh * ow) as f64;
    }
    Ok(total / c as f64)
}

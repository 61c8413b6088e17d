//! Full-reference quality metrics on 8-bit planes.

use crate::error::{ensure, Error, Result};
use crate::yuv::Yuv420Frame;

pub const PEAK_8BIT: f64 = 255.0;

/// Per-scale exponents of the five-scale MS-SSIM.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// `10·log10(peak² / MSE)`; `+∞` when the planes are identical.
pub fn psnr(reference: &[u8], test: &[u8], peak: f64) -> Result<f64> {
    ensure!(
        reference.len() == test.len(),
        "psnr: plane sizes differ ({} vs {})",
        reference.len(),
        test.len()
    );
    ensure!(!reference.is_empty(), "psnr: empty plane");
    ensure!(peak > 0.0, "psnr: peak must be positive");
    let sse: f64 = reference
        .iter()
        .zip(test)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    let mse = sse / reference.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    })
}

/// MS-SSIM on the decibel scale, `−10·log10(1 − m)`.
pub fn msssim_db(m: f64) -> f64 {
    -10.0 * (1.0 - m).log10()
}

/// Number of scales used for a `width x height` plane: the largest count
/// up to five whose coarsest level still holds one full window.
pub fn ms_ssim_scales(width: usize, height: usize) -> usize {
    let m = width.min(height);
    (1..=MS_SSIM_WEIGHTS.len())
        .rev()
        .find(|&s| m >= SSIM_WINDOW << (s - 1))
        .unwrap_or(0)
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable "valid" filtering: output is `(w − 10) x (h − 10)`.
fn filter_valid(x: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &x[y * w..(y + 1) * w];
        for ox in 0..ow {
            tmp[y * ow + ox] = k.iter().zip(&row[ox..ox + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..SSIM_WINDOW).map(|i| k[i] * tmp[(oy + i) * ow + ox]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean luminance and contrast-structure terms at one scale.
fn ssim_terms(a: &[f64], b: &[f64], w: usize, h: usize) -> (f64, f64) {
    let k = gaussian_kernel();
    let c1 = (K1 * PEAK_8BIT).powi(2);
    let c2 = (K2 * PEAK_8BIT).powi(2);
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
    let (mu_a, ow, oh) = filter_valid(a, w, h, &k);
    let (mu_b, ..) = filter_valid(b, w, h, &k);
    let (aa, ..) = filter_valid(&prod(a, a), w, h, &k);
    let (bb, ..) = filter_valid(&prod(b, b), w, h, &k);
    let (ab, ..) = filter_valid(&prod(a, b), w, h, &k);
    let n = (ow * oh) as f64;
    let (mut l_sum, mut cs_sum) = (0.0, 0.0);
    for i in 0..ow * oh {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        l_sum += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        cs_sum += (2.0 * cov + c2) / (va + vb + c2);
    }
    (l_sum / n, cs_sum / n)
}

/// 2x2 mean, dropping a trailing odd row or column.
fn downsample(x: &[f64], w: usize, h: usize) -> (Vec<f64>, usize, usize) {
    let (ow, oh) = (w / 2, h / 2);
    let mut out = Vec::with_capacity(ow * oh);
    for y in 0..oh {
        for xx in 0..ow {
            let i = 2 * y * w + 2 * xx;
            out.push((x[i] + x[i + 1] + x[i + w] + x[i + w + 1]) / 4.0);
        }
    }
    (out, ow, oh)
}

/// Multi-scale SSIM of two 8-bit planes, in `[0, 1]`.
///
/// Planes smaller than 176 pixels on a side use fewer scales, with the
/// leading exponents renormalized to sum to one. A negative
/// contrast-structure term (anti-correlated planes) is clamped to zero.
pub fn ms_ssim(reference: &[u8], test: &[u8], width: usize, height: usize) -> Result<f64> {
    ensure!(
        reference.len() == width * height && test.len() == width * height,
        "ms_ssim: planes must both be {}x{}",
        width,
        height
    );
    let scales = ms_ssim_scales(width, height);
    if scales == 0 {
        return Err(Error::invalid(format!(
            "ms_ssim: {}x{} plane is smaller than the {}x{} window",
            width, height, SSIM_WINDOW, SSIM_WINDOW
        )));
    }
    let total: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let mut a: Vec<f64> = reference.iter().map(|&v| v as f64).collect();
    let mut b: Vec<f64> = test.iter().map(|&v| v as f64).collect();
    let (mut w, mut h) = (width, height);
    let mut value = 1.0;
    for s in 0..scales {
        let (l, cs) = ssim_terms(&a, &b, w, h);
        let weight = MS_SSIM_WEIGHTS[s] / total;
        value *= cs.max(0.0).powf(weight);
        if s + 1 == scales {
            value *= l.max(0.0).powf(weight);
        } else {
            let (na, nw, nh) = downsample(&a, w, h);
            let (nb, ..) = downsample(&b, w, h);
            a = na;
            b = nb;
            w = nw;
            h = nh;
        }
    }
    Ok(value.min(1.0))
}

/// Y, U, V PSNR and MS-SSIM of `test` against `reference`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameMetrics {
    pub psnr: [f64; 3],
    pub msssim: [f64; 3],
}

pub fn frame_metrics(reference: &Yuv420Frame, test: &Yuv420Frame) -> Result<FrameMetrics> {
    ensure!(
        reference.width() == test.width() && reference.height() == test.height(),
        "frame sizes differ: {}x{} vs {}x{}",
        reference.width(),
        reference.height(),
        test.width(),
        test.height()
    );
    let mut out = FrameMetrics { psnr: [0.0; 3], msssim: [0.0; 3] };
    for c in 0..3 {
        let (w, h) = reference.plane_dims(c);
        out.psnr[c] = psnr(reference.plane(c), test.plane(c), PEAK_8BIT)?;
        out.msssim[c] = ms_ssim(reference.plane(c), test.plane(c), w, h)?;
    }
    Ok(out)
}

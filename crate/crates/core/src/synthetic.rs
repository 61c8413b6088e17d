//! Synthetic frames and a codec-like degradation, for tests and smoke runs
//! that must not depend on external video data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::yuv::Yuv420Frame;

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// A textured frame: smooth gradients, a few oriented sinusoids and hard
/// edged rectangles, so it has both low- and high-frequency content.
pub fn textured_frame(width: usize, height: usize, seed: u64) -> Result<Yuv420Frame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = |w: usize, h: usize, base: f64, amp: f64, rng: &mut ChaCha8Rng| -> Vec<u8> {
        let waves: Vec<(f64, f64, f64, f64)> = (0..4)
            .map(|_| {
                (
                    rng.random_range(0.02..0.6),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.2..1.0),
                )
            })
            .collect();
        let rects: Vec<(f64, f64, f64, f64, f64)> = (0..5)
            .map(|_| {
                let x0 = rng.random_range(0.0..w as f64);
                let y0 = rng.random_range(0.0..h as f64);
                let rw = rng.random_range(2.0..(w as f64 / 2.0).max(3.0));
                let rh = rng.random_range(2.0..(h as f64 / 2.0).max(3.0));
                (x0, y0, rw, rh, rng.random_range(-1.0..1.0))
            })
            .collect();
        let (gx, gy) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let mut out = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let (xf, yf) = (x as f64, y as f64);
                let mut v = 0.4 * (gx * xf / w as f64 + gy * yf / h as f64);
                for &(f, theta, phase, a) in &waves {
                    v += 0.25 * a * (f * (xf * theta.cos() + yf * theta.sin()) + phase).sin();
                }
                for &(x0, y0, rw, rh, a) in &rects {
                    if xf >= x0 && xf < x0 + rw && yf >= y0 && yf < y0 + rh {
                        v += 0.35 * a;
                    }
                }
                out.push(to_u8(base + amp * v));
            }
        }
        out
    };
    let (cw, ch) = (width / 2, height / 2);
    let y = plane(width, height, 128.0, 90.0, &mut rng);
    let u = plane(cw, ch, 128.0, 40.0, &mut rng);
    let v = plane(cw, ch, 128.0, 40.0, &mut rng);
    Yuv420Frame::new(width, height, y, u, v)
}

/// Quantizer step for a QP, following the usual doubling every 6 QPs.
pub fn qstep(qp: u8) -> f64 {
    2f64.powf((qp as f64 - 4.0) / 6.0)
}

const B: usize = 8;

fn dct_matrix() -> [[f64; B]; B] {
    let mut m = [[0.0; B]; B];
    for (k, row) in m.iter_mut().enumerate() {
        let s = if k == 0 { (1.0 / B as f64).sqrt() } else { (2.0 / B as f64).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = s * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / (2 * B) as f64).cos();
        }
    }
    m
}

/// Blockwise orthonormal 8x8 DCT, uniform quantization with `step`,
/// inverse DCT. Partial edge blocks are left untouched.
pub fn dct_quantize_plane(plane: &mut [u8], width: usize, height: usize, step: f64) {
    let d = dct_matrix();
    for by in (0..height.saturating_sub(B - 1)).step_by(B) {
        for bx in (0..width.saturating_sub(B - 1)).step_by(B) {
            let mut blk = [[0.0; B]; B];
            for (y, row) in blk.iter_mut().enumerate() {
                for (x, v) in row.iter_mut().enumerate() {
                    *v = plane[(by + y) * width + bx + x] as f64 - 128.0;
                }
            }
            // coefficients = D X D^T, quantized, then X = D^T C D
            let mut tmp = [[0.0; B]; B];
            let mut coef = [[0.0; B]; B];
            for i in 0..B {
                for j in 0..B {
                    tmp[i][j] = (0..B).map(|k| d[i][k] * blk[k][j]).sum();
                }
            }
            for i in 0..B {
                for j in 0..B {
                    let c: f64 = (0..B).map(|k| tmp[i][k] * d[j][k]).sum();
                    coef[i][j] = (c / step).round() * step;
                }
            }
            for i in 0..B {
                for j in 0..B {
                    tmp[i][j] = (0..B).map(|k| d[k][i] * coef[k][j]).sum();
                }
            }
            for y in 0..B {
                for x in 0..B {
                    let v: f64 = (0..B).map(|k| tmp[y][k] * d[k][x]).sum();
                    plane[(by + y) * width + bx + x] = to_u8(v + 128.0);
                }
            }
        }
    }
}

/// Codec-like lossy version of `frame` at `qp`.
pub fn degrade(frame: &Yuv420Frame, qp: u8) -> Yuv420Frame {
    let step = qstep(qp);
    let mut out = frame.clone();
    let (w, h) = (frame.width(), frame.height());
    dct_quantize_plane(&mut out.y, w, h, step);
    dct_quantize_plane(&mut out.u, w / 2, h / 2, step);
    dct_quantize_plane(&mut out.v, w / 2, h / 2, step);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dct_is_orthonormal() {
        let d = dct_matrix();
        for i in 0..B {
            for j in 0..B {
                let dot: f64 = (0..B).map(|k| d[i][k] * d[j][k]).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tiny_step_is_lossless_and_distortion_grows_with_qp() {
        let f = textured_frame(64, 48, 1).unwrap();
        let mut y = f.y.clone();
        dct_quantize_plane(&mut y, 64, 48, 1e-6);
        assert_eq!(y, f.y);
        let mse = |a: &[u8], b: &[u8]| -> f64 {
            a.iter().zip(b).map(|(&p, &q)| (p as f64 - q as f64).powi(2)).sum::<f64>() / a.len() as f64
        };
        let errs: Vec<f64> = [22u8, 32, 42].iter().map(|&q| mse(&degrade(&f, q).y, &f.y)).collect();
        assert!(errs[0] > 0.0 && errs[0] < errs[1] && errs[1] < errs[2], "{errs:?}");
    }

    #[test]
    fn frames_are_deterministic() {
        assert_eq!(textured_frame(32, 32, 5).unwrap(), textured_frame(32, 32, 5).unwrap());
        assert_ne!(textured_frame(32, 32, 5).unwrap(), textured_frame(32, 32, 6).unwrap());
    }
}

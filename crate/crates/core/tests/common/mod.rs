//! Helpers shared by the integration tests: random data, independent
//! reference implementations and CLI plumbing.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hvpp_core::blocks::{Init, ParamNodes, ParamSpec};
use hvpp_core::fusion::{cafm, cafm_specs, fuse_hybrid, fuse_hybrid_factored, safm, safm_specs};
use hvpp_core::graph::Graph;
use hvpp_core::yuv::{write_yuv420, Yuv420Frame};
use hvpp_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_frame(w: usize, h: usize, rng: &mut impl Rng) -> Yuv420Frame {
    let mut plane = |n: usize| (0..n).map(|_| rng.random::<u8>()).collect::<Vec<u8>>();
    let y = plane(w * h);
    let u = plane(w * h / 4);
    let v = plane(w * h / 4);
    Yuv420Frame::new(w, h, y, u, v).unwrap()
}

pub fn write_frames(path: &Path, frames: &[Yuv420Frame]) {
    for (i, f) in frames.iter().enumerate() {
        write_yuv420(f, path, i > 0).unwrap();
    }
}

pub fn random_tensor<T: hvpp_core::tensor::Real>(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::c(rng.random_range(-scale..scale))).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Bind `specs` as graph parameters drawn from their init range, widened so
/// attention logits are not all near zero.
pub fn bind_random<T: hvpp_core::tensor::Real>(g: &mut Graph<T>, specs: &[ParamSpec], rng: &mut impl Rng) -> ParamNodes {
    let mut p = ParamNodes::default();
    for s in specs {
        let value = match s.init {
            Init::FanIn(fan) => random_tensor(&s.shape, 3.0 / (fan as f64).sqrt(), rng),
            Init::Constant(c) => Tensor::full(&s.shape, T::c(c + rng.random_range(-0.2..0.2))),
        };
        let id = g.param(value);
        p.insert(s.name.clone(), id);
    }
    p
}

/// Outcome of one random fusion instance.
pub struct FusionInstance {
    /// Sums of the two spatial maps.
    pub spatial_sums: [f64; 2],
    /// `lf[c] + gf[c]` for every channel.
    pub channel_sums: Vec<f64>,
    /// Max abs difference between nested and pre-multiplied hybrid fusion.
    pub factorization_gap: f64,
}

/// Random features and attention parameters of random size, in single
/// precision as the network runs.
pub fn fusion_instance(seed: u64) -> FusionInstance {
    let mut r = rng(seed);
    let c = 2 * r.random_range(1..=6);
    let h = r.random_range(1..=12);
    let w = r.random_range(1..=12);
    let reduction = if c % 4 == 0 { 4 } else { 2 };
    let mut g = Graph::<f32>::new();
    let mut specs = safm_specs("s", c);
    specs.extend(cafm_specs("c", c, reduction));
    let p = bind_random(&mut g, &specs, &mut r);
    let scale = r.random_range(0.1..4.0);
    let f_lf = g.constant(random_tensor(&[c, h, w], scale, &mut r));
    let f_gf = g.constant(random_tensor(&[c, h, w], scale, &mut r));
    let sw = safm(&mut g, &p, "s", f_lf, f_gf).unwrap();
    let cw = cafm(&mut g, &p, "c", f_lf, f_gf).unwrap();
    let sum = |id| g.value(id).data().iter().map(|&v| v as f64).sum::<f64>();
    let spatial_sums = [sum(sw.lf), sum(sw.gf)];
    let channel_sums = g
        .value(cw.lf)
        .data()
        .iter()
        .zip(g.value(cw.gf).data())
        .map(|(&a, &b)| a as f64 + b as f64)
        .collect();
    let nested = fuse_hybrid(&mut g, f_lf, f_gf, sw, cw).unwrap();
    let factored = fuse_hybrid_factored(&mut g, f_lf, f_gf, sw, cw).unwrap();
    let factorization_gap = g
        .value(nested)
        .data()
        .iter()
        .zip(g.value(factored).data())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .fold(0.0, f64::max);
    FusionInstance {
        spatial_sums,
        channel_sums,
        factorization_gap,
    }
}

// ----------------------------------------------------------------- MS-SSIM

/// MS-SSIM evaluated the slow way: a full 2-D Gaussian window at every
/// valid position, moments summed directly.
pub fn ms_ssim_reference(a: &[u8], b: &[u8], w: usize, h: usize) -> f64 {
    const WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
    let win = 11usize;
    let sigma = 1.5f64;
    let mut kernel = vec![0.0; win * win];
    for i in 0..win {
        for j in 0..win {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            kernel[i * win + j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
        }
    }
    let ksum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= ksum);

    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let mut scales = 0;
    while scales < 5 && w.min(h) >= win << scales {
        scales += 1;
    }
    assert!(scales > 0);
    let total: f64 = WEIGHTS[..scales].iter().sum();

    let mut x: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let mut y: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let (mut cw, mut ch) = (w, h);
    let mut result = 1.0;
    for s in 0..scales {
        let (mut l_acc, mut cs_acc, mut n) = (0.0, 0.0, 0.0);
        for oy in 0..=ch - win {
            for ox in 0..=cw - win {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..win {
                    for j in 0..win {
                        let k = kernel[i * win + j];
                        let idx = (oy + i) * cw + ox + j;
                        let (p, q) = (x[idx], y[idx]);
                        mx += k * p;
                        my += k * q;
                        sxx += k * p * p;
                        syy += k * q * q;
                        sxy += k * p * q;
                    }
                }
                let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                l_acc += (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
                cs_acc += (2.0 * cov + c2) / (vx + vy + c2);
                n += 1.0;
            }
        }
        let e = WEIGHTS[s] / total;
        result *= (cs_acc / n).max(0.0).powf(e);
        if s == scales - 1 {
            result *= (l_acc / n).max(0.0).powf(e);
        } else {
            let (nw, nh) = (cw / 2, ch / 2);
            let half = |v: &[f64]| -> Vec<f64> {
                let mut out = vec![0.0; nw * nh];
                for yy in 0..nh {
                    for xx in 0..nw {
                        let i = 2 * yy * cw + 2 * xx;
                        out[yy * nw + xx] = 0.25 * (v[i] + v[i + 1] + v[i + cw] + v[i + cw + 1]);
                    }
                }
                out
            };
            x = half(&x);
            y = half(&y);
            cw = nw;
            ch = nh;
        }
    }
    result.min(1.0)
}

// ----------------------------------------------------------------- BD-rate

/// Shape-preserving cubic through `(x, y)`, evaluated at `t`. Interior
/// slopes are weighted harmonic means of the secants; end slopes use the
/// three-point formula, flattened or clipped to stay monotone.
pub fn pchip_eval(x: &[f64], y: &[f64], t: f64) -> f64 {
    let n = x.len();
    let h: Vec<f64> = (0..n - 1).map(|i| x[i + 1] - x[i]).collect();
    let del: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
    let mut d = vec![0.0; n];
    for k in 1..n - 1 {
        if del[k - 1] * del[k] > 0.0 {
            let w1 = 2.0 * h[k] + h[k - 1];
            let w2 = h[k] + 2.0 * h[k - 1];
            d[k] = (w1 + w2) / (w1 / del[k - 1] + w2 / del[k]);
        }
    }
    let end = |h0: f64, h1: f64, m0: f64, m1: f64| {
        let mut e = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1);
        if e.signum() != m0.signum() {
            e = 0.0;
        } else if m0.signum() != m1.signum() && e.abs() > 3.0 * m0.abs() {
            e = 3.0 * m0;
        }
        e
    };
    d[0] = end(h[0], h[1], del[0], del[1]);
    d[n - 1] = end(h[n - 2], h[n - 3], del[n - 2], del[n - 3]);
    let k = (0..n - 1).rev().find(|&i| x[i] <= t).unwrap_or(0);
    let s = (t - x[k]) / h[k];
    let (s2, s3) = (s * s, s * s * s);
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    h00 * y[k] + h10 * h[k] * d[k] + h01 * y[k + 1] + h11 * h[k] * d[k + 1]
}

/// BD-rate by trapezoidal integration of the interpolated log-rate curves
/// over `n` intervals of the common quality range.
pub fn bd_rate_dense(anchor: &[(f64, f64)], test: &[(f64, f64)], n: usize) -> f64 {
    let split = |pts: &[(f64, f64)]| -> (Vec<f64>, Vec<f64>) {
        let mut p = pts.to_vec();
        p.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        (p.iter().map(|q| q.1).collect(), p.iter().map(|q| q.0.log10()).collect())
    };
    let (qa, ra) = split(anchor);
    let (qt, rt) = split(test);
    let lo = qa[0].max(qt[0]);
    let hi = qa[qa.len() - 1].min(qt[qt.len() - 1]);
    let step = (hi - lo) / n as f64;
    let mut acc = 0.0;
    for i in 0..=n {
        let q = if i == n { hi } else { lo + i as f64 * step };
        let diff = pchip_eval(&qt, &rt, q) - pchip_eval(&qa, &ra, q);
        acc += if i == 0 || i == n { 0.5 * diff } else { diff };
    }
    let avg = acc * step / (hi - lo);
    (10f64.powf(avg) - 1.0) * 100.0
}

/// Non-uniformly spaced anchor and test curves whose quality ranges only
/// partly overlap.
pub fn nonuniform_curves() -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
    let anchor = vec![(120.0, 30.1), (260.0, 33.4), (610.0, 36.2), (1500.0, 39.8)];
    let test = vec![(100.0, 30.9), (230.0, 33.5), (580.0, 37.3), (1300.0, 39.5)];
    (anchor, test)
}

// --------------------------------------------------------------------- CLI

pub fn hvpp_bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_hvpp"))
}

pub fn run_cli(args: &[&str]) -> Output {
    Command::new(hvpp_bin())
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn hvpp")
}

pub fn run_ok(args: &[&str]) -> String {
    let out = run_cli(args);
    assert!(
        out.status.success(),
        "hvpp {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// A tiny-model training setup on disk: one synthetic 32x32 sequence of two
/// frames, degraded at QP 37. Returns (config path, manifest path).
pub fn tiny_training_setup(dir: &Path, steps: u64) -> (PathBuf, PathBuf) {
    use hvpp_core::synthetic::{degrade, textured_frame};
    let clean: Vec<_> = (0..2).map(|s| textured_frame(32, 32, s).unwrap()).collect();
    let lossy: Vec<_> = clean.iter().map(|f| degrade(f, 37)).collect();
    write_frames(&dir.join("clean.yuv"), &clean);
    write_frames(&dir.join("lossy.yuv"), &lossy);
    let manifest = dir.join("train.txt");
    std::fs::write(&manifest, "lossy.yuv clean.yuv 32 32 37\n").unwrap();
    let config = dir.join("tiny.cfg");
    std::fs::write(
        &config,
        format!(
            "# tiny smoke model\nmax_steps={steps}\nbatch_size=2\npatch_size=16\ncheckpoint_every=0\n\
             channels=8\nheads=2\nnum_hfb=1\nwindow_side=2\ntile_size=32\ntile_overlap=8\n"
        ),
    )
    .unwrap();
    (config, manifest)
}

mod common;

use common::{bd_rate_dense, ms_ssim_reference, nonuniform_curves, random_frame, rng};
use hvpp_core::bdrate::{bd_rate, RdCurve, RdPoint};
use hvpp_core::metrics::{frame_metrics, ms_ssim, psnr, PEAK_8BIT};
use rand::Rng;

/// Reference plane plus a noisy, slightly shifted copy of it.
fn correlated_pair(w: usize, h: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut r = rng(seed);
    let a: Vec<u8> = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            (128.0 + 60.0 * (x / 5.0).sin() * (y / 7.0).cos() + r.random_range(-30.0..30.0)) as u8
        })
        .collect();
    let b = a
        .iter()
        .map(|&v| (v as f64 + r.random_range(-25.0..25.0)).clamp(0.0, 255.0) as u8)
        .collect();
    (a, b)
}

#[test]
fn ms_ssim_matches_direct_reference() {
    for &(w, h, seed) in &[(64, 64, 1u64), (48, 40, 2), (90, 30, 3), (200, 180, 4)] {
        let (a, b) = correlated_pair(w, h, seed);
        let fast = ms_ssim(&a, &b, w, h).unwrap();
        let slow = ms_ssim_reference(&a, &b, w, h);
        assert!((fast - slow).abs() <= 1e-9, "{w}x{h}: {fast} vs {slow}");
        assert!(fast > 0.0 && fast < 1.0);
    }
}

#[test]
fn ms_ssim_handles_uncorrelated_noise() {
    let mut r = rng(9);
    let a: Vec<u8> = (0..64 * 64).map(|_| r.random()).collect();
    let b: Vec<u8> = (0..64 * 64).map(|_| r.random()).collect();
    let v = ms_ssim(&a, &b, 64, 64).unwrap();
    assert!((v - ms_ssim_reference(&a, &b, 64, 64)).abs() <= 1e-9);
    assert!((0.0..0.2).contains(&v), "{v}");
}

#[test]
fn psnr_closed_forms() {
    let a = vec![100u8; 400];
    let mut b = a.clone();
    b[0] = 120;
    // MSE = 400 / 400 = 1
    assert!((psnr(&a, &b, PEAK_8BIT).unwrap() - 20.0 * 255f64.log10()).abs() < 1e-6);
    let c: Vec<u8> = a.iter().map(|v| v + 5).collect();
    assert!((psnr(&a, &c, PEAK_8BIT).unwrap() - 10.0 * (255.0f64 * 255.0 / 25.0).log10()).abs() < 1e-6);
    assert!((psnr(&a, &c, 1023.0).unwrap() - 10.0 * (1023.0f64 * 1023.0 / 25.0).log10()).abs() < 1e-6);
    assert!(psnr(&a, &c, 0.0).is_err());
}

#[test]
fn psnr_falls_as_noise_grows() {
    let mut r = rng(3);
    let base: Vec<u8> = (0..4096).map(|_| r.random_range(40..216)).collect();
    let noise: Vec<f64> = (0..4096).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut last = f64::INFINITY;
    for amp in [1.0, 2.0, 4.0, 8.0, 16.0, 32.0] {
        let t: Vec<u8> = base
            .iter()
            .zip(&noise)
            .map(|(&v, n)| (v as f64 + amp * n).round().clamp(0.0, 255.0) as u8)
            .collect();
        let p = psnr(&base, &t, PEAK_8BIT).unwrap();
        assert!(p < last, "amplitude {amp}: {p} !< {last}");
        last = p;
    }
}

#[test]
fn frame_metrics_cover_all_planes() {
    let f = random_frame(64, 48, &mut rng(1));
    let m = frame_metrics(&f, &f).unwrap();
    assert!(m.psnr.iter().all(|p| p.is_infinite()));
    assert_eq!(m.msssim, [1.0; 3]);
    let g = random_frame(64, 48, &mut rng(2));
    let m = frame_metrics(&f, &g).unwrap();
    for c in 0..3 {
        let (w, h) = f.plane_dims(c);
        assert_eq!(m.psnr[c], psnr(f.plane(c), g.plane(c), PEAK_8BIT).unwrap());
        assert_eq!(m.msssim[c], ms_ssim(f.plane(c), g.plane(c), w, h).unwrap());
    }
}

fn curve(pts: &[(f64, f64)]) -> RdCurve {
    RdCurve::from_unsorted("c", pts.iter().map(|&(bitrate, quality)| RdPoint { bitrate, quality }).collect()).unwrap()
}

#[test]
fn bd_rate_matches_dense_integration() {
    let (anchor, test) = nonuniform_curves();
    let analytic = bd_rate(&curve(&anchor), &curve(&test)).unwrap();
    let dense = bd_rate_dense(&anchor, &test, 10_000);
    assert!((analytic - dense).abs() <= 1e-4, "{analytic} vs {dense}");
    assert!(analytic < 0.0);

    // an uneven curve whose end slopes get limited
    let a = [(90.0, 28.0), (110.0, 33.0), (400.0, 34.0), (2000.0, 41.0), (2600.0, 41.2)];
    let t = [(70.0, 29.0), (150.0, 32.5), (350.0, 35.0), (1600.0, 40.0)];
    let analytic = bd_rate(&curve(&a), &curve(&t)).unwrap();
    assert!((analytic - bd_rate_dense(&a, &t, 10_000)).abs() <= 1e-4);
}

#[test]
fn bd_rate_trivial_cases() {
    let anchor = [(100.0, 30.0), (200.0, 33.0), (400.0, 36.0), (800.0, 39.0)];
    let scaled = |k: f64| anchor.iter().map(|&(r, q)| (r * k, q)).collect::<Vec<_>>();
    assert!(bd_rate(&curve(&anchor), &curve(&anchor)).unwrap().abs() < 1e-12);
    assert!((bd_rate(&curve(&anchor), &curve(&scaled(2.0))).unwrap() - 100.0).abs() < 1e-4);
    assert!((bd_rate(&curve(&anchor), &curve(&scaled(0.9))).unwrap() + 10.0).abs() < 1e-4);
}

#[test]
fn bd_rate_is_antisymmetric_in_log_domain() {
    let (anchor, test) = nonuniform_curves();
    let ab = bd_rate(&curve(&anchor), &curve(&test)).unwrap();
    let ba = bd_rate(&curve(&test), &curve(&anchor)).unwrap();
    assert!(((1.0 + ab / 100.0) * (1.0 + ba / 100.0) - 1.0).abs() < 1e-12);
}

//! Bjøntegaard delta rate between two rate-distortion curves.
//!
//! Each curve is interpolated as `log10(rate)` over quality with a monotone
//! piecewise-cubic Hermite interpolant (Fritsch–Carlson slopes). The average
//! log-rate difference over the overlapping quality range is integrated in
//! closed form and reported as `(10^Δ − 1)·100` percent: negative means the
//! test curve needs less rate for the same quality.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const RD_HEADER: [&str; 2] = ["bitrate", "quality"];

/// Minimum points per curve.
pub const MIN_POINTS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdPoint {
    /// kbps
    pub bitrate: f64,
    /// PSNR in dB, or MS-SSIM converted to dB.
    pub quality: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RdCurve {
    pub label: String,
    points: Vec<RdPoint>,
}

impl RdCurve {
    /// Points must be at least [`MIN_POINTS`], with positive finite rates,
    /// finite qualities, and both coordinates strictly increasing.
    pub fn new(label: impl Into<String>, points: Vec<RdPoint>) -> Result<Self> {
        let label = label.into();
        let bad = |msg: String| Err(Error::invalid(format!("rd curve `{}`: {}", label, msg)));
        if points.len() < MIN_POINTS {
            return bad(format!("needs at least {} points, got {}", MIN_POINTS, points.len()));
        }
        for (i, p) in points.iter().enumerate() {
            if !(p.bitrate.is_finite() && p.bitrate > 0.0) {
                return bad(format!("point {} has non-positive bitrate {}", i, p.bitrate));
            }
            if !p.quality.is_finite() {
                return bad(format!("point {} has non-finite quality", i));
            }
        }
        for (i, w) in points.windows(2).enumerate() {
            if !(w[1].bitrate > w[0].bitrate && w[1].quality > w[0].quality) {
                return bad(format!(
                    "points {} and {} are not strictly increasing in bitrate and quality",
                    i,
                    i + 1
                ));
            }
        }
        Ok(Self { label, points })
    }

    /// Sorts by bitrate before validating.
    pub fn from_unsorted(label: impl Into<String>, mut points: Vec<RdPoint>) -> Result<Self> {
        points.sort_by(|a, b| a.bitrate.total_cmp(&b.bitrate));
        Self::new(label, points)
    }

    pub fn points(&self) -> &[RdPoint] {
        &self.points
    }

    fn knots(&self) -> (Vec<f64>, Vec<f64>) {
        let x = self.points.iter().map(|p| p.quality).collect();
        let y = self.points.iter().map(|p| p.bitrate.log10()).collect();
        (x, y)
    }
}

/// Monotone cubic Hermite interpolant through `(x_i, y_i)`.
#[derive(Clone, Debug)]
pub struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

fn edge_slope(h0: f64, h1: f64, m0: f64, m1: f64) -> f64 {
    // Three-point one-sided estimate, limited to preserve shape.
    let d = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1);
    if d.signum() != m0.signum() {
        0.0
    } else if m0.signum() != m1.signum() && d.abs() > 3.0 * m0.abs() {
        3.0 * m0
    } else {
        d
    }
}

impl Pchip {
    /// `x` strictly increasing, at least two knots.
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let n = x.len();
        if n < 2 || y.len() != n {
            return Err(Error::invalid("pchip: need at least two knots of matching length"));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("pchip: knots must be strictly increasing"));
        }
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let m: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
        let mut d = vec![0.0; n];
        if n == 2 {
            d = vec![m[0]; 2];
        } else {
            for k in 1..n - 1 {
                if m[k - 1] * m[k] > 0.0 {
                    let w1 = 2.0 * h[k] + h[k - 1];
                    let w2 = h[k] + 2.0 * h[k - 1];
                    d[k] = (w1 + w2) / (w1 / m[k - 1] + w2 / m[k]);
                }
            }
            d[0] = edge_slope(h[0], h[1], m[0], m[1]);
            d[n - 1] = edge_slope(h[n - 2], h[n - 3], m[n - 2], m[n - 3]);
        }
        Ok(Self { x, y, d })
    }

    pub fn slopes(&self) -> &[f64] {
        &self.d
    }

    fn segment(&self, v: f64) -> usize {
        match self.x.partition_point(|&k| k <= v) {
            0 => 0,
            i => (i - 1).min(self.x.len() - 2),
        }
    }

    pub fn eval(&self, v: f64) -> f64 {
        let k = self.segment(v);
        let h = self.x[k + 1] - self.x[k];
        let t = (v - self.x[k]) / h;
        let (t2, t3) = (t * t, t * t * t);
        (2.0 * t3 - 3.0 * t2 + 1.0) * self.y[k]
            + (t3 - 2.0 * t2 + t) * h * self.d[k]
            + (-2.0 * t3 + 3.0 * t2) * self.y[k + 1]
            + (t3 - t2) * h * self.d[k + 1]
    }

    /// Antiderivative of segment `k` at local coordinate `t`, scaled by `h`.
    fn segment_primitive(&self, k: usize, t: f64) -> f64 {
        let h = self.x[k + 1] - self.x[k];
        let (t2, t3, t4) = (t * t, t * t * t, t * t * t * t);
        h * ((t - t3 + t4 / 2.0) * self.y[k]
            + (t2 / 2.0 - 2.0 * t3 / 3.0 + t4 / 4.0) * h * self.d[k]
            + (t3 - t4 / 2.0) * self.y[k + 1]
            + (t4 / 4.0 - t3 / 3.0) * h * self.d[k + 1])
    }

    /// Exact integral over `[a, b]` within the knot range.
    pub fn integrate(&self, a: f64, b: f64) -> f64 {
        if b < a {
            return -self.integrate(b, a);
        }
        let mut total = 0.0;
        for k in 0..self.x.len() - 1 {
            let (x0, x1) = (self.x[k], self.x[k + 1]);
            let lo = a.max(x0);
            let hi = b.min(x1);
            if hi <= lo {
                continue;
            }
            let h = x1 - x0;
            total += self.segment_primitive(k, (hi - x0) / h) - self.segment_primitive(k, (lo - x0) / h);
        }
        total
    }
}

/// BD-rate of `test` against `anchor`, in percent.
pub fn bd_rate(anchor: &RdCurve, test: &RdCurve) -> Result<f64> {
    let (xa, ya) = anchor.knots();
    let (xt, yt) = test.knots();
    let lo = xa[0].max(xt[0]);
    let hi = xa[xa.len() - 1].min(xt[xt.len() - 1]);
    if !(hi > lo) {
        return Err(Error::Domain(format!(
            "curves `{}` and `{}` have no overlapping quality range",
            anchor.label, test.label
        )));
    }
    let pa = Pchip::new(xa, ya)?;
    let pt = Pchip::new(xt, yt)?;
    let avg = (pt.integrate(lo, hi) - pa.integrate(lo, hi)) / (hi - lo);
    Ok((10f64.powf(avg) - 1.0) * 100.0)
}

/// Read an RD curve from CSV with header `bitrate,quality`.
pub fn read_rd_csv(reader: impl Read, label: &str) -> Result<RdCurve> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::format(format!("{}: {}", label, e)))?.clone();
    if header.iter().collect::<Vec<_>>() != RD_HEADER {
        return Err(Error::format(format!(
            "{}: expected header `{}`, found `{}`",
            label,
            RD_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut points = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(format!("{}: {}", label, e)))?;
        let num = |j: usize| -> Result<f64> {
            rec.get(j)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| Error::format(format!("{}: row {}: bad `{}` value", label, i + 2, RD_HEADER[j])))
        };
        points.push(RdPoint { bitrate: num(0)?, quality: num(1)? });
    }
    RdCurve::from_unsorted(label, points)
}

pub fn load_rd_csv(path: impl AsRef<Path>) -> Result<RdCurve> {
    let path = path.as_ref();
    read_rd_csv(std::fs::File::open(path)?, &path.display().to_string())
}

/// Write points (in any order) as `bitrate,quality` CSV.
pub fn write_rd_csv(writer: impl Write, points: &[RdPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(RD_HEADER).map_err(csv_err)?;
    for p in points {
        w.write_record([p.bitrate.to_string(), p.quality.to_string()]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(pts: &[(f64, f64)]) -> RdCurve {
        RdCurve::new("c", pts.iter().map(|&(bitrate, quality)| RdPoint { bitrate, quality }).collect()).unwrap()
    }

    const ANCHOR: [(f64, f64); 4] = [(100.0, 30.0), (200.0, 33.0), (400.0, 36.0), (800.0, 39.0)];

    fn scaled(k: f64) -> RdCurve {
        curve(&ANCHOR.map(|(r, q)| (r * k, q)))
    }

    #[test]
    fn trivial_cases() {
        let a = curve(&ANCHOR);
        assert!(bd_rate(&a, &a).unwrap().abs() < 1e-12);
        assert!((bd_rate(&a, &scaled(2.0)).unwrap() - 100.0).abs() < 1e-9);
        assert!((bd_rate(&a, &scaled(0.9)).unwrap() + 10.0).abs() < 1e-9);
    }

    #[test]
    fn validation() {
        let p = |bitrate, quality| RdPoint { bitrate, quality };
        assert!(RdCurve::new("x", vec![p(1.0, 1.0), p(2.0, 2.0), p(3.0, 3.0)]).is_err());
        assert!(RdCurve::new("x", vec![p(1.0, 1.0), p(2.0, 2.0), p(3.0, 2.0), p(4.0, 4.0)]).is_err());
        assert!(RdCurve::new("x", vec![p(0.0, 1.0), p(2.0, 2.0), p(3.0, 3.0), p(4.0, 4.0)]).is_err());
        assert!(RdCurve::new("x", vec![p(1.0, f64::NAN), p(2.0, 2.0), p(3.0, 3.0), p(4.0, 4.0)]).is_err());
        assert!(RdCurve::from_unsorted("x", vec![p(4.0, 4.0), p(2.0, 2.0), p(3.0, 3.0), p(1.0, 1.0)]).is_ok());
    }

    #[test]
    fn disjoint_quality_is_domain_error() {
        let a = curve(&ANCHOR);
        let b = curve(&ANCHOR.map(|(r, q)| (r, q + 20.0)));
        assert!(matches!(bd_rate(&a, &b), Err(Error::Domain(_))));
    }

    #[test]
    fn pchip_reproduces_lines_and_knots() {
        let p = Pchip::new(vec![0.0, 1.0, 3.0, 4.0], vec![1.0, 3.0, 7.0, 9.0]).unwrap();
        for &v in &[0.0, 0.5, 2.2, 4.0] {
            assert!((p.eval(v) - (1.0 + 2.0 * v)).abs() < 1e-12);
        }
        assert!((p.integrate(0.0, 4.0) - 20.0).abs() < 1e-12);
        let q = Pchip::new(vec![0.0, 1.0, 2.5, 3.0], vec![0.0, 2.0, 2.5, 5.0]).unwrap();
        for (x, y) in [(0.0, 0.0), (1.0, 2.0), (2.5, 2.5), (3.0, 5.0)] {
            assert!((q.eval(x) - y).abs() < 1e-12);
        }
    }

    #[test]
    fn pchip_is_monotone_on_monotone_data() {
        let p = Pchip::new(vec![0.0, 1.0, 1.2, 4.0, 5.0], vec![0.0, 0.1, 3.0, 3.1, 8.0]).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=5000 {
            let v = p.eval(i as f64 / 1000.0);
            assert!(v >= prev - 1e-12);
            prev = v;
        }
    }

    #[test]
    fn csv_round_trip() {
        let pts: Vec<RdPoint> = ANCHOR.iter().rev().map(|&(bitrate, quality)| RdPoint { bitrate, quality }).collect();
        let mut buf = Vec::new();
        write_rd_csv(&mut buf, &pts).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("bitrate,quality\n"));
        let c = read_rd_csv(buf.as_slice(), "mem").unwrap();
        assert_eq!(c, RdCurve { label: "mem".into(), points: curve(&ANCHOR).points });
        assert!(read_rd_csv("rate,q\n1,2\n".as_bytes(), "m").is_err());
        assert!(read_rd_csv("bitrate,quality\n1,x\n".as_bytes(), "m").is_err());
    }
}

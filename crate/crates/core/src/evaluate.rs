//! Sequence-level evaluation: per-component quality before and after
//! enhancement, RD curves at the encoder-reported bitrates, and BD-rates.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use crate::bdrate::{bd_rate, write_rd_csv, RdCurve, RdPoint};
use crate::error::{Error, Result};
use crate::manifest::{at_record, read_manifest, ManifestKind, ManifestRecord};
use crate::metrics::{frame_metrics, msssim_db};
use crate::network::{enhance_frame, ParameterStore};
use crate::yuv::{FrameSource, Yuv420Frame, YuvFile};

pub const COMPONENTS: [&str; 3] = ["Y", "U", "V"];
pub const REPORT_HEADER: &str = "sequence,qp,component,psnr_lossy,psnr_enhanced,msssim_lossy,msssim_enhanced";
pub const BD_HEADER: &str = "component,bd_rate_psnr_percent,bd_rate_msssim_percent";
pub const REPORT_FILE: &str = "report.csv";
pub const BD_FILE: &str = "bd_summary.csv";
pub const RD_DIR: &str = "rd";

/// Restores a decoded frame.
pub trait Enhancer: Sync {
    fn enhance(&self, lossy: &Yuv420Frame, qp: u8) -> Result<Yuv420Frame>;
}

impl Enhancer for ParameterStore {
    fn enhance(&self, lossy: &Yuv420Frame, qp: u8) -> Result<Yuv420Frame> {
        enhance_frame(self, lossy, qp)
    }
}

impl<F> Enhancer for F
where
    F: Fn(&Yuv420Frame, u8) -> Result<Yuv420Frame> + Sync,
{
    fn enhance(&self, lossy: &Yuv420Frame, qp: u8) -> Result<Yuv420Frame> {
        self(lossy, qp)
    }
}

/// Mean metrics of one (sequence, QP, component).
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub sequence: String,
    pub qp: u8,
    pub component: usize,
    pub bitrate_kbps: f64,
    pub frames: usize,
    pub psnr_lossy: f64,
    pub psnr_enhanced: f64,
    pub msssim_lossy: f64,
    pub msssim_enhanced: f64,
}

impl EvalRow {
    pub fn psnr_delta(&self) -> f64 {
        self.psnr_enhanced - self.psnr_lossy
    }

    pub fn msssim_delta(&self) -> f64 {
        self.msssim_enhanced - self.msssim_lossy
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.sequence,
            self.qp,
            COMPONENTS[self.component],
            self.psnr_lossy,
            self.psnr_enhanced,
            self.msssim_lossy,
            self.msssim_enhanced
        )
    }
}

/// Anchor (lossy) and test (enhanced) curves of one sequence and component.
#[derive(Clone, Debug)]
pub struct RdPair {
    pub anchor: Vec<RdPoint>,
    pub test: Vec<RdPoint>,
}

/// BD-rates of one sequence and component; `Err` carries why a value could
/// not be computed (too few QPs, non-monotone curve, lossless input).
#[derive(Clone, Debug)]
pub struct SequenceBd {
    pub sequence: String,
    pub component: usize,
    pub psnr: std::result::Result<f64, String>,
    pub msssim: std::result::Result<f64, String>,
}

#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Keyed by (sequence, component), in manifest order.
    pub curves: IndexMap<(String, usize), (RdPair, RdPair)>,
    pub bd: Vec<SequenceBd>,
}

impl EvalReport {
    /// Mean BD-rate over sequences per component, for PSNR and MS-SSIM.
    /// `NaN` when no sequence produced a value.
    pub fn summary(&self) -> [(f64, f64); 3] {
        let mut out = [(f64::NAN, f64::NAN); 3];
        for (c, slot) in out.iter_mut().enumerate() {
            let mean = |f: &dyn Fn(&SequenceBd) -> Option<f64>| {
                let v: Vec<f64> = self.bd.iter().filter(|b| b.component == c).filter_map(f).collect();
                if v.is_empty() {
                    f64::NAN
                } else {
                    v.iter().sum::<f64>() / v.len() as f64
                }
            };
            *slot = (mean(&|b| b.psnr.clone().ok()), mean(&|b| b.msssim.clone().ok()));
        }
        out
    }

    pub fn report_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }

    pub fn bd_csv(&self) -> String {
        let mut s = format!("{BD_HEADER}\n");
        for (c, (p, m)) in self.summary().iter().enumerate() {
            s.push_str(&format!("{},{},{}\n", COMPONENTS[c], p, m));
        }
        s
    }

    /// Write `report.csv`, `bd_summary.csv` and the RD curves under `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir.join(RD_DIR))?;
        let mut written = vec![dir.join(REPORT_FILE), dir.join(BD_FILE)];
        fs::write(&written[0], self.report_csv())?;
        fs::write(&written[1], self.bd_csv())?;
        for ((seq, c), (psnr, msssim)) in &self.curves {
            for (metric, pair) in [("psnr", psnr), ("msssim", msssim)] {
                for (role, pts) in [("anchor", &pair.anchor), ("test", &pair.test)] {
                    let path = dir
                        .join(RD_DIR)
                        .join(format!("{}_{}_{}_{}.csv", seq, COMPONENTS[*c], metric, role));
                    let mut f = fs::File::create(&path)?;
                    write_rd_csv(&mut f, pts)?;
                    f.flush()?;
                    written.push(path);
                }
            }
        }
        Ok(written)
    }
}

/// Mean Y/U/V PSNR and MS-SSIM of lossy and enhanced frames against the
/// lossless sequence.
pub fn evaluate_pair(
    lossy: &dyn FrameSource,
    lossless: &dyn FrameSource,
    qp: u8,
    enhancer: &dyn Enhancer,
) -> Result<([[f64; 4]; 3], usize)> {
    let n = lossy.frame_count();
    if n == 0 || n != lossless.frame_count() {
        return Err(Error::invalid(format!(
            "lossy has {} frames, lossless has {}",
            n,
            lossless.frame_count()
        )));
    }
    // per component: psnr_lossy, psnr_enh, msssim_lossy, msssim_enh
    let mut sums = [[0.0f64; 4]; 3];
    for i in 0..n {
        let (lq, orig) = (lossy.frame(i)?, lossless.frame(i)?);
        let enh = enhancer.enhance(&lq, qp)?;
        let before = frame_metrics(&orig, &lq)?;
        let after = frame_metrics(&orig, &enh)?;
        for c in 0..3 {
            sums[c][0] += before.psnr[c];
            sums[c][1] += after.psnr[c];
            sums[c][2] += before.msssim[c];
            sums[c][3] += after.msssim[c];
        }
    }
    for s in sums.iter_mut() {
        s.iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok((sums, n))
}

fn bd_of(pair: &RdPair, label: &str) -> std::result::Result<f64, String> {
    let anchor = RdCurve::from_unsorted(format!("{label} anchor"), pair.anchor.clone()).map_err(|e| e.to_string())?;
    let test = RdCurve::from_unsorted(format!("{label} test"), pair.test.clone()).map_err(|e| e.to_string())?;
    bd_rate(&anchor, &test).map_err(|e| e.to_string())
}

/// Evaluate every record of a parsed evaluation manifest.
pub fn evaluate_records(records: &[ManifestRecord], manifest_path: &Path, enhancer: &dyn Enhancer) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for rec in records {
        let wrap = |e| at_record(manifest_path, rec, e);
        let bitrate = rec.bitrate_kbps.ok_or_else(|| {
            wrap(Error::invalid("missing bitrate_kbps field"))
        })?;
        let lossy = YuvFile::open(&rec.lossy, rec.width, rec.height).map_err(wrap)?;
        let lossless = YuvFile::open(&rec.lossless, rec.width, rec.height).map_err(wrap)?;
        let (means, frames) = evaluate_pair(&lossy, &lossless, rec.qp, enhancer).map_err(wrap)?;
        let sequence = rec.sequence();
        log::info!("{} qp {}: {} frame(s)", sequence, rec.qp, frames);
        for (c, m) in means.iter().enumerate() {
            report.rows.push(EvalRow {
                sequence: sequence.clone(),
                qp: rec.qp,
                component: c,
                bitrate_kbps: bitrate,
                frames,
                psnr_lossy: m[0],
                psnr_enhanced: m[1],
                msssim_lossy: m[2],
                msssim_enhanced: m[3],
            });
            let entry = report.curves.entry((sequence.clone(), c)).or_insert_with(|| {
                let empty = || RdPair { anchor: vec![], test: vec![] };
                (empty(), empty())
            });
            let pt = |quality| RdPoint { bitrate, quality };
            entry.0.anchor.push(pt(m[0]));
            entry.0.test.push(pt(m[1]));
            entry.1.anchor.push(pt(msssim_db(m[2])));
            entry.1.test.push(pt(msssim_db(m[3])));
        }
    }
    for ((seq, c), (psnr, msssim)) in &report.curves {
        let label = format!("{} {}", seq, COMPONENTS[*c]);
        let bd = SequenceBd {
            sequence: seq.clone(),
            component: *c,
            psnr: bd_of(psnr, &format!("{label} psnr")),
            msssim: bd_of(msssim, &format!("{label} msssim")),
        };
        for r in [&bd.psnr, &bd.msssim] {
            if let Err(e) = r {
                log::warn!("BD-rate unavailable: {}", e);
            }
        }
        report.bd.push(bd);
    }
    Ok(report)
}

/// Read an evaluation manifest and evaluate it.
pub fn evaluate_sequences(manifest: &Path, enhancer: &dyn Enhancer) -> Result<EvalReport> {
    let records = read_manifest(manifest, ManifestKind::Eval)?;
    evaluate_records(&records, manifest, enhancer)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_averages_available_values() {
        let bd = |seq: &str, c, p: std::result::Result<f64, String>| SequenceBd {
            sequence: seq.into(),
            component: c,
            psnr: p.clone(),
            msssim: p,
        };
        let report = EvalReport {
            bd: vec![bd("a", 0, Ok(-2.0)), bd("b", 0, Ok(-4.0)), bd("a", 1, Err("few".into()))],
            ..Default::default()
        };
        let s = report.summary();
        assert_eq!(s[0], (-3.0, -3.0));
        assert!(s[1].0.is_nan() && s[2].1.is_nan());
        assert!(report.bd_csv().starts_with(BD_HEADER));
    }
}

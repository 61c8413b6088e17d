//! Dataset manifests: one space-separated record per line.
//!
//! ```text
//! training:   <lossy> <lossless> <width> <height> <qp>
//! evaluation: <lossy> <lossless> <width> <height> <qp> <bitrate_kbps>
//! ```
//!
//! Blank lines and lines starting with `#` are skipped. Relative paths are
//! resolved against the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::yuv::MAX_QP;

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub lossy: PathBuf,
    pub lossless: PathBuf,
    pub width: usize,
    pub height: usize,
    pub qp: u8,
    /// Present only in evaluation manifests.
    pub bitrate_kbps: Option<f64>,
    /// 1-based line in the manifest, for diagnostics.
    pub line: usize,
}

impl ManifestRecord {
    /// Sequence name: the lossless file's stem.
    pub fn sequence(&self) -> String {
        self.lossless
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ManifestKind {
    Train,
    Eval,
}

impl ManifestKind {
    fn fields(self) -> usize {
        match self {
            ManifestKind::Train => 5,
            ManifestKind::Eval => 6,
        }
    }
}

fn parse_line(fields: &[&str], kind: ManifestKind, base: &Path) -> std::result::Result<ManifestRecord, String> {
    let want = kind.fields();
    if fields.len() < want {
        let missing = match (kind, fields.len()) {
            (ManifestKind::Eval, 5) => "missing bitrate_kbps field".to_string(),
            _ => format!("expected {} fields, found {}", want, fields.len()),
        };
        return Err(missing);
    }
    if fields.len() > want {
        return Err(format!("expected {} fields, found {}", want, fields.len()));
    }
    let dim = |s: &str, what: &str| -> std::result::Result<usize, String> {
        match s.parse::<usize>() {
            Ok(v) if v > 0 && v % 2 == 0 => Ok(v),
            _ => Err(format!("{} `{}` must be a positive even integer", what, s)),
        }
    };
    let width = dim(fields[2], "width")?;
    let height = dim(fields[3], "height")?;
    let qp = match fields[4].parse::<u8>() {
        Ok(q) if q <= MAX_QP => q,
        _ => return Err(format!("qp `{}` must be an integer in [0, {}]", fields[4], MAX_QP)),
    };
    let bitrate_kbps = match kind {
        ManifestKind::Train => None,
        ManifestKind::Eval => match fields[5].parse::<f64>() {
            Ok(b) if b.is_finite() && b > 0.0 => Some(b),
            _ => return Err(format!("bitrate `{}` must be a positive number", fields[5])),
        },
    };
    Ok(ManifestRecord {
        lossy: base.join(fields[0]),
        lossless: base.join(fields[1]),
        width,
        height,
        qp,
        bitrate_kbps,
        line: 0,
    })
}

/// Parse manifest text; `path` is used for error messages and to resolve
/// relative file names.
pub fn parse_manifest(text: &str, path: &Path, kind: ManifestKind) -> Result<Vec<ManifestRecord>> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let mut rec = parse_line(&fields, kind, base).map_err(|message| Error::Manifest {
            path: path.display().to_string(),
            line: i + 1,
            message,
        })?;
        rec.line = i + 1;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::Manifest {
            path: path.display().to_string(),
            line: 0,
            message: "manifest has no records".into(),
        });
    }
    Ok(out)
}

pub fn read_manifest(path: impl AsRef<Path>, kind: ManifestKind) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    parse_manifest(&fs::read_to_string(path)?, path, kind)
}

/// Attach a manifest location to an error raised while using a record.
pub fn at_record(path: &Path, rec: &ManifestRecord, err: Error) -> Error {
    match err {
        e @ Error::Manifest { .. } => e,
        e => Error::Manifest {
            path: path.display().to_string(),
            line: rec.line,
            message: e.to_string(),
        },
    }
}

//! Raw planar 8-bit YUV 4:2:0 I/O, chroma layout conversion, QP
//! conditioning planes and aligned training patch sampling.

use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

pub const MAX_QP: u8 = 63;

/// One 8-bit 4:2:0 frame: full-resolution luma, quarter-area chroma.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Yuv420Frame {
    width: usize,
    height: usize,
    pub y: Vec<u8>,
    pub u: Vec<u8>,
    pub v: Vec<u8>,
}

impl Yuv420Frame {
    pub fn new(width: usize, height: usize, y: Vec<u8>, u: Vec<u8>, v: Vec<u8>) -> Result<Self> {
        check_even(width, height)?;
        let c = (width / 2) * (height / 2);
        ensure!(
            y.len() == width * height && u.len() == c && v.len() == c,
            "plane sizes {}/{}/{} do not match {}x{} 4:2:0",
            y.len(),
            u.len(),
            v.len(),
            width,
            height
        );
        Ok(Self {
            width,
            height,
            y,
            u,
            v,
        })
    }

    pub fn filled(width: usize, height: usize, y: u8, u: u8, v: u8) -> Result<Self> {
        check_even(width, height)?;
        let c = (width / 2) * (height / 2);
        Self::new(width, height, vec![y; width * height], vec![u; c], vec![v; c])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Bytes occupied by one frame on disk.
    pub fn byte_len(width: usize, height: usize) -> usize {
        width * height + 2 * (width / 2) * (height / 2)
    }

    pub fn plane(&self, idx: usize) -> &[u8] {
        match idx {
            0 => &self.y,
            1 => &self.u,
            _ => &self.v,
        }
    }

    pub fn plane_dims(&self, idx: usize) -> (usize, usize) {
        if idx == 0 {
            (self.width, self.height)
        } else {
            (self.width / 2, self.height / 2)
        }
    }
}

fn check_even(width: usize, height: usize) -> Result<()> {
    ensure!(
        width > 0 && height > 0 && width.is_multiple_of(2) && height.is_multiple_of(2),
        "frame dimensions must be positive and even, got {}x{}",
        width,
        height
    );
    Ok(())
}

/// Full-resolution Y, U, V planes in `[0, 1]`, stored as a `[3, H, W]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame444 {
    pub planes: Tensor<f32>,
}

impl Frame444 {
    pub fn new(planes: Tensor<f32>) -> Result<Self> {
        ensure!(
            planes.shape().len() == 3 && planes.shape()[0] == 3,
            "Frame444 expects [3, H, W], got {:?}",
            planes.shape()
        );
        Ok(Self { planes })
    }

    pub fn width(&self) -> usize {
        self.planes.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.planes.shape()[1]
    }

    pub fn component(&self, idx: usize) -> &[f32] {
        let n = self.width() * self.height();
        &self.planes.data()[idx * n..(idx + 1) * n]
    }

    /// `size x size` window starting at `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, size_w: usize, size_h: usize) -> Result<Frame444> {
        let (w, h) = (self.width(), self.height());
        ensure!(
            x + size_w <= w && y + size_h <= h,
            "crop {}x{}+{}+{} exceeds {}x{}",
            size_w,
            size_h,
            x,
            y,
            w,
            h
        );
        let mut data = Vec::with_capacity(3 * size_w * size_h);
        for c in 0..3 {
            let plane = self.component(c);
            for row in y..y + size_h {
                data.extend_from_slice(&plane[row * w + x..row * w + x + size_w]);
            }
        }
        Frame444::new(Tensor::from_vec(&[3, size_h, size_w], data)?)
    }
}

/// Constant conditioning plane holding `qp / 63`.
#[derive(Clone, Debug, PartialEq)]
pub struct QpPlane {
    pub qp: u8,
    pub plane: Tensor<f32>,
}

pub fn qp_level(qp: u8) -> f32 {
    qp as f32 / MAX_QP as f32
}

pub fn make_qp_plane(qp: i64, width: usize, height: usize) -> Result<QpPlane> {
    if !(0..=MAX_QP as i64).contains(&qp) {
        return Err(Error::invalid(format!("qp {} outside [0, {}]", qp, MAX_QP)));
    }
    let qp = qp as u8;
    Ok(QpPlane {
        qp,
        plane: Tensor::full(&[1, height, width], qp_level(qp)),
    })
}

/// Read the `frame_index`-th frame of a headerless planar 4:2:0 file.
pub fn read_yuv420(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    frame_index: usize,
) -> Result<Yuv420Frame> {
    check_even(width, height)?;
    let mut f = File::open(path.as_ref())?;
    read_frame_at(&mut f, path.as_ref(), width, height, frame_index)
}

fn read_frame_at(
    f: &mut File,
    path: &Path,
    width: usize,
    height: usize,
    frame_index: usize,
) -> Result<Yuv420Frame> {
    let frame_len = Yuv420Frame::byte_len(width, height);
    let file_len = f.metadata()?.len();
    let need = (frame_index as u64 + 1) * frame_len as u64;
    if file_len < need {
        return Err(Error::OutOfRange(format!(
            "{}: frame {} needs {} bytes, file has {}",
            path.display(),
            frame_index,
            need,
            file_len
        )));
    }
    f.seek(SeekFrom::Start(frame_index as u64 * frame_len as u64))?;
    let mut buf = vec![0u8; frame_len];
    f.read_exact(&mut buf)?;
    let luma = width * height;
    let chroma = luma / 4;
    let v = buf.split_off(luma + chroma);
    let u = buf.split_off(luma);
    Yuv420Frame::new(width, height, buf, u, v)
}

/// Write one frame (Y, U, V, row-major). Overwrites unless `append`.
pub fn write_yuv420(frame: &Yuv420Frame, path: impl AsRef<Path>, append: bool) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)?;
    f.write_all(&frame.y)?;
    f.write_all(&frame.u)?;
    f.write_all(&frame.v)?;
    Ok(())
}

/// Number of whole frames in a raw 4:2:0 file.
pub fn frame_count(path: impl AsRef<Path>, width: usize, height: usize) -> Result<usize> {
    check_even(width, height)?;
    let len = std::fs::metadata(path)?.len();
    Ok((len / Yuv420Frame::byte_len(width, height) as u64) as usize)
}

/// Nearest-neighbour chroma replication; samples scaled by 1/255.
pub fn upsample_420_to_444(frame: &Yuv420Frame) -> Frame444 {
    let (w, h) = (frame.width, frame.height);
    let n = w * h;
    let mut data = vec![0f32; 3 * n];
    for (o, &s) in data[..n].iter_mut().zip(&frame.y) {
        *o = s as f32 / 255.0;
    }
    let cw = w / 2;
    for (ci, plane) in [&frame.u, &frame.v].into_iter().enumerate() {
        let out = &mut data[(ci + 1) * n..(ci + 2) * n];
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] = plane[(y / 2) * cw + x / 2] as f32 / 255.0;
            }
        }
    }
    Frame444 {
        planes: Tensor::from_vec(&[3, h, w], data).expect("444 shape"),
    }
}

/// Scale to 8 bits with round-half-up and clamping to `[0, 255]`.
pub fn quantize_sample(v: f64) -> u8 {
    let s = (v * 255.0 + 0.5).floor();
    if s.is_nan() {
        0
    } else {
        s.clamp(0.0, 255.0) as u8
    }
}

/// Luma quantized directly; chroma as the 2x2 block mean.
pub fn downsample_444_to_420(frame: &Frame444) -> Result<Yuv420Frame> {
    let (w, h) = (frame.width(), frame.height());
    check_even(w, h)?;
    let y = frame.component(0).iter().map(|&v| quantize_sample(v as f64)).collect();
    let (cw, ch) = (w / 2, h / 2);
    let mut chroma = [vec![0u8; cw * ch], vec![0u8; cw * ch]];
    for (ci, out) in chroma.iter_mut().enumerate() {
        let src = frame.component(ci + 1);
        for cy in 0..ch {
            for cx in 0..cw {
                let (x0, y0) = (2 * cx, 2 * cy);
                let sum = src[y0 * w + x0] as f64
                    + src[y0 * w + x0 + 1] as f64
                    + src[(y0 + 1) * w + x0] as f64
                    + src[(y0 + 1) * w + x0 + 1] as f64;
                out[cy * cw + cx] = quantize_sample(sum / 4.0);
            }
        }
    }
    let [u, v] = chroma;
    Yuv420Frame::new(w, h, y, u, v)
}

/// Random-access provider of frames of one sequence.
pub trait FrameSource {
    fn width(&self) -> usize;
    fn height(&self) -> usize;
    fn frame_count(&self) -> usize;
    fn frame(&self, index: usize) -> Result<Yuv420Frame>;
}

impl FrameSource for Vec<Yuv420Frame> {
    fn width(&self) -> usize {
        self.first().map_or(0, |f| f.width)
    }

    fn height(&self) -> usize {
        self.first().map_or(0, |f| f.height)
    }

    fn frame_count(&self) -> usize {
        self.len()
    }

    fn frame(&self, index: usize) -> Result<Yuv420Frame> {
        self.get(index)
            .cloned()
            .ok_or_else(|| Error::OutOfRange(format!("frame {} of {}", index, self.len())))
    }
}

/// A raw `.yuv` file on disk with known dimensions.
#[derive(Clone, Debug)]
pub struct YuvFile {
    path: PathBuf,
    width: usize,
    height: usize,
    frames: usize,
}

impl YuvFile {
    pub fn open(path: impl Into<PathBuf>, width: usize, height: usize) -> Result<Self> {
        let path = path.into();
        let frames = frame_count(&path, width, height)?;
        Ok(Self {
            path,
            width,
            height,
            frames,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl FrameSource for YuvFile {
    fn width(&self) -> usize {
        self.width
    }

    fn height(&self) -> usize {
        self.height
    }

    fn frame_count(&self) -> usize {
        self.frames
    }

    fn frame(&self, index: usize) -> Result<Yuv420Frame> {
        read_yuv420(&self.path, self.width, self.height, index)
    }
}

/// Co-located crops of a lossy frame and its lossless original.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub lossy: Frame444,
    pub lossless: Frame444,
    pub qp: u8,
    pub source_id: String,
    pub frame_index: usize,
    pub offset: (usize, usize),
}

pub fn sample_patch_pair<R: Rng + ?Sized>(
    lossy: &dyn FrameSource,
    lossless: &dyn FrameSource,
    qp: u8,
    size: usize,
    source_id: &str,
    rng: &mut R,
) -> Result<PatchPair> {
    let (w, h) = (lossy.width(), lossy.height());
    ensure!(
        w == lossless.width() && h == lossless.height(),
        "lossy {}x{} and lossless {}x{} dimensions differ",
        w,
        h,
        lossless.width(),
        lossless.height()
    );
    ensure!(
        lossy.frame_count() == lossless.frame_count() && lossy.frame_count() > 0,
        "frame counts differ or are zero ({} vs {})",
        lossy.frame_count(),
        lossless.frame_count()
    );
    ensure!(
        size > 0 && size <= w.min(h),
        "patch size {} exceeds frame {}x{}",
        size,
        w,
        h
    );
    ensure!(qp <= MAX_QP, "qp {} outside [0, {}]", qp, MAX_QP);
    let frame_index = rng.random_range(0..lossy.frame_count());
    let ox = rng.random_range(0..=w - size);
    let oy = rng.random_range(0..=h - size);
    let lossy_f = upsample_420_to_444(&lossy.frame(frame_index)?);
    let lossless_f = upsample_420_to_444(&lossless.frame(frame_index)?);
    Ok(PatchPair {
        lossy: lossy_f.crop(ox, oy, size, size)?,
        lossless: lossless_f.crop(ox, oy, size, size)?,
        qp,
        source_id: source_id.to_string(),
        frame_index,
        offset: (ox, oy),
    })
}

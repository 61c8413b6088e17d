//! End-to-end restoration network, its parameter store, and whole-frame
//! tiled inference.
//!
//! ```text
//! [Y,U,V,QP] -> conv3x3 -> num_hfb x (rb_per_hfb x RB -> HAFM) -> conv3x3 -> + x_lr
//! ```

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::blocks::{self, conv, conv_specs, Init, ParamNodes, ParamSpec};
use crate::config::ModelConfig;
use crate::error::{ensure, Error, Result};
use crate::fusion;
use crate::graph::{Graph, NodeId};
use crate::tensor::{Real, Tensor};
use crate::yuv::{
    downsample_444_to_420, make_qp_plane, upsample_420_to_444, Frame444, QpPlane, Yuv420Frame,
};

pub const INPUT_CONV: &str = "conv_in";
pub const OUTPUT_CONV: &str = "conv_out";

/// Full parameter table for a configuration, in checkpoint order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let c = cfg.channels;
    let mut v = conv_specs(INPUT_CONV, c, cfg.in_channels, 3);
    for i in 0..cfg.num_hfb {
        for j in 0..cfg.rb_per_hfb {
            v.extend(blocks::residual_block_specs(&format!("hfb{i}.rb{j}"), c));
        }
        v.extend(fusion::hafm_specs(&format!("hfb{i}"), cfg));
    }
    v.extend(conv_specs(OUTPUT_CONV, 3, c, 3));
    v
}

/// Closed-form parameter count.
///
/// Per fusion block with `C` channels, depth-`L` local extractor, `S`
/// transformer blocks of MLP ratio `m`, `R` residual blocks and channel
/// reduction `r`:
///
/// ```text
/// RB    2(9C² + C) + 1
/// LFEM  L(9C² + C + 1)
/// GFEM  (16C² + C) + S(4C + 4C² + 3C + C² + C + 2mC² + mC + C) + (16C² + 16C)
/// SAFM  3(C²/2 + C/2)
/// CAFM  (C²/r + C/r) + 1 + 2(C²/r + C)
/// ```
///
/// plus `9·4·C + C` for the input conv and `27C + 3` for the output conv.
pub fn param_count_closed_form(cfg: &ModelConfig) -> usize {
    let c = cfg.channels;
    let m = cfg.mlp_ratio;
    let r = cfg.cafm_reduction;
    let rb = 2 * (9 * c * c + c) + 1;
    let lfem = cfg.lfem_depth * (9 * c * c + c + 1);
    let swin = 2 * c + (3 * c * c + 3 * c) + (c * c + c) + 2 * c + (m * c * c + m * c) + (m * c * c + c);
    let gfem = (16 * c * c + c) + cfg.n_swin * swin + (16 * c * c + 16 * c);
    let safm = 3 * (c * c / 2 + c / 2);
    let cafm = (c * c / r + c / r) + 1 + 2 * (c * c / r + c);
    let mut hfb = cfg.rb_per_hfb * rb + lfem + gfem;
    if cfg.fusion_mode.uses_spatial() {
        hfb += safm;
    }
    if cfg.fusion_mode.uses_channel() {
        hfb += cafm;
    }
    (9 * cfg.in_channels * c + c) + cfg.num_hfb * hfb + (27 * c + 3)
}

/// Named trainable arrays plus the configuration and training metadata they
/// belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore {
    pub config: ModelConfig,
    pub step: u64,
    pub seed: u64,
    pub arrays: IndexMap<String, Tensor<f32>>,
}

impl ParameterStore {
    /// Fresh parameters drawn from the initialization rule of each spec.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut arrays = IndexMap::new();
        for spec in param_specs(cfg) {
            let n = spec.numel();
            let data = match spec.init {
                Init::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..n)
                        .map(|_| rng.random_range(-bound..bound) as f32)
                        .collect()
                }
                Init::Constant(v) => vec![v as f32; n],
            };
            arrays.insert(spec.name.clone(), Tensor::from_vec(&spec.shape, data)?);
        }
        Ok(Self {
            config: cfg.clone(),
            step: 0,
            seed,
            arrays,
        })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no parameter named `{}`", name)))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<f32>> {
        self.arrays
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("no parameter named `{}`", name)))
    }

    pub fn num_params(&self) -> usize {
        self.arrays.values().map(|t| t.len()).sum()
    }

    /// Zero the output convolution so the network reproduces its input.
    pub fn zero_residual(&mut self) {
        for suffix in ["weight", "bias"] {
            if let Some(t) = self.arrays.get_mut(&format!("{OUTPUT_CONV}.{suffix}")) {
                t.data_mut().fill(0.0);
            }
        }
    }

    /// Check names and shapes against the table derived from `config`.
    pub fn validate(&self) -> Result<()> {
        let specs = param_specs(&self.config);
        for spec in &specs {
            match self.arrays.get(&spec.name) {
                None => {
                    return Err(Error::format(format!("missing array `{}`", spec.name)));
                }
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(Error::format(format!(
                        "array `{}` has shape {:?}, expected {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )));
                }
                _ => {}
            }
        }
        if self.arrays.len() != specs.len() {
            let extra = self
                .arrays
                .keys()
                .find(|k| !specs.iter().any(|s| &s.name == *k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::format(format!("unexpected array `{}`", extra)));
        }
        Ok(())
    }

    /// Register every array as a trainable (or constant) leaf of `g`.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>, trainable: bool) -> ParamNodes {
        let mut p = ParamNodes::default();
        for (name, t) in &self.arrays {
            let v = t.cast::<T>();
            let id = if trainable { g.param(v) } else { g.constant(v) };
            p.insert(name.clone(), id);
        }
        p
    }
}

/// Network body on graph nodes: `x_lr` is `[3, H, W]`, `qp` is `[1, H, W]`.
/// Returns the unclamped `[3, H, W]` reconstruction.
pub fn forward<T: Real>(
    g: &mut Graph<T>,
    p: &ParamNodes,
    cfg: &ModelConfig,
    x_lr: NodeId,
    qp: NodeId,
) -> Result<NodeId> {
    let s = g.shape(x_lr).to_vec();
    ensure!(
        s.len() == 3 && s[0] == 3,
        "forward: input must be [3, H, W], got {:?}",
        s
    );
    ensure!(
        g.shape(qp) == [1, s[1], s[2]],
        "forward: qp plane {:?} does not match input {:?}",
        g.shape(qp),
        s
    );
    let a = cfg.alignment();
    ensure!(
        s[1].is_multiple_of(a) && s[2].is_multiple_of(a),
        "forward: {}x{} input not divisible by {}",
        s[2],
        s[1],
        a
    );
    let input = g.concat(&[x_lr, qp])?;
    let mut f = conv(g, p, INPUT_CONV, input, 1, 1)?;
    for i in 0..cfg.num_hfb {
        let start = g.len();
        for j in 0..cfg.rb_per_hfb {
            f = blocks::residual_block(g, p, &format!("hfb{i}.rb{j}"), f)?;
        }
        f = fusion::hafm(g, p, &format!("hfb{i}"), f, cfg)?;
        // Without gradients only the block output is read again.
        g.release(start, f);
    }
    let residual = conv(g, p, OUTPUT_CONV, f, 1, 1)?;
    g.add(x_lr, residual)
}

/// Inference on one aligned patch; output is not clamped.
pub fn forward_patch(params: &ParameterStore, x_lr: &Frame444, qp: &QpPlane) -> Result<Frame444> {
    let mut g = Graph::<f32>::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(x_lr.planes.clone());
    let q = g.constant(qp.plane.clone());
    let y = forward(&mut g, &p, &params.config, x, q)?;
    Frame444::new(g.value(y).clone())
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Mirror index without repeating the edge sample (`dcb|abcd|cba`).
fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Tiles along one axis as `(start, extent)`, plus the padded length they
/// cover. Tiles advance by `tile - overlap`; the last one shrinks to the
/// smallest aligned extent that still reaches the end.
pub fn tile_layout(len: usize, tile: usize, overlap: usize, align: usize) -> (Vec<(usize, usize)>, usize) {
    if len <= tile {
        let t = round_up(len, align);
        return (vec![(0, t)], t);
    }
    let stride = tile - overlap;
    let n = (len - tile).div_ceil(stride) + 1;
    let tiles: Vec<(usize, usize)> = (0..n)
        .map(|k| {
            let start = k * stride;
            (start, tile.min(round_up(len - start, align)))
        })
        .collect();
    let padded = tiles.iter().map(|&(s, e)| s + e).max().unwrap_or(0);
    (tiles, padded)
}

fn pad_reflect(planes: &Tensor<f32>, ph: usize, pw: usize) -> Tensor<f32> {
    let (c, h, w) = (planes.shape()[0], planes.shape()[1], planes.shape()[2]);
    let mut out = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        for y in 0..ph {
            let sy = reflect(y as isize, h);
            for x in 0..pw {
                out.push(planes.at3(ch, sy, reflect(x as isize, w)));
            }
        }
    }
    Tensor::from_vec(&[c, ph, pw], out).expect("pad shape")
}

/// Enhance a full 4:4:4 frame: reflective padding, overlapping tiles, mean
/// blending, crop, clamp to `[0, 1]`.
pub fn enhance_444(params: &ParameterStore, frame: &Frame444, qp: u8) -> Result<Frame444> {
    let cfg = &params.config;
    cfg.validate()?;
    let (h, w) = (frame.height(), frame.width());
    let align = cfg.alignment();
    let (ys, ph) = tile_layout(h, cfg.tile_size, cfg.tile_overlap, align);
    let (xs, pw) = tile_layout(w, cfg.tile_size, cfg.tile_overlap, align);
    let padded = Frame444::new(pad_reflect(&frame.planes, ph, pw))?;
    let tiles: Vec<((usize, usize), (usize, usize))> = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| (y, x)))
        .collect();
    let outputs: Vec<Result<Frame444>> = tiles
        .par_iter()
        .map(|&((y, th), (x, tw))| {
            let tile = padded.crop(x, y, tw, th)?;
            forward_patch(params, &tile, &make_qp_plane(qp as i64, tw, th)?)
        })
        .collect();
    let mut sum = vec![0f64; 3 * ph * pw];
    let mut count = vec![0u32; ph * pw];
    for (&((oy, th), (ox, tw)), out) in tiles.iter().zip(outputs) {
        let out = out?;
        for ch in 0..3 {
            let plane = out.component(ch);
            for ty in 0..th {
                let row = (ch * ph + oy + ty) * pw + ox;
                for tx in 0..tw {
                    sum[row + tx] += plane[ty * tw + tx] as f64;
                }
            }
        }
        for ty in 0..th {
            for c in &mut count[(oy + ty) * pw + ox..(oy + ty) * pw + ox + tw] {
                *c += 1;
            }
        }
    }
    let mut data = Vec::with_capacity(3 * h * w);
    for ch in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let k = y * pw + x;
                let v = sum[ch * ph * pw + k] / count[k] as f64;
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Frame444::new(Tensor::from_vec(&[3, h, w], data)?)
}

/// Whole-frame enhancement of a decoded 4:2:0 frame.
pub fn enhance_frame(params: &ParameterStore, frame: &Yuv420Frame, qp: u8) -> Result<Yuv420Frame> {
    let f = upsample_420_to_444(frame);
    downsample_444_to_420(&enhance_444(params, &f, qp)?)
}

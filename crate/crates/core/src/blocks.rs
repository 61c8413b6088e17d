//! Learnable building blocks: residual blocks, the convolutional local
//! extractor, the windowed-attention global extractor and its pieces, pixel
//! shuffle, and the pooled query compression used by spatial fusion.
//!
//! Feature maps are `[C, H, W]` graph nodes; token grids are `[windows,
//! tokens, C]`. Each block reads its weights by name from [`ParamNodes`]
//! under a caller-supplied prefix and declares them through a `*_specs`
//! function so the full parameter table is derivable from the config.

use std::collections::HashMap;
use std::rc::Rc;

use crate::config::{ModelConfig, PATCH};
use crate::error::{ensure, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Real;

/// Initialization rule for one parameter array.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    fn new(name: String, shape: Vec<usize>, init: Init) -> Self {
        Self { name, shape, init }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub const PRELU_INIT: f64 = 0.25;

/// Name → graph node lookup for the parameters of one forward pass.
#[derive(Default, Clone, Debug)]
pub struct ParamNodes {
    map: HashMap<String, NodeId>,
}

impl ParamNodes {
    pub fn insert(&mut self, name: impl Into<String>, id: NodeId) {
        self.map.insert(name.into(), id);
    }

    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing parameter `{}`", name)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.map.iter()
    }
}

pub fn conv_specs(prefix: &str, c_out: usize, c_in: usize, k: usize) -> Vec<ParamSpec> {
    let fan_in = c_in * k * k;
    vec![
        ParamSpec::new(format!("{prefix}.weight"), vec![c_out, c_in, k, k], Init::FanIn(fan_in)),
        ParamSpec::new(format!("{prefix}.bias"), vec![c_out], Init::FanIn(fan_in)),
    ]
}

pub fn linear_specs(prefix: &str, n_out: usize, n_in: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.weight"), vec![n_out, n_in], Init::FanIn(n_in)),
        ParamSpec::new(format!("{prefix}.bias"), vec![n_out], Init::FanIn(n_in)),
    ]
}

pub fn prelu_spec(name: String) -> ParamSpec {
    ParamSpec::new(name, vec![1], Init::Constant(PRELU_INIT))
}

fn norm_specs(prefix: &str, c: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.weight"), vec![c], Init::Constant(1.0)),
        ParamSpec::new(format!("{prefix}.bias"), vec![c], Init::Constant(0.0)),
    ]
}

pub fn conv<T: Real>(
    g: &mut Graph<T>,
    p: &ParamNodes,
    prefix: &str,
    x: NodeId,
    stride: usize,
    pad: usize,
) -> Result<NodeId> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    g.conv2d(x, w, Some(b), stride, pad)
}

pub fn linear<T: Real>(g: &mut Graph<T>, p: &ParamNodes, prefix: &str, x: NodeId) -> Result<NodeId> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    g.linear(x, w, Some(b))
}

fn channels_of<T: Real>(g: &Graph<T>, x: NodeId) -> Result<(usize, usize, usize)> {
    let s = g.shape(x);
    ensure!(s.len() == 3, "feature map must be [C, H, W], got {:?}", s);
    Ok((s[0], s[1], s[2]))
}

// ---------------------------------------------------------------- residual

pub fn residual_block_specs(prefix: &str, c: usize) -> Vec<ParamSpec> {
    let mut v = conv_specs(&format!("{prefix}.conv1"), c, c, 3);
    v.push(prelu_spec(format!("{prefix}.prelu")));
    v.extend(conv_specs(&format!("{prefix}.conv2"), c, c, 3));
    v
}

/// `x + conv2(prelu(conv1(x)))`, 3x3 kernels with zero padding.
pub fn residual_block<T: Real>(
    g: &mut Graph<T>,
    p: &ParamNodes,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let h = conv(g, p, &format!("{prefix}.conv1"), x, 1, 1)?;
    let h = g.prelu(h, p.get(&format!("{prefix}.prelu"))?)?;
    let h = conv(g, p, &format!("{prefix}.conv2"), h, 1, 1)?;
    g.add(x, h)
}

// -------------------------------------------------------------------- lfem

pub fn lfem_specs(prefix: &str, c: usize, depth: usize) -> Vec<ParamSpec> {
    (0..depth)
        .flat_map(|i| {
            let mut v = conv_specs(&format!("{prefix}.conv{i}"), c, c, 3);
            v.push(prelu_spec(format!("{prefix}.prelu{i}")));
            v
        })
        .collect()
}

/// `depth` cascaded 3x3 conv + PReLU layers.
pub fn lfem<T: Real>(
    g: &mut Graph<T>,
    p: &ParamNodes,
    prefix: &str,
    x: NodeId,
    depth: usize,
) -> Result<NodeId> {
    ensure!(depth >= 1, "lfem depth must be at least 1");
    let mut h = x;
    for i in 0..depth {
        h = conv(g, p, &format!("{prefix}.conv{i}"), h, 1, 1)?;
        h = g.prelu(h, p.get(&format!("{prefix}.prelu{i}"))?)?;
    }
    Ok(h)
}

// ------------------------------------------------------------ token grids

/// Layout of a windowed token grid over a `grid_h x grid_w` patch grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGeometry {
    pub channels: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub window: usize,
}

impl WindowGeometry {
    pub fn new(channels: usize, grid_h: usize, grid_w: usize, window: usize) -> Result<Self> {
        ensure!(
            window > 0 && grid_h.is_multiple_of(window) && grid_w.is_multiple_of(window),
            "patch grid {}x{} not divisible into {}x{} windows",
            grid_h,
            grid_w,
            window,
            window
        );
        Ok(Self {
            channels,
            grid_h,
            grid_w,
            window,
        })
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }

    pub fn n_windows(&self) -> usize {
        (self.grid_h / self.window) * (self.grid_w / self.window)
    }

    pub fn token_shape(&self) -> [usize; 3] {
        [self.n_windows(), self.tokens_per_window(), self.channels]
    }

    /// For each token-grid element, the flat index into a `[C, gh, gw]`
    /// patch grid cyclically shifted by `shift` (`out[i] = grid[i + shift]`).
    pub fn partition_index(&self, shift: usize) -> Vec<usize> {
        let (gh, gw, ws, c) = (self.grid_h, self.grid_w, self.window, self.channels);
        let wins_x = gw / ws;
        let mut idx = Vec::with_capacity(gh * gw * c);
        for win in 0..self.n_windows() {
            let (wy, wx) = (win / wins_x, win % wins_x);
            for t in 0..ws * ws {
                let y = (wy * ws + t / ws + shift) % gh;
                let x = (wx * ws + t % ws + shift) % gw;
                for ch in 0..c {
                    idx.push((ch * gh + y) * gw + x);
                }
            }
        }
        idx
    }
}

pub(crate) fn invert(index: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; index.len()];
    for (i, &j) in index.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

/// Windowed tokens `[windows, tokens, C]` together with their geometry.
#[derive(Clone, Copy, Debug)]
pub struct TokenGrid {
    pub node: NodeId,
    pub geom: WindowGeometry,
}

/// Split a `[C, gh, gw]` patch grid into windows.
pub fn window_partition<T: Real>(
    g: &mut Graph<T>,
    grid: NodeId,
    window: usize,
) -> Result<TokenGrid> {
    let (c, gh, gw) = channels_of(g, grid)?;
    let geom = WindowGeometry::new(c, gh, gw, window)?;
    let node = g.gather(grid, geom.partition_index(0).into(), &geom.token_shape())?;
    Ok(TokenGrid { node, geom })
}

/// Reassemble windows into the `[C, gh, gw]` patch grid.
pub fn window_merge<T: Real>(g: &mut Graph<T>, tokens: &TokenGrid) -> Result<NodeId> {
    let geom = tokens.geom;
    let inv = invert(&geom.partition_index(0));
    g.gather(tokens.node, inv.into(), &[geom.channels, geom.grid_h, geom.grid_w])
}

pub fn patch_embed_specs(prefix: &str, c: usize) -> Vec<ParamSpec> {
    conv_specs(prefix, c, c, PATCH)
}

/// 4x4 stride-4 convolution followed by window partitioning.
pub fn patch_embed<T: Real>(
    g: &mut Graph<T>,
    p: &ParamNodes,
    prefix: &str,
    x: NodeId,
    window: usize,
) -> Result<TokenGrid> {
    let (_, h, w) = channels_of(g, x)?;
    ensure!(
        h % (PATCH * window) == 0 && w % (PATCH * window) == 0,
        "patch_embed: {}x{} input not divisible by {}",
        w,
        h,
        PATCH * window
    );
    let grid = conv(g, p, prefix, x, PATCH, 0)?;
    window_partition(g, grid, window)
}

// --------------------------------------------------------------------- msa

pub fn msa_specs(prefix: &str, c: usize) -> Vec<ParamSpec> {
    let mut v = linear_specs(&format!("{prefix}.qkv"), 3 * c, c);
    v.extend(linear_specs(&format!("{prefix}.proj"), c, c));
    v
}

pub struct MsaOutput {
    pub tokens: NodeId,
    /// Post-softmax weights `[windows * heads, T, T]`.
    pub attention: NodeId,
}

/// Per-window multi-head self-attention over `[windows, T, C]` tokens.
pub fn msa<T: Real>(
    g: &mut Graph<T>,
    p: &ParamNodes,
    prefix: &str,
    tokens: NodeId,
    heads: usize,
) -> Result<MsaOutput> {
    let s = g.shape(tokens).to_vec();
    ensure!(s.len() == 3, "msa: tokens must be [windows, T, C], got {:?}", s);
    let (nw, t, c) = (s[0], s[1], s[2]);
    ensure!(
        heads > 0 && c % heads == 0,
        "msa: {} channels not divisible by {} heads",
        c,
        heads
    );
    let d = c / heads;
    let qkv = linear(g, p, &format!("{prefix}.qkv"), tokens)?;
    let head_index = |part: usize| -> Rc<[usize]> {
        let mut idx = Vec::with_capacity(nw * t * c);
        for w in 0..nw {
            for h in 0..heads {
                for ti in 0..t {
                    let base = (w * t + ti) * 3 * c + part * c + h * d;
                    idx.extend(base..base + d);
                }
            }
        }
        idx.into()
    };
    let split = [nw * heads, t, d];
    let q = g.gather(qkv, head_index(0), &split)?;
    let k = g.gather(qkv, head_index(1), &split)?;
    let v = g.gather(qkv, head_index(2), &split)?;
    let scores = g.batch_matmul(q, k, true)?;
    let scores = g.scale(scores, T::c(1.0 / (d as f64).sqrt()));
    let attention = g.softmax_rows(scores);
    let out = g.batch_matmul(attention, v, false)?;
    let mut merge = Vec::with_capacity(nw * t * c);
    for w in 0..nw {
        for ti in 0..t {
            for h in 0..heads {
                let base = ((w * heads + h) * t + ti) * d;
                merge.extend(base..base + d);
            }
        }
    }
    let merged = g.gather(out, merge.into(), &[nw, t, c])?;
    let tokens = linear(g, p, &format!("{prefix}.proj"), merged)?;
    Ok(MsaOutput { tokens, attention })
}

// -------------------------------------------------------------------- swin

pub fn swin_block_specs(prefix: &str, c: usize, mlp_ratio: usize) -> Vec<ParamSpec> {
    let mut v = norm_specs(&format!("{prefix}.norm1"), c);
    v.extend(msa_specs(&format!("{prefix}.attn"), c));
    v.extend(norm_specs(&format!("{prefix}.norm2"), c));
    v.extend(linear_specs(&format!("{prefix}.mlp.fc1"), mlp_ratio * c, c));
    v.extend(linear_specs(&format!("{prefix}.mlp.fc2"), c, mlp_ratio * c));
    v
}

/// Token permutation mapping the unshifted window layout to the layout
/// obtained after cyclically shifting the patch grid by `shift`.
pub fn shift_index(geom: &WindowGeometry, shift: usize) -> Vec<usize> {
    let base_inv = invert(&geom.partition_index(0));
    geom.partition_index(shift)
        .into_iter()
        .map(|k| base_inv[k])
        .collect()
}

/// Pre-norm transformer block: `x + MSA(LN(x))`, then `+ MLP(LN(.))`.
/// With `shifted`, attention runs on windows of the grid rolled by half a
/// window.
pub fn swin_block<T: Real>(
    g: &mut Graph<T>,
    p: &ParamNodes,
    prefix: &str,
    tokens: &TokenGrid,
    heads: usize,
    shifted: bool,
) -> Result<TokenGrid> {
    let geom = tokens.geom;
    let x = tokens.node;
    let h = g.layer_norm(
        x,
        p.get(&format!("{prefix}.norm1.weight"))?,
        p.get(&format!("{prefix}.norm1.bias"))?,
    )?;
    let shift = geom.window / 2;
    let shape = geom.token_shape();
    let shifting = shifted && shift > 0;
    let (h, back) = if shifting {
        let fwd = shift_index(&geom, shift);
        let back = invert(&fwd);
        (g.gather(h, fwd.into(), &shape)?, Some(back))
    } else {
        (h, None)
    };
    let mut a = msa(g, p, &format!("{prefix}.attn"), h, heads)?.tokens;
    if let Some(back) = back {
        a = g.gather(a, back.into(), &shape)?;
    }
    let x = g.add(x, a)?;
    let h = g.layer_norm(
        x,
        p.get(&format!("{prefix}.norm2.weight"))?,
        p.get(&format!("{prefix}.norm2.bias"))?,
    )?;
    let h = linear(g, p, &format!("{prefix}.mlp.fc1"), h)?;
    let h = g.gelu(h);
    let h = linear(g, p, &format!("{prefix}.mlp.fc2"), h)?;
    let node = g.add(x, h)?;
    Ok(TokenGrid { node, geom })
}

// ----------------------------------------------------------- pixel shuffle

fn shuffle_index(c: usize, h: usize, w: usize, r: usize) -> Vec<usize> {
    // output [c, h*r, w*r] <- input [c*r*r, h, w]
    let (oh, ow) = (h * r, w * r);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let src_c = ch * r * r + (y % r) * r + (x % r);
                idx.push((src_c * h + y / r) * w + x / r);
            }
        }
    }
    idx
}

/// `[r²C, h, w] -> [C, h·r, w·r]`; input channel `c·r² + dy·r + dx` lands at
/// offset `(dy, dx)` of each output cell.
pub fn pixel_shuffle<T: Real>(g: &mut Graph<T>, x: NodeId, r: usize) -> Result<NodeId> {
    let (c, h, w) = channels_of(g, x)?;
    ensure!(
        r > 0 && c % (r * r) == 0,
        "pixel_shuffle: {} channels not divisible by {}",
        c,
        r * r
    );
    let oc = c / (r * r);
    g.gather(x, shuffle_index(oc, h, w, r).into(), &[oc, h * r, w * r])
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Real>(g: &mut Graph<T>, x: NodeId, r: usize) -> Result<NodeId> {
    let (c, h, w) = channels_of(g, x)?;
    ensure!(
        r > 0 && h % r == 0 && w % r == 0,
        "pixel_unshuffle: {}x{} not divisible by {}",
        w,
        h,
        r
    );
    let inv = invert(&shuffle_index(c, h / r, w / r, r));
    g.gather(x, inv.into(), &[c * r * r, h / r, w / r])
}

// -------------------------------------------------------------------- gfem

pub fn gfem_specs(prefix: &str, cfg: &ModelConfig) -> Vec<ParamSpec> {
    let c = cfg.channels;
    let mut v = patch_embed_specs(&format!("{prefix}.embed"), c);
    for b in 0..cfg.n_swin {
        v.extend(swin_block_specs(&format!("{prefix}.swin{b}"), c, cfg.mlp_ratio));
    }
    v.extend(linear_specs(&format!("{prefix}.expand"), PATCH * PATCH * c, c));
    v
}

/// Global branch: patch embedding, `n_swin` transformer blocks (alternating
/// regular / shifted windows), per-token linear expansion `C -> 16C`, and a
/// 4x pixel shuffle back to the input resolution.
pub fn gfem<T: Real>(
    g: &mut Graph<T>,
    p: &ParamNodes,
    prefix: &str,
    x: NodeId,
    cfg: &ModelConfig,
) -> Result<NodeId> {
    let (c, h, w) = channels_of(g, x)?;
    let mut tokens = patch_embed(g, p, &format!("{prefix}.embed"), x, cfg.window_side)?;
    for b in 0..cfg.n_swin {
        let shifted = cfg.shifted_windows && b % 2 == 1;
        tokens = swin_block(g, p, &format!("{prefix}.swin{b}"), &tokens, cfg.heads, shifted)?;
    }
    let geom = tokens.geom;
    let (gh, gw) = (geom.grid_h, geom.grid_w);
    // windows -> grid-ordered token rows [gh*gw, C]
    let part = geom.partition_index(0);
    let mut rows = vec![0; part.len()];
    for (i, &k) in part.iter().enumerate() {
        let (ch, pos) = (k / (gh * gw), k % (gh * gw));
        rows[pos * c + ch] = i;
    }
    let rows = g.gather(tokens.node, rows.into(), &[gh * gw, c])?;
    let expanded = linear(g, p, &format!("{prefix}.expand"), rows)?;
    // Transpose to [16C, gh, gw] and pixel-shuffle in one pass: output
    // (ch, y, x) reads expanded row (y/4, x/4), column ch*16 + (y%4)*4 + x%4.
    let e = PATCH * PATCH * c;
    let mut index = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            let row = (y / PATCH) * gw;
            let sub = ch * PATCH * PATCH + (y % PATCH) * PATCH;
            for x in 0..w {
                index.push((row + x / PATCH) * e + sub + x % PATCH);
            }
        }
    }
    let out = g.gather(expanded, index.into(), &[c, h, w])?;
    debug_assert_eq!(g.shape(out), [c, h, w]);
    Ok(out)
}

// -------------------------------------------------------------------- psab

/// Global average pool of `[C/2, H, W]` query features to a `[1, C/2]` row,
/// softmax-normalised.
pub fn psab<T: Real>(g: &mut Graph<T>, qm: NodeId) -> Result<NodeId> {
    let (c, _, _) = channels_of(g, qm)?;
    let pooled = g.global_avg_pool(qm);
    let row = g.reshape(pooled, &[1, c])?;
    Ok(g.softmax_rows(row))
}

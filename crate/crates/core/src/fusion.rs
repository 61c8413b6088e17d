//! Attention-weighted fusion of the local (`f_lf`) and global (`f_gf`)
//! feature branches.
//!
//! * spatial fusion: one `[H, W]` weight map per branch, each a softmax over
//!   all positions of the correlation between a pooled branch query and keys
//!   of the summed features;
//! * channel fusion: one `[C]` weight vector per branch, normalised by a
//!   two-way softmax across the branches for every channel;
//! * hybrid fusion: both weights multiplied onto their branch, then summed.

use crate::blocks::{self, conv, conv_specs, lfem, linear, linear_specs, prelu_spec, psab, ParamNodes, ParamSpec};
use crate::config::{FusionMode, ModelConfig};
use crate::error::{ensure, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Real, Tensor};

/// Per-position branch weights, each `[H, W]` and summing to one.
#[derive(Clone, Copy, Debug)]
pub struct SpatialWeights {
    pub lf: NodeId,
    pub gf: NodeId,
}

/// Per-channel branch weights, each `[C]`; `lf[c] + gf[c] = 1`.
#[derive(Clone, Copy, Debug)]
pub struct ChannelWeights {
    pub lf: NodeId,
    pub gf: NodeId,
}

pub fn safm_specs(prefix: &str, c: usize) -> Vec<ParamSpec> {
    let mut v = conv_specs(&format!("{prefix}.query_lf"), c / 2, c, 1);
    v.extend(conv_specs(&format!("{prefix}.query_gf"), c / 2, c, 1));
    v.extend(conv_specs(&format!("{prefix}.key"), c / 2, c, 1));
    v
}

pub fn cafm_specs(prefix: &str, c: usize, reduction: usize) -> Vec<ParamSpec> {
    let hidden = c / reduction;
    let mut v = linear_specs(&format!("{prefix}.squeeze"), hidden, c);
    v.push(prelu_spec(format!("{prefix}.prelu")));
    v.extend(linear_specs(&format!("{prefix}.expand_lf"), c, hidden));
    v.extend(linear_specs(&format!("{prefix}.expand_gf"), c, hidden));
    v
}

fn same_shape<T: Real>(g: &Graph<T>, a: NodeId, b: NodeId) -> Result<(usize, usize, usize)> {
    let s = g.shape(a);
    ensure!(
        s.len() == 3 && s == g.shape(b),
        "fusion branches must share a [C, H, W] shape, got {:?} and {:?}",
        s,
        g.shape(b)
    );
    Ok((s[0], s[1], s[2]))
}

/// Spatial attention weights for the two branches.
pub fn safm<T: Real>(
    g: &mut Graph<T>,
    p: &ParamNodes,
    prefix: &str,
    f_lf: NodeId,
    f_gf: NodeId,
) -> Result<SpatialWeights> {
    let (c, h, w) = same_shape(g, f_lf, f_gf)?;
    ensure!(c % 2 == 0, "safm: channel count {} must be even", c);
    let q_lf = conv(g, p, &format!("{prefix}.query_lf"), f_lf, 1, 0)?;
    let q_gf = conv(g, p, &format!("{prefix}.query_gf"), f_gf, 1, 0)?;
    let f_cf = g.add(f_lf, f_gf)?;
    let km = conv(g, p, &format!("{prefix}.key"), f_cf, 1, 0)?;
    // [C/2, H*W]: row-major over positions, i.e. the transposed flattened key
    let km = g.reshape(km, &[1, c / 2, h * w])?;
    let mut branch = |q: NodeId| -> Result<NodeId> {
        let query = psab(g, q)?;
        let query = g.reshape(query, &[1, 1, c / 2])?;
        let logits = g.batch_matmul(query, km, false)?;
        let logits = g.reshape(logits, &[1, h * w])?;
        let weights = g.softmax_rows(logits);
        g.reshape(weights, &[h, w])
    };
    let lf = branch(q_lf)?;
    let gf = branch(q_gf)?;
    Ok(SpatialWeights { lf, gf })
}

/// Channel attention weights for the two branches.
pub fn cafm<T: Real>(
    g: &mut Graph<T>,
    p: &ParamNodes,
    prefix: &str,
    f_lf: NodeId,
    f_gf: NodeId,
) -> Result<ChannelWeights> {
    let (c, _, _) = same_shape(g, f_lf, f_gf)?;
    let f_if = g.add(f_lf, f_gf)?;
    let pooled = g.global_avg_pool(f_if);
    let s = g.reshape(pooled, &[1, c])?;
    let z = linear(g, p, &format!("{prefix}.squeeze"), s)?;
    let z = g.prelu(z, p.get(&format!("{prefix}.prelu"))?)?;
    let l_lf = linear(g, p, &format!("{prefix}.expand_lf"), z)?;
    let l_gf = linear(g, p, &format!("{prefix}.expand_gf"), z)?;
    // [2, C] -> [C, 2], softmax across the two branches per channel
    let stacked = g.concat(&[l_lf, l_gf])?;
    let pairs: Vec<usize> = (0..c).flat_map(|ch| [ch, c + ch]).collect();
    let pairs = g.gather(stacked, pairs.into(), &[c, 2])?;
    let weights = g.softmax_rows(pairs);
    let lf = g.gather(weights, (0..c).map(|ch| 2 * ch).collect::<Vec<_>>().into(), &[c])?;
    let gf = g.gather(weights, (0..c).map(|ch| 2 * ch + 1).collect::<Vec<_>>().into(), &[c])?;
    Ok(ChannelWeights { lf, gf })
}

fn spatial_weighted<T: Real>(g: &mut Graph<T>, f: NodeId, m: NodeId) -> Result<NodeId> {
    g.scale_spatial(f, m)
}

/// `cw.lf ⊙ (sw.lf ⊙ f_lf) + cw.gf ⊙ (sw.gf ⊙ f_gf)`.
pub fn fuse_hybrid<T: Real>(
    g: &mut Graph<T>,
    f_lf: NodeId,
    f_gf: NodeId,
    sw: SpatialWeights,
    cw: ChannelWeights,
) -> Result<NodeId> {
    same_shape(g, f_lf, f_gf)?;
    let a = spatial_weighted(g, f_lf, sw.lf)?;
    let a = g.scale_channels(a, cw.lf)?;
    let b = spatial_weighted(g, f_gf, sw.gf)?;
    let b = g.scale_channels(b, cw.gf)?;
    g.add(a, b)
}

/// Same value as [`fuse_hybrid`], computed by first materialising the
/// combined `[C, H, W]` weights `W^{CS} = W^C ⊙ W^S` per branch.
pub fn fuse_hybrid_factored<T: Real>(
    g: &mut Graph<T>,
    f_lf: NodeId,
    f_gf: NodeId,
    sw: SpatialWeights,
    cw: ChannelWeights,
) -> Result<NodeId> {
    let (c, h, w) = same_shape(g, f_lf, f_gf)?;
    let mut combined = |s: NodeId, ch: NodeId| -> Result<NodeId> {
        let ones = g.constant(Tensor::full(&[c, h, w], T::one()));
        let wc = g.scale_channels(ones, ch)?;
        g.scale_spatial(wc, s)
    };
    let w_lf = combined(sw.lf, cw.lf)?;
    let w_gf = combined(sw.gf, cw.gf)?;
    let a = g.mul(w_lf, f_lf)?;
    let b = g.mul(w_gf, f_gf)?;
    g.add(a, b)
}

/// `sw.lf ⊙ f_lf + sw.gf ⊙ f_gf`.
pub fn fuse_spatial<T: Real>(
    g: &mut Graph<T>,
    f_lf: NodeId,
    f_gf: NodeId,
    sw: SpatialWeights,
) -> Result<NodeId> {
    same_shape(g, f_lf, f_gf)?;
    let a = spatial_weighted(g, f_lf, sw.lf)?;
    let b = spatial_weighted(g, f_gf, sw.gf)?;
    g.add(a, b)
}

/// `cw.lf ⊙ f_lf + cw.gf ⊙ f_gf`.
pub fn fuse_channel<T: Real>(
    g: &mut Graph<T>,
    f_lf: NodeId,
    f_gf: NodeId,
    cw: ChannelWeights,
) -> Result<NodeId> {
    same_shape(g, f_lf, f_gf)?;
    let a = g.scale_channels(f_lf, cw.lf)?;
    let b = g.scale_channels(f_gf, cw.gf)?;
    g.add(a, b)
}

/// Channel-fused plus spatially-fused features, computed independently.
pub fn fuse_parallel<T: Real>(
    g: &mut Graph<T>,
    f_lf: NodeId,
    f_gf: NodeId,
    sw: SpatialWeights,
    cw: ChannelWeights,
) -> Result<NodeId> {
    let ch = fuse_channel(g, f_lf, f_gf, cw)?;
    let sp = fuse_spatial(g, f_lf, f_gf, sw)?;
    g.add(ch, sp)
}

pub fn hafm_specs(prefix: &str, cfg: &ModelConfig) -> Vec<ParamSpec> {
    let c = cfg.channels;
    let mut v = blocks::lfem_specs(&format!("{prefix}.lfem"), c, cfg.lfem_depth);
    v.extend(blocks::gfem_specs(&format!("{prefix}.gfem"), cfg));
    if cfg.fusion_mode.uses_spatial() {
        v.extend(safm_specs(&format!("{prefix}.safm"), c));
    }
    if cfg.fusion_mode.uses_channel() {
        v.extend(cafm_specs(&format!("{prefix}.cafm"), c, cfg.cafm_reduction));
    }
    v
}

/// Spatial weights as consumed by fusion: the raw softmax maps, or scaled
/// by `H·W` when `rescale_spatial` is set.
fn spatial_for_fusion<T: Real>(
    g: &mut Graph<T>,
    sw: SpatialWeights,
    rescale: bool,
) -> SpatialWeights {
    if !rescale {
        return sw;
    }
    let n = g.value(sw.lf).len() as f64;
    SpatialWeights {
        lf: g.scale(sw.lf, T::c(n)),
        gf: g.scale(sw.gf, T::c(n)),
    }
}

/// Fuse pre-computed branch features according to `cfg.fusion_mode`.
pub fn fuse_branches<T: Real>(
    g: &mut Graph<T>,
    p: &ParamNodes,
    prefix: &str,
    f_lf: NodeId,
    f_gf: NodeId,
    cfg: &ModelConfig,
) -> Result<NodeId> {
    let safm_p = format!("{prefix}.safm");
    let cafm_p = format!("{prefix}.cafm");
    match cfg.fusion_mode {
        FusionMode::Hybrid => {
            let sw = safm(g, p, &safm_p, f_lf, f_gf)?;
            let sw = spatial_for_fusion(g, sw, cfg.rescale_spatial);
            let cw = cafm(g, p, &cafm_p, f_lf, f_gf)?;
            fuse_hybrid(g, f_lf, f_gf, sw, cw)
        }
        FusionMode::Sequential => {
            let cw = cafm(g, p, &cafm_p, f_lf, f_gf)?;
            let a = g.scale_channels(f_lf, cw.lf)?;
            let b = g.scale_channels(f_gf, cw.gf)?;
            let sw = safm(g, p, &safm_p, a, b)?;
            let sw = spatial_for_fusion(g, sw, cfg.rescale_spatial);
            fuse_spatial(g, a, b, sw)
        }
        FusionMode::Parallel => {
            let sw = safm(g, p, &safm_p, f_lf, f_gf)?;
            let sw = spatial_for_fusion(g, sw, cfg.rescale_spatial);
            let cw = cafm(g, p, &cafm_p, f_lf, f_gf)?;
            fuse_parallel(g, f_lf, f_gf, sw, cw)
        }
        FusionMode::SpatialOnly => {
            let sw = safm(g, p, &safm_p, f_lf, f_gf)?;
            let sw = spatial_for_fusion(g, sw, cfg.rescale_spatial);
            fuse_spatial(g, f_lf, f_gf, sw)
        }
        FusionMode::ChannelOnly => {
            let cw = cafm(g, p, &cafm_p, f_lf, f_gf)?;
            fuse_channel(g, f_lf, f_gf, cw)
        }
    }
}

/// Local and global extraction followed by attention fusion.
pub fn hafm<T: Real>(
    g: &mut Graph<T>,
    p: &ParamNodes,
    prefix: &str,
    f_in: NodeId,
    cfg: &ModelConfig,
) -> Result<NodeId> {
    let f_lf = lfem(g, p, &format!("{prefix}.lfem"), f_in, cfg.lfem_depth)?;
    let f_gf = blocks::gfem(g, p, &format!("{prefix}.gfem"), f_in, cfg)?;
    fuse_branches(g, p, prefix, f_lf, f_gf, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    fn bind(g: &mut Graph<f64>, specs: &[ParamSpec], fill: impl Fn(&ParamSpec) -> Tensor<f64>) -> ParamNodes {
        let mut p = ParamNodes::default();
        for s in specs {
            let id = g.param(fill(s));
            p.insert(s.name.clone(), id);
        }
        p
    }

    #[test]
    fn safm_constant_keys_give_uniform_maps() {
        let mut g = Graph::new();
        let p = bind(&mut g, &safm_specs("s", 4), |s| Tensor::full(&s.shape, 0.3));
        let a = g.constant(Tensor::full(&[4, 3, 2], 1.5));
        let b = g.constant(Tensor::full(&[4, 3, 2], -0.5));
        let sw = safm(&mut g, &p, "s", a, b).unwrap();
        for m in [sw.lf, sw.gf] {
            assert_eq!(g.shape(m), &[3, 2]);
            assert!(g.value(m).data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
        }
    }

    #[test]
    fn safm_hand_evaluated_2x2x2() {
        // query_lf = identity (keeps channel 0), query_gf keeps channel 1,
        // key = sum of both channels; C/2 = 1 so the pooled query softmax is 1.
        let mut g = Graph::new();
        let p = bind(&mut g, &safm_specs("s", 2), |s| {
            let mut v = Tensor::zeros(&s.shape);
            match s.name.as_str() {
                "s.query_lf.weight" => v.data_mut()[0] = 1.0,
                "s.query_gf.weight" => v.data_mut()[1] = 1.0,
                "s.key.weight" => v.data_mut().fill(1.0),
                "s.key.bias" => v.data_mut()[0] = 0.5,
                _ => {}
            }
            v
        });
        let f_lf = t(&[2, 2, 2], vec![0.1, 0.4, -0.3, 0.2, 0.0, 0.5, 0.7, -0.1]);
        let f_gf = t(&[2, 2, 2], vec![0.3, -0.2, 0.1, 0.6, 0.2, 0.2, -0.4, 0.9]);
        let a = g.constant(f_lf.clone());
        let b = g.constant(f_gf.clone());
        let sw = safm(&mut g, &p, "s", a, b).unwrap();
        // key[p] = 0.5 + sum_c (lf + gf)[c, p]; query softmax over one entry = 1
        let key: Vec<f64> = (0..4)
            .map(|i| 0.5 + (0..2).map(|c| f_lf.data()[c * 4 + i] + f_gf.data()[c * 4 + i]).sum::<f64>())
            .collect();
        let z: f64 = key.iter().map(|k| k.exp()).sum();
        for m in [sw.lf, sw.gf] {
            for (v, k) in g.value(m).data().iter().zip(&key) {
                assert!((v - k.exp() / z).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cafm_equal_heads_give_half() {
        let mut g = Graph::new();
        let p = bind(&mut g, &cafm_specs("c", 4, 2), |s| {
            let seed = s.name.replace("_gf", "_lf");
            let mut v = Tensor::zeros(&s.shape);
            for (i, e) in v.data_mut().iter_mut().enumerate() {
                *e = ((seed.len() * 31 + i * 7) % 11) as f64 / 11.0 - 0.5;
            }
            v
        });
        let a = g.constant(t(&[4, 2, 2], (0..16).map(|i| i as f64 / 10.0).collect()));
        let b = g.constant(Tensor::full(&[4, 2, 2], 0.2));
        let cw = cafm(&mut g, &p, "c", a, b).unwrap();
        for id in [cw.lf, cw.gf] {
            assert!(g.value(id).data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        }
    }

    #[test]
    fn cafm_hand_evaluated() {
        // C = 2, r = 1; squeeze = identity, PReLU slope 0.25,
        // expand_lf = identity, expand_gf = 0. Pooled sum (1, -1).
        let mut g = Graph::new();
        let p = bind(&mut g, &cafm_specs("c", 2, 1), |s| {
            let mut v = Tensor::zeros(&s.shape);
            match s.name.as_str() {
                "c.squeeze.weight" | "c.expand_lf.weight" => {
                    v.data_mut()[0] = 1.0;
                    v.data_mut()[3] = 1.0;
                }
                "c.prelu" => v.data_mut()[0] = 0.25,
                _ => {}
            }
            v
        });
        let a = g.constant(t(&[2, 1, 2], vec![0.5, 1.5, -1.0, -1.0]));
        let b = g.constant(t(&[2, 1, 2], vec![0.0, 0.0, 0.0, 0.0]));
        let cw = cafm(&mut g, &p, "c", a, b).unwrap();
        // z = (1, -0.25); logits lf = z, gf = 0
        let s0 = 1.0 / (1.0 + (-1.0f64).exp());
        let s1 = 1.0 / (1.0 + (0.25f64).exp());
        let lf = g.value(cw.lf).data();
        let gf = g.value(cw.gf).data();
        assert!((lf[0] - s0).abs() < 1e-6 && (lf[1] - s1).abs() < 1e-6);
        assert!((gf[0] - (1.0 - s0)).abs() < 1e-6 && (gf[1] - (1.0 - s1)).abs() < 1e-6);
    }

    fn uniform_weights(g: &mut Graph<f64>, c: usize, h: usize, w: usize) -> (SpatialWeights, ChannelWeights) {
        let m = Tensor::full(&[h, w], 1.0 / (h * w) as f64);
        let sw = SpatialWeights {
            lf: g.constant(m.clone()),
            gf: g.constant(m),
        };
        let cw = ChannelWeights {
            lf: g.constant(Tensor::full(&[c], 0.5)),
            gf: g.constant(Tensor::full(&[c], 0.5)),
        };
        (sw, cw)
    }

    #[test]
    fn hybrid_with_zero_global_branch() {
        let mut g = Graph::new();
        let lf = t(&[2, 2, 2], (0..8).map(|i| i as f64 - 3.0).collect());
        let a = g.constant(lf.clone());
        let b = g.constant(Tensor::zeros(&[2, 2, 2]));
        let (sw, cw) = uniform_weights(&mut g, 2, 2, 2);
        let y = fuse_hybrid(&mut g, a, b, sw, cw).unwrap();
        for (v, x) in g.value(y).data().iter().zip(lf.data()) {
            assert_eq!(*v, x / 8.0);
        }
        let s = fuse_spatial(&mut g, a, a, sw).unwrap();
        for (v, x) in g.value(s).data().iter().zip(lf.data()) {
            assert!((v - 2.0 * x / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn fusion_rejects_mismatched_branches() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 2, 2]));
        let b = g.constant(Tensor::zeros(&[2, 2, 4]));
        let (sw, cw) = uniform_weights(&mut g, 2, 2, 2);
        assert!(fuse_hybrid(&mut g, a, b, sw, cw).is_err());
        let p = ParamNodes::default();
        assert!(cafm(&mut g, &p, "c", a, b).is_err());
    }
}

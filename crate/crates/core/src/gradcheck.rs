//! Finite-difference gradient checking.
//!
//! An operation under test is a closure that builds a graph from named
//! leaves. Non-scalar outputs are reduced to a scalar by a fixed random
//! projection `L = Σ r_i y_i` evaluated in f64, so every output element
//! contributes to the check. Analytic gradients from the tape are compared
//! to central differences `(L(θ + h) − L(θ − h)) / 2h`.
//!
//! The reported error is normwise over the whole gradient vector:
//! `max |a_i − n_i| / max(‖a‖∞, ‖n‖∞, floor)` with the norms taken across all
//! checked leaves. An elementwise ratio is meaningless for entries that are
//! zero up to rounding, which softmax and layer-norm gradients produce
//! routinely (a key bias shifts every spatial logit equally, so its exact
//! gradient is zero). Each tensor's own normwise error is kept for diagnosis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{self, Init, ParamNodes, ParamSpec};
use crate::config::{FusionMode, ModelConfig};
use crate::error::{ensure, Result};
use crate::fusion;
use crate::graph::{Graph, NodeId};
use crate::network;
use crate::tensor::{Real, Tensor};
use crate::training::{weighted_yuv_loss_node, DEFAULT_LOSS_WEIGHTS};

/// Single-precision tolerance on the max relative error.
pub const TOL_F32: f64 = 1e-3;
/// Double-precision tolerance.
pub const TOL_F64: f64 = 1e-5;
/// A check fails when more than this share of its probes had to be skipped.
pub const MAX_SKIPPED_FRACTION: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Lower bound on the normalizer of the relative error.
    pub floor: f64,
    /// Elements probed per tensor; `None` probes all of them.
    pub max_probes: Option<usize>,
    pub seed: u64,
}

impl GradCheckOptions {
    /// Step and floor suited to the working precision `T`.
    pub fn for_precision<T: Real>() -> Self {
        let single = std::mem::size_of::<T>() == 4;
        Self {
            h: if single { 1e-3 } else { 1e-5 },
            floor: 1e-12,
            max_probes: None,
            seed: 0,
        }
    }

    pub fn tolerance<T: Real>() -> f64 {
        if std::mem::size_of::<T>() == 4 {
            TOL_F32
        } else {
            TOL_F64
        }
    }
}

/// One leaf of the operation under test.
pub struct Leaf<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Whether the leaf is differentiated and checked.
    pub check: bool,
}

impl<T> Leaf<T> {
    pub fn var(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self { name: name.into(), value, check: true }
    }

    pub fn fixed(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self { name: name.into(), value, check: false }
    }
}

#[derive(Clone, Debug)]
pub struct TensorReport {
    pub name: String,
    pub probes: usize,
    /// Probes excluded because the central difference is not a valid
    /// reference there (see [`grad_check`]).
    pub skipped: usize,
    pub max_abs_error: f64,
    /// Error relative to this tensor's own gradient norm.
    pub max_rel_error: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub precision: &'static str,
    pub tensors: Vec<TensorReport>,
    pub floor: f64,
}

impl GradReport {
    /// Infinity norm of the gradient across all checked leaves.
    pub fn grad_norm(&self) -> f64 {
        self.tensors.iter().map(|t| t.grad_norm).fold(0.0, f64::max)
    }

    pub fn max_abs_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_abs_error).fold(0.0, f64::max)
    }

    /// Normwise relative error of the full gradient.
    pub fn max_rel_error(&self) -> f64 {
        let e = self.max_abs_error();
        if e.is_nan() || self.grad_norm().is_nan() {
            return f64::INFINITY;
        }
        e / self.grad_norm().max(self.floor)
    }

    /// Tensor with the largest absolute error.
    pub fn worst(&self) -> Option<&TensorReport> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_abs_error.total_cmp(&b.max_abs_error))
    }

    pub fn probes(&self) -> usize {
        self.tensors.iter().map(|t| t.probes).sum()
    }

    pub fn skipped(&self) -> usize {
        self.tensors.iter().map(|t| t.skipped).sum()
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() < tol && self.skipped() as f64 <= MAX_SKIPPED_FRACTION * self.probes() as f64
    }

    /// Tensors whose error alone exceeds `tol` of the full gradient norm,
    /// worst first.
    pub fn failures(&self, tol: f64) -> Vec<&TensorReport> {
        let limit = tol * self.grad_norm().max(self.floor);
        let mut v: Vec<_> = self.tensors.iter().filter(|t| !(t.max_abs_error < limit)).collect();
        v.sort_by(|a, b| b.max_abs_error.total_cmp(&a.max_abs_error));
        v
    }
}

type Build<'a, T> = dyn Fn(&mut Graph<T>, &ParamNodes) -> Result<NodeId> + 'a;

fn evaluate<T: Real>(leaves: &[Leaf<T>], build: &Build<'_, T>, proj: &mut Option<Vec<f64>>, seed: u64) -> Result<f64> {
    let mut g = Graph::new();
    let mut p = ParamNodes::default();
    for l in leaves {
        let id = g.constant(l.value.clone());
        p.insert(l.name.clone(), id);
    }
    let out = build(&mut g, &p)?;
    Ok(contract(g.value(out), proj, seed))
}

/// Tape gradient of the contracted output with respect to every checked
/// leaf (empty vectors for fixed leaves).
fn tape_gradients<T: Real>(
    leaves: &[Leaf<T>],
    build: &Build<'_, T>,
    proj: &mut Option<Vec<f64>>,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let mut p = ParamNodes::default();
    let mut ids = Vec::with_capacity(leaves.len());
    for l in leaves {
        let id = if l.check { g.param(l.value.clone()) } else { g.constant(l.value.clone()) };
        p.insert(l.name.clone(), id);
        ids.push(id);
    }
    let out = build(&mut g, &p)?;
    let _ = contract(g.value(out), proj, seed);
    let root = match proj.as_ref() {
        None => {
            ensure!(g.value(out).len() == 1, "grad_check: empty output");
            out
        }
        Some(r) => {
            let rt = Tensor::from_vec(g.shape(out), r.iter().map(|&v| T::c(v)).collect())?;
            let rn = g.constant(rt);
            let prod = g.mul(out, rn)?;
            g.sum(prod)
        }
    };
    let grads = g.backward(root)?;
    Ok(leaves
        .iter()
        .zip(&ids)
        .map(|(l, &id)| match (l.check, grads.get(id)) {
            (false, _) => Vec::new(),
            (true, Some(t)) => t.data().iter().map(|v| v.f64()).collect(),
            (true, None) => vec![0.0; l.value.len()],
        })
        .collect())
}

fn contract<T: Real>(y: &Tensor<T>, proj: &mut Option<Vec<f64>>, seed: u64) -> f64 {
    if y.len() == 1 {
        return y.data()[0].f64();
    }
    let r = proj.get_or_insert_with(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
        (0..y.len()).map(|_| rng.random_range(-1.0..1.0)).collect()
    });
    y.data().iter().zip(r.iter()).map(|(a, b)| a.f64() * b).sum()
}

/// Compare tape gradients of `build` against central differences for every
/// checked leaf.
///
/// The central difference is only a valid reference where the function is
/// smooth on the scale of the step. At each probe the tape gradient is also
/// taken at `x ± h`; its second difference `g(x+h) − 2g(x) + g(x−h)` is
/// `O(h²)` on smooth pieces but of the order of the slope jump when the step
/// straddles a kink (PReLU) or a region of extreme curvature. Probes where
/// it exceeds the tolerance share of the gradient norm are skipped and
/// counted; [`GradReport::passes`] bounds how many may be.
pub fn grad_check<T: Real>(
    leaves: &[Leaf<T>],
    build: &Build<'_, T>,
    opts: &GradCheckOptions,
) -> Result<GradReport> {
    ensure!(opts.h > 0.0, "grad_check: step must be positive");
    let tol = GradCheckOptions::tolerance::<T>();
    let mut proj = None;
    let base = tape_gradients(leaves, build, &mut proj, opts.seed)?;
    let global = base.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Leaf<T>> = leaves
        .iter()
        .map(|l| Leaf { name: l.name.clone(), value: l.value.clone(), check: l.check })
        .collect();
    let mut tensors = Vec::new();
    for (li, leaf) in leaves.iter().enumerate() {
        if !leaf.check {
            continue;
        }
        let n = leaf.value.len();
        let analytic = &base[li];
        let probes: Vec<usize> = match opts.max_probes {
            Some(k) if k < n => {
                let argmax = (0..n).max_by(|&a, &b| analytic[a].abs().total_cmp(&analytic[b].abs())).unwrap_or(0);
                let mut v = vec![argmax];
                v.extend((1..k).map(|_| rng.random_range(0..n)));
                v
            }
            _ => (0..n).collect(),
        };
        let a_norm = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut n_norm = 0.0f64;
        let mut max_abs = 0.0f64;
        let mut skipped = 0;
        let mut finite = a_norm.is_finite();
        for &i in &probes {
            let orig = leaf.value.data()[i];
            let mut at = |v: f64, work: &mut Vec<Leaf<T>>| -> Result<(f64, f64)> {
                work[li].value.data_mut()[i] = T::c(v);
                let loss = evaluate(work, build, &mut proj, opts.seed)?;
                let grad = tape_gradients(work, build, &mut proj, opts.seed)?[li][i];
                Ok((loss, grad))
            };
            let (lp, gp) = at(orig.f64() + opts.h, &mut work)?;
            let (lm, gm) = at(orig.f64() - opts.h, &mut work)?;
            work[li].value.data_mut()[i] = orig;
            // Divide by the step actually taken after rounding to T.
            let step = T::c(orig.f64() + opts.h).f64() - T::c(orig.f64() - opts.h).f64();
            let numeric = (lp - lm) / step;
            if ![numeric, gp, gm].iter().all(|v| v.is_finite()) {
                finite = false;
                continue;
            }
            let bend = (gp - 2.0 * analytic[i] + gm).abs();
            if bend > tol * global.max(opts.floor) {
                skipped += 1;
                continue;
            }
            n_norm = n_norm.max(numeric.abs());
            max_abs = max_abs.max((numeric - analytic[i]).abs());
        }
        let norm = a_norm.max(n_norm);
        tensors.push(TensorReport {
            name: leaf.name.clone(),
            probes: probes.len(),
            skipped,
            max_abs_error: if finite { max_abs } else { f64::NAN },
            max_rel_error: if finite { max_abs / norm.max(opts.floor) } else { f64::INFINITY },
            grad_norm: if finite { norm } else { f64::NAN },
        });
    }
    Ok(GradReport { precision: T::NAME, tensors, floor: opts.floor })
}

// ------------------------------------------------------------- test suite

fn random_tensor<T: Real>(shape: &[usize], scale: f64, offset: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::c(offset + scale * rng.random_range(-1.0..1.0))).collect();
    Tensor::from_vec(shape, data).expect("shape matches data")
}

/// Parameters drawn around their initialization rule, with constant-init
/// arrays (norm scales, PReLU slopes) jittered so they are generic points.
fn param_leaves<T: Real>(specs: &[ParamSpec], rng: &mut ChaCha8Rng) -> Vec<Leaf<T>> {
    specs
        .iter()
        .map(|s| {
            let value = match s.init {
                Init::FanIn(fan) => random_tensor(&s.shape, 1.5 / (fan as f64).sqrt(), 0.0, rng),
                Init::Constant(c) => random_tensor(&s.shape, 0.2, c, rng),
            };
            Leaf::var(s.name.clone(), value)
        })
        .collect()
}

/// A named gradient check case over precision `T`.
pub struct Case<T: Real> {
    pub name: &'static str,
    pub leaves: Vec<Leaf<T>>,
    #[allow(clippy::type_complexity)]
    pub build: Box<dyn Fn(&mut Graph<T>, &ParamNodes) -> Result<NodeId>>,
    pub max_probes: Option<usize>,
}

impl<T: Real> Case<T> {
    pub fn run(&self, seed: u64) -> Result<GradReport> {
        let opts = GradCheckOptions {
            max_probes: self.max_probes,
            seed,
            ..GradCheckOptions::for_precision::<T>()
        };
        grad_check(&self.leaves, &*self.build, &opts)
    }
}

fn tiny_block_config() -> ModelConfig {
    ModelConfig {
        channels: 4,
        heads: 2,
        window_side: 2,
        mlp_ratio: 2,
        n_swin: 2,
        ..ModelConfig::default()
    }
}

/// The standard suite: every block, fusion operator, the full network and
/// the losses, on small random inputs.
pub fn standard_suite<T: Real>(seed: u64) -> Vec<Case<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<Case<T>> = Vec::new();
    let with_x = |specs: Vec<ParamSpec>, x_shape: &[usize], rng: &mut ChaCha8Rng| {
        let mut leaves = param_leaves::<T>(&specs, rng);
        leaves.push(Leaf::var("x", random_tensor(x_shape, 1.0, 0.0, rng)));
        leaves
    };

    cases.push(Case {
        name: "residual_block",
        leaves: with_x(blocks::residual_block_specs("rb", 3), &[3, 6, 5], &mut rng),
        build: Box::new(|g, p| blocks::residual_block(g, p, "rb", p.get("x")?)),
        max_probes: None,
    });
    cases.push(Case {
        name: "lfem",
        leaves: with_x(blocks::lfem_specs("lf", 3, 3), &[3, 5, 6], &mut rng),
        build: Box::new(|g, p| blocks::lfem(g, p, "lf", p.get("x")?, 3)),
        max_probes: None,
    });
    cases.push(Case {
        name: "patch_embed",
        leaves: with_x(blocks::patch_embed_specs("pe", 3), &[3, 8, 16], &mut rng),
        build: Box::new(|g, p| Ok(blocks::patch_embed(g, p, "pe", p.get("x")?, 2)?.node)),
        max_probes: None,
    });
    cases.push(Case {
        name: "msa",
        leaves: with_x(blocks::msa_specs("attn", 4), &[2, 4, 4], &mut rng),
        build: Box::new(|g, p| Ok(blocks::msa(g, p, "attn", p.get("x")?, 2)?.tokens)),
        max_probes: None,
    });
    for (name, shifted) in [("swin_block", false), ("swin_block_shifted", true)] {
        let leaves = with_x(blocks::swin_block_specs("sw", 4, 2), &[4, 4, 4], &mut rng);
        cases.push(Case {
            name,
            leaves,
            build: Box::new(move |g, p| {
                let tokens = blocks::window_partition(g, p.get("x")?, 2)?;
                let out = blocks::swin_block(g, p, "sw", &tokens, 2, shifted)?;
                blocks::window_merge(g, &out)
            }),
            max_probes: None,
        });
    }
    {
        let cfg = tiny_block_config();
        let leaves = with_x(blocks::gfem_specs("gf", &cfg), &[4, 16, 16], &mut rng);
        cases.push(Case {
            name: "gfem",
            leaves,
            build: Box::new(move |g, p| blocks::gfem(g, p, "gf", p.get("x")?, &cfg)),
            max_probes: None,
        });
    }
    cases.push(Case {
        name: "psab",
        leaves: vec![Leaf::var("x", random_tensor(&[4, 2, 2], 1.0, 0.0, &mut rng))],
        build: Box::new(|g, p| blocks::psab(g, p.get("x")?)),
        max_probes: None,
    });

    let branches = |specs: Vec<ParamSpec>, rng: &mut ChaCha8Rng| {
        let mut leaves = param_leaves::<T>(&specs, rng);
        leaves.push(Leaf::var("f_lf", random_tensor(&[4, 4, 3], 1.0, 0.0, rng)));
        leaves.push(Leaf::var("f_gf", random_tensor(&[4, 4, 3], 1.0, 0.0, rng)));
        leaves
    };
    cases.push(Case {
        name: "safm",
        leaves: branches(fusion::safm_specs("sa", 4), &mut rng),
        build: Box::new(|g, p| {
            // Softmax2D maps are ~1/(H·W); scale so both terms matter.
            let w = fusion::safm(g, p, "sa", p.get("f_lf")?, p.get("f_gf")?)?;
            let both = g.concat(&[w.lf, w.gf])?;
            Ok(g.scale(both, T::c(12.0)))
        }),
        max_probes: None,
    });
    cases.push(Case {
        name: "cafm",
        leaves: branches(fusion::cafm_specs("ca", 4, 2), &mut rng),
        build: Box::new(|g, p| {
            let w = fusion::cafm(g, p, "ca", p.get("f_lf")?, p.get("f_gf")?)?;
            g.concat(&[w.lf, w.gf])
        }),
        max_probes: None,
    });
    for mode in FusionMode::ALL {
        let cfg = ModelConfig {
            channels: 4,
            cafm_reduction: 2,
            fusion_mode: mode,
            rescale_spatial: true,
            ..ModelConfig::default()
        };
        let mut specs = Vec::new();
        if mode.uses_spatial() {
            specs.extend(fusion::safm_specs("h.safm", 4));
        }
        if mode.uses_channel() {
            specs.extend(fusion::cafm_specs("h.cafm", 4, 2));
        }
        let name = match mode {
            FusionMode::Hybrid => "fuse_hybrid",
            FusionMode::Sequential => "fuse_sequential",
            FusionMode::Parallel => "fuse_parallel",
            FusionMode::SpatialOnly => "fuse_spatial_only",
            FusionMode::ChannelOnly => "fuse_channel_only",
        };
        cases.push(Case {
            name,
            leaves: branches(specs, &mut rng),
            build: Box::new(move |g, p| fusion::fuse_branches(g, p, "h", p.get("f_lf")?, p.get("f_gf")?, &cfg)),
            max_probes: None,
        });
    }
    {
        let cfg = ModelConfig {
            channels: 8,
            heads: 2,
            window_side: 2,
            num_hfb: 1,
            ..ModelConfig::default()
        };
        let mut leaves = param_leaves::<T>(&network::param_specs(&cfg), &mut rng);
        leaves.push(Leaf::var("x_lr", random_tensor(&[3, 8, 8], 0.5, 0.5, &mut rng)));
        leaves.push(Leaf::fixed("qp", Tensor::full(&[1, 8, 8], T::c(37.0 / 63.0))));
        cases.push(Case {
            name: "network_forward",
            leaves,
            build: Box::new(move |g, p| network::forward(g, p, &cfg, p.get("x_lr")?, p.get("qp")?)),
            max_probes: Some(12),
        });
    }
    cases.push(Case {
        name: "charbonnier",
        leaves: vec![
            Leaf::var("x_hat", random_tensor(&[2, 3, 4], 0.5, 0.5, &mut rng)),
            Leaf::var("x", random_tensor(&[2, 3, 4], 0.5, 0.5, &mut rng)),
        ],
        build: Box::new(|g, p| {
            let l = g.charbonnier(p.get("x_hat")?, p.get("x")?, 1e-3)?;
            Ok(g.scale(l, T::c(24.0)))
        }),
        max_probes: None,
    });
    cases.push(Case {
        name: "weighted_loss",
        leaves: vec![
            Leaf::var("pred", random_tensor(&[3, 4, 2], 0.5, 0.5, &mut rng)),
            Leaf::var("target", random_tensor(&[3, 4, 2], 0.5, 0.5, &mut rng)),
        ],
        build: Box::new(|g, p| {
            let l = weighted_yuv_loss_node(g, p.get("pred")?, p.get("target")?, 1e-3, DEFAULT_LOSS_WEIGHTS)?;
            Ok(g.scale(l.total, T::c(8.0)))
        }),
        max_probes: None,
    });
    cases
}

//! Losses, optimizer, learning-rate schedule and the training loop.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::save_checkpoint;
use crate::config::{parse, parse_key_values, ModelConfig};
use crate::error::{ensure, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::manifest::{at_record, ManifestRecord};
use crate::network::{forward, ParameterStore};
use crate::tensor::{Real, Tensor};
use crate::yuv::{make_qp_plane, sample_patch_pair, Frame444, FrameSource, PatchPair, YuvFile};

pub const LOSS_LOG_HEADER: &str = "step,lr,loss,loss_y,loss_u,loss_v";

// ------------------------------------------------------------------ losses

/// Mean of `sqrt((x - x_hat)^2 + eps^2)`, accumulated in `f64`.
pub fn charbonnier<T: Real>(x: &[T], x_hat: &[T], eps: f64) -> Result<f64> {
    ensure!(
        x.len() == x_hat.len(),
        "charbonnier: length mismatch {} vs {}",
        x.len(),
        x_hat.len()
    );
    ensure!(eps > 0.0, "charbonnier: eps must be positive, got {}", eps);
    ensure!(!x.is_empty(), "charbonnier: empty input");
    let s: f64 = x
        .iter()
        .zip(x_hat)
        .map(|(a, b)| {
            let d = a.f64() - b.f64();
            (d * d + eps * eps).sqrt()
        })
        .sum();
    Ok(s / x.len() as f64)
}

/// Per-component Charbonnier terms and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub y: f64,
    pub u: f64,
    pub v: f64,
}

impl LossBreakdown {
    pub fn combine(weights: [f64; 3], [y, u, v]: [f64; 3]) -> Self {
        Self {
            total: weights[0] * y + weights[1] * u + weights[2] * v,
            y,
            u,
            v,
        }
    }
}

pub const DEFAULT_LOSS_WEIGHTS: [f64; 3] = [10.0, 1.0, 1.0];

/// Weighted Y/U/V Charbonnier loss between two `[3, H, W]` frames.
pub fn weighted_yuv_loss(
    x: &Frame444,
    x_hat: &Frame444,
    eps: f64,
    weights: [f64; 3],
) -> Result<LossBreakdown> {
    ensure!(
        x.planes.shape() == x_hat.planes.shape(),
        "weighted_yuv_loss: shape mismatch {:?} vs {:?}",
        x.planes.shape(),
        x_hat.planes.shape()
    );
    let mut parts = [0.0; 3];
    for (c, part) in parts.iter_mut().enumerate() {
        *part = charbonnier(x.component(c), x_hat.component(c), eps)?;
    }
    Ok(LossBreakdown::combine(weights, parts))
}

/// Graph nodes of the weighted loss.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub components: [NodeId; 3],
}

/// Weighted loss on graph nodes holding `[3, H, W]` prediction and target.
pub fn weighted_yuv_loss_node<T: Real>(
    g: &mut Graph<T>,
    pred: NodeId,
    target: NodeId,
    eps: f64,
    weights: [f64; 3],
) -> Result<LossNodes> {
    let s = g.shape(pred).to_vec();
    ensure!(
        s.len() == 3 && s[0] == 3 && g.shape(target) == s.as_slice(),
        "weighted_yuv_loss: expected matching [3, H, W], got {:?} vs {:?}",
        s,
        g.shape(target)
    );
    let hw = s[1] * s[2];
    let mut components = [pred; 3];
    let mut total = None;
    for c in 0..3 {
        let idx: std::rc::Rc<[usize]> = (c * hw..(c + 1) * hw).collect();
        let p = g.gather(pred, idx.clone(), &[hw])?;
        let t = g.gather(target, idx, &[hw])?;
        let l = g.charbonnier(p, t, eps)?;
        components[c] = l;
        let term = g.scale(l, T::c(weights[c]));
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok(LossNodes {
        total: total.expect("three components"),
        components,
    })
}

// ------------------------------------------------------------------ config

/// Optimization and data hyperparameters plus the model they train.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub halve_every: u64,
    pub max_steps: u64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub charbonnier_eps: f64,
    pub loss_weights: [f64; 3],
    pub seed: u64,
    /// Write an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            halve_every: 100_000,
            max_steps: 1_000_000,
            batch_size: 16,
            patch_size: 256,
            charbonnier_eps: 1e-3,
            loss_weights: DEFAULT_LOSS_WEIGHTS,
            seed: 0,
            checkpoint_every: 10_000,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Small run that fits a laptop CPU.
    pub fn desk() -> Self {
        Self {
            max_steps: 2000,
            batch_size: 1,
            patch_size: 64,
            checkpoint_every: 500,
            model: ModelConfig::desk(),
            ..Self::default()
        }
    }

    pub const KEYS: &'static [&'static str] = &[
        "lr0",
        "beta1",
        "beta2",
        "adam_eps",
        "halve_every",
        "max_steps",
        "batch_size",
        "patch_size",
        "charbonnier_eps",
        "loss_weights",
        "seed",
        "checkpoint_every",
    ];

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) {
            return fail(format!("lr0 must be finite and non-negative, got {}", self.lr0));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        for (name, v) in [("adam_eps", self.adam_eps), ("charbonnier_eps", self.charbonnier_eps)] {
            if !(v.is_finite() && v > 0.0) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        if self.halve_every == 0 || self.batch_size == 0 || self.patch_size == 0 {
            return fail("halve_every, batch_size and patch_size must be positive".into());
        }
        if self.loss_weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return fail(format!("loss_weights must be positive, got {:?}", self.loss_weights));
        }
        if !self.patch_size.is_multiple_of(self.model.alignment()) {
            return fail(format!(
                "patch_size {} not a multiple of {}",
                self.patch_size,
                self.model.alignment()
            ));
        }
        self.model.validate()
    }

    /// Parse a `key=value` file. Model keys may appear alongside training
    /// keys; anything else is an error. Unset keys take [`TrainConfig::default`]
    /// values.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, (v, line)) in parse_key_values(text)? {
            cfg.set(&k, &v)
                .map_err(|e| Error::Config(format!("line {line}: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_text(&fs::read_to_string(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "lr0" => self.lr0 = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "halve_every" => self.halve_every = parse(key, value)?,
            "max_steps" => self.max_steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "patch_size" => self.patch_size = parse(key, value)?,
            "charbonnier_eps" => self.charbonnier_eps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "loss_weights" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(Error::Config(format!(
                        "loss_weights expects three comma-separated values, got `{value}`"
                    )));
                }
                for (w, p) in self.loss_weights.iter_mut().zip(parts) {
                    *w = parse(key, p)?;
                }
            }
            _ => {
                if !self.model.set(key, value)? {
                    return Err(Error::Config(format!("unknown key `{key}`")));
                }
            }
        }
        Ok(())
    }

    /// Serialize every key (training then model) as `key=value` lines.
    pub fn to_text(&self) -> String {
        let w = self.loss_weights;
        let mut s = String::new();
        let pairs: Vec<(&str, String)> = vec![
            ("lr0", self.lr0.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("halve_every", self.halve_every.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("charbonnier_eps", self.charbonnier_eps.to_string()),
            ("loss_weights", format!("{},{},{}", w[0], w[1], w[2])),
            ("seed", self.seed.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ];
        for (k, v) in pairs.into_iter().chain(self.model.to_pairs()) {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// `lr0 * 2^-floor(step / halve_every)`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let halvings = (step / self.halve_every).min(i32::MAX as u64) as i32;
        self.lr0 * 2f64.powi(-halvings)
    }
}

// --------------------------------------------------------------------- adam

/// Optimizer state. `step` counts completed updates; `lr` is the rate the
/// next update will use.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub lr: f64,
    pub m: IndexMap<String, Vec<f64>>,
    pub v: IndexMap<String, Vec<f64>>,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(params: &ParameterStore, cfg: &TrainConfig) -> Self {
        let zeros = |t: &Tensor<f32>| vec![0.0; t.len()];
        Self {
            step: params.step,
            lr: cfg.lr_at(params.step),
            m: params.arrays.iter().map(|(k, t)| (k.clone(), zeros(t))).collect(),
            v: params.arrays.iter().map(|(k, t)| (k.clone(), zeros(t))).collect(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        }
    }
}

/// One bias-corrected Adam update of a flat parameter slice. `t` is the
/// 1-based update count.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let c1 = 1.0 - beta1.powf(t as f64);
    let c2 = 1.0 - beta2.powf(t as f64);
    for i in 0..param.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Apply one Adam step with the scheduled learning rate, then advance the
/// step counter (in both `state` and `params`) and reschedule `lr`.
/// Nothing is modified if any gradient is non-finite.
pub fn adam_step(
    params: &mut ParameterStore,
    grads: &IndexMap<String, Tensor<f32>>,
    state: &mut TrainState,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, p) in &params.arrays {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no gradient for parameter `{name}`")))?;
        ensure!(
            g.shape() == p.shape(),
            "gradient for `{}` has shape {:?}, parameter {:?}",
            name,
            g.shape(),
            p.shape()
        );
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    let t = state.step + 1;
    let lr = cfg.lr_at(state.step);
    for (name, p) in params.arrays.iter_mut() {
        let grad: Vec<f64> = grads[name].data().iter().map(|&v| v as f64).collect();
        let mut work: Vec<f64> = p.data().iter().map(|&v| v as f64).collect();
        let m = state.m.get_mut(name).expect("moment per parameter");
        let v = state.v.get_mut(name).expect("moment per parameter");
        adam_update(&mut work, &grad, m, v, t, lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
        for (d, w) in p.data_mut().iter_mut().zip(work) {
            *d = w as f32;
        }
    }
    state.step = t;
    state.lr = cfg.lr_at(t);
    params.step = t;
    Ok(())
}

// --------------------------------------------------------------------- data

/// One training sequence: lossy/lossless sources at a QP, with the manifest
/// location used in error messages.
pub struct TrainSource {
    pub lossy: Box<dyn FrameSource + Send + Sync>,
    pub lossless: Box<dyn FrameSource + Send + Sync>,
    pub qp: u8,
    pub name: String,
    pub origin: Option<(PathBuf, ManifestRecord)>,
}

impl TrainSource {
    pub fn from_record(manifest: &Path, rec: &ManifestRecord) -> Result<Self> {
        let open = |p: &Path| YuvFile::open(p, rec.width, rec.height);
        let wrap = |e| at_record(manifest, rec, e);
        Ok(Self {
            lossy: Box::new(open(&rec.lossy).map_err(wrap)?),
            lossless: Box::new(open(&rec.lossless).map_err(wrap)?),
            qp: rec.qp,
            name: rec.sequence(),
            origin: Some((manifest.to_path_buf(), rec.clone())),
        })
    }

    fn sample(&self, size: usize, rng: &mut ChaCha8Rng) -> Result<PatchPair> {
        sample_patch_pair(&*self.lossy, &*self.lossless, self.qp, size, &self.name, rng).map_err(|e| {
            match &self.origin {
                Some((path, rec)) => at_record(path, rec, e),
                None => e,
            }
        })
    }
}

// --------------------------------------------------------------------- loop

/// Loss of one batch (means over its items) at the learning rate used for
/// the update that followed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
}

impl LossRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.step, self.lr, self.loss.total, self.loss.y, self.loss.u, self.loss.v
        )
    }
}

/// Forward and backward for one patch pair; returns parameter gradients.
pub fn patch_gradients(
    params: &ParameterStore,
    pair: &PatchPair,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, IndexMap<String, Tensor<f32>>)> {
    let mut g = Graph::<f32>::new();
    let p = params.bind(&mut g, true);
    let (h, w) = (pair.lossy.height(), pair.lossy.width());
    let x = g.constant(pair.lossy.planes.clone());
    let q = g.constant(make_qp_plane(pair.qp as i64, w, h)?.plane);
    let target = g.constant(pair.lossless.planes.clone());
    let y = forward(&mut g, &p, &params.config, x, q)?;
    let loss = weighted_yuv_loss_node(&mut g, y, target, cfg.charbonnier_eps, cfg.loss_weights)?;
    let mut grads = g.backward(loss.total)?;
    let parts = loss.components.map(|n| g.value(n).data()[0] as f64);
    let breakdown = LossBreakdown::combine(cfg.loss_weights, parts);
    let mut out = IndexMap::with_capacity(params.arrays.len());
    for (name, id) in p.iter() {
        let grad = grads
            .take(*id)
            .unwrap_or_else(|| Tensor::zeros(params.arrays[name].shape()));
        out.insert(name.clone(), grad);
    }
    Ok((breakdown, out))
}

/// Stateful trainer: parameters, optimizer state and the data it samples.
pub struct Trainer {
    pub params: ParameterStore,
    pub state: TrainState,
    pub cfg: TrainConfig,
    sources: Vec<TrainSource>,
    /// Fan batch items out over the thread pool. Results are reduced in
    /// batch order either way.
    pub parallel: bool,
}

impl Trainer {
    pub fn new(params: ParameterStore, cfg: TrainConfig, sources: Vec<TrainSource>) -> Result<Self> {
        cfg.validate()?;
        ensure!(!sources.is_empty(), "training needs at least one source");
        ensure!(
            params.config == cfg.model,
            "parameter store configuration differs from the training model configuration"
        );
        let state = TrainState::new(&params, &cfg);
        Ok(Self {
            params,
            state,
            cfg,
            sources,
            parallel: false,
        })
    }

    /// Sample a batch (uniform over sources, so QPs mix), update once.
    pub fn step(&mut self) -> Result<LossRecord> {
        let mut pairs = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let k = self.state.rng.random_range(0..self.sources.len());
            pairs.push(self.sources[k].sample(self.cfg.patch_size, &mut self.state.rng)?);
        }
        let run = |pair: &PatchPair| patch_gradients(&self.params, pair, &self.cfg);
        let results: Vec<_> = if self.parallel {
            pairs.par_iter().map(run).collect()
        } else {
            pairs.iter().map(run).collect()
        };
        let n = pairs.len() as f64;
        let mut parts = [0.0; 3];
        let mut total: Option<IndexMap<String, Tensor<f32>>> = None;
        for r in results {
            let (loss, grads) = r?;
            for (acc, v) in parts.iter_mut().zip([loss.y, loss.u, loss.v]) {
                *acc += v / n;
            }
            match total.as_mut() {
                None => total = Some(grads),
                Some(acc) => {
                    for (name, g) in grads {
                        acc[&name].add_assign(&g);
                    }
                }
            }
        }
        let mut grads = total.expect("batch is non-empty");
        if pairs.len() > 1 {
            let inv = 1.0 / pairs.len() as f32;
            for g in grads.values_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
        }
        let record = LossRecord {
            step: self.state.step,
            lr: self.cfg.lr_at(self.state.step),
            loss: LossBreakdown::combine(self.cfg.loss_weights, parts),
        };
        adam_step(&mut self.params, &grads, &mut self.state, &self.cfg)?;
        Ok(record)
    }
}

/// Files written by [`train`] into its output directory.
pub const LOSS_LOG: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:08}.ckpt")
}

pub struct TrainOutcome {
    pub params: ParameterStore,
    pub log: Vec<LossRecord>,
}

/// Run `cfg.max_steps` updates from freshly initialized parameters. With
/// `out_dir`, the loss log, periodic checkpoints and the final checkpoint
/// are written there.
pub fn train(
    sources: Vec<TrainSource>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    deterministic: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let params = ParameterStore::init(&cfg.model, cfg.seed)?;
    let mut trainer = Trainer::new(params, cfg.clone(), sources)?;
    trainer.parallel = !deterministic;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut csv = String::from(LOSS_LOG_HEADER);
    csv.push('\n');
    let mut log = Vec::with_capacity(cfg.max_steps as usize);
    for _ in 0..cfg.max_steps {
        let rec = trainer.step()?;
        if rec.step % 100 == 0 {
            info!(
                "step {} lr {:e} loss {:.6} (y {:.6} u {:.6} v {:.6})",
                rec.step, rec.lr, rec.loss.total, rec.loss.y, rec.loss.u, rec.loss.v
            );
        }
        csv.push_str(&rec.csv_row());
        csv.push('\n');
        log.push(rec);
        let done = trainer.state.step;
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.max_steps {
                save_checkpoint(&trainer.params, dir.join(checkpoint_name(done)))?;
                fs::write(dir.join(LOSS_LOG), &csv)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        fs::write(dir.join(LOSS_LOG), &csv)?;
        save_checkpoint(&trainer.params, dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainOutcome {
        params: trainer.params,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed ^ 0xA5A5_5A5A_1234_5678;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect()
    }

    #[test]
    fn charbonnier_closed_forms() {
        let x = [0.3f64; 5];
        assert_eq!(charbonnier(&x, &x, 1e-3).unwrap(), 1e-3);
        let l = charbonnier(&[3e-3f64], &[0.0], 1e-3).unwrap();
        assert!((l - 1e-5f64.sqrt()).abs() < 1e-15);
        assert!(charbonnier(&[1.0f64], &[1.0, 2.0], 1e-3).is_err());
        assert!(charbonnier(&[1.0f64], &[1.0], 0.0).is_err());
    }

    #[test]
    fn charbonnier_matches_loop_oracle() {
        let (a, b) = (lcg(1000, 1), lcg(1000, 2));
        let mut acc = 0.0;
        for i in 0..a.len() {
            acc += ((a[i] - b[i]).powi(2) + 1e-6).sqrt();
        }
        let got = charbonnier(&a, &b, 1e-3).unwrap();
        assert!((got - acc / 1000.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_loss_of_identical_frames() {
        let f = Frame444::new(Tensor::from_vec(&[3, 4, 4], lcg(48, 3).iter().map(|&v| v as f32).collect()).unwrap())
            .unwrap();
        let l = weighted_yuv_loss(&f, &f, 1e-3, DEFAULT_LOSS_WEIGHTS).unwrap();
        assert!((l.total - 12e-3).abs() < 1e-15);
    }

    #[test]
    fn weighted_node_matches_value_api() {
        let a = Tensor::from_vec(&[3, 4, 6], lcg(72, 4)).unwrap();
        let b = Tensor::from_vec(&[3, 4, 6], lcg(72, 5)).unwrap();
        let mut g = Graph::<f64>::new();
        let (pa, pb) = (g.constant(a.clone()), g.constant(b.clone()));
        let nodes = weighted_yuv_loss_node(&mut g, pa, pb, 1e-3, DEFAULT_LOSS_WEIGHTS).unwrap();
        let mut expect = 0.0;
        for c in 0..3 {
            let r = c * 24..(c + 1) * 24;
            expect += DEFAULT_LOSS_WEIGHTS[c] * charbonnier(&a.data()[r.clone()], &b.data()[r], 1e-3).unwrap();
        }
        assert!((g.value(nodes.total).data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_hand_formula() {
        let (lr, b1, b2, eps) = (2e-4, 0.9, 0.999, 1e-8);
        let mut p = [0.5];
        let (mut m, mut v) = ([0.0], [0.0]);
        adam_update(&mut p, &[1.0], &mut m, &mut v, 1, lr, b1, b2, eps);
        // m_hat = 1, v_hat = 1 after bias correction
        let m_hat = ((1.0 - b1) * 1.0) / (1.0 - b1);
        let v_hat = ((1.0 - b2) * 1.0) / (1.0 - b2);
        let expect = 0.5 - lr * m_hat / (f64::sqrt(v_hat) + eps);
        assert!((p[0] - expect).abs() < 1e-12);
        assert!((p[0] - (0.5 - lr)).abs() < 1e-11);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = [1.0, -2.0];
        let (mut m, mut v) = ([0.3, -0.1], [0.2, 0.4]);
        let before = p;
        for t in 1..5 {
            let (m0, v0) = (m, v);
            let g = [0.0, 0.0];
            let mut q = p;
            adam_update(&mut q, &g, &mut m, &mut v, t, 0.0, 0.9, 0.999, 1e-8);
            assert_eq!(q, p);
            assert!(m[0].abs() < m0[0].abs() && v[1] < v0[1]);
            p = q;
        }
        assert_eq!(p, before);
    }

    #[test]
    fn schedule_halves_at_boundary() {
        let cfg = TrainConfig {
            halve_every: 10,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(9), 2e-4);
        assert_eq!(cfg.lr_at(10), 1e-4);
        assert_eq!(cfg.lr_at(25), 5e-5);
        let lrs: Vec<f64> = (0..100).map(|s| cfg.lr_at(s)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn config_text_round_trip_and_unknown_keys() {
        let mut cfg = TrainConfig::desk();
        cfg.loss_weights = [4.0, 2.0, 1.5];
        cfg.seed = 99;
        let back = TrainConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        let err = TrainConfig::from_text("lr0=1e-4\nbogus=1\n").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("bogus"), "{err}");
        assert!(TrainConfig::from_text("loss_weights=1,2").is_err());
        assert!(TrainConfig::from_text("patch_size=60").is_err());
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let model = ModelConfig {
            channels: 4,
            heads: 2,
            num_hfb: 1,
            ..ModelConfig::default()
        };
        let cfg = TrainConfig {
            model: model.clone(),
            ..TrainConfig::desk()
        };
        let mut params = ParameterStore::init(&model, 0).unwrap();
        let before = params.clone();
        let mut state = TrainState::new(&params, &cfg);
        let mut grads: IndexMap<String, Tensor<f32>> = params
            .arrays
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        grads["hfb0.lfem.conv1.bias"].data_mut()[0] = f32::NAN;
        let err = adam_step(&mut params, &grads, &mut state, &cfg).unwrap_err();
        assert!(matches!(&err, Error::NonFiniteGradient(n) if n == "hfb0.lfem.conv1.bias"), "{err}");
        assert_eq!(params, before);
        assert_eq!(state.step, 0);
    }
}

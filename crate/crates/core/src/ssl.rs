//! Barlow Twins training of the frozen target model and its augmentations.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Tape, Var};
use crate::bundle::{create_dir, load_bundle, read_json, save_bundle, write_json};
use crate::data::{ImageShape, Normalization};
use crate::error::{Error, Result};
use crate::models::{Arch, FeatureExtractor, Mode, RunningStats, BN_EPS, BN_MOMENTUM};
use crate::optim::{lr_schedule, Schedule, Sgd, SgdConfig};
use crate::rng::RngState;
use crate::tensor::{Real, Tensor};

/// Standardization epsilon inside the loss; small so that a perfectly
/// decorrelated pair scores (numerically) zero.
pub const BT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    /// Zero padding before a random crop back to the original size.
    pub pad: usize,
    pub flip_prob: f64,
    /// Additive brightness shift drawn from `[-brightness, brightness]`.
    pub brightness: f64,
    /// Contrast factor drawn from `[1 - contrast, 1 + contrast]`.
    pub contrast: f64,
    /// When false both views share one draw of every augmentation.
    pub independent_views: bool,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            pad: 2,
            flip_prob: 0.5,
            brightness: 0.2,
            contrast: 0.2,
            independent_views: true,
        }
    }
}

impl AugmentationConfig {
    pub fn identity() -> Self {
        Self {
            pad: 0,
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            independent_views: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config(format!("flip probability {} outside [0, 1]", self.flip_prob)));
        }
        if !(self.brightness >= 0.0 && self.contrast >= 0.0) {
            return Err(Error::config("jitter ranges must be non-negative"));
        }
        Ok(())
    }
}

/// Augmentation parameters of one image.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Draw {
    dy: usize,
    dx: usize,
    flip: bool,
    shift: f64,
    gain: f64,
}

impl Draw {
    fn sample(rng: &mut RngState, cfg: &AugmentationConfig) -> Self {
        let span = 2 * cfg.pad + 1;
        Self {
            dy: if cfg.pad > 0 { rng.index(span) } else { 0 },
            dx: if cfg.pad > 0 { rng.index(span) } else { 0 },
            flip: cfg.flip_prob > 0.0 && rng.bernoulli(cfg.flip_prob),
            shift: if cfg.brightness > 0.0 {
                cfg.brightness * (2.0 * rng.uniform() - 1.0)
            } else {
                0.0
            },
            gain: if cfg.contrast > 0.0 {
                1.0 + cfg.contrast * (2.0 * rng.uniform() - 1.0)
            } else {
                1.0
            },
        }
    }

    fn apply<T: Real>(&self, src: &[T], shape: ImageShape, pad: usize, out: &mut [T]) {
        let (h, w) = (shape.height, shape.width);
        let plane = shape.plane();
        let jitter = self.shift != 0.0 || self.gain != 1.0;
        for c in 0..shape.channels {
            let s = &src[c * plane..(c + 1) * plane];
            let o = &mut out[c * plane..(c + 1) * plane];
            for y in 0..h {
                for x in 0..w {
                    let sy = (y + self.dy) as isize - pad as isize;
                    let xx = if self.flip { w - 1 - x } else { x };
                    let sx = (xx + self.dx) as isize - pad as isize;
                    o[y * w + x] = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                        s[sy as usize * w + sx as usize]
                    } else {
                        T::ZERO
                    };
                }
            }
            if jitter {
                let mean = o.iter().map(|v| v.to_f64()).sum::<f64>() / plane as f64;
                for v in o.iter_mut() {
                    let adj = (v.to_f64() - mean) * self.gain + mean + self.shift;
                    *v = T::from_f64(adj.clamp(0.0, 1.0));
                }
            }
        }
    }
}

/// Horizontal mirror of every CHW row.
pub fn hflip<T: Real>(x: &Tensor<T>, shape: ImageShape) -> Result<Tensor<T>> {
    let draw = Draw {
        dy: 0,
        dx: 0,
        flip: true,
        shift: 0.0,
        gain: 1.0,
    };
    map_rows(x, shape, |row, out| draw.apply(row, shape, 0, out))
}

fn map_rows<T: Real>(x: &Tensor<T>, shape: ImageShape, mut f: impl FnMut(&[T], &mut [T])) -> Result<Tensor<T>> {
    let (n, d) = x.dims2()?;
    if d != shape.len() {
        return Err(Error::Dimension {
            op: "augment",
            lhs: vec![n, d],
            rhs: vec![n, shape.len()],
        });
    }
    let mut out = vec![T::ZERO; n * d];
    for (src, dst) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        f(src, dst);
    }
    Tensor::new(vec![n, d], out)
}

/// Two augmented views of raw `[0, 1]` CHW rows.
pub fn augment_two_views<T: Real>(
    rng: &mut RngState,
    x: &Tensor<T>,
    shape: ImageShape,
    cfg: &AugmentationConfig,
) -> Result<(Tensor<T>, Tensor<T>)> {
    cfg.validate()?;
    let n = x.rows();
    let draws_a: Vec<Draw> = (0..n).map(|_| Draw::sample(rng, cfg)).collect();
    let draws_b: Vec<Draw> = if cfg.independent_views {
        (0..n).map(|_| Draw::sample(rng, cfg)).collect()
    } else {
        draws_a.clone()
    };
    let mut i = 0;
    let a = map_rows(x, shape, |row, out| {
        draws_a[i].apply(row, shape, cfg.pad, out);
        i += 1;
    })?;
    let mut i = 0;
    let b = map_rows(x, shape, |row, out| {
        draws_b[i].apply(row, shape, cfg.pad, out);
        i += 1;
    })?;
    Ok((a, b))
}

/// Barlow Twins objective `Σᵢ (1 − Cᵢᵢ)² + λ Σ_{i≠j} Cᵢⱼ²` where `C` is the
/// cross-correlation of the per-dimension standardized embeddings.
pub fn barlow_twins_loss<'t, T: Real>(za: Var<'t, T>, zb: Var<'t, T>, lambda: f64) -> Result<Var<'t, T>> {
    let (b, d) = za.value().dims2()?;
    if zb.shape() != [b, d] {
        return Err(Error::Dimension {
            op: "barlow_twins_loss",
            lhs: za.shape(),
            rhs: zb.shape(),
        });
    }
    if b < 2 {
        return Err(Error::contract(format!("Barlow Twins needs a batch of at least 2, got {b}")));
    }
    let (na, _) = za.batch_norm(None, BT_EPS)?;
    let (nb, _) = zb.batch_norm(None, BT_EPS)?;
    let tape = za.tape();
    let c = na.matmul_tn(nb)?.scale(T::from_f64(1.0 / b as f64))?;
    let eye = tape.constant(Tensor::eye(d));
    let lam = T::from_f64(lambda);
    let weights = tape.constant(Tensor::from_fn([d, d], |i| if i / d == i % d { T::ONE } else { lam }));
    c.sub(eye)?.square()?.mul(weights)?.sum()
}

/// `Linear → BN → ReLU → Linear(+bias)` head mapping features to embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector<T: Real> {
    /// `[w1, gamma, beta, w2, b2]`.
    pub params: Vec<Tensor<T>>,
    pub running: RunningStats<T>,
}

impl<T: Real> Projector<T> {
    pub fn init(rng: &mut RngState, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        let he = |rng: &mut RngState, r: usize, c: usize| {
            let std = (2.0 / r as f64).sqrt();
            Tensor::from_fn([r, c], |_| T::from_f64(std * rng.normal()))
        };
        let w1 = he(rng, in_dim, hidden);
        let w2 = he(rng, hidden, out_dim);
        Self {
            params: vec![w1, Tensor::ones([hidden]), Tensor::zeros([hidden]), w2, Tensor::zeros([out_dim])],
            running: RunningStats {
                mean: Tensor::zeros([hidden]),
                var: Tensor::ones([hidden]),
            },
        }
    }

    pub fn out_dim(&self) -> usize {
        self.params[4].len()
    }

    pub fn forward<'t>(
        &self,
        p: &[Var<'t, T>],
        feats: Var<'t, T>,
        mode: Mode,
    ) -> Result<(Var<'t, T>, Option<BatchStats<T>>)> {
        let h = feats.matmul(p[0])?;
        let (h, stats) = match mode {
            Mode::Eval => (h.fixed_norm(&self.running.mean, &self.running.var, Some((p[1], p[2])), BN_EPS)?, None),
            _ => {
                let (h, s) = h.batch_norm(Some((p[1], p[2])), BN_EPS)?;
                (h, Some(s))
            }
        };
        Ok((h.relu()?.matmul(p[3])?.add_bias(p[4])?, stats))
    }

    fn update_running(&mut self, s: &BatchStats<T>) -> Result<()> {
        let m = T::from_f64(BN_MOMENTUM);
        let keep = T::ONE - m;
        self.running.mean = self.running.mean.zip_map(&s.mean, "running_mean", |r, b| keep * r + m * b)?;
        self.running.var = self.running.var.zip_map(&s.var_unbiased, "running_var", |r, b| keep * r + m * b)?;
        Ok(())
    }
}

/// Which representation of the target model serves as regression target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetEmbedding {
    BackboneFeatures,
    ProjectorOutput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarlowTwinsConfig {
    pub lambda: f64,
    pub projector_hidden: usize,
    pub embed_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub target_embedding: TargetEmbedding,
}

impl Default for BarlowTwinsConfig {
    fn default() -> Self {
        Self {
            lambda: 5e-3,
            projector_hidden: 128,
            embed_dim: 64,
            epochs: 200,
            batch_size: 128,
            sgd: SgdConfig {
                lr: 0.05,
                momentum: 0.9,
                weight_decay: 5e-4,
            },
            target_embedding: TargetEmbedding::BackboneFeatures,
        }
    }
}

impl BarlowTwinsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::config("Barlow Twins lambda must be positive"));
        }
        if self.embed_dim < 2 || self.batch_size < 2 || self.projector_hidden == 0 {
            return Err(Error::config("embedding dim and batch size must be at least 2"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        Ok(())
    }
}

/// Frozen SSL network providing regression targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetModel<T: Real> {
    backbone: FeatureExtractor<T>,
    projector: Projector<T>,
    pub embedding: TargetEmbedding,
    frozen: bool,
}

impl<T: Real> TargetModel<T> {
    pub fn new(backbone: FeatureExtractor<T>, projector: Projector<T>, embedding: TargetEmbedding) -> Self {
        Self {
            backbone,
            projector,
            embedding,
            frozen: false,
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn backbone(&self) -> &FeatureExtractor<T> {
        &self.backbone
    }

    pub fn projector(&self) -> &Projector<T> {
        &self.projector
    }

    pub fn backbone_mut(&mut self) -> Result<&mut FeatureExtractor<T>> {
        if self.frozen {
            return Err(Error::contract("target model is frozen"));
        }
        Ok(&mut self.backbone)
    }

    pub fn projector_mut(&mut self) -> Result<&mut Projector<T>> {
        if self.frozen {
            return Err(Error::contract("target model is frozen"));
        }
        Ok(&mut self.projector)
    }

    pub fn set_embedding(&mut self, embedding: TargetEmbedding) -> Result<()> {
        if self.frozen {
            return Err(Error::contract("target model is frozen"));
        }
        self.embedding = embedding;
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        match self.embedding {
            TargetEmbedding::BackboneFeatures => self.backbone.feature_dim(),
            TargetEmbedding::ProjectorOutput => self.projector.out_dim(),
        }
    }

    /// Eval-mode embedding of normalized rows.
    fn embed_rows(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bp = tape.inputs(&self.backbone.params, false);
        let (f, _) = self.backbone.forward(&bp, tape.constant(x.clone()), Mode::Eval)?;
        match self.embedding {
            TargetEmbedding::BackboneFeatures => Ok(f.value()),
            TargetEmbedding::ProjectorOutput => {
                let pp = tape.inputs(&self.projector.params, false);
                Ok(self.projector.forward(&pp, f, Mode::Eval)?.0.value())
            }
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        self.backbone.save(&dir.join("backbone"))?;
        for (i, p) in self.projector.params.iter().enumerate() {
            let name = format!("projector{i}");
            save_bundle(p, &dir.join(&name), &name)?;
        }
        save_bundle(&self.projector.running.mean, &dir.join("projector_mean"), "projector_mean")?;
        save_bundle(&self.projector.running.var, &dir.join("projector_var"), "projector_var")?;
        write_json(&dir.join("target.json"), &TargetHeader {
            embedding: self.embedding,
        })
    }

    /// Loads a checkpoint; the result is frozen.
    pub fn load(dir: &Path) -> Result<Self> {
        let header: TargetHeader = read_json(&dir.join("target.json"))?;
        let backbone = FeatureExtractor::load(&dir.join("backbone"))?;
        let params = (0..5)
            .map(|i| load_bundle(&dir.join(format!("projector{i}"))))
            .collect::<Result<Vec<Tensor<T>>>>()?;
        let projector = Projector {
            params,
            running: RunningStats {
                mean: load_bundle(&dir.join("projector_mean"))?,
                var: load_bundle(&dir.join("projector_var"))?,
            },
        };
        let mut model = Self::new(backbone, projector, header.embedding);
        model.freeze();
        Ok(model)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TargetHeader {
    embedding: TargetEmbedding,
}

/// Eval-mode embeddings of normalized rows, computed in batches of
/// `batch_size` and concatenated in order.
pub fn embed_dataset<T: Real>(phi: &TargetModel<T>, x: &Tensor<T>, batch_size: usize) -> Result<Tensor<T>> {
    if !phi.is_frozen() {
        return Err(Error::contract("embed_dataset needs a frozen target model"));
    }
    if batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let n = x.rows();
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        parts.push(phi.embed_rows(&x.slice_rows(start, end))?);
        start = end;
    }
    if parts.is_empty() {
        return Ok(Tensor::zeros([0, phi.embed_dim()]));
    }
    Tensor::concat_rows(&parts)
}

#[derive(Debug, Clone)]
pub struct TargetTraining<T: Real> {
    pub model: TargetModel<T>,
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

/// Trains backbone and projector with Barlow Twins on raw `[0, 1]` images,
/// normalizing each augmented view, and returns the frozen model.
pub fn train_target<T: Real>(
    rng: &mut RngState,
    x_raw: &Tensor<T>,
    norm: &Normalization,
    arch: &Arch,
    cfg: &BarlowTwinsConfig,
    aug: &AugmentationConfig,
) -> Result<TargetTraining<T>> {
    cfg.validate()?;
    aug.validate()?;
    let n = x_raw.rows();
    if n < cfg.batch_size {
        return Err(Error::contract(format!(
            "{n} training rows is fewer than the batch size {}",
            cfg.batch_size
        )));
    }
    let mut init_rng = rng.split();
    let backbone = FeatureExtractor::init(&mut init_rng, arch)?;
    let projector = Projector::init(&mut init_rng, backbone.feature_dim(), cfg.projector_hidden, cfg.embed_dim);
    let mut model = TargetModel::new(backbone, projector, cfg.target_embedding);
    let nb = model.backbone.params.len();

    let mut params: Vec<Tensor<T>> = model.backbone.params.iter().chain(&model.projector.params).cloned().collect();
    let mut opt = Sgd::new(cfg.sgd, &params);
    let steps_per_epoch = n / cfg.batch_size;
    let total = steps_per_epoch * cfg.epochs;
    let mut step_losses = Vec::with_capacity(total);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let order = rng.permutation(n);
        let mut epoch_sum = 0.0;
        for batch in order.chunks_exact(cfg.batch_size) {
            let xb = x_raw.select_rows(batch);
            let (va, vb) = augment_two_views(rng, &xb, norm.shape, aug)?;
            let (va, vb) = (norm.apply(&va)?, norm.apply(&vb)?);
            let tape = Tape::new();
            let p = tape.inputs(&params, true);
            let (bp, pp) = p.split_at(nb);
            let train = |v: Tensor<T>| -> Result<_> {
                let (f, bs) = model.backbone.forward(bp, tape.constant(v), Mode::Train)?;
                let (z, ps) = model.projector.forward(pp, f, Mode::Train)?;
                Ok((z, bs, ps))
            };
            let fail = |e: Error| Error::Training {
                step,
                reason: e.to_string(),
            };
            let (za, bsa, psa) = train(va).map_err(fail)?;
            let (zb, bsb, psb) = train(vb).map_err(fail)?;
            let loss = barlow_twins_loss(za, zb, cfg.lambda).map_err(fail)?;
            let value = loss.item().to_f64();
            let grads = tape.backward(loss).map_err(fail)?.wrt_all(&p);
            let factor = lr_schedule(Schedule::Cosine, step, total)?;
            opt.step(&mut params, &grads, factor).map_err(fail)?;
            model.backbone.params = params[..nb].to_vec();
            model.projector.params = params[nb..].to_vec();
            for bs in [bsa, bsb] {
                model.backbone.update_running(&bs)?;
            }
            for ps in [psa, psb].into_iter().flatten() {
                model.projector.update_running(&ps)?;
            }
            step_losses.push(value);
            epoch_sum += value;
            step += 1;
        }
        let mean = epoch_sum / steps_per_epoch as f64;
        log::debug!("target epoch {} loss {mean:.5}", epoch_losses.len());
        epoch_losses.push(mean);
    }
    model.freeze();
    Ok(TargetTraining {
        model,
        step_losses,
        epoch_losses,
    })
}

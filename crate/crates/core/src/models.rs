//! Feature extractors (ConvNet, MLP) and linear heads.
//!
//! Parameters are kept as a flat list of tensors so optimizers can update
//! them uniformly; the architecture fixes the layout. Each layer stores its
//! weight followed by either `gamma, beta` (batch norm) or a bias.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Tape, Var};
use crate::bundle::{create_dir, load_bundle, read_json, save_bundle, write_json};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    BatchNorm,
    None,
}

/// Stack of `conv3x3 → norm → ReLU → avgpool2` blocks over CHW images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvNetConfig {
    pub depth: usize,
    pub width: usize,
    pub channels: usize,
    pub height: usize,
    pub width_px: usize,
    pub norm: Norm,
}

impl ConvNetConfig {
    pub fn new(depth: usize, width: usize, channels: usize, image: usize) -> Self {
        Self {
            depth,
            width,
            channels,
            height: image,
            width_px: image,
            norm: Norm::BatchNorm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::config("convnet depth, width and channels must be positive"));
        }
        let f = 1usize << self.depth.min(63);
        if self.height % f != 0 || self.width_px % f != 0 {
            return Err(Error::config(format!(
                "image {}x{} cannot be halved {} times",
                self.height, self.width_px, self.depth
            )));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        let f = 1usize << self.depth;
        self.width * (self.height / f) * (self.width_px / f)
    }
}

/// Fully connected `linear → norm → ReLU` layers on flattened rows; the
/// last hidden layer is the feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub norm: Norm,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() {
            return Err(Error::config("mlp needs at least one hidden layer"));
        }
        if self.input_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::config("mlp layer sizes must be positive"));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.hidden.last().unwrap_or(&0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arch {
    ConvNet(ConvNetConfig),
    Mlp(MlpConfig),
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        match self {
            Arch::ConvNet(c) => c.validate(),
            Arch::Mlp(c) => c.validate(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Arch::ConvNet(c) => c.feature_dim(),
            Arch::Mlp(c) => c.feature_dim(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Arch::ConvNet(c) => c.channels * c.height * c.width_px,
            Arch::Mlp(c) => c.input_dim,
        }
    }

    fn norm(&self) -> Norm {
        match self {
            Arch::ConvNet(c) => c.norm,
            Arch::Mlp(c) => c.norm,
        }
    }

    /// `(weight shape, fan_in, out channels)` per layer.
    fn layers(&self) -> Vec<(Vec<usize>, usize, usize)> {
        match self {
            Arch::ConvNet(c) => (0..c.depth)
                .map(|i| {
                    let cin = if i == 0 { c.channels } else { c.width };
                    (vec![c.width, 3, 3, cin], 9 * cin, c.width)
                })
                .collect(),
            Arch::Mlp(c) => {
                let mut prev = c.input_dim;
                c.hidden
                    .iter()
                    .map(|&h| {
                        let l = (vec![prev, h], prev, h);
                        prev = h;
                        l
                    })
                    .collect()
            }
        }
    }

    fn tensors_per_layer(&self) -> usize {
        match self.norm() {
            Norm::BatchNorm => 3,
            Norm::None => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
    /// Batch statistics without touching running statistics.
    BatchStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T: Real> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

/// Parameters of a feature extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor<T: Real> {
    pub arch: Arch,
    pub params: Vec<Tensor<T>>,
    pub running: Vec<RunningStats<T>>,
}

/// He (fan-in) normal initialization.
fn he_normal<T: Real>(rng: &mut RngState, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64(std * rng.normal()))
}

impl<T: Real> FeatureExtractor<T> {
    pub fn init(rng: &mut RngState, arch: &Arch) -> Result<Self> {
        arch.validate()?;
        let mut params = Vec::new();
        let mut running = Vec::new();
        for (shape, fan_in, out) in arch.layers() {
            params.push(he_normal(rng, &shape, fan_in));
            match arch.norm() {
                Norm::BatchNorm => {
                    params.push(Tensor::ones([out]));
                    params.push(Tensor::zeros([out]));
                    running.push(RunningStats {
                        mean: Tensor::zeros([out]),
                        var: Tensor::ones([out]),
                    });
                }
                Norm::None => params.push(Tensor::zeros([out])),
            }
        }
        Ok(Self {
            arch: arch.clone(),
            params,
            running,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Differentiable forward pass with parameters already placed on a tape.
    /// Returns features `[batch, d_h]` and the batch statistics of every
    /// norm layer (empty in eval mode).
    pub fn forward<'t>(
        &self,
        params: &[Var<'t, T>],
        x: Var<'t, T>,
        mode: Mode,
    ) -> Result<(Var<'t, T>, Vec<BatchStats<T>>)> {
        if params.len() != self.params.len() {
            return Err(Error::contract(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                params.len()
            )));
        }
        let (n, d) = x.value().dims2()?;
        if d != self.arch.input_dim() {
            return Err(Error::Dimension {
                op: "forward_features",
                lhs: vec![n, d],
                rhs: vec![n, self.arch.input_dim()],
            });
        }
        if mode != Mode::Eval && self.arch.norm() == Norm::BatchNorm && n < 2 {
            return Err(Error::contract(format!(
                "batch statistics need at least 2 samples, got {n}"
            )));
        }
        let per = self.arch.tensors_per_layer();
        let mut stats = Vec::new();
        let mut h = match &self.arch {
            Arch::ConvNet(c) => x.chw_to_nhwc(c.channels, c.height, c.width_px)?,
            Arch::Mlp(_) => x,
        };
        for (layer, p) in params.chunks(per).enumerate() {
            h = match &self.arch {
                Arch::ConvNet(_) => h.conv2d(p[0])?,
                Arch::Mlp(_) => h.matmul(p[0])?,
            };
            h = match self.arch.norm() {
                Norm::BatchNorm => match mode {
                    Mode::Eval => {
                        let rs = &self.running[layer];
                        h.fixed_norm(&rs.mean, &rs.var, Some((p[1], p[2])), BN_EPS)?
                    }
                    Mode::Train | Mode::BatchStats => {
                        let (out, s) = h.batch_norm(Some((p[1], p[2])), BN_EPS)?;
                        stats.push(s);
                        out
                    }
                },
                Norm::None => h.add_bias(p[1])?,
            };
            h = h.relu()?;
            if let Arch::ConvNet(_) = self.arch {
                h = h.avg_pool2()?;
            }
        }
        let dh = self.feature_dim();
        let feats = h.reshape([n, dh])?;
        Ok((feats, stats))
    }

    /// Exponential running-statistic update from one train-mode pass.
    pub fn update_running(&mut self, stats: &[BatchStats<T>]) -> Result<()> {
        if stats.len() != self.running.len() {
            return Err(Error::contract("batch statistics do not match norm layers"));
        }
        let m = T::from_f64(BN_MOMENTUM);
        let keep = T::ONE - m;
        for (rs, s) in self.running.iter_mut().zip(stats) {
            rs.mean = rs.mean.zip_map(&s.mean, "running_mean", |r, b| keep * r + m * b)?;
            rs.var = rs.var.zip_map(&s.var_unbiased, "running_var", |r, b| keep * r + m * b)?;
        }
        Ok(())
    }

    /// Non-differentiable features. Train mode also updates running statistics.
    pub fn features(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (f, stats) = self.features_with_stats(x, mode)?;
        if mode == Mode::Train {
            self.update_running(&stats)?;
        }
        Ok(f)
    }

    /// Features without mutating anything; `mode` must not be [`Mode::Train`].
    pub fn embed(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if mode == Mode::Train {
            return Err(Error::contract("embed is read-only; use eval or batch_stats mode"));
        }
        Ok(self.features_with_stats(x, mode)?.0)
    }

    fn features_with_stats(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Vec<BatchStats<T>>)> {
        let tape = Tape::new();
        let p = tape.inputs(&self.params, false);
        let (f, stats) = self.forward(&p, tape.constant(x.clone()), mode)?;
        Ok((f.value(), stats))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        let header = ModelHeader {
            arch: self.arch.clone(),
            params: self.params.len(),
            norm_layers: self.running.len(),
        };
        write_json(&dir.join("model.json"), &header)?;
        for (i, p) in self.params.iter().enumerate() {
            let name = format!("param{i}");
            save_bundle(p, &dir.join(&name), &name)?;
        }
        for (i, rs) in self.running.iter().enumerate() {
            save_bundle(&rs.mean, &dir.join(format!("running_mean{i}")), &format!("running_mean{i}"))?;
            save_bundle(&rs.var, &dir.join(format!("running_var{i}")), &format!("running_var{i}"))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let header: ModelHeader = read_json(&dir.join("model.json"))?;
        header.arch.validate()?;
        let params = (0..header.params)
            .map(|i| load_bundle(&dir.join(format!("param{i}"))))
            .collect::<Result<Vec<_>>>()?;
        let running = (0..header.norm_layers)
            .map(|i| {
                Ok(RunningStats {
                    mean: load_bundle(&dir.join(format!("running_mean{i}")))?,
                    var: load_bundle(&dir.join(format!("running_var{i}")))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let expected = FeatureExtractor::<T>::init(&mut RngState::new(0), &header.arch)?;
        for (p, e) in params.iter().zip(&expected.params) {
            if p.shape() != e.shape() {
                return Err(Error::format("shape", format!("parameter {:?} vs {:?}", p.shape(), e.shape())));
            }
        }
        if params.len() != expected.params.len() || running.len() != expected.running.len() {
            return Err(Error::format("params", "parameter count does not match architecture"));
        }
        Ok(Self {
            arch: header.arch,
            params,
            running,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    arch: Arch,
    params: usize,
    norm_layers: usize,
}

/// Linear head `v ↦ vᵀW` with `W: d_h × d_y`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead<T: Real> {
    pub weight: Tensor<T>,
}

impl<T: Real> LinearHead<T> {
    pub fn init(rng: &mut RngState, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: he_normal(rng, &[in_dim, out_dim], in_dim),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Tensor::zeros([in_dim, out_dim]),
        }
    }

    pub fn forward<'t>(weight: Var<'t, T>, features: Var<'t, T>) -> Result<Var<'t, T>> {
        let (_, dh) = features.value().dims2()?;
        let (rows, _) = weight.value().dims2()?;
        if dh != rows {
            return Err(Error::Dimension {
                op: "forward_head",
                lhs: features.shape(),
                rhs: weight.shape(),
            });
        }
        features.matmul(weight)
    }

    pub fn apply(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        Ok(Self::forward(tape.constant(self.weight.clone()), tape.constant(features.clone()))?.value())
    }
}

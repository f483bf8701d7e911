//! Distilled-set initialization, the model pool, and the meta-training loop.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::bundle::{create_dir, load_bundle, read_json, save_bundle, write_json};
use crate::error::{Error, Result};
use crate::krr::{meta_grad, RidgeConfig};
use crate::models::{Arch, ConvNetConfig, FeatureExtractor, LinearHead, Mode};
use crate::optim::{lr_schedule, AdamW, AdamWConfig, Schedule, Sgd, SgdConfig};
use crate::rng::RngState;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetInit {
    /// Targets of the selected rows under the frozen target model.
    TargetEmbed,
    StandardNormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub m: usize,
    pub pool_size: usize,
    /// Inner steps a pool entry takes before it is reset.
    pub horizon: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub meta: AdamWConfig,
    pub inner: SgdConfig,
    pub ridge: RidgeConfig,
    pub target_init: TargetInit,
    pub arch: Arch,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            m: 32,
            pool_size: 4,
            horizon: 200,
            iterations: 5000,
            batch_size: 64,
            meta: AdamWConfig::default(),
            inner: SgdConfig::default(),
            ridge: RidgeConfig::default(),
            target_init: TargetInit::TargetEmbed,
            arch: Arch::ConvNet(ConvNetConfig::new(3, 32, 3, 16)),
            seed: 0,
        }
    }
}

impl DistillConfig {
    /// Full-scale settings: ten pool models, horizon 1000, 160k iterations.
    pub fn large_preset() -> Self {
        Self {
            pool_size: 10,
            horizon: 1000,
            iterations: 160_000,
            batch_size: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.pool_size == 0 || self.horizon == 0 || self.batch_size == 0 {
            return Err(Error::config("m, pool_size, horizon and batch_size must all be at least 1"));
        }
        self.ridge.validate()?;
        self.arch.validate()
    }
}

/// Learned inputs and targets with their optimizer state.
#[derive(Debug, Clone)]
pub struct DistilledSet<T: Real> {
    pub x: Tensor<T>,
    pub y: Tensor<T>,
    pub optimizer: AdamW<T>,
    pub step: usize,
}

impl<T: Real> DistilledSet<T> {
    pub fn new(x: Tensor<T>, y: Tensor<T>, config: AdamWConfig) -> Result<Self> {
        if x.rows() != y.rows() {
            return Err(Error::Dimension {
                op: "distilled_set",
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        let optimizer = AdamW::new(config, &[x.clone(), y.clone()]);
        Ok(Self { x, y, optimizer, step: 0 })
    }
}

/// One feature extractor and linear head trained on the current distilled
/// set, with its inner-step counter.
#[derive(Debug, Clone)]
pub struct PoolEntry<T: Real> {
    pub model: FeatureExtractor<T>,
    pub head: LinearHead<T>,
    pub t: usize,
    pub optimizer: Sgd<T>,
}

impl<T: Real> PoolEntry<T> {
    pub fn fresh(rng: &mut RngState, arch: &Arch, out_dim: usize, inner: SgdConfig) -> Result<Self> {
        let model = FeatureExtractor::init(rng, arch)?;
        let head = LinearHead::init(rng, model.feature_dim(), out_dim);
        let mut all = model.params.clone();
        all.push(head.weight.clone());
        Ok(Self {
            optimizer: Sgd::new(inner, &all),
            model,
            head,
            t: 0,
        })
    }

    fn params(&self) -> Vec<Tensor<T>> {
        let mut p = self.model.params.clone();
        p.push(self.head.weight.clone());
        p
    }
}

/// `½‖Y − h(f(X))‖²_F` and the parameter gradients of its per-element mean
/// (batch-statistics features).
pub fn regression_loss_and_grads<T: Real>(
    model: &FeatureExtractor<T>,
    head: &LinearHead<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let tape = Tape::new();
    let mut params = tape.inputs(&model.params, true);
    let w = tape.leaf(head.weight.clone());
    let (f, _) = model.forward(&params, tape.constant(x.clone()), Mode::BatchStats)?;
    let pred = LinearHead::forward(w, f)?;
    if pred.shape() != y.shape() {
        return Err(Error::Dimension {
            op: "regression_loss",
            lhs: pred.shape(),
            rhs: y.shape().to_vec(),
        });
    }
    let half_sq = pred.sub(tape.constant(y.clone()))?.sum_sq()?.scale(T::from_f64(0.5))?;
    let value = half_sq.item().to_f64();
    let mean = half_sq.scale(T::from_f64(1.0 / y.len().max(1) as f64))?;
    params.push(w);
    let grads = tape.backward(mean)?.wrt_all(&params);
    Ok((value, grads))
}

/// One full-batch SGD step of the entry on `(x, y)`; returns the loss
/// `½‖R‖²_F` before the step.
pub fn inner_step<T: Real>(entry: &mut PoolEntry<T>, x: &Tensor<T>, y: &Tensor<T>, horizon: usize) -> Result<f64> {
    if entry.t >= horizon {
        return Err(Error::contract(format!("inner step at t = {} with horizon {horizon}", entry.t)));
    }
    let (loss, grads) = regression_loss_and_grads(&entry.model, &entry.head, x, y)?;
    let mut params = entry.params();
    entry.optimizer.step(&mut params, &grads, 1.0)?;
    entry.head.weight = params.pop().expect("head weight");
    entry.model.params = params;
    entry.t += 1;
    Ok(loss)
}

/// Replaces an entry that has reached the horizon with a fresh one.
pub fn reset_entry<T: Real>(rng: &mut RngState, entry: &mut PoolEntry<T>, horizon: usize) -> Result<()> {
    if entry.t < horizon {
        return Err(Error::contract(format!("reset at t = {} before horizon {horizon}", entry.t)));
    }
    let out_dim = entry.head.weight.shape()[1];
    let arch = entry.model.arch.clone();
    *entry = PoolEntry::fresh(rng, &arch, out_dim, entry.optimizer.config)?;
    Ok(())
}

/// `m` distinct rows of `x_t` and their initial targets. `targets` holds the
/// frozen target model's embeddings of `x_t`, row-aligned.
pub fn init_distilled<T: Real>(
    rng: &mut RngState,
    x_t: &Tensor<T>,
    targets: &Tensor<T>,
    cfg: &DistillConfig,
) -> Result<(DistilledSet<T>, Vec<usize>)> {
    cfg.validate()?;
    let n = x_t.rows();
    if cfg.m > n {
        return Err(Error::contract(format!("cannot pick {} distinct rows from {n}", cfg.m)));
    }
    if targets.rows() != n {
        return Err(Error::Dimension {
            op: "init_distilled",
            lhs: x_t.shape().to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    let idx = rng.sample_distinct(n, cfg.m);
    let x = x_t.select_rows(&idx);
    let y = match cfg.target_init {
        TargetInit::TargetEmbed => targets.select_rows(&idx),
        TargetInit::StandardNormal => Tensor::randn(rng, [cfg.m, targets.row_len()]),
    };
    Ok((DistilledSet::new(x, y, cfg.meta)?, idx))
}

/// Fresh entries, each trained for a uniform number of steps in `[1, horizon]`.
pub fn init_pool<T: Real>(
    rng: &mut RngState,
    x_s: &Tensor<T>,
    y_s: &Tensor<T>,
    cfg: &DistillConfig,
) -> Result<Vec<PoolEntry<T>>> {
    cfg.validate()?;
    (0..cfg.pool_size)
        .map(|_| {
            let steps = 1 + rng.index(cfg.horizon);
            let mut entry = PoolEntry::fresh(&mut rng.split(), &cfg.arch, y_s.row_len(), cfg.inner)?;
            for _ in 0..steps {
                inner_step(&mut entry, x_s, y_s, cfg.horizon)?;
            }
            Ok(entry)
        })
        .collect()
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub outer_loss: f64,
    pub pool_index: usize,
    /// Counter of the sampled entry after its update.
    pub t: usize,
    pub jitter: f64,
    pub ridge: f64,
    pub reset: bool,
}

/// Mini-batch meta-gradient step on the distilled set followed by the
/// sampled entry's inner update (or reset).
pub fn meta_step<T: Real>(
    state: &mut DistilledSet<T>,
    pool: &mut [PoolEntry<T>],
    x_t: &Tensor<T>,
    targets: &Tensor<T>,
    rng: &mut RngState,
    cfg: &DistillConfig,
) -> Result<StepRecord> {
    if pool.is_empty() {
        return Err(Error::contract("empty model pool"));
    }
    let n = x_t.rows();
    let b = cfg.batch_size.min(n);
    let batch = rng.sample_distinct(n, b);
    let i = rng.index(pool.len());
    let xb = x_t.select_rows(&batch);
    let gb = targets.select_rows(&batch);
    let step = state.step;
    let train_err = |e: Error| match e {
        e @ (Error::Singular { .. } | Error::Numeric { .. }) => Error::Training {
            step,
            reason: e.to_string(),
        },
        e => e,
    };
    let mg = meta_grad(&pool[i].model, &state.x, &state.y, &xb, &gb, &cfg.ridge).map_err(train_err)?;
    let factor = lr_schedule(Schedule::LinearDecay, step.min(cfg.iterations), cfg.iterations.max(1))?;
    let mut xy = [state.x.clone(), state.y.clone()];
    state.optimizer.step(&mut xy, &[mg.grad_x, mg.grad_y], factor).map_err(train_err)?;
    let [x, y] = xy;
    state.x = x;
    state.y = y;
    state.step += 1;

    let entry = &mut pool[i];
    let reset = entry.t >= cfg.horizon;
    if reset {
        reset_entry(&mut rng.split(), entry, cfg.horizon)?;
    } else {
        inner_step(entry, &state.x, &state.y, cfg.horizon).map_err(train_err)?;
    }
    Ok(StepRecord {
        step,
        outer_loss: mg.loss,
        pool_index: i,
        t: entry.t,
        jitter: mg.info.jitter,
        ridge: mg.info.ridge,
        reset,
    })
}

/// Complete resumable state of a run.
#[derive(Debug, Clone)]
pub struct DistillState<T: Real> {
    pub set: DistilledSet<T>,
    pub pool: Vec<PoolEntry<T>>,
    pub rng: RngState,
    /// Rows of the source set the distilled inputs started from.
    pub init_indices: Vec<usize>,
}

impl<T: Real> DistillState<T> {
    pub fn init(x_t: &Tensor<T>, targets: &Tensor<T>, cfg: &DistillConfig) -> Result<Self> {
        let mut rng = RngState::new(cfg.seed);
        let (set, init_indices) = init_distilled(&mut rng, x_t, targets, cfg)?;
        let pool = init_pool(&mut rng, &set.x, &set.y, cfg)?;
        Ok(Self {
            set,
            pool,
            rng,
            init_indices,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        save_bundle(&self.set.x, &dir.join("x_s"), "x_s")?;
        save_bundle(&self.set.y, &dir.join("y_s"), "y_s")?;
        let opt = &self.set.optimizer;
        for (k, (m, v)) in opt.first_moment.iter().zip(&opt.second_moment).enumerate() {
            save_bundle(m, &dir.join(format!("adam_m{k}")), &format!("adam_m{k}"))?;
            save_bundle(v, &dir.join(format!("adam_v{k}")), &format!("adam_v{k}"))?;
        }
        for (i, e) in self.pool.iter().enumerate() {
            let edir = dir.join(format!("entry{i}"));
            e.model.save(&edir.join("model"))?;
            save_bundle(&e.head.weight, &edir.join("head"), "head")?;
            for (k, v) in e.optimizer.velocity.iter().enumerate() {
                save_bundle(v, &edir.join(format!("velocity{k}")), &format!("velocity{k}"))?;
            }
        }
        write_json(&dir.join("state.json"), &CheckpointHeader {
            step: self.set.step,
            rng: self.rng,
            meta: opt.config,
            meta_steps: opt.steps,
            inner: self.pool.first().map(|e| e.optimizer.config).unwrap_or_default(),
            entries: self
                .pool
                .iter()
                .map(|e| EntryHeader {
                    t: e.t,
                    steps: e.optimizer.steps,
                })
                .collect(),
            init_indices: self.init_indices.clone(),
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let h: CheckpointHeader = read_json(&dir.join("state.json"))?;
        let x = load_bundle(&dir.join("x_s"))?;
        let y = load_bundle(&dir.join("y_s"))?;
        let mut set = DistilledSet::new(x, y, h.meta)?;
        set.step = h.step;
        set.optimizer.steps = h.meta_steps;
        for k in 0..2 {
            set.optimizer.first_moment[k] = load_bundle(&dir.join(format!("adam_m{k}")))?;
            set.optimizer.second_moment[k] = load_bundle(&dir.join(format!("adam_v{k}")))?;
        }
        let pool = h
            .entries
            .iter()
            .enumerate()
            .map(|(i, eh)| {
                let edir = dir.join(format!("entry{i}"));
                let model = FeatureExtractor::load(&edir.join("model"))?;
                let head = LinearHead {
                    weight: load_bundle(&edir.join("head"))?,
                };
                let velocity = (0..=model.params.len())
                    .map(|k| load_bundle(&edir.join(format!("velocity{k}"))))
                    .collect::<Result<Vec<_>>>()?;
                Ok(PoolEntry {
                    model,
                    head,
                    t: eh.t,
                    optimizer: Sgd {
                        config: h.inner,
                        velocity,
                        steps: eh.steps,
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            set,
            pool,
            rng: h.rng,
            init_indices: h.init_indices,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryHeader {
    t: usize,
    steps: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    step: usize,
    rng: RngState,
    meta: AdamWConfig,
    meta_steps: u64,
    inner: SgdConfig,
    entries: Vec<EntryHeader>,
    init_indices: Vec<usize>,
}

/// Where and how often a run writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Directory for `log.jsonl`, checkpoints and the final bundles.
    pub out_dir: Option<PathBuf>,
    /// Checkpoint interval in steps (0 disables checkpoints).
    pub checkpoint_every: usize,
    /// Stop early after this many total steps, leaving the run resumable.
    pub stop_at: Option<usize>,
}

pub const LOG_FILE: &str = "log.jsonl";

pub fn checkpoint_dir(out_dir: &Path, step: usize) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step{step:07}"))
}

#[derive(Debug, Clone)]
pub struct DistillRun<T: Real> {
    pub state: DistillState<T>,
    /// Records produced by this invocation.
    pub log: Vec<StepRecord>,
}

/// Runs the meta loop from a fresh initialization.
pub fn run_distillation<T: Real>(
    x_t: &Tensor<T>,
    targets: &Tensor<T>,
    cfg: &DistillConfig,
    opts: &RunOptions,
) -> Result<DistillRun<T>> {
    let state = DistillState::init(x_t, targets, cfg)?;
    if let Some(dir) = &opts.out_dir {
        create_dir(dir)?;
        let path = dir.join(LOG_FILE);
        fs::write(&path, b"").map_err(|e| Error::io(&path, e))?;
    }
    continue_run(state, x_t, targets, cfg, opts)
}

/// Resumes from a checkpoint; the log in `opts.out_dir` is truncated to the
/// checkpoint step before new lines are appended.
pub fn resume_distillation<T: Real>(
    checkpoint: &Path,
    x_t: &Tensor<T>,
    targets: &Tensor<T>,
    cfg: &DistillConfig,
    opts: &RunOptions,
) -> Result<DistillRun<T>> {
    let state = DistillState::load(checkpoint)?;
    if state.pool.len() != cfg.pool_size || state.set.x.rows() != cfg.m {
        return Err(Error::config("checkpoint does not match the configuration"));
    }
    if let Some(dir) = &opts.out_dir {
        let path = dir.join(LOG_FILE);
        let kept: Vec<String> = match fs::File::open(&path) {
            Ok(f) => BufReader::new(f)
                .lines()
                .take(state.set.step)
                .collect::<std::io::Result<_>>()
                .map_err(|e| Error::io(&path, e))?,
            Err(_) => Vec::new(),
        };
        let mut text = kept.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    continue_run(state, x_t, targets, cfg, opts)
}

fn continue_run<T: Real>(
    mut state: DistillState<T>,
    x_t: &Tensor<T>,
    targets: &Tensor<T>,
    cfg: &DistillConfig,
    opts: &RunOptions,
) -> Result<DistillRun<T>> {
    cfg.validate()?;
    let mut log_file = match &opts.out_dir {
        Some(dir) => {
            let path = dir.join(LOG_FILE);
            Some((
                fs::OpenOptions::new().append(true).create(true).open(&path).map_err(|e| Error::io(&path, e))?,
                path,
            ))
        }
        None => None,
    };
    let end = opts.stop_at.unwrap_or(cfg.iterations).min(cfg.iterations);
    let mut log = Vec::new();
    while state.set.step < end {
        let rec = meta_step(&mut state.set, &mut state.pool, x_t, targets, &mut state.rng, cfg)?;
        if let Some((f, path)) = log_file.as_mut() {
            let line = serde_json::to_string(&rec).map_err(|e| Error::json(path.as_path(), e))?;
            writeln!(f, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        if rec.step % 100 == 0 {
            log::info!("meta step {} outer loss {:.5} entry {} t {}", rec.step, rec.outer_loss, rec.pool_index, rec.t);
        }
        log.push(rec);
        let done = state.set.step;
        if let Some(dir) = &opts.out_dir {
            if opts.checkpoint_every > 0 && done % opts.checkpoint_every == 0 {
                state.save(&checkpoint_dir(dir, done))?;
            }
        }
    }
    if let Some(dir) = &opts.out_dir {
        if state.set.step == cfg.iterations {
            save_bundle(&state.set.x, &dir.join("x_s"), "x_s")?;
            save_bundle(&state.set.y, &dir.join("y_s"), "y_s")?;
        }
    }
    Ok(DistillRun { state, log })
}

/// Reads a JSON-lines run log.
pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .map(|l| {
            let l = l.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&l).map_err(|e| Error::json(path, e))
        })
        .collect()
}

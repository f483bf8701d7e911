//! Downstream protocols: pre-training on a distilled set, fine-tuning and
//! linear probing on labeled tasks, distillation from a teacher, and the
//! random-subset control.

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Tape};
use crate::data::LabeledSplit;
use crate::distill::{regression_loss_and_grads, DistilledSet};
use crate::error::{Error, Result};
use crate::models::{Arch, FeatureExtractor, LinearHead, Mode};
use crate::optim::{lr_schedule, AdamW, AdamWConfig, Schedule, Sgd, SgdConfig};
use crate::rng::RngState;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset<T: Real> {
    pub x: Tensor<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl<T: Real> LabeledDataset<T> {
    pub fn new(x: Tensor<T>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if x.rows() != labels.len() {
            return Err(Error::Dimension {
                op: "labeled_dataset",
                lhs: x.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if classes == 0 || labels.len() < classes {
            return Err(Error::contract(format!("{} samples for {classes} classes", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::contract(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self { x, labels, classes })
    }

    pub fn from_split(split: &LabeledSplit, classes: usize) -> Result<Self> {
        Self::new(split.x.cast(), split.labels.clone(), classes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn one_hot(&self, idx: &[usize]) -> Tensor<T> {
        let c = self.classes;
        let mut out = vec![T::ZERO; idx.len() * c];
        for (r, &i) in idx.iter().enumerate() {
            out[r * c + self.labels[i]] = T::ONE;
        }
        Tensor::new(vec![idx.len(), c], out).expect("one-hot shape")
    }
}

/// Mean and sample standard deviation of repeated measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n.max(1.0);
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            std,
            values: values.to_vec(),
        }
    }
}

fn training_error(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        e @ Error::Numeric { .. } => Error::Training {
            step,
            reason: e.to_string(),
        },
        e => e,
    }
}

/// Mini-batches of a fresh permutation per epoch; a trailing batch smaller
/// than two rows is dropped since batch statistics need two samples.
fn epoch_batches(rng: &mut RngState, n: usize, batch: usize) -> Vec<Vec<usize>> {
    let perm = rng.permutation(n);
    perm.chunks(batch).filter(|c| c.len() >= 2 || n < 2).map(<[usize]>::to_vec).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Capped at the distilled-set size.
    pub batch_size: usize,
    pub sgd: SgdConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 256,
            sgd: SgdConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Pretrained<T: Real> {
    pub model: FeatureExtractor<T>,
    pub head: LinearHead<T>,
    /// `½‖R‖²_F` over the whole set, summed over the epoch's batches.
    pub epoch_losses: Vec<f64>,
}

/// Regresses `h_W(f_ω(X_s))` onto `Y_s` from a fresh initialization.
pub fn pretrain_on_distilled<T: Real>(
    rng: &mut RngState,
    x_s: &Tensor<T>,
    y_s: &Tensor<T>,
    arch: &Arch,
    cfg: &PretrainConfig,
) -> Result<Pretrained<T>> {
    let m = x_s.rows();
    if m != y_s.rows() || m < 2 {
        return Err(Error::contract(format!("pretraining needs at least 2 paired rows, got {m}")));
    }
    if cfg.batch_size < 2 || cfg.epochs == 0 {
        return Err(Error::config("pretraining batch size must be at least 2 and epochs positive"));
    }
    let mut init = rng.split();
    let mut model = FeatureExtractor::init(&mut init, arch)?;
    let mut head = LinearHead::init(&mut init, model.feature_dim(), y_s.row_len());
    let mut params = model.params.clone();
    params.push(head.weight.clone());
    let mut opt = Sgd::new(cfg.sgd, &params);
    let batch = cfg.batch_size.min(m);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        for idx in epoch_batches(rng, m, batch) {
            let (xb, yb) = (x_s.select_rows(&idx), y_s.select_rows(&idx));
            let (loss, grads) = regression_loss_and_grads(&model, &head, &xb, &yb).map_err(training_error(step))?;
            opt.step(&mut params, &grads, 1.0).map_err(training_error(step))?;
            model.params = params[..params.len() - 1].to_vec();
            head.weight = params[params.len() - 1].clone();
            total += loss;
            step += 1;
        }
        if !total.is_finite() {
            return Err(Error::Training {
                step,
                reason: "non-finite pretraining loss".into(),
            });
        }
        epoch_losses.push(total);
    }
    Ok(Pretrained {
        model,
        head,
        epoch_losses,
    })
}

/// Replaces the running statistics with the batch statistics of all of `x`.
pub fn calibrate_running_stats<T: Real>(model: &mut FeatureExtractor<T>, x: &Tensor<T>) -> Result<()> {
    if model.running.is_empty() {
        return Ok(());
    }
    let tape = Tape::new();
    let p = tape.inputs(&model.params, false);
    let (_, stats) = model.forward(&p, tape.constant(x.clone()), Mode::BatchStats)?;
    for (rs, s) in model.running.iter_mut().zip(stats) {
        rs.mean = s.mean;
        rs.var = s.var_unbiased;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub eval_batch: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 64,
            sgd: SgdConfig::finetune(),
            eval_batch: 256,
        }
    }
}

impl FinetuneConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || self.eval_batch == 0 {
            return Err(Error::config("fine-tune batch size must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Finetuned<T: Real> {
    pub model: FeatureExtractor<T>,
    pub head: LinearHead<T>,
    pub accuracy: f64,
    pub losses: Vec<f64>,
}

pub fn argmax_rows<T: Real>(z: &Tensor<T>) -> Vec<usize> {
    let c = z.row_len().max(1);
    z.data()
        .chunks(c)
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, r[0]), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0
        })
        .collect()
}

fn accuracy_of(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

/// Features of `x` in chunks of `batch` rows.
fn features_in_batches<T: Real>(model: &FeatureExtractor<T>, x: &Tensor<T>, mode: Mode, batch: usize) -> Result<Tensor<T>> {
    let n = x.rows();
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = (start + batch).min(n);
        // Keep a batch-statistics tail at two rows or more.
        if mode != Mode::Eval && n - end == 1 {
            end = n;
        }
        parts.push(model.embed(&x.slice_rows(start, end), mode)?);
        start = end;
    }
    Tensor::concat_rows(&parts)
}

fn classifier_accuracy<T: Real>(
    model: &FeatureExtractor<T>,
    head: &LinearHead<T>,
    data: &LabeledDataset<T>,
    mode: Mode,
    batch: usize,
) -> Result<f64> {
    let f = features_in_batches(model, &data.x, mode, batch)?;
    Ok(accuracy_of(&argmax_rows(&head.apply(&f)?), &data.labels))
}

fn fresh_head<T: Real>(rng: &mut RngState, model: &FeatureExtractor<T>, classes: usize) -> LinearHead<T> {
    LinearHead::init(&mut rng.split(), model.feature_dim(), classes)
}

/// Trains a copy of `model` with a fresh head on `train` by cross-entropy
/// and reports accuracy on `test`.
pub fn finetune<T: Real>(
    rng: &mut RngState,
    model: &FeatureExtractor<T>,
    train: &LabeledDataset<T>,
    test: &LabeledDataset<T>,
    cfg: &FinetuneConfig,
) -> Result<Finetuned<T>> {
    let head = fresh_head(rng, model, train.classes);
    finetune_with_head(rng, model, head, train, test, cfg)
}

/// [`finetune`] starting from a given head.
pub fn finetune_with_head<T: Real>(
    rng: &mut RngState,
    model: &FeatureExtractor<T>,
    mut head: LinearHead<T>,
    train: &LabeledDataset<T>,
    test: &LabeledDataset<T>,
    cfg: &FinetuneConfig,
) -> Result<Finetuned<T>> {
    cfg.validate()?;
    if head.weight.shape() != [model.feature_dim(), train.classes] {
        return Err(Error::Dimension {
            op: "finetune",
            lhs: head.weight.shape().to_vec(),
            rhs: vec![model.feature_dim(), train.classes],
        });
    }
    let mut model = model.clone();
    calibrate_running_stats(&mut model, &train.x)?;
    let mut params = model.params.clone();
    params.push(head.weight.clone());
    let mut opt = Sgd::new(cfg.sgd, &params);
    let batch = cfg.batch_size.min(train.len());
    let mut queue: Vec<Vec<usize>> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if queue.is_empty() {
            queue = epoch_batches(rng, train.len(), batch);
            queue.reverse();
        }
        let idx = queue.pop().expect("non-empty epoch");
        let tape = Tape::new();
        let p = tape.inputs(&params, true);
        let (f, stats) = model
            .forward(&p[..p.len() - 1], tape.constant(train.x.select_rows(&idx)), Mode::Train)
            .map_err(training_error(step))?;
        let logits = LinearHead::forward(p[p.len() - 1], f)?;
        let loss = logits.soft_cross_entropy(&train.one_hot(&idx)).map_err(training_error(step))?;
        losses.push(loss.item().to_f64());
        let grads = tape.backward(loss).map_err(training_error(step))?.wrt_all(&p);
        let factor = lr_schedule(Schedule::Cosine, step, cfg.steps)?;
        opt.step(&mut params, &grads, factor).map_err(training_error(step))?;
        model.params = params[..params.len() - 1].to_vec();
        model.update_running(&stats)?;
    }
    head.weight = params.pop().expect("head");
    let accuracy = classifier_accuracy(&model, &head, test, Mode::Eval, cfg.eval_batch)?;
    Ok(Finetuned {
        model,
        head,
        accuracy,
        losses,
    })
}

/// Trains only a fresh head on frozen features; `model` is not modified.
pub fn linear_probe<T: Real>(
    rng: &mut RngState,
    model: &FeatureExtractor<T>,
    train: &LabeledDataset<T>,
    test: &LabeledDataset<T>,
    cfg: &FinetuneConfig,
) -> Result<Finetuned<T>> {
    cfg.validate()?;
    let mut calibrated = model.clone();
    calibrate_running_stats(&mut calibrated, &train.x)?;
    let mut head = fresh_head(rng, &calibrated, train.classes);
    let feats = features_in_batches(&calibrated, &train.x, Mode::Eval, cfg.eval_batch)?;
    let mut params = vec![head.weight.clone()];
    let mut opt = Sgd::new(cfg.sgd, &params);
    let batch = cfg.batch_size.min(train.len());
    let mut queue: Vec<Vec<usize>> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if queue.is_empty() {
            queue = epoch_batches(rng, train.len(), batch);
            queue.reverse();
        }
        let idx = queue.pop().expect("non-empty epoch");
        let tape = Tape::new();
        let w = tape.leaf(params[0].clone());
        let logits = LinearHead::forward(w, tape.constant(feats.select_rows(&idx)))?;
        let loss = logits.soft_cross_entropy(&train.one_hot(&idx)).map_err(training_error(step))?;
        losses.push(loss.item().to_f64());
        let grads = vec![tape.backward(loss)?.wrt(w)];
        let factor = lr_schedule(Schedule::Cosine, step, cfg.steps)?;
        opt.step(&mut params, &grads, factor).map_err(training_error(step))?;
    }
    head.weight = params.pop().expect("head");
    let accuracy = classifier_accuracy(&calibrated, &head, test, Mode::Eval, cfg.eval_batch)?;
    Ok(Finetuned {
        model: calibrated,
        head,
        accuracy,
        losses,
    })
}

/// Frozen classifier whose softmax outputs serve as soft targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Teacher<T: Real> {
    model: FeatureExtractor<T>,
    head: LinearHead<T>,
}

impl<T: Real> Teacher<T> {
    pub fn new(model: FeatureExtractor<T>, head: LinearHead<T>) -> Self {
        Self { model, head }
    }

    pub fn model(&self) -> &FeatureExtractor<T> {
        &self.model
    }

    pub fn head(&self) -> &LinearHead<T> {
        &self.head
    }

    pub fn classes(&self) -> usize {
        self.head.weight.shape()[1]
    }

    /// Class probabilities of one batch under its own batch statistics.
    pub fn probs(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        softmax_rows(&self.head.apply(&self.model.embed(x, Mode::BatchStats)?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adamw: AdamWConfig,
    /// Test-time batch size; batch statistics are used at test time too.
    pub eval_batch: usize,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 256,
            adamw: AdamWConfig {
                lr: 1e-4,
                ..AdamWConfig::default()
            },
            eval_batch: 256,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KdResult<T: Real> {
    pub model: FeatureExtractor<T>,
    pub head: LinearHead<T>,
    /// Mean `KL(teacher ‖ student)` over the epoch's samples.
    pub epoch_kl: Vec<f64>,
    pub accuracy: f64,
}

fn row_entropy<T: Real>(p: &Tensor<T>) -> f64 {
    p.data()
        .iter()
        .map(|&v| {
            let v = v.to_f64();
            if v > 0.0 {
                -v * v.ln()
            } else {
                0.0
            }
        })
        .sum::<f64>()
}

/// Trains a copy of `student` with a fresh head to match the teacher on
/// `x_s` and reports accuracy on `test`. Student and teacher both normalize
/// with batch statistics, including at test time.
pub fn kd_finetune<T: Real>(
    rng: &mut RngState,
    student: &FeatureExtractor<T>,
    teacher: &Teacher<T>,
    x_s: &Tensor<T>,
    test: &LabeledDataset<T>,
    cfg: &KdConfig,
) -> Result<KdResult<T>> {
    let m = x_s.rows();
    if m < 2 || cfg.batch_size < 2 {
        return Err(Error::contract("distillation from a teacher needs batches of at least 2"));
    }
    if cfg.eval_batch < 2 {
        return Err(Error::config("test-time batch statistics need an eval batch of at least 2"));
    }
    let mut model = student.clone();
    let mut head = fresh_head(rng, &model, teacher.classes());
    let mut params = model.params.clone();
    params.push(head.weight.clone());
    let mut opt = AdamW::new(cfg.adamw, &params);
    let batch = cfg.batch_size.min(m);
    let mut epoch_kl = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let mut kl_sum = 0.0;
        for idx in epoch_batches(rng, m, batch) {
            let xb = x_s.select_rows(&idx);
            let target = teacher.probs(&xb)?;
            let tape = Tape::new();
            let p = tape.inputs(&params, true);
            let (f, _) = model
                .forward(&p[..p.len() - 1], tape.constant(xb), Mode::BatchStats)
                .map_err(training_error(step))?;
            let loss = LinearHead::forward(p[p.len() - 1], f)?
                .soft_cross_entropy(&target)
                .map_err(training_error(step))?;
            let rows = idx.len() as f64;
            kl_sum += loss.item().to_f64() * rows - row_entropy(&target);
            let grads = tape.backward(loss).map_err(training_error(step))?.wrt_all(&p);
            opt.step(&mut params, &grads, 1.0).map_err(training_error(step))?;
            model.params = params[..params.len() - 1].to_vec();
            step += 1;
        }
        epoch_kl.push(kl_sum / m as f64);
    }
    head.weight = params.pop().expect("head");
    let accuracy = classifier_accuracy(&model, &head, test, Mode::BatchStats, cfg.eval_batch)?;
    Ok(KdResult {
        model,
        head,
        epoch_kl,
        accuracy,
    })
}

/// Random rows of the source set with their target-model embeddings and
/// no meta-optimization.
pub fn random_subset_baseline<T: Real>(
    rng: &mut RngState,
    x_t: &Tensor<T>,
    targets: &Tensor<T>,
    m: usize,
    meta: AdamWConfig,
) -> Result<DistilledSet<T>> {
    let n = x_t.rows();
    if m > n || m == 0 {
        return Err(Error::contract(format!("cannot pick {m} distinct rows from {n}")));
    }
    if targets.rows() != n {
        return Err(Error::Dimension {
            op: "random_subset_baseline",
            lhs: x_t.shape().to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    let idx = rng.sample_distinct(n, m);
    DistilledSet::new(x_t.select_rows(&idx), targets.select_rows(&idx), meta)
}

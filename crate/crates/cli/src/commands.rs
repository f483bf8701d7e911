//! One function per subcommand. Each resolves its configuration, writes the
//! run manifest, then computes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use krrst_core::bias::{bias_estimate, DesignedInstance};
use krrst_core::bundle::{load_bundle, read_json, save_bundle, write_json};
use krrst_core::data::{gen_data, load_source, Normalization, SyntheticSourceSpec, SyntheticSuite};
use krrst_core::distill::{resume_distillation, run_distillation, DistillConfig, RunOptions};
use krrst_core::eval::{
    finetune, linear_probe, pretrain_on_distilled, random_subset_baseline, FinetuneConfig, LabeledDataset,
    PretrainConfig, Summary, Teacher,
};
use krrst_core::export::export_images;
use krrst_core::models::{Arch, FeatureExtractor, LinearHead};
use krrst_core::ssl::{embed_dataset, train_target, AugmentationConfig, BarlowTwinsConfig, TargetModel};
use krrst_core::{Error, Result, RngState, Tensor};

use crate::config::{resolve, write_manifest};
use crate::pipeline::{self, desk_arch, desk_augmentation, desk_barlow, desk_distill, task_datasets, TransferConfig};

/// Configuration sources shared by every command.
#[derive(Debug, Clone, Default)]
pub struct ConfigArgs {
    pub file: Option<PathBuf>,
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve<T: Serialize + serde::de::DeserializeOwned + Default>(&self, command: &str) -> Result<T> {
        resolve(command, self.file.as_deref(), &self.overrides)
    }
}

fn write_lines<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).map_err(|e| Error::json(path, e))?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_norm(data: &Path) -> Result<Normalization> {
    Ok(load_source(&data.join("source"))?.1.normalization)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    A,
    B,
}

fn load_task_datasets(data: &Path, task: TaskId) -> Result<(LabeledDataset<f32>, LabeledDataset<f32>)> {
    let suite = SyntheticSuite::load(data)?;
    let t = match task {
        TaskId::A => &suite.task_a,
        TaskId::B => &suite.task_b,
    };
    task_datasets(t, &suite.normalization)
}

pub fn gen_data_cmd(args: &ConfigArgs, out: &Path) -> Result<()> {
    let spec: SyntheticSourceSpec = args.resolve("gen-data")?;
    spec.validate()?;
    write_manifest(out, "gen-data", &[], &spec)?;
    let suite = gen_data(&spec)?;
    suite.save(out)?;
    log::info!("wrote {} source images and two target tasks to {}", spec.source_count, out.display());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTargetConfig {
    pub arch: Arch,
    pub barlow: BarlowTwinsConfig,
    pub augmentation: AugmentationConfig,
    pub seed: u64,
    /// Batch size used to embed the source set after training.
    pub embed_batch: usize,
}

impl Default for TrainTargetConfig {
    fn default() -> Self {
        Self {
            arch: desk_arch(),
            barlow: desk_barlow(),
            augmentation: desk_augmentation(),
            seed: 0,
            embed_batch: 256,
        }
    }
}

/// Output layout: `model/`, `embeddings/` (source embeddings), `log.jsonl`.
pub fn train_target_cmd(args: &ConfigArgs, data: &Path, out: &Path) -> Result<()> {
    let cfg: TrainTargetConfig = args.resolve("train-target")?;
    write_manifest(out, "train-target", &[("data", data)], &cfg)?;
    let (source, meta) = load_source(&data.join("source"))?;
    let mut rng = RngState::new(cfg.seed);
    let trained = train_target(&mut rng, &source, &meta.normalization, &cfg.arch, &cfg.barlow, &cfg.augmentation)?;
    trained.model.save(&out.join("model"))?;
    let x_t = meta.normalization.apply(&source)?;
    let emb = embed_dataset(&trained.model, &x_t, cfg.embed_batch)?;
    save_bundle(&emb, &out.join("embeddings"), "embeddings")?;
    let rows: Vec<Value> = trained
        .epoch_losses
        .iter()
        .enumerate()
        .map(|(e, l)| serde_json::json!({"epoch": e, "loss": l}))
        .collect();
    write_lines(&out.join("log.jsonl"), &rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedConfig {
    pub batch_size: usize,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self { batch_size: 256 }
    }
}

/// Embeds raw images (the source set unless `input` names another bundle),
/// normalized with the suite statistics.
pub fn embed_cmd(args: &ConfigArgs, target: &Path, data: &Path, input: Option<&Path>, out: &Path) -> Result<()> {
    let cfg: EmbedConfig = args.resolve("embed")?;
    let source = data.join("source");
    let input = input.unwrap_or(&source);
    write_manifest(out, "embed", &[("target", target), ("data", data), ("input", input)], &cfg)?;
    let phi = TargetModel::<f32>::load(&target.join("model"))?;
    let x: Tensor<f32> = load_bundle(input)?;
    let emb = embed_dataset(&phi, &load_norm(data)?.apply(&x)?, cfg.batch_size)?;
    save_bundle(&emb, &out.join("embeddings"), "embeddings")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillCommandConfig {
    pub distill: DistillConfig,
    pub checkpoint_every: usize,
    /// Stop after this many steps, leaving a resumable run.
    pub stop_at: Option<usize>,
}

impl Default for DistillCommandConfig {
    fn default() -> Self {
        Self {
            distill: desk_distill(),
            checkpoint_every: 500,
            stop_at: None,
        }
    }
}

/// Output layout: `x_s/`, `y_s/`, `log.jsonl`, `checkpoints/stepNNNNNNN/`.
pub fn distill_cmd(args: &ConfigArgs, data: &Path, target: &Path, resume: Option<&Path>, out: &Path) -> Result<()> {
    let cfg: DistillCommandConfig = args.resolve("distill")?;
    cfg.distill.validate()?;
    let mut inputs = vec![("data", data), ("target", target)];
    if let Some(r) = resume {
        inputs.push(("resume", r));
    }
    write_manifest(out, "distill", &inputs, &cfg)?;
    let (source, meta) = load_source(&data.join("source"))?;
    let x_t = meta.normalization.apply(&source)?;
    let targets: Tensor<f32> = load_bundle(&target.join("embeddings"))?;
    let opts = RunOptions {
        out_dir: Some(out.to_path_buf()),
        checkpoint_every: cfg.checkpoint_every,
        stop_at: cfg.stop_at,
    };
    let run = match resume {
        Some(ckpt) => resume_distillation(ckpt, &x_t, &targets, &cfg.distill, &opts)?,
        None => run_distillation(&x_t, &targets, &cfg.distill, &opts)?,
    };
    if let Some(last) = run.log.last() {
        log::info!("distillation reached step {} with outer loss {:.5}", last.step + 1, last.outer_loss);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainSource {
    /// `x_s`/`y_s` bundles of a distillation run.
    Distilled,
    /// Random source rows with their target embeddings.
    RandomSubset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainCommandConfig {
    pub arch: Arch,
    pub pretrain: PretrainConfig,
    pub source: PretrainSource,
    /// Rows drawn for the random-subset source.
    pub m: usize,
    pub seed: u64,
}

impl Default for PretrainCommandConfig {
    fn default() -> Self {
        Self {
            arch: desk_arch(),
            pretrain: PretrainConfig::default(),
            source: PretrainSource::Distilled,
            m: 32,
            seed: 0,
        }
    }
}

/// `input` is a distillation output directory for the distilled source, or
/// a target-model directory (with its `embeddings/`) for the random subset,
/// which also needs `data`.
pub fn pretrain_cmd(args: &ConfigArgs, input: &Path, data: Option<&Path>, out: &Path) -> Result<()> {
    let cfg: PretrainCommandConfig = args.resolve("pretrain")?;
    let mut inputs = vec![("input", input)];
    if let Some(d) = data {
        inputs.push(("data", d));
    }
    write_manifest(out, "pretrain", &inputs, &cfg)?;
    let mut rng = RngState::new(cfg.seed).derive(7);
    let (x_s, y_s): (Tensor<f32>, Tensor<f32>) = match cfg.source {
        PretrainSource::Distilled => (load_bundle(&input.join("x_s"))?, load_bundle(&input.join("y_s"))?),
        PretrainSource::RandomSubset => {
            let data = data.ok_or_else(|| Error::config("the random-subset source needs --data"))?;
            let (source, meta) = load_source(&data.join("source"))?;
            let targets = load_bundle(&input.join("embeddings"))?;
            let set = random_subset_baseline(
                &mut rng.split(),
                &meta.normalization.apply(&source)?,
                &targets,
                cfg.m,
                Default::default(),
            )?;
            (set.x, set.y)
        }
    };
    let pre = pretrain_on_distilled(&mut rng, &x_s, &y_s, &cfg.arch, &cfg.pretrain)?;
    pre.model.save(&out.join("model"))?;
    let rows: Vec<Value> = pre
        .epoch_losses
        .iter()
        .enumerate()
        .map(|(e, l)| serde_json::json!({"epoch": e, "loss": l}))
        .collect();
    write_lines(&out.join("log.jsonl"), &rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneCommandConfig {
    pub task: TaskId,
    pub finetune: FinetuneConfig,
    pub seeds: Vec<u64>,
    /// Train only the head on frozen features.
    pub probe: bool,
    /// Architecture of the fresh learner when no model is given.
    pub arch: Arch,
    /// Key of this result in `results.json`.
    pub label: String,
}

impl Default for FinetuneCommandConfig {
    fn default() -> Self {
        Self {
            task: TaskId::A,
            finetune: pipeline::desk_finetune(),
            seeds: vec![0, 1, 2],
            probe: false,
            arch: desk_arch(),
            label: "finetune".into(),
        }
    }
}

pub const RESULTS_FILE: &str = "results.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultEntry {
    pub task: TaskId,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub summary: Summary,
}

/// Adds or replaces `label` in `dir/results.json`.
pub fn record_result(dir: &Path, label: &str, entry: &ResultEntry) -> Result<()> {
    let path = dir.join(RESULTS_FILE);
    let mut all: Map<String, Value> = if path.exists() { read_json(&path)? } else { Map::new() };
    all.insert(label.to_string(), serde_json::to_value(entry).map_err(|e| Error::json(&path, e))?);
    write_json(&path, &all)
}

/// Fine-tunes (or probes) `model`, or a fresh learner when absent, once per
/// seed and records accuracy mean ± std.
pub fn finetune_cmd(args: &ConfigArgs, data: &Path, model: Option<&Path>, out: &Path) -> Result<()> {
    let cfg: FinetuneCommandConfig = args.resolve("finetune")?;
    if cfg.seeds.is_empty() {
        return Err(Error::config("at least one seed is needed"));
    }
    let mut inputs = vec![("data", data)];
    if let Some(m) = model {
        inputs.push(("model", m));
    }
    write_manifest(out, "finetune", &inputs, &cfg)?;
    let (train, test) = load_task_datasets(data, cfg.task)?;
    let loaded = model.map(|m| FeatureExtractor::<f32>::load(&m.join("model"))).transpose()?;
    let mut accuracies = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let base = match &loaded {
            Some(m) => m.clone(),
            None => FeatureExtractor::init(&mut RngState::new(seed).derive(7), &cfg.arch)?,
        };
        let mut rng = RngState::new(seed).derive(11 + cfg.task as u64);
        let run = if cfg.probe {
            linear_probe(&mut rng, &base, &train, &test, &cfg.finetune)?
        } else {
            finetune(&mut rng, &base, &train, &test, &cfg.finetune)?
        };
        log::info!("seed {seed}: accuracy {:.4}", run.accuracy);
        accuracies.push(run.accuracy);
    }
    let entry = ResultEntry {
        task: cfg.task,
        seeds: cfg.seeds.clone(),
        summary: Summary::of(&accuracies),
        accuracies,
    };
    record_result(out, &cfg.label, &entry)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdInput {
    Distilled,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdCommandConfig {
    pub kd: pipeline::KdExperimentConfig,
    pub input: KdInput,
    pub seed: u64,
}

impl Default for KdCommandConfig {
    fn default() -> Self {
        Self {
            kd: pipeline::KdExperimentConfig::default(),
            input: KdInput::Distilled,
            seed: 0,
        }
    }
}

/// Knowledge distillation from a task-A teacher through a surrogate set.
/// The teacher is trained here unless `teacher` names a saved one.
/// Writes `teacher/` (when trained), `kd.json` and `log.jsonl`.
pub fn kd_cmd(
    args: &ConfigArgs,
    data: &Path,
    surrogate: &Path,
    teacher_dir: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let cfg: KdCommandConfig = args.resolve("kd")?;
    let mut inputs = vec![("data", data), ("surrogate", surrogate)];
    if let Some(t) = teacher_dir {
        inputs.push(("teacher", t));
    }
    write_manifest(out, "kd", &inputs, &cfg)?;
    let suite = SyntheticSuite::load(data)?;
    let teacher = match teacher_dir {
        Some(dir) => load_teacher(dir)?,
        None => {
            let (t, acc) = pipeline::train_teacher(&suite, &cfg.kd, cfg.seed)?;
            save_teacher(&t, &out.join("teacher"))?;
            log::info!("teacher test accuracy {acc:.4}");
            t
        }
    };
    let (x, y) = match cfg.input {
        KdInput::Distilled => (load_bundle(&surrogate.join("x_s"))?, load_bundle(&surrogate.join("y_s"))?),
        KdInput::Gaussian => {
            let phi = TargetModel::<f32>::load(&surrogate.join("model"))?;
            pipeline::gaussian_surrogate(&phi, cfg.kd.gaussian_rows, suite.normalization.shape.len(), cfg.seed)?
        }
    };
    let result = pipeline::kd_arm(&suite, &teacher, &x, &y, &cfg.kd, cfg.seed)?;
    write_json(&out.join("kd.json"), &result)?;
    let rows: Vec<Value> = result
        .epoch_kl
        .iter()
        .enumerate()
        .map(|(e, kl)| serde_json::json!({"epoch": e, "kl": kl}))
        .collect();
    write_lines(&out.join("log.jsonl"), &rows)
}

pub fn save_teacher(t: &Teacher<f32>, dir: &Path) -> Result<()> {
    t.model().save(&dir.join("model"))?;
    save_bundle(&t.head().weight, &dir.join("head"), "head")
}

pub fn load_teacher(dir: &Path) -> Result<Teacher<f32>> {
    Ok(Teacher::new(
        FeatureExtractor::load(&dir.join("model"))?,
        LinearHead {
            weight: load_bundle(&dir.join("head"))?,
        },
    ))
}

/// The configuration is the instance itself, so a bare instance file can be
/// passed as `--config`. Writes `bias_report.json` and `bias_report.csv`.
pub fn bias_demo_cmd(args: &ConfigArgs, out: &Path) -> Result<()> {
    let inst: DesignedInstance = args.resolve("bias-demo")?;
    write_manifest(out, "bias-demo", &[], &inst)?;
    let report = bias_estimate(&inst.problem, &inst.x_s, inst.r, inst.trials, inst.seed)?;
    log::info!(
        "{} of {} coordinates biased beyond 3 SE; plain-gradient control within 3 SE: {}",
        report.flagged(),
        report.flags.len(),
        report.control.within_3se
    );
    write_json(&out.join("bias_report.json"), &report)?;
    let csv = out.join("bias_report.csv");
    fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExportConfig {
    /// Name of the bundle inside the input directory.
    pub bundle: Option<String>,
}

/// Writes one PPM/PGM per row of `input/x_s` (or another named bundle).
pub fn export_images_cmd(args: &ConfigArgs, input: &Path, data: &Path, out: &Path) -> Result<()> {
    let cfg: ExportConfig = args.resolve("export-images")?;
    write_manifest(out, "export-images", &[("input", input), ("data", data)], &cfg)?;
    let x: Tensor<f32> = load_bundle(&input.join(cfg.bundle.as_deref().unwrap_or("x_s")))?;
    let paths = export_images(&x, &load_norm(data)?, &out.join("images"))?;
    log::info!("wrote {} images", paths.len());
    Ok(())
}

/// The whole transfer comparison; writes `results.json` with every arm's
/// per-seed accuracies and summaries.
pub fn transfer_cmd(args: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg: TransferConfig = args.resolve("transfer")?;
    write_manifest(out, "transfer", &[], &cfg)?;
    let prep = pipeline::prepare(&cfg)?;
    let results = pipeline::run_transfer(&prep, &cfg)?;
    write_json(&out.join(RESULTS_FILE), &results)
}

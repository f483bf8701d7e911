//! End-to-end transfer experiment: target model, distillation, the two
//! baselines, and fine-tuning on both target tasks.

use serde::{Deserialize, Serialize};

use krrst_core::data::{gen_data, Normalization, SyntheticSourceSpec, SyntheticSuite, TargetTask};
use krrst_core::distill::{run_distillation, DistillConfig, RunOptions, TargetInit};
use krrst_core::eval::{
    finetune, kd_finetune, pretrain_on_distilled, random_subset_baseline, FinetuneConfig, KdConfig, LabeledDataset,
    PretrainConfig, Summary, Teacher,
};
use krrst_core::models::{Arch, ConvNetConfig, FeatureExtractor};
use krrst_core::ssl::{embed_dataset, train_target, AugmentationConfig, BarlowTwinsConfig, TargetModel};
use krrst_core::{Result, RngState, Tensor};

/// How the learner is initialized before fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Pre-trained on the distilled set.
    Distilled,
    /// Distilled with standard-normal target initialization.
    DistilledNormalInit,
    /// Pre-trained on random source rows with their target embeddings.
    RandomSubset,
    /// Fine-tuned from a fresh initialization.
    NoPretrain,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Distilled, Arm::DistilledNormalInit, Arm::RandomSubset, Arm::NoPretrain];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Distilled => "distilled",
            Arm::DistilledNormalInit => "distilled_normal_init",
            Arm::RandomSubset => "random_subset",
            Arm::NoPretrain => "no_pretrain",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferConfig {
    pub data: SyntheticSourceSpec,
    pub target_arch: Arch,
    pub barlow: BarlowTwinsConfig,
    pub augmentation: AugmentationConfig,
    /// Seed of target-model training, shared by every arm.
    pub target_seed: u64,
    pub embed_batch: usize,
    /// `seed` is overridden per run; `arch` is the learner.
    pub distill: DistillConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub seeds: Vec<u64>,
    pub arms: Vec<Arm>,
}

/// ConvNet of depth 3 and width 16 on 16×16×3 inputs.
pub fn desk_arch() -> Arch {
    Arch::ConvNet(ConvNetConfig::new(3, 16, 3, 16))
}

pub fn desk_barlow() -> BarlowTwinsConfig {
    BarlowTwinsConfig {
        epochs: 40,
        ..BarlowTwinsConfig::default()
    }
}

/// Crops and color jitter only: a flip would erase the orientation that
/// task B is about.
pub fn desk_augmentation() -> AugmentationConfig {
    AugmentationConfig {
        flip_prob: 0.0,
        ..AugmentationConfig::default()
    }
}

pub fn desk_distill() -> DistillConfig {
    DistillConfig {
        arch: desk_arch(),
        iterations: 1000,
        ..DistillConfig::default()
    }
}

pub fn desk_finetune() -> FinetuneConfig {
    FinetuneConfig {
        steps: 2000,
        ..FinetuneConfig::default()
    }
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            data: SyntheticSourceSpec::default(),
            target_arch: desk_arch(),
            barlow: desk_barlow(),
            augmentation: desk_augmentation(),
            target_seed: 0,
            embed_batch: 256,
            distill: desk_distill(),
            pretrain: PretrainConfig::default(),
            finetune: desk_finetune(),
            seeds: vec![0, 1, 2],
            arms: Arm::ALL.to_vec(),
        }
    }
}

/// Source data normalized, with its target embeddings.
pub struct Prepared {
    pub suite: SyntheticSuite,
    pub target: TargetModel<f32>,
    pub x_t: Tensor<f32>,
    pub targets: Tensor<f32>,
    pub target_losses: Vec<f64>,
}

pub fn prepare(cfg: &TransferConfig) -> Result<Prepared> {
    let suite = gen_data(&cfg.data)?;
    let mut rng = RngState::new(cfg.target_seed);
    let trained = train_target(
        &mut rng,
        &suite.source,
        &suite.normalization,
        &cfg.target_arch,
        &cfg.barlow,
        &cfg.augmentation,
    )?;
    let x_t = suite.normalization.apply(&suite.source)?;
    let targets = embed_dataset(&trained.model, &x_t, cfg.embed_batch)?;
    Ok(Prepared {
        suite,
        target: trained.model,
        x_t,
        targets,
        target_losses: trained.epoch_losses,
    })
}

/// Normalized train and test splits of a target task.
pub fn task_datasets(task: &TargetTask, norm: &Normalization) -> Result<(LabeledDataset<f32>, LabeledDataset<f32>)> {
    Ok((
        LabeledDataset::new(norm.apply(&task.train.x)?, task.train.labels.clone(), task.classes)?,
        LabeledDataset::new(norm.apply(&task.test.x)?, task.test.labels.clone(), task.classes)?,
    ))
}

/// Distillation config of a distilled arm at `seed`.
pub fn arm_distill_config(cfg: &TransferConfig, arm: Arm, seed: u64) -> DistillConfig {
    DistillConfig {
        seed,
        target_init: if arm == Arm::DistilledNormalInit {
            TargetInit::StandardNormal
        } else {
            TargetInit::TargetEmbed
        },
        ..cfg.distill.clone()
    }
}

/// The learner an arm hands to fine-tuning.
pub fn initial_model(prep: &Prepared, cfg: &TransferConfig, arm: Arm, seed: u64) -> Result<FeatureExtractor<f32>> {
    let arch = &cfg.distill.arch;
    let mut rng = RngState::new(seed).derive(7);
    let (x_s, y_s) = match arm {
        Arm::NoPretrain => return FeatureExtractor::init(&mut rng, arch),
        Arm::RandomSubset => {
            let set = random_subset_baseline(&mut rng.split(), &prep.x_t, &prep.targets, cfg.distill.m, cfg.distill.meta)?;
            (set.x, set.y)
        }
        Arm::Distilled | Arm::DistilledNormalInit => {
            let dcfg = arm_distill_config(cfg, arm, seed);
            let run = run_distillation(&prep.x_t, &prep.targets, &dcfg, &RunOptions::default())?;
            (run.state.set.x, run.state.set.y)
        }
    };
    Ok(pretrain_on_distilled(&mut rng, &x_s, &y_s, arch, &cfg.pretrain)?.model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub seed: u64,
    pub task_a: f64,
    pub task_b: f64,
}

impl ArmResult {
    pub fn mean(&self) -> f64 {
        0.5 * (self.task_a + self.task_b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub task_a: Summary,
    pub task_b: Summary,
    /// Per-seed average over both tasks.
    pub overall: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferResults {
    pub runs: Vec<ArmResult>,
    pub summaries: Vec<ArmSummary>,
}

impl TransferResults {
    pub fn summary(&self, arm: Arm) -> Option<&ArmSummary> {
        self.summaries.iter().find(|s| s.arm == arm)
    }
}

pub fn run_arm(prep: &Prepared, cfg: &TransferConfig, arm: Arm, seed: u64) -> Result<ArmResult> {
    let model = initial_model(prep, cfg, arm, seed)?;
    let mut acc = [0.0; 2];
    for (k, task) in [&prep.suite.task_a, &prep.suite.task_b].into_iter().enumerate() {
        let (train, test) = task_datasets(task, &prep.suite.normalization)?;
        let mut rng = RngState::new(seed).derive(11 + k as u64);
        acc[k] = finetune(&mut rng, &model, &train, &test, &cfg.finetune)?.accuracy;
    }
    log::info!("arm {} seed {seed}: task A {:.3} task B {:.3}", arm.name(), acc[0], acc[1]);
    Ok(ArmResult {
        arm,
        seed,
        task_a: acc[0],
        task_b: acc[1],
    })
}

pub fn summarize(runs: Vec<ArmResult>) -> TransferResults {
    let mut arms: Vec<Arm> = Vec::new();
    for r in &runs {
        if !arms.contains(&r.arm) {
            arms.push(r.arm);
        }
    }
    let summaries = arms
        .into_iter()
        .map(|arm| {
            let of = |f: fn(&ArmResult) -> f64| {
                Summary::of(&runs.iter().filter(|r| r.arm == arm).map(f).collect::<Vec<_>>())
            };
            ArmSummary {
                arm,
                task_a: of(|r| r.task_a),
                task_b: of(|r| r.task_b),
                overall: of(ArmResult::mean),
            }
        })
        .collect();
    TransferResults { runs, summaries }
}

/// Every configured arm at every seed.
pub fn run_transfer(prep: &Prepared, cfg: &TransferConfig) -> Result<TransferResults> {
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        for &arm in &cfg.arms {
            runs.push(run_arm(prep, cfg, arm, seed)?);
        }
    }
    Ok(summarize(runs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdExperimentConfig {
    /// Teacher and student architecture.
    pub arch: Arch,
    /// Supervised teacher training on task A.
    pub teacher: FinetuneConfig,
    /// Student initialization on the surrogate set and its regression targets.
    pub pretrain: PretrainConfig,
    pub kd: KdConfig,
    /// Rows of the Gaussian-input surrogate.
    pub gaussian_rows: usize,
    pub embed_batch: usize,
}

impl Default for KdExperimentConfig {
    fn default() -> Self {
        Self {
            arch: desk_arch(),
            teacher: FinetuneConfig {
                steps: 1000,
                ..FinetuneConfig::default()
            },
            pretrain: PretrainConfig::default(),
            kd: KdConfig::default(),
            gaussian_rows: 32,
            embed_batch: 256,
        }
    }
}

/// Trains a task-A classifier from scratch; returns it with its test accuracy.
pub fn train_teacher(suite: &SyntheticSuite, cfg: &KdExperimentConfig, seed: u64) -> Result<(Teacher<f32>, f64)> {
    let (train, test) = task_datasets(&suite.task_a, &suite.normalization)?;
    let mut rng = RngState::new(seed).derive(21);
    let init = FeatureExtractor::init(&mut rng, &cfg.arch)?;
    let run = finetune(&mut rng, &init, &train, &test, &cfg.teacher)?;
    Ok((Teacher::new(run.model, run.head), run.accuracy))
}

/// Standard-normal inputs in normalized space with their target embeddings.
pub fn gaussian_surrogate(
    phi: &TargetModel<f32>,
    rows: usize,
    dim: usize,
    seed: u64,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let x = Tensor::randn(&mut RngState::new(seed).derive(23), [rows, dim]);
    let y = embed_dataset(phi, &x, rows.max(2))?;
    Ok((x, y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdOutcome {
    pub accuracy: f64,
    pub epoch_kl: Vec<f64>,
}

impl KdOutcome {
    /// Fractional drop of the KL from the first to the last epoch.
    pub fn kl_reduction(&self) -> Option<f64> {
        match (self.epoch_kl.first(), self.epoch_kl.last()) {
            (Some(&a), Some(&b)) if a > 0.0 => Some(1.0 - b / a),
            _ => None,
        }
    }
}

/// Initializes the student by regression on `(x, y)`, then distills the
/// teacher through `x` and evaluates on task A.
pub fn kd_arm(
    suite: &SyntheticSuite,
    teacher: &Teacher<f32>,
    x: &Tensor<f32>,
    y: &Tensor<f32>,
    cfg: &KdExperimentConfig,
    seed: u64,
) -> Result<KdOutcome> {
    let (_, test) = task_datasets(&suite.task_a, &suite.normalization)?;
    let mut rng = RngState::new(seed).derive(25);
    let student = pretrain_on_distilled(&mut rng, x, y, &cfg.arch, &cfg.pretrain)?.model;
    let run = kd_finetune(&mut rng, &student, teacher, x, &test, &cfg.kd)?;
    log::info!("kd student accuracy {:.4}", run.accuracy);
    Ok(KdOutcome {
        accuracy: run.accuracy,
        epoch_kl: run.epoch_kl,
    })
}

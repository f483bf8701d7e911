//! Seed-0 runs on the synthetic suite.

use krrst_core::data::{gen_data, SyntheticSourceSpec};
use krrst_core::distill::{run_distillation, DistillConfig, RunOptions};
use krrst_core::eval::{finetune, linear_probe, FinetuneConfig, LabeledDataset};
use krrst_core::models::{Arch, ConvNetConfig, FeatureExtractor};
use krrst_core::ssl::{embed_dataset, train_target, AugmentationConfig, BarlowTwinsConfig};
use krrst_core::RngState;

fn arch() -> Arch {
    Arch::ConvNet(ConvNetConfig::new(3, 16, 3, 16))
}

#[test]
fn supervised_convnet_learns_task_a() {
    let suite = gen_data(&SyntheticSourceSpec {
        source_count: 64,
        target_train_count: 1000,
        ..SyntheticSourceSpec::default()
    })
    .unwrap();
    let norm = &suite.normalization;
    let task = &suite.task_a;
    let train = LabeledDataset::new(norm.apply(&task.train.x).unwrap(), task.train.labels.clone(), task.classes).unwrap();
    let test = LabeledDataset::new(norm.apply(&task.test.x).unwrap(), task.test.labels.clone(), task.classes).unwrap();
    let mut rng = RngState::new(0);
    let model = FeatureExtractor::<f32>::init(&mut rng, &arch()).unwrap();
    let cfg = FinetuneConfig {
        steps: 1000,
        ..FinetuneConfig::default()
    };
    let ft = finetune(&mut rng, &model, &train, &test, &cfg).unwrap();
    let probe = linear_probe(&mut rng, &model, &train, &test, &cfg).unwrap();
    eprintln!("task A from scratch: finetune {:.3}, probe {:.3}", ft.accuracy, probe.accuracy);
    assert!(ft.accuracy >= 0.8, "{}", ft.accuracy);
}

#[test]
fn distillation_outer_loss_trends_down() {
    let suite = gen_data(&SyntheticSourceSpec::default()).unwrap();
    let barlow = BarlowTwinsConfig {
        epochs: 40,
        ..BarlowTwinsConfig::default()
    };
    let aug = AugmentationConfig {
        flip_prob: 0.0,
        ..AugmentationConfig::default()
    };
    let trained = train_target(&mut RngState::new(0), &suite.source, &suite.normalization, &arch(), &barlow, &aug).unwrap();
    let losses = &trained.epoch_losses;
    assert!(losses.last() < losses.first(), "{losses:?}");

    let x_t = suite.normalization.apply(&suite.source).unwrap();
    let targets = embed_dataset(&trained.model, &x_t, 256).unwrap();
    let cfg = DistillConfig {
        iterations: 500,
        arch: arch(),
        ..DistillConfig::default()
    };
    let run = run_distillation(&x_t, &targets, &cfg, &RunOptions::default()).unwrap();
    let window = |s: &[_]| s.iter().map(|r: &krrst_core::distill::StepRecord| r.outer_loss).sum::<f64>() / 50.0;
    let (first, last) = (window(&run.log[..50]), window(&run.log[450..]));
    eprintln!("smoothed outer loss {first:.4} -> {last:.4}");
    assert!(last < first);
}

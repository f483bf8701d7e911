//! Fixtures shared by the benchmarks.

use krrst_core::distill::{DistillConfig, DistillState};
use krrst_core::models::{Arch, ConvNetConfig};
use krrst_core::{RngState, Tensor};

/// ConvNet of depth 3 over 16×16×3 inputs.
pub fn convnet(width: usize) -> Arch {
    Arch::ConvNet(ConvNetConfig::new(3, width, 3, 16))
}

/// Random SPD matrix `AAᵀ + I` of size `m` and a right-hand side.
pub fn spd_system(m: usize, cols: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut rng = RngState::new(seed);
    let a = Tensor::<f64>::randn(&mut rng, [m, m]);
    let k = a.matmul_nt(&a).unwrap().add(&Tensor::eye(m)).unwrap();
    (k, Tensor::randn(&mut rng, [m, cols]))
}

/// A source set of `n` random images with random 64-wide targets.
pub fn source(n: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = RngState::new(seed);
    (Tensor::randn(&mut rng, [n, 3 * 16 * 16]), Tensor::randn(&mut rng, [n, 64]))
}

/// Distillation state at the desk configuration with a short horizon.
pub fn distill_state(x_t: &Tensor<f32>, targets: &Tensor<f32>, width: usize) -> (DistillState<f32>, DistillConfig) {
    let cfg = DistillConfig {
        horizon: 5,
        arch: convnet(width),
        ..DistillConfig::default()
    };
    (DistillState::init(x_t, targets, &cfg).unwrap(), cfg)
}

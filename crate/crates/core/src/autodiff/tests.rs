use super::*;
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_check, finite_diff_check_at, tape_fn, ScalarFn};
use crate::rng::RngState;
use crate::tensor::{Real, Tensor};

fn randn(seed: u64, shape: &[usize]) -> Tensor<f64> {
    Tensor::randn(&mut RngState::new(seed), shape.to_vec())
}

#[test]
fn sum_gives_ones() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(randn(0, &[2, 3]));
    let g = tape.backward(x.sum().unwrap()).unwrap();
    assert_eq!(g.wrt(x).data(), &[1.0; 6]);
}

#[test]
fn half_squared_norm_gives_input() {
    let xv = randn(1, &[4, 2]);
    let tape = Tape::<f64>::new();
    let x = tape.leaf(xv.clone());
    let loss = x.sum_sq().unwrap().scale(0.5).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.wrt(x).max_abs_diff(&xv).unwrap() < 1e-15);
}

#[test]
fn least_squares_gradient_matches_finite_differences() {
    let xm = randn(2, &[5, 4]);
    let y = randn(3, &[5, 3]);
    let w = randn(4, &[4, 3]);
    let f = tape_fn(|wv: Var<'_, f64>| {
        let t = wv.tape();
        let pred = t.constant(xm.clone()).matmul(wv)?;
        t.constant(y.clone()).sub(pred)?.sum_sq()?.scale(0.5)
    });
    let r = finite_diff_check(f, &w, 1e-5).unwrap();
    assert!(r.passes(1e-6), "{r:?}");

    let tape = Tape::<f64>::new();
    let wv = tape.leaf(w.clone());
    let g = tape.backward(f(wv).unwrap()).unwrap().wrt(wv);
    // Closed form: Xᵀ(XW − Y).
    let resid = xm.matmul(&w).unwrap().sub(&y).unwrap();
    let expected = xm.matmul_tn(&resid).unwrap();
    assert!(g.max_abs_diff(&expected).unwrap() < 1e-12);
}

#[test]
fn adjoint_is_linear_in_output_weighting() {
    let x = randn(5, &[3, 4]);
    let a = randn(6, &[4, 2]);
    let u = randn(7, &[3, 2]);
    let v = randn(8, &[3, 2]);
    let grad_with = |wt: &Tensor<f64>| {
        let tape = Tape::<f64>::new();
        let xv = tape.leaf(x.clone());
        let out = xv.matmul(tape.constant(a.clone())).unwrap().relu().unwrap();
        let loss = out.mul(tape.constant(wt.clone())).unwrap().sum().unwrap();
        tape.backward(loss).unwrap().wrt(xv)
    };
    let (alpha, beta) = (0.7, -1.3);
    let combined = u.scale(alpha).add(&v.scale(beta)).unwrap();
    let lhs = grad_with(&combined);
    let rhs = grad_with(&u).scale(alpha).add(&grad_with(&v).scale(beta)).unwrap();
    assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
}

#[test]
fn shared_node_accumulates() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::new([2], vec![1.0, 3.0]).unwrap());
    let loss = x.mul(x).unwrap().add(x).unwrap().sum().unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(x).data(), &[3.0, 7.0]);
}

#[test]
fn constants_get_no_gradient() {
    let tape = Tape::<f64>::new();
    let c = tape.constant(Tensor::ones([2]));
    let x = tape.leaf(Tensor::ones([2]));
    let loss = c.mul(x).unwrap().sum().unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.get(c).is_none());
    assert!(g.get(x).is_some());
}

#[test]
fn non_scalar_loss_rejected() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::ones([2]));
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn nan_fails_at_producing_op() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::new([2], vec![1.0, f64::INFINITY]).unwrap());
    match x.scale(0.0) {
        Err(Error::Numeric { op }) => assert_eq!(op, "scale"),
        other => panic!("expected numeric error, got {other:?}"),
    }
}

#[test]
fn nan_in_backward_names_op() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::ones([1]));
    let y = tape
        .custom("bad", &[x], Tensor::ones([1]), |_| Ok(vec![Some(Tensor::full(vec![1], f64::NAN))]))
        .unwrap();
    match tape.backward(y.sum().unwrap()) {
        Err(Error::Numeric { op }) => assert!(op.contains("bad"), "{op}"),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("expected an error"),
    }
}

/// One differentiable test problem per primitive. The input `x` is the
/// differentiated operand; other operands are fixed constants, and the
/// output is contracted with a fixed random weighting.
#[derive(Clone, Copy, Debug)]
enum Case {
    AddSubMul,
    ScaleNeg,
    Square,
    Relu,
    AddBias,
    BiasOperand,
    MatmulLeft,
    MatmulRight,
    MatmulNt,
    MatmulTn,
    Transpose,
    Reshape,
    Mean,
    Trace,
    ScaledIdentity,
    SoftCrossEntropy,
    Conv2dInput,
    Conv2dKernel,
    AvgPool,
    ChwToNhwc,
    BatchNorm,
    BatchNormAffine,
    FixedNorm,
}

const ALL: [Case; 23] = [
    Case::AddSubMul,
    Case::ScaleNeg,
    Case::Square,
    Case::Relu,
    Case::AddBias,
    Case::BiasOperand,
    Case::MatmulLeft,
    Case::MatmulRight,
    Case::MatmulNt,
    Case::MatmulTn,
    Case::Transpose,
    Case::Reshape,
    Case::Mean,
    Case::Trace,
    Case::ScaledIdentity,
    Case::SoftCrossEntropy,
    Case::Conv2dInput,
    Case::Conv2dKernel,
    Case::AvgPool,
    Case::ChwToNhwc,
    Case::BatchNorm,
    Case::BatchNormAffine,
    Case::FixedNorm,
];

impl Case {
    fn input_shape(self) -> Vec<usize> {
        match self {
            Case::BiasOperand => vec![3],
            Case::MatmulRight => vec![4, 2],
            Case::MatmulNt => vec![2, 4],
            Case::MatmulTn => vec![4, 3],
            Case::Trace | Case::ScaledIdentity => vec![3, 3],
            Case::Conv2dInput => vec![2, 4, 4, 2],
            Case::Conv2dKernel => vec![3, 3, 3, 2],
            Case::AvgPool => vec![2, 4, 4, 2],
            Case::ChwToNhwc => vec![2, 12],
            Case::BatchNorm | Case::BatchNormAffine | Case::FixedNorm => vec![5, 3],
            _ => vec![3, 4],
        }
    }

    fn constant(seed: u64, shape: &[usize]) -> Tensor<f64> {
        randn(100 + seed, shape)
    }
}

fn weighted<'t, T: Real>(out: Var<'t, T>, seed: u64) -> Result<Var<'t, T>> {
    let w: Tensor<T> = Case::constant(seed, &out.shape()).cast();
    out.mul(out.tape().constant(w))?.sum()
}

impl ScalarFn for Case {
    fn eval<'t, T: Real>(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let tape = x.tape();
        let c = |seed: u64, shape: &[usize]| tape.constant(Case::constant(seed, shape).cast::<T>());
        let out = match self {
            Case::AddSubMul => {
                let a = c(1, &[3, 4]);
                x.add(a)?.mul(x.sub(a)?)?
            }
            Case::ScaleNeg => x.scale(T::from_f64(2.5))?.neg()?.add_scalar(T::from_f64(0.3))?,
            Case::Square => x.square()?,
            Case::Relu => x.relu()?,
            Case::AddBias => x.add_bias(c(2, &[4]))?,
            Case::BiasOperand => c(3, &[2, 3]).add_bias(x)?.square()?,
            Case::MatmulLeft => x.matmul(c(4, &[4, 2]))?,
            Case::MatmulRight => c(5, &[3, 4]).matmul(x)?,
            Case::MatmulNt => c(6, &[3, 4]).matmul_nt(x)?,
            Case::MatmulTn => x.matmul_tn(c(7, &[4, 2]))?,
            Case::Transpose => x.transpose()?,
            Case::Reshape => x.reshape([2, 6])?,
            Case::Mean => x.square()?.mean()?.reshape([1, 1])?,
            Case::Trace => x.matmul(x)?.trace()?.reshape([1])?,
            Case::ScaledIdentity => {
                let s = x.trace()?.scale(T::from_f64(0.2))?;
                x.add_scaled_identity(s)?.matmul(c(8, &[3, 3]))?
            }
            Case::SoftCrossEntropy => {
                let p = softmax_rows(&Case::constant(9, &[3, 4]))?;
                return x.soft_cross_entropy(&p.cast());
            }
            Case::Conv2dInput => x.conv2d(c(10, &[3, 3, 3, 2]))?,
            Case::Conv2dKernel => c(11, &[2, 4, 4, 2]).conv2d(x)?,
            Case::AvgPool => x.avg_pool2()?,
            Case::ChwToNhwc => x.chw_to_nhwc(3, 2, 2)?,
            Case::BatchNorm => x.batch_norm(None, 1e-5)?.0,
            Case::BatchNormAffine => {
                let gamma = c(12, &[3]);
                let beta = c(13, &[3]);
                x.batch_norm(Some((gamma, beta)), 1e-5)?.0
            }
            Case::FixedNorm => {
                let mean = Case::constant(14, &[3]).cast();
                let var = Case::constant(15, &[3]).map(|v| v * v + 0.5).cast();
                x.fixed_norm(&mean, &var, Some((c(16, &[3]), c(17, &[3]))), 1e-5)?
            }
        };
        weighted(out, 50)
    }
}

#[test]
fn every_op_matches_finite_differences_f64() {
    for (i, case) in ALL.iter().enumerate() {
        let x = randn(200 + i as u64, &case.input_shape());
        let r = finite_diff_check_at::<f64>(case, &x, 1e-6).unwrap();
        assert!(r.passes(1e-6), "{case:?}: {r:?}");
    }
}

#[test]
fn every_op_matches_finite_differences_f32() {
    for (i, case) in ALL.iter().enumerate() {
        let x = randn(200 + i as u64, &case.input_shape());
        let r = finite_diff_check_at::<f32>(case, &x, 1e-6).unwrap();
        assert!(r.passes(1e-4), "{case:?}: {r:?}");
    }
}

#[test]
fn affine_parameters_of_batch_norm() {
    let x = randn(300, &[6, 2]);
    let beta = randn(301, &[2]);
    let w = randn(302, &[6, 2]);
    let f = tape_fn(|gamma: Var<'_, f64>| {
        let t = gamma.tape();
        let (y, _) = t.constant(x.clone()).batch_norm(Some((gamma, t.constant(beta.clone()))), 1e-5)?;
        y.mul(t.constant(w.clone()))?.sum()
    });
    let r = finite_diff_check(f, &randn(303, &[2]), 1e-6).unwrap();
    assert!(r.passes(1e-6), "{r:?}");

    let gamma = randn(304, &[2]);
    let g = tape_fn(|beta: Var<'_, f64>| {
        let t = beta.tape();
        let (y, _) = t.constant(x.clone()).batch_norm(Some((t.constant(gamma.clone()), beta)), 1e-5)?;
        y.mul(t.constant(w.clone()))?.sum()
    });
    let r = finite_diff_check(g, &randn(305, &[2]), 1e-6).unwrap();
    assert!(r.passes(1e-6), "{r:?}");
}

#[test]
fn batch_norm_output_is_standardised() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(randn(310, &[50, 3]).map(|v| 3.0 * v + 1.0));
    let (y, stats) = x.batch_norm(None, 1e-5).unwrap();
    let y = y.value();
    for j in 0..3 {
        let col: Vec<f64> = (0..50).map(|i| y.data()[i * 3 + j]).collect();
        let m = col.iter().sum::<f64>() / 50.0;
        let v = col.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / 50.0;
        assert!(m.abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-4);
    }
    assert!(stats.var_unbiased.data().iter().all(|&v| v > 1.0));
}

#[test]
fn batch_norm_needs_two_samples() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::ones([1, 3]));
    assert!(matches!(x.batch_norm(None, 1e-5), Err(Error::Contract(_))));
}

#[test]
fn conv_matches_direct_sum() {
    let (n, h, w, ci, co) = (1, 5, 4, 2, 3);
    let x = randn(320, &[n, h, w, ci]);
    let k = randn(321, &[co, 3, 3, ci]);
    let tape = Tape::<f64>::new();
    let y = tape.constant(x.clone()).conv2d(tape.constant(k.clone())).unwrap().value();
    for yy in 0..h {
        for xx in 0..w {
            for o in 0..co {
                let mut acc = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (sy, sx) = (yy as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        for c in 0..ci {
                            let xi = ((sy as usize) * w + sx as usize) * ci + c;
                            let ki = ((o * 3 + ky) * 3 + kx) * ci + c;
                            acc += x.data()[xi] * k.data()[ki];
                        }
                    }
                }
                let got = y.data()[(yy * w + xx) * co + o];
                assert!((got - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn log_softmax_is_stable() {
    let z = Tensor::new([1, 3], vec![1000.0, 1000.0, 1000.0]).unwrap();
    let lp = log_softmax_rows(&z).unwrap();
    for &v in lp.data() {
        assert!((v + 3f64.ln()).abs() < 1e-12);
    }
}

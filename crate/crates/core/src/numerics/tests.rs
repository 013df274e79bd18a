use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t32(shape: &[usize], data: &[f32]) -> Tensor<f32> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Central-difference check of a scalar function of several inputs, in f64.
/// Returns the worst relative error over all input elements.
fn grad_check<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = f(&tape, &vars);
    let grads = tape.backward(loss).unwrap();

    let eval = |inputs: &[Tensor<f64>]| {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t)).collect();
        let l = f(&tape, &vars).value().data()[0];
        l
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(|g| g.into_data())
            .unwrap_or_else(|| vec![0.0; inputs[which].numel()]);
        for idx in 0..inputs[which].numel() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[idx] += h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[idx] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[idx];
            worst = worst.max((a - fd).abs() / (a.abs() + fd.abs() + 1e-8));
        }
    }
    worst
}

#[test]
fn matmul_identity_and_selection() {
    let tape = Tape::new();
    let eye = tape.constant(&Tensor::<f32>::eye(2));
    let m = tape.constant(&t32(&[2, 2], &[1., 2., 3., 4.]));
    assert_eq!(eye.matmul(m).unwrap().value().data(), &[1., 2., 3., 4.]);

    let a = tape.constant(&t32(&[1, 2], &[1., 0.]));
    let b = tape.constant(&t32(&[2, 1], &[0., 5.]));
    assert_eq!(a.matmul(b).unwrap().value().data(), &[0.]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a: Vec<f32> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut oracle = [0f64; 6];
    for i in 0..3 {
        for j in 0..2 {
            for p in 0..4 {
                oracle[i * 2 + j] += a[i * 4 + p] as f64 * b[p * 2 + j] as f64;
            }
        }
    }
    let tape = Tape::new();
    let c = tape
        .constant(&t32(&[3, 4], &a))
        .matmul(tape.constant(&t32(&[4, 2], &b)))
        .unwrap();
    for (x, y) in c.value().data().iter().zip(oracle) {
        assert!((*x as f64 - y).abs() < 1e-6);
    }
}

#[test]
fn matmul_reports_both_shapes() {
    let tape = Tape::<f32>::new();
    let a = tape.constant(&Tensor::zeros(&[2, 3]));
    let b = tape.constant(&Tensor::zeros(&[2, 3]));
    let err = a.matmul(b).unwrap_err();
    assert_eq!(
        err,
        NumericsError::ShapeMismatch {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("[2, 3] vs [2, 3]"));
}

#[test]
fn softmax_examples() {
    let tape = Tape::new();
    let s = tape.constant(&t32(&[2], &[0., 0.])).softmax(0).unwrap();
    assert_eq!(s.value().data(), &[0.5, 0.5]);

    let s = tape.constant(&t32(&[2], &[1000., 0.])).softmax(0).unwrap();
    assert!((s.value().data()[0] - 1.0).abs() < 1e-6);
    assert!(s.value().data()[1].abs() < 1e-6);

    let s = tape.constant(&t32(&[3], &[1., 2., 3.])).softmax(0).unwrap();
    let z: f64 = (1..=3).map(|i| (i as f64).exp()).sum();
    for (i, &p) in s.value().data().iter().enumerate() {
        assert!((p as f64 - ((i + 1) as f64).exp() / z).abs() < 1e-6);
    }
}

#[test]
fn softmax_along_first_axis() {
    let tape = Tape::new();
    let s = tape
        .constant(&t32(&[2, 3], &[0., 1., 2., 0., 1., 2.]))
        .softmax(0)
        .unwrap();
    assert!(s.value().data().iter().all(|&p| (p - 0.5).abs() < 1e-7));
    assert!(matches!(
        tape.constant(&t32(&[2], &[0., 0.])).softmax(1),
        Err(NumericsError::InvalidAxis { .. })
    ));
}

#[test]
fn layer_norm_examples() {
    let tape = Tape::new();
    let eps = LAYER_NORM_EPS as f32;
    let ones = tape.constant(&Tensor::ones(&[3]));
    let zeros = tape.constant(&Tensor::zeros(&[3]));
    let y = tape
        .constant(&t32(&[1, 3], &[5., 5., 5.]))
        .layer_norm(ones, zeros, eps)
        .unwrap();
    assert_eq!(y.value().data(), &[0., 0., 0.]);

    let ones2 = tape.constant(&Tensor::ones(&[2]));
    let zeros2 = tape.constant(&Tensor::zeros(&[2]));
    let y = tape
        .constant(&t32(&[1, 2], &[1., 3.]))
        .layer_norm(ones2, zeros2, eps)
        .unwrap();
    // mean 2, variance 1: (±1) / sqrt(1 + eps)
    let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((y.value().data()[0] as f64 + expect).abs() < 1e-6);
    assert!((y.value().data()[1] as f64 - expect).abs() < 1e-6);

    let bias = tape.constant(&t32(&[3], &[0.5, -1., 2.]));
    let y = tape
        .constant(&t32(&[2, 3], &[1., 7., -2., 0.3, 0.1, 9.]))
        .layer_norm(zeros, bias, eps)
        .unwrap();
    assert_eq!(y.value().data(), &[0.5, -1., 2., 0.5, -1., 2.]);
}

#[test]
fn cross_entropy_examples() {
    let tape = Tape::new();
    let logits = tape.constant(&t32(&[2, 4], &[1e4, 0., 0., 0., 0., 0., 1e4, 0.]));
    let l = logits.cross_entropy(&[0, 2], 99).unwrap();
    assert_eq!(l.value().data(), &[0.0]);

    let l = tape
        .constant(&Tensor::<f32>::zeros(&[3, 4]))
        .cross_entropy(&[0, 1, 3], 99)
        .unwrap();
    assert!((l.value().data()[0] - 4f32.ln()).abs() < 1e-6);

    let x = tape.param(&Tensor::<f32>::ones(&[2, 4]));
    let l = x.cross_entropy(&[0, 0], 0).unwrap();
    assert_eq!(l.value().data(), &[0.0]);
    let g = tape.backward(l).unwrap();
    assert!(g.get(x).is_none_or(|g| g.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn cross_entropy_rejects_out_of_range_target() {
    let tape = Tape::new();
    let logits = tape.constant(&Tensor::<f32>::zeros(&[1, 4]));
    assert!(matches!(
        logits.cross_entropy(&[4], 0),
        Err(NumericsError::IndexOutOfRange { index: 4, .. })
    ));
}

#[test]
fn backward_linear_and_quadratic() {
    let tape = Tape::new();
    let x = tape.param(&t32(&[3], &[1., -2., 0.5]));
    let g = tape.backward(x.sum().unwrap()).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1., 1., 1.]);

    let tape = Tape::new();
    let x = tape.param(&t32(&[3], &[1., -2., 0.5]));
    let g = tape.backward(x.mul(x).unwrap().sum().unwrap()).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2., -4., 1.]);
}

#[test]
fn backward_rejects_non_scalar() {
    let tape = Tape::new();
    let x = tape.param(&t32(&[2], &[1., 2.]));
    assert!(matches!(tape.backward(x), Err(NumericsError::Contract(_))));
}

#[test]
fn non_finite_results_are_errors() {
    let tape = Tape::new();
    let x = tape.constant(&t32(&[1], &[1e30]));
    assert!(matches!(
        x.mul(x),
        Err(NumericsError::NonFinite { op: "mul", .. })
    ));
    assert!(Tensor::new(vec![1], vec![f32::NAN]).is_err());
}

#[test]
fn gradient_of_every_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 5]);
    let bias = random(&mut rng, &[5]);
    let err = grad_check(&[a.clone(), b.clone(), bias.clone()], |_, v| {
        v[0].matmul(v[1])
            .unwrap()
            .add_row(v[2])
            .unwrap()
            .gelu()
            .unwrap()
            .sigmoid()
            .unwrap()
            .softmax(0)
            .unwrap()
            .mul(v[0].matmul(v[1]).unwrap())
            .unwrap()
            .sum()
            .unwrap()
    });
    assert!(err < 1e-6, "matmul chain: {err}");

    let x = random(&mut rng, &[4, 6]);
    let gain = random(&mut rng, &[6]);
    let beta = random(&mut rng, &[6]);
    let w = random(&mut rng, &[6, 6]);
    let err = grad_check(&[x, gain, beta, w], |_, v| {
        let y = v[0].layer_norm(v[1], v[2], 1e-5).unwrap();
        let z = y.matmul(v[3]).unwrap().sub(y).unwrap().scale(0.7).unwrap();
        z.mul(z).unwrap().sum().unwrap()
    });
    assert!(err < 1e-6, "layer_norm chain: {err}");

    let table = random(&mut rng, &[7, 4]);
    let proj = random(&mut rng, &[4, 7]);
    let err = grad_check(&[table, proj], |_, v| {
        v[0].gather_rows(&[3, 0, 3, 6])
            .unwrap()
            .mask_rows(&[true, false, true, true])
            .unwrap()
            .matmul(v[1])
            .unwrap()
            .cross_entropy(&[1, 2, 0, 6], 0)
            .unwrap()
    });
    assert!(err < 1e-6, "gather + cross entropy: {err}");
}

#[test]
fn attention_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // batch 2, 3 queries, 4 keys, width 6, 2 heads
    let q = random(&mut rng, &[6, 6]);
    let k = random(&mut rng, &[8, 6]);
    let v = random(&mut rng, &[8, 6]);
    let w = random(&mut rng, &[6, 6]);
    let mut mask = vec![true; 2 * 3 * 4];
    mask[3] = false;
    mask[4 * 4 + 1] = false;
    mask[5 * 4 + 3] = false;
    mask[5 * 4 + 2] = false;
    let err = grad_check(&[q, k, v, w], |_, x| {
        let o = x[0].attention(x[1], x[2], &mask, 2, 2).unwrap();
        o.matmul(x[3]).unwrap().mul(o).unwrap().sum().unwrap()
    });
    assert!(err < 1e-6, "attention: {err}");
}

#[test]
fn attention_rejects_fully_masked_row() {
    let tape = Tape::<f32>::new();
    let q = tape.constant(&Tensor::ones(&[2, 4]));
    let k = tape.constant(&Tensor::ones(&[2, 4]));
    let err = q
        .attention(k, k, &[true, true, false, false], 1, 2)
        .unwrap_err();
    assert!(matches!(err, NumericsError::Contract(_)));
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        data in prop::collection::vec(-50.0f32..50.0, 12)
    ) {
        let tape = Tape::new();
        let s = tape.constant(&t32(&[3, 4], &data)).softmax(1).unwrap();
        let s = s.value();
        for row in s.data().chunks(4) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_matmul_is_bitwise(data in prop::collection::vec(-1e3f32..1e3, 15)) {
        let tape = Tape::new();
        let x = tape.constant(&t32(&[3, 5], &data));
        let y = tape.constant(&Tensor::eye(3)).matmul(x).unwrap();
        let (yv, xv) = (y.value(), x.value());
        prop_assert_eq!(yv.data(), xv.data());
    }

    #[test]
    fn layer_norm_ignores_row_shift(
        data in prop::collection::vec(-5.0f32..5.0, 8),
        shift in -5.0f32..5.0,
    ) {
        let tape = Tape::new();
        let g = tape.constant(&Tensor::ones(&[4]));
        let b = tape.constant(&Tensor::zeros(&[4]));
        let shifted: Vec<f32> = data.iter().map(|v| v + shift).collect();
        let y1 = tape.constant(&t32(&[2, 4], &data)).layer_norm(g, b, 1e-5).unwrap();
        let y2 = tape.constant(&t32(&[2, 4], &shifted)).layer_norm(g, b, 1e-5).unwrap();
        for row in data.chunks(4) {
            let mean = row.iter().sum::<f32>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 4.0;
            prop_assume!(var > 0.25);
        }
        prop_assert!(y1.value().max_abs_diff(&y2.value()) < 1e-5);
    }
}

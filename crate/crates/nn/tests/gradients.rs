//! Layer backward passes against central differences of `sum(y * r)`.

use ndarray::{Array, Array2, Array4, Dimension, ShapeBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ua_nn::activation::{relu, relu_backward, softmax_rows, softmax_rows_backward};
use ua_nn::{Adam, AdamConfig, Conv2d, GlobalAvgPool, Linear, Param, ParamSet, ResBlock};

const EPS: f32 = 2e-3;
const TOL: f64 = 1e-2;
const KINK: f64 = 5e-3;

fn random<Sh: ShapeBuilder<Dim = D>, D: Dimension>(rng: &mut ChaCha8Rng, dim: Sh) -> Array<f32, D> {
    Array::from_shape_simple_fn(dim, || rng.random_range(-1.0..1.0))
}

fn dot<D: Dimension>(a: &Array<f32, D>, b: &Array<f32, D>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| *x as f64 * *y as f64).sum()
}

/// Norm-wise relative error between `analytic` and central differences of
/// `f` around `x`. Coordinates whose difference quotients at `EPS` and
/// `EPS / 2` disagree straddle a ReLU kink and are skipped; at most a quarter
/// may be.
fn rel_error<D: Dimension>(x: &Array<f32, D>, analytic: &Array<f32, D>, f: impl Fn(&Array<f32, D>) -> f64) -> f64 {
    let quotient = |i: usize, eps: f32| {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus.as_slice_mut().unwrap()[i] += eps;
        minus.as_slice_mut().unwrap()[i] -= eps;
        (f(&plus) - f(&minus)) / (2.0 * eps as f64)
    };
    let mut num = 0.0;
    let mut den = 0.0;
    let mut skipped = 0;
    for i in 0..x.len() {
        let fd = quotient(i, EPS);
        if (fd - quotient(i, EPS / 2.0)).abs() > KINK * fd.abs().max(1.0) {
            skipped += 1;
            continue;
        }
        let a = analytic.as_slice().unwrap()[i] as f64;
        num += (fd - a).powi(2);
        den += fd.powi(2).max(a.powi(2));
    }
    assert!(skipped * 4 <= x.len(), "{skipped} of {} coordinates straddle a kink", x.len());
    num.sqrt() / den.sqrt().max(1e-12)
}

#[test]
fn linear_input_and_weight_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut layer = Linear::new(3, "fc", 5, 4, true);
    let x: Array2<f32> = random(&mut rng, (6, 5));
    let r: Array2<f32> = random(&mut rng, (6, 4));
    let (_, cache) = layer.forward(&x).unwrap();
    let dx = layer.backward(&cache, &r);
    let probe = layer.clone();
    assert!(rel_error(&x, &dx, |x| dot(&probe.apply(x).unwrap(), &r)) < TOL);

    let w = layer.weight.value.clone();
    let dw = layer.weight.grad.clone();
    let err = rel_error(&w, &dw, |w| {
        let mut l = probe.clone();
        l.weight.value = w.clone();
        dot(&l.apply(&x).unwrap(), &r)
    });
    assert!(err < TOL, "weight gradient error {err}");
}

#[test]
fn conv_weight_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut conv = Conv2d::new(5, "c", 2, 3, 3, 2, 1).unwrap();
    let x: Array4<f32> = random(&mut rng, (2, 7, 6, 2));
    let (y, cache) = conv.forward(&x).unwrap();
    let r: Array4<f32> = random(&mut rng, y.raw_dim());
    conv.backward(&cache, &r, false);
    let probe = conv.clone();
    let err = rel_error(&conv.weight.value, &conv.weight.grad, |w| {
        let mut c = probe.clone();
        c.weight.value = w.clone();
        dot(&c.apply(&x).unwrap(), &r)
    });
    assert!(err < TOL, "conv weight gradient error {err}");
}

#[test]
fn resblock_input_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut block = ResBlock::new(7, "res", 3, 4, 2).unwrap();
    let x: Array4<f32> = random(&mut rng, (2, 6, 6, 3));
    let (y, cache) = block.forward(&x).unwrap();
    let r: Array4<f32> = random(&mut rng, y.raw_dim());
    let dx = block.backward(&cache, &r, true).unwrap();
    let probe = block.clone();
    let err = rel_error(&x, &dx, |x| dot(&probe.apply(x).unwrap(), &r));
    assert!(err < TOL, "resblock input gradient error {err}");
}

#[test]
fn pooling_and_activations() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x: Array4<f32> = random(&mut rng, (2, 3, 4, 5));
    let r: Array2<f32> = random(&mut rng, (2, 5));
    let pool = GlobalAvgPool;
    let dx = pool.backward(x.dim(), &r);
    assert!(rel_error(&x, &dx, |x| dot(&pool.forward(x), &r)) < TOL);

    let logits: Array2<f32> = random(&mut rng, (3, 4));
    let r: Array2<f32> = random(&mut rng, (3, 4));
    let p = softmax_rows(&logits);
    let dl = softmax_rows_backward(&p, &r);
    assert!(rel_error(&logits, &dl, |l| dot(&softmax_rows(l), &r)) < TOL);

    // keep inputs away from the kink
    let x: Array2<f32> = random::<_, ndarray::Ix2>(&mut rng, (4, 4)).mapv(|v: f32| if v.abs() < 0.1 { v + 0.3 } else { v });
    let r: Array2<f32> = random(&mut rng, (4, 4));
    let dx = relu_backward(&relu(&x), &r);
    assert!(rel_error(&x, &dx, |x| dot(&relu(x), &r)) < TOL);
}

#[test]
fn adam_descends_a_linear_regression() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Array2<f32> = random(&mut rng, (32, 4));
    let target = Linear::new(11, "t", 4, 2, false).apply(&x).unwrap();
    let mut model = Linear::new(12, "m", 4, 2, false);
    let mut opt = Adam::new(AdamConfig::with_lr(0.05));
    let loss = |m: &Linear| (&m.apply(&x).unwrap() - &target).mapv(|v| v * v).mean().unwrap();
    let initial = loss(&model);
    for _ in 0..200 {
        let (y, cache) = model.forward(&x).unwrap();
        let dy = (&y - &target).mapv(|v| 2.0 * v / y.len() as f32);
        model.backward(&cache, &dy);
        opt.step(model.named_params_mut());
    }
    assert!(loss(&model) < 1e-3 * initial, "{} -> {}", initial, loss(&model));
}

#[test]
fn zero_gradient_parameter_is_untouched() {
    let mut p = Param::new(Array2::from_elem((2, 2), 0.5));
    let mut opt = Adam::new(AdamConfig::with_lr(0.1));
    for _ in 0..3 {
        opt.step(vec![("p".to_string(), &mut p)]);
    }
    assert_eq!(p.value, Array2::from_elem((2, 2), 0.5));
}

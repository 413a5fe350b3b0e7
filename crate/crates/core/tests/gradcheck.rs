//! Central finite differences against the hand-written backward passes.

use ichnet_core::metrics::{
    dice_loss, dice_loss_grad, weighted_bce, weighted_bce_logit_grad, LabelBatch, WeightVector,
};
use ichnet_core::models::{ClsModelConfig, PoolingMode, SegModelConfig, UNet, WaveletCnn};
use ichnet_core::nn::{sigmoid, Mode, Parameterized};
use ndarray::{Array1, Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Larger steps let ReLU and max-pool kinks fall inside `[p - h, p + h]`;
/// at 1e-6 f64 round-off is still far below the tolerance.
const STEP: f64 = 1e-6;
const TOL: f64 = 1e-3;
const SAMPLES: usize = 120;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// (parameter name, flat index) pairs drawn uniformly over trainable
/// entries.
fn sample_params<M: Parameterized<f64>>(
    m: &M,
    rng: &mut ChaCha8Rng,
    k: usize,
) -> Vec<(String, usize)> {
    let all: Vec<(String, usize)> = m
        .params()
        .into_iter()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(n, p)| (0..p.value.len()).map(move |i| (n.clone(), i)))
        .collect();
    assert!(all.len() >= k, "only {} trainable parameters", all.len());
    rand::seq::index::sample(rng, all.len(), k)
        .into_iter()
        .map(|i| all[i].clone())
        .collect()
}

fn nudge<M: Parameterized<f64>>(m: &mut M, name: &str, idx: usize, delta: f64) {
    let mut params = m.params_mut();
    let (_, p) = params.iter_mut().find(|(n, _)| n == name).unwrap();
    *p.value.iter_mut().nth(idx).unwrap() += delta;
}

fn grad_of<M: Parameterized<f64>>(m: &M, name: &str, idx: usize) -> f64 {
    let params = m.params();
    let (_, p) = params.iter().find(|(n, _)| n == name).unwrap();
    *p.grad.iter().nth(idx).unwrap()
}

/// Checks `SAMPLES` parameters; returns the worst relative error.
fn check<M: Parameterized<f64> + Clone>(
    model: &M,
    loss: impl Fn(&mut M) -> f64,
    analytic: &M,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut worst: f64 = 0.0;
    for (name, idx) in sample_params(model, rng, SAMPLES) {
        let mut plus = model.clone();
        nudge(&mut plus, &name, idx, STEP);
        let mut minus = model.clone();
        nudge(&mut minus, &name, idx, -STEP);
        let numeric = (loss(&mut plus) - loss(&mut minus)) / (2.0 * STEP);
        let a = grad_of(analytic, &name, idx);
        let e = rel_err(a, numeric);
        assert!(
            e < TOL,
            "{name}[{idx}]: analytic {a:e}, numeric {numeric:e}, rel err {e:e}"
        );
        worst = worst.max(e);
    }
    worst
}

fn random4(rng: &mut ChaCha8Rng, d: (usize, usize, usize, usize)) -> Array4<f64> {
    Array4::from_shape_simple_fn(d, || rng.random_range(0.0..1.0))
}

fn seg_config() -> SegModelConfig {
    SegModelConfig {
        encoder_widths: vec![4, 6, 8],
        ..Default::default()
    }
}

#[test]
fn segmenter_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = UNet::<f64>::new(&seg_config(), &mut rng).unwrap();
    let x = random4(&mut rng, (2, 1, 16, 16));
    let t = Array4::from_shape_fn(
        (2, 1, 16, 16),
        |(_, _, r, c)| if (r + c) % 5 < 2 { 1.0 } else { 0.0 },
    );
    let loss = |m: &mut UNet<f64>| {
        let p = m.forward(&x, Mode::Train).unwrap().mapv_into(sigmoid);
        dice_loss(p.view(), t.view()).unwrap()
    };
    let mut analytic = model.clone();
    let p = analytic
        .forward(&x, Mode::Train)
        .unwrap()
        .mapv_into(sigmoid);
    let g = dice_loss_grad(p.view(), t.view(), 1.0).unwrap() * &p.mapv(|v| v * (1.0 - v));
    analytic.zero_grad();
    analytic.backward(&g);
    let worst = check(&model, loss, &analytic, &mut rng);
    assert!(worst < TOL);
}

fn classifier_case(pooling: PoolingMode, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seg = UNet::<f64>::new(&seg_config(), &mut rng).unwrap();
    let cfg = ClsModelConfig {
        block_widths: vec![4, 8],
        pooling_mode: pooling,
        fuse_encoder_features: true,
        encoder_feature_width: 8,
        ..Default::default()
    };
    let model = WaveletCnn::<f64>::new(&cfg, &mut rng).unwrap();
    let x = random4(&mut rng, (3, 1, 16, 16));
    let enc = seg.encoder_features(&x).unwrap();
    let y = LabelBatch::new(Array2::from_shape_fn((3, 4), |(n, c)| ((n + c) % 2) as f64)).unwrap();
    let w = WeightVector {
        values: Array1::from(vec![1.0, 2.5, 0.5, 4.0]),
        warnings: Vec::new(),
    };
    let loss = |m: &mut WaveletCnn<f64>| {
        let p = m
            .forward(&x, Some(&enc), Mode::Train)
            .unwrap()
            .mapv_into(sigmoid);
        weighted_bce(p.view(), &y, &w).unwrap()
    };
    let mut analytic = model.clone();
    let p = analytic
        .forward(&x, Some(&enc), Mode::Train)
        .unwrap()
        .mapv_into(sigmoid);
    let g = weighted_bce_logit_grad(p.view(), &y, &w).unwrap();
    analytic.zero_grad();
    analytic.backward(&g);
    check(&model, loss, &analytic, &mut rng);
}

#[test]
fn classifier_gradients_with_max_pooling() {
    classifier_case(PoolingMode::MaxPool, 21);
}

#[test]
fn classifier_gradients_with_wavelet_pooling() {
    classifier_case(PoolingMode::WaveletLl, 22);
}

#[test]
fn classifier_gradients_with_multiresolution_wavelets() {
    classifier_case(PoolingMode::WaveletMultiresolution, 23);
}

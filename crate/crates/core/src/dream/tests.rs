use super::*;
use crate::convnet::{build_model, forward, Activation, LayerSpec, ModelConfig};
use crate::diffkit::{finite_diff_check, DEFAULT_EPSILON};
use crate::mapview::{argmax_region, GridMap};
use crate::topogrid::{GridSpec, PenaltySign};
use proptest::prelude::*;

fn config(layers: Vec<LayerSpec>, input_channels: usize, activation: Activation) -> ModelConfig {
    ModelConfig {
        input_channels,
        num_classes: 2,
        layers,
        lambda: 0.0,
        penalty_sign: PenaltySign::Similarity,
        learning_rate: 0.1,
        epochs: 1,
        batch_size: 1,
        seed: 0,
        activation,
    }
}

fn small_model(activation: Activation) -> Model {
    let cfg = config(
        vec![LayerSpec::on_grid(3, 3, 3), LayerSpec::on_grid(3, 3, 3)],
        6,
        activation,
    );
    build_model(&cfg, 11).unwrap()
}

fn random_input(f: usize, t: usize, seed: u64) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    Tensor::new(vec![f, t], (0..f * t).map(|_| rng.normal()).collect()).unwrap()
}

fn quick() -> DreamConfig {
    DreamConfig {
        steps: 24,
        ..DreamConfig::default()
    }
}

#[test]
fn zero_input_zero_bias_gives_zero() {
    let m = small_model(Activation::Relu);
    assert_eq!(objective(&m, &Tensor::zeros(&[6, 5]), 1, &[0, 4]).unwrap(), 0.0);
}

#[test]
fn objective_is_mean_of_time_means() {
    let m = small_model(Activation::Relu);
    let x = random_input(6, 7, 2);
    let acts = &forward(&m, std::slice::from_ref(&x)).unwrap()[0].activations.layers[1];
    let time_mean = |k: usize| acts.row(k).iter().sum::<f64>() / 7.0;
    for k in 0..9 {
        assert!((objective(&m, &x, 1, &[k]).unwrap() - time_mean(k)).abs() <= 1e-12);
    }
    let (a, b) = (objective(&m, &x, 1, &[2]).unwrap(), objective(&m, &x, 1, &[7]).unwrap());
    assert!((objective(&m, &x, 1, &[2, 7]).unwrap() - (a + b) / 2.0).abs() <= 1e-12);
}

#[test]
fn bad_targets_are_rejected() {
    let m = small_model(Activation::Relu);
    let x = random_input(6, 4, 1);
    assert!(matches!(objective(&m, &x, 0, &[]), Err(Error::EmptyFilterSet)));
    assert!(matches!(objective(&m, &x, 0, &[9]), Err(Error::OutOfBounds(_))));
    assert!(matches!(objective(&m, &x, 2, &[0]), Err(Error::OutOfBounds(_))));
    assert!(matches!(
        objective(&m, &random_input(5, 4, 1), 0, &[0]),
        Err(Error::Shape(_))
    ));
    let bad = DreamConfig {
        blur_every: 0,
        ..quick()
    };
    assert!(matches!(dream(&m, 0, &[0], 4, &bad), Err(Error::Config(_))));
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let m = small_model(Activation::Relu);
    for seed in 0..5 {
        let mut og = objective_graph(&m, &random_input(6, 8, seed), 1, &[1, 3, 4]).unwrap();
        let err = finite_diff_check(&mut og.graph, og.objective, DEFAULT_EPSILON).unwrap();
        assert!(err <= 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn linear_toy_moves_along_filter_weights() {
    let grid = GridSpec::new(1, 1, 3).unwrap();
    let cfg = config(
        vec![LayerSpec {
            filters: 1,
            kernel: 1,
            grid,
        }],
        4,
        Activation::Relu,
    );
    let mut m = build_model(&cfg, 0).unwrap();
    let w = [0.3, 1.0, 0.5, 0.8];
    m.conv[0].filters = Tensor::new(vec![1, 4, 1], w.to_vec()).unwrap();
    m.conv[0].bias = Tensor::new(vec![1], vec![1.0]).unwrap();
    let dc = DreamConfig {
        steps: 50,
        l2_decay: 0.0,
        blur_sigma: 0.0,
        seed: 4,
        ..DreamConfig::default()
    };
    let r = dream(&m, 0, &[0], 6, &dc).unwrap();
    let mut rng = SplitMix64::new(4);
    let x0: Vec<f64> = (0..24).map(|_| dc.init_scale * rng.normal()).collect();
    let delta: Vec<f64> = r.input.data().iter().zip(&x0).map(|(a, b)| a - b).collect();
    let tiled: Vec<f64> = w.iter().flat_map(|&v| std::iter::repeat_n(v, 6)).collect();
    let cos = crate::diffkit::cosine_similarity(&delta, &tiled).unwrap();
    assert!(cos > 0.99, "{cos}");
    assert_eq!(r.trajectory.len(), 51);
    assert!(r.last() > r.initial());
}

#[test]
fn clamped_model_keeps_input_bounded() {
    let m = small_model(Activation::ClampedRelu);
    let (f, t) = (6, 8);
    let dc = DreamConfig {
        steps: 400,
        step_size: 0.5,
        l2_decay: 0.05,
        seed: 3,
        ..DreamConfig::default()
    };
    let bound = dc.step_size * (t * f) as f64 / dc.l2_decay;
    let mut x_norm_max = 0.0f64;
    // Sample the path at several lengths.
    for steps in [1, 10, 100, 400] {
        let r = dream(&m, 1, &[0, 1, 2], t, &DreamConfig { steps, ..dc }).unwrap();
        x_norm_max = x_norm_max.max(r.input.norm());
    }
    assert!(x_norm_max <= bound, "{x_norm_max} > {bound}");
}

#[test]
fn dream_is_deterministic_and_records_every_step() {
    let m = small_model(Activation::Relu);
    let a = dream(&m, 1, &[4], 8, &quick()).unwrap();
    let b = dream(&m, 1, &[4], 8, &quick()).unwrap();
    assert!(a.input.bitwise_eq(&b.input));
    assert_eq!(
        a.trajectory.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.trajectory.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(a.trajectory.len(), quick().steps + 1);
    assert_eq!(
        a.target,
        DreamTarget {
            layer: 1,
            filters: vec![4]
        }
    );
}

#[test]
fn region_dreams_follow_seed_contract() {
    let m = small_model(Activation::Relu);
    let mut values = vec![0.0; 9];
    values[8] = 1.0;
    let region = argmax_region(&GridMap::new(3, 3, values, "").unwrap());
    let rd = dream_region(&m, 1, &region, 6, &quick()).unwrap();
    assert_eq!(rd.joint.target.filters, (0..9).collect::<Vec<_>>());
    assert_eq!(rd.joint.seed, quick().seed + 9);
    assert_eq!(rd.singles.len(), 9);
    for (i, s) in rd.singles.iter().enumerate() {
        let alone = dream(
            &m,
            1,
            &[i],
            6,
            &DreamConfig {
                seed: i as u64,
                ..quick()
            },
        )
        .unwrap();
        assert_eq!(s, &alone);
    }
}

#[test]
fn blur_kernel_and_constant_identity() {
    for sigma in [0.3, 0.5, 1.0, 2.5] {
        let k = gaussian_kernel(sigma);
        assert_eq!(k.len(), 2 * (3.0 * sigma).ceil() as usize + 1);
        assert!((k.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let img = Tensor::new(vec![4, 5], vec![2.5; 20]).unwrap();
        let out = gaussian_blur(&img, sigma).unwrap();
        assert!(out.data().iter().all(|v| (v - 2.5).abs() <= 1e-12));
    }
    let img = random_input(3, 3, 0);
    assert!(gaussian_blur(&img, 0.0).unwrap().bitwise_eq(&img));
}

proptest! {
    #[test]
    fn blur_stays_within_input_range(seed in any::<u64>(), sigma in 0.1f64..3.0) {
        let img = random_input(5, 7, seed);
        let out = gaussian_blur(&img, sigma).unwrap();
        let lo = img.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = img.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(out.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }
}

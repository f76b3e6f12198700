use super::*;
use crate::convnet::{build_model, Activation, LayerSpec, ModelConfig};
use crate::rng::SplitMix64;
use crate::synthphone::{generate, Sample, SynthConfig};
use crate::topogrid::PenaltySign;
use proptest::prelude::*;

fn grid22() -> GridSpec {
    GridSpec::square3(2, 2).unwrap()
}

fn tiny_data() -> Dataset {
    generate(&SynthConfig {
        num_classes: 3,
        freq_bins: 8,
        frames: 8,
        samples_per_class: 4,
        noise_std: 0.2,
        seed: 5,
    })
    .unwrap()
}

fn tiny_model() -> Model {
    let cfg = ModelConfig {
        input_channels: 8,
        num_classes: 3,
        layers: vec![LayerSpec::on_grid(2, 2, 3), LayerSpec::on_grid(2, 2, 3)],
        lambda: 0.0,
        penalty_sign: PenaltySign::Similarity,
        learning_rate: 0.1,
        epochs: 1,
        batch_size: 4,
        seed: 1,
        activation: Activation::Relu,
    };
    build_model(&cfg, 7).unwrap()
}

fn random_records(n: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = SplitMix64::new(seed);
    (0..n)
        .map(|_| Tensor::new(vec![4, 3], (0..12).map(|_| rng.uniform(-2.0, 2.0)).collect()).unwrap())
        .collect()
}

#[test]
fn grouping_validation() {
    assert!(matches!(
        Grouping::new(vec![0, 0], vec!["a".into(), "b".into()]),
        Err(Error::EmptyGroup(g)) if g == "b"
    ));
    assert!(matches!(
        Grouping::new(vec![0, 2], vec!["a".into(), "b".into()]),
        Err(Error::OutOfBounds(_))
    ));
    let g = Grouping::new(vec![1, 0, 1], vec!["a".into(), "b".into()]).unwrap();
    assert_eq!(g.sizes(), vec![1, 2]);
    assert_eq!(g.index_of("b"), Some(1));
}

#[test]
fn grouping_from_csv() {
    let g = Grouping::from_csv("sample_index,group_name\n2,x\n0,y\n1,x\n", 3).unwrap();
    assert_eq!(g.names(), ["x", "y"]);
    assert_eq!(g.assignment(), [1, 0, 0]);
    for bad in [
        "idx,name\n0,a\n",
        "sample_index,group_name\n0,a\n",
        "sample_index,group_name\n0,a\n0,b\n1,a\n",
        "sample_index,group_name\n0,a\n5,b\n",
        "sample_index,group_name\n0,a\nz,b\n",
    ] {
        assert!(matches!(Grouping::from_csv(bad, 2), Err(Error::Parse { .. })), "{bad}");
    }
}

#[test]
fn two_sample_hand_example() {
    let a = Tensor::new(vec![1, 2], vec![1.0, 4.0]).unwrap();
    let b = Tensor::new(vec![1, 2], vec![3.0, -2.0]).unwrap();
    let g = Grouping::new(vec![0, 1], vec!["g1".into(), "g2".into()]).unwrap();
    let grid = GridSpec::new(1, 1, 3).unwrap();
    let m = aggregate(&[a, b], &g, 0, NapMode::Nap, grid).unwrap();
    assert_eq!(m.group_values(0), [-1.0, 3.0]);
    assert_eq!(m.group_values(1), [1.0, -3.0]);
    assert_eq!(m.baseline, [2.0, 1.0]);
}

#[test]
fn aggregate_rejects_misaligned_inputs() {
    let recs = random_records(3, 1);
    let g = Grouping::single(2, "all").unwrap();
    assert!(matches!(
        aggregate(&recs, &g, 0, NapMode::Nap, grid22()),
        Err(Error::Shape(_))
    ));
    let g = Grouping::single(3, "all").unwrap();
    let grid = GridSpec::square3(3, 3).unwrap();
    assert!(matches!(
        aggregate(&recs, &g, 0, NapMode::Nap, grid),
        Err(Error::Shape(_))
    ));
}

#[test]
fn single_group_nap_is_zero() {
    let (m, d) = (tiny_model(), tiny_data());
    for layer in 0..2 {
        let map = nap(&m, &d, &Grouping::single(d.len(), "all").unwrap(), layer).unwrap();
        assert!(map.values.iter().all(|v| v.abs() <= 1e-12));
        assert_eq!(map.values.len(), 4 * 8);
    }
}

#[test]
fn weighted_deviations_sum_to_zero_in_both_modes() {
    let (m, d) = (tiny_model(), tiny_data());
    let g = Grouping::by_label(&d).unwrap();
    for map in [nap(&m, &d, &g, 1).unwrap(), gradnap(&m, &d, &g, 1).unwrap()] {
        for k in 0..map.filters {
            for t in 0..map.frames {
                let s: f64 = (0..3).map(|gi| map.group_sizes[gi] as f64 * map.value(gi, k, t)).sum();
                assert!(s.abs() <= 1e-9 * d.len() as f64, "{s}");
            }
        }
    }
}

#[test]
fn nap_invariant_under_duplication_and_reordering() {
    let (m, d) = (tiny_model(), tiny_data());
    let g = Grouping::by_label(&d).unwrap();
    let base = nap(&m, &d, &g, 0).unwrap();

    let mut twice = d.clone();
    twice.samples.extend(d.samples.iter().cloned());
    let dup = nap(&m, &twice, &Grouping::by_label(&twice).unwrap(), 0).unwrap();

    let mut rev = d.clone();
    rev.samples.reverse();
    let re = nap(&m, &rev, &Grouping::by_label(&rev).unwrap(), 0).unwrap();

    for other in [&dup, &re] {
        for (a, b) in base.values.iter().zip(&other.values) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn gradnap_zero_head_is_exactly_zero() {
    let (mut m, d) = (tiny_model(), tiny_data());
    m.head_weight = Tensor::zeros(m.head_weight.shape());
    let g = Grouping::by_label(&d).unwrap();
    for layer in 0..2 {
        let map = gradnap(&m, &d, &g, layer).unwrap();
        assert!(map.values.iter().all(|&v| v == 0.0));
        assert!(map.baseline.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn gradnap_requires_class_pure_groups() {
    let (m, d) = (tiny_model(), tiny_data());
    let g = Grouping::single(d.len(), "all").unwrap();
    assert!(matches!(gradnap(&m, &d, &g, 0), Err(Error::Config(_))));

    // A single group over a single-class dataset is fine and vanishes.
    let mut one = d.clone();
    one.samples.retain(|s| s.label == 1);
    let map = gradnap(&m, &one, &Grouping::single(one.len(), "P1").unwrap(), 0).unwrap();
    assert!(map.values.iter().all(|v| v.abs() <= 1e-12));
}

#[test]
fn gradnap_hand_example() {
    // One filter of width 1 and weight 2 on a one-channel, two-frame input;
    // head weights 3 and -1. Input (1, -1) gives activations (2, 0), and
    // d logit0 / d a_t = 3 / 2, so relevance is (3, 0).
    let cfg = ModelConfig {
        input_channels: 1,
        num_classes: 2,
        layers: vec![LayerSpec {
            filters: 1,
            kernel: 1,
            grid: GridSpec::new(1, 1, 3).unwrap(),
        }],
        lambda: 0.0,
        penalty_sign: PenaltySign::Similarity,
        learning_rate: 0.1,
        epochs: 1,
        batch_size: 1,
        seed: 0,
        activation: Activation::Relu,
    };
    let mut m = build_model(&cfg, 0).unwrap();
    m.conv[0].filters = Tensor::new(vec![1, 1, 1], vec![2.0]).unwrap();
    m.head_weight = Tensor::new(vec![2, 1], vec![3.0, -1.0]).unwrap();
    let x = Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap();
    let r = relevance(&m, &x, 0, 0).unwrap();
    assert_eq!(r.data(), [3.0, 0.0]);
    let r = relevance(&m, &x, 1, 0).unwrap();
    assert_eq!(r.data(), [-1.0, 0.0]);

    let y = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
    let d = Dataset {
        config: SynthConfig {
            num_classes: 2,
            freq_bins: 1,
            frames: 2,
            samples_per_class: 1,
            noise_std: 0.0,
            seed: 0,
        },
        samples: vec![
            Sample {
                spectrogram: x,
                label: 0,
            },
            Sample {
                spectrogram: y,
                label: 1,
            },
        ],
    };
    // Second sample: activations (1, 1), own logit weight -1, relevance (-0.5, -0.5).
    let map = gradnap(&m, &d, &Grouping::by_label(&d).unwrap(), 0).unwrap();
    assert_eq!(map.baseline, [1.25, -0.25]);
    assert_eq!(map.group_values(0), [1.75, 0.25]);
    assert_eq!(map.group_values(1), [-1.75, -0.25]);
}

#[test]
fn layer_out_of_range() {
    let (m, d) = (tiny_model(), tiny_data());
    let g = Grouping::by_label(&d).unwrap();
    assert!(matches!(nap(&m, &d, &g, 2), Err(Error::OutOfBounds(_))));
}

#[test]
fn time_average_grid_and_errors() {
    let recs = random_records(5, 3);
    let g = Grouping::new(vec![0, 1, 0, 1, 1], vec!["a".into(), "b".into()]).unwrap();
    let map = aggregate(&recs, &g, 1, NapMode::GradNap, grid22()).unwrap();
    let gm = time_average(&map, 1).unwrap();
    assert_eq!((gm.rows, gm.cols), (2, 2));
    assert!(gm.label.contains("GradNAP (reconstructed)"));
    for r in 0..2 {
        for c in 0..2 {
            let k = r * 2 + c;
            let mut s = 0.0;
            for t in 0..3 {
                s += map.value(1, k, t);
            }
            assert!((gm.get(r, c) - s / 3.0).abs() <= 1e-12);
        }
    }
    assert!(matches!(time_average(&map, 2), Err(Error::OutOfBounds(_))));
}

#[test]
fn export_import_round_trip() {
    let (m, d) = (tiny_model(), tiny_data());
    let map = nap(&m, &d, &Grouping::by_label(&d).unwrap(), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = export(&map, dir.path(), "abc").unwrap();
    assert_eq!(manifest.groups.len(), 3);
    let text = fs::read_to_string(dir.path().join(&manifest.groups[0].file)).unwrap();
    assert!(text.starts_with("filter,row,col,t,value\n0,0,0,0,"));
    let (back, man2) = import(dir.path()).unwrap();
    assert_eq!(back, map);
    assert_eq!(man2, manifest);

    fs::write(
        dir.path().join(&manifest.baseline_file),
        "filter,row,col,t,value\n0,0,0,0,nan\n",
    )
    .unwrap();
    assert!(matches!(import(dir.path()), Err(Error::Parse { .. })));
}

proptest! {
    #[test]
    fn time_average_matches_flat_loop(seed in any::<u64>(), n in 2usize..8) {
        let recs = random_records(n, seed);
        let assignment: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let g = Grouping::new(assignment, vec!["a".into(), "b".into()]).unwrap();
        let map = aggregate(&recs, &g, 0, NapMode::Nap, grid22()).unwrap();
        for grp in 0..2 {
            let gm = time_average(&map, grp).unwrap();
            for k in 0..4 {
                let mut s = 0.0;
                for t in 0..3 {
                    s += map.values[grp * 12 + k * 3 + t];
                }
                prop_assert!((gm.values[k] - s / 3.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn deviation_sum_vanishes(seed in any::<u64>(), n in 3usize..12) {
        let recs = random_records(n, seed);
        let assignment: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let g = Grouping::new(assignment, vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let map = aggregate(&recs, &g, 0, NapMode::Nap, grid22()).unwrap();
        for i in 0..12 {
            let s: f64 = (0..3).map(|grp| map.group_sizes[grp] as f64 * map.values[grp * 12 + i]).sum();
            prop_assert!(s.abs() <= 1e-9 * n as f64);
        }
    }
}

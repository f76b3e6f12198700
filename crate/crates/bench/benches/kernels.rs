use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use topomap::convnet::{build_model, loss_graph};
use topomap::dream::objective_graph;
use topomap::rng::SplitMix64;
use topomap::synthphone::generate;
use topomap::topogrid::{penalty_node, topo_penalty, FilterBank};
use topomap::{Graph, GridSpec, ModelConfig, PenaltySign, SynthConfig, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

fn conv1d(c: &mut Criterion) {
    // Second desk layer: 64 channels in, 64 filters, kernel 5, 32 frames.
    let x = random(&[64, 32], 1);
    let f = random(&[64, 64, 5], 2);
    let b = random(&[64], 3);
    c.bench_function("conv1d_forward_64x64x5_t32", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (xi, fi, bi) = (g.constant(x.clone()), g.constant(f.clone()), g.constant(b.clone()));
            black_box(g.conv1d(xi, fi, bi).unwrap());
        })
    });
    c.bench_function("conv1d_forward_backward_64x64x5_t32", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let xi = g.param("x", x.clone());
            let fi = g.param("f", f.clone());
            let bi = g.param("b", b.clone());
            let y = g.conv1d(xi, fi, bi).unwrap();
            let loss = g.sum(y).unwrap();
            black_box(g.backward(loss).unwrap());
        })
    });
}

fn penalty(c: &mut Criterion) {
    let grid = GridSpec::square3(8, 8).unwrap();
    let weights = random(&[64, 320], 4);
    let bank = FilterBank::from_tensor(grid, &weights).unwrap();
    c.bench_function("topo_penalty_8x8_dim320", |bench| {
        bench.iter(|| black_box(topo_penalty(black_box(&bank)).unwrap()))
    });
    c.bench_function("topo_penalty_graph_backward_8x8_dim320", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let f = g.param("filters", weights.clone());
            let p = penalty_node(&mut g, f, &grid, PenaltySign::Similarity).unwrap();
            black_box(g.backward(p).unwrap());
        })
    });
}

fn training_step(c: &mut Criterion) {
    let data = generate(&SynthConfig {
        samples_per_class: 4,
        ..SynthConfig::default()
    })
    .unwrap();
    let config = ModelConfig {
        lambda: 0.3,
        ..ModelConfig::desk_default(data.config.freq_bins, data.config.num_classes)
    };
    let model = build_model(&config, 0).unwrap();
    let xs: Vec<&Tensor> = data.samples.iter().map(|s| &s.spectrogram).collect();
    let ys: Vec<usize> = data.samples.iter().map(|s| s.label).collect();
    c.bench_function("loss_and_gradients_batch32_desk", |bench| {
        bench.iter(|| {
            let lg = loss_graph(&model, &xs, &ys).unwrap();
            black_box(lg.graph.backward(lg.loss).unwrap());
        })
    });
    let x = data.samples[0].spectrogram.clone();
    c.bench_function("dream_step_joint9_desk", |bench| {
        bench.iter_batched(
            || objective_graph(&model, &x, 1, &[0, 1, 2, 8, 9, 10, 16, 17, 18]).unwrap(),
            |og| black_box(og.graph.backward(og.objective).unwrap()),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, conv1d, penalty, training_step);
criterion_main!(benches);

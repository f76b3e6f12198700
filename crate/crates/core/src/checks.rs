//! Finite-difference gradient suite over every differentiable piece of the
//! pipeline, at a size that runs in seconds.

use serde::Serialize;

use crate::convnet::{build_model, loss_graph, Activation, LayerSpec, ModelConfig};
use crate::diffkit::{finite_diff_check, Graph, NodeId, Tensor, DEFAULT_EPSILON};
use crate::dream::objective_graph;
use crate::error::Result;
use crate::rng::SplitMix64;
use crate::synthphone::{generate, SynthConfig};
use crate::topogrid::{penalty_node, GridSpec, PenaltySign};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const PRIMITIVE_TRIALS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRADCHECK_TOLERANCE
    }
}

/// Uniform entries in (-1, 1), kept at least 0.05 away from zero.
pub fn random_tensor(rng: &mut SplitMix64, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.uniform(-1.0, 1.0);
            if v.abs() < 0.05 {
                v + 0.1f64.copysign(v)
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

// Random weights on the output keep every reduction non-trivial.
fn weighted_sum(g: &mut Graph, rng: &mut SplitMix64, y: NodeId) -> Result<NodeId> {
    let shape = g.value(y).shape().to_vec();
    let w = g.constant(random_tensor(rng, &shape));
    let p = g.mul(y, w)?;
    g.sum(p)
}

type Builder = Box<dyn Fn(&mut Graph, &mut SplitMix64) -> Result<NodeId>>;

fn worst_over_trials(
    trials: usize,
    base_seed: u64,
    build: impl Fn(&mut Graph, &mut SplitMix64) -> Result<NodeId>,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for trial in 0..trials as u64 {
        let mut rng = SplitMix64::new(base_seed + trial);
        let mut g = Graph::new();
        let loss = build(&mut g, &mut rng)?;
        worst = worst.max(finite_diff_check(&mut g, loss, DEFAULT_EPSILON)?);
    }
    Ok(worst)
}

/// Every graph primitive on 20 seeded random draws.
pub fn primitive_checks() -> Result<Vec<CheckResult>> {
    let cases: Vec<(&str, Builder)> = vec![
        (
            "relu",
            Box::new(|g, rng| {
                let x = g.param("x", random_tensor(rng, &[3, 4]));
                let y = g.relu(x)?;
                weighted_sum(g, rng, y)
            }),
        ),
        (
            "clamped_relu",
            Box::new(|g, rng| {
                let x = g.param("x", random_tensor(rng, &[6]));
                let y = g.clamped_relu(x, 0.5)?;
                weighted_sum(g, rng, y)
            }),
        ),
        (
            "dense",
            Box::new(|g, rng| {
                let x = g.param("x", random_tensor(rng, &[4]));
                let w = g.param("w", random_tensor(rng, &[3, 4]));
                let b = g.param("b", random_tensor(rng, &[3]));
                let y = g.dense(x, w, b)?;
                weighted_sum(g, rng, y)
            }),
        ),
        (
            "conv1d",
            Box::new(|g, rng| {
                let x = g.param("x", random_tensor(rng, &[2, 6]));
                let f = g.param("f", random_tensor(rng, &[3, 2, 3]));
                let b = g.param("b", random_tensor(rng, &[3]));
                let y = g.conv1d(x, f, b)?;
                weighted_sum(g, rng, y)
            }),
        ),
        (
            "mean_time",
            Box::new(|g, rng| {
                let x = g.param("x", random_tensor(rng, &[3, 5]));
                let y = g.mean_time(x)?;
                weighted_sum(g, rng, y)
            }),
        ),
        (
            "softmax_cross_entropy",
            Box::new(|g, rng| {
                let z = g.param("z", random_tensor(rng, &[5]));
                let label = rng.below(5) as usize;
                g.softmax_cross_entropy(z, label)
            }),
        ),
        (
            "add_scale_offset",
            Box::new(|g, rng| {
                let a = g.param("a", random_tensor(rng, &[4]));
                let b = g.param("b", random_tensor(rng, &[4]));
                let s = g.add(a, b)?;
                let s = g.scale(s, -1.7)?;
                let s = g.offset(s, 0.3)?;
                weighted_sum(g, rng, s)
            }),
        ),
        (
            "norm",
            Box::new(|g, rng| {
                let a = g.param("a", random_tensor(rng, &[5]));
                g.norm(a)
            }),
        ),
        (
            "sum_mean",
            Box::new(|g, rng| {
                let a = g.param("a", random_tensor(rng, &[5]));
                let sq = g.mul(a, a)?;
                let s = g.sum(sq)?;
                let m = g.mean(sq)?;
                let m = g.scale(m, 3.0)?;
                g.add(s, m)
            }),
        ),
        (
            "cosine_similarity",
            Box::new(|g, rng| {
                let a = g.param("a", random_tensor(rng, &[6]));
                let b = g.param("b", random_tensor(rng, &[6]));
                g.cosine_similarity(a, b)
            }),
        ),
        (
            "row_gather_stack",
            Box::new(|g, rng| {
                let m = g.param("m", random_tensor(rng, &[3, 2, 2]));
                let r = g.row(m, 1)?;
                let picked = g.gather(m, vec![0, 5, 11, 5])?;
                let a = weighted_sum(g, rng, r)?;
                let b = weighted_sum(g, rng, picked)?;
                let st = g.stack(vec![a, b])?;
                weighted_sum(g, rng, st)
            }),
        ),
    ];
    cases
        .into_iter()
        .map(|(name, build)| {
            Ok(CheckResult {
                name: name.to_string(),
                trials: PRIMITIVE_TRIALS,
                max_rel_error: worst_over_trials(PRIMITIVE_TRIALS, 1000, build)?,
            })
        })
        .collect()
}

/// Topographic penalty in both sign conventions on 3x3 and 2x3 grids.
pub fn penalty_checks() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (name, sign) in [
        ("topo_penalty", PenaltySign::Similarity),
        ("topo_penalty_literal_cosine", PenaltySign::LiteralCosine),
    ] {
        let worst = worst_over_trials(PRIMITIVE_TRIALS, 2000, |g, rng| {
            let grid = if rng.below(2) == 0 {
                GridSpec::square3(3, 3)?
            } else {
                GridSpec::square3(2, 3)?
            };
            let f = g.param("filters", random_tensor(rng, &[grid.cells(), 5]));
            penalty_node(g, f, &grid, sign)
        })?;
        out.push(CheckResult {
            name: name.into(),
            trials: PRIMITIVE_TRIALS,
            max_rel_error: worst,
        });
    }
    Ok(out)
}

fn tiny_config(activation: Activation) -> ModelConfig {
    ModelConfig {
        input_channels: 8,
        num_classes: 2,
        layers: vec![LayerSpec::on_grid(2, 2, 3), LayerSpec::on_grid(2, 2, 3)],
        lambda: 0.5,
        penalty_sign: PenaltySign::Similarity,
        learning_rate: 0.1,
        epochs: 1,
        batch_size: 4,
        seed: 0,
        activation,
    }
}

/// Cross-entropy plus penalty through a two-layer model (2 classes, 8 bins,
/// 8 frames, 2x2 grids), against every parameter entry.
pub fn total_loss_check() -> Result<CheckResult> {
    let data = generate(&SynthConfig {
        num_classes: 2,
        freq_bins: 8,
        frames: 8,
        samples_per_class: 3,
        noise_std: 0.2,
        seed: 1,
    })?;
    let trials = 3;
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let model = build_model(&tiny_config(Activation::Relu), 40 + trial as u64)?;
        let xs: Vec<&Tensor> = data.samples.iter().map(|s| &s.spectrogram).collect();
        let ys: Vec<usize> = data.samples.iter().map(|s| s.label).collect();
        let mut lg = loss_graph(&model, &xs, &ys)?;
        worst = worst.max(finite_diff_check(&mut lg.graph, lg.loss, DEFAULT_EPSILON)?);
    }
    Ok(CheckResult {
        name: "total_loss".into(),
        trials,
        max_rel_error: worst,
    })
}

/// Dream objective with respect to the input, single-filter and joint.
pub fn dream_objective_check() -> Result<CheckResult> {
    let model = build_model(&tiny_config(Activation::Relu), 77)?;
    let mut worst = 0.0f64;
    for trial in 0..PRIMITIVE_TRIALS as u64 {
        let mut rng = SplitMix64::new(3000 + trial);
        let filters = if trial % 2 == 0 {
            vec![rng.below(4) as usize]
        } else {
            vec![0, 1, 2, 3]
        };
        let x = random_tensor(&mut rng, &[8, 8]);
        let mut og = objective_graph(&model, &x, (trial % 2) as usize, &filters)?;
        worst = worst.max(finite_diff_check(&mut og.graph, og.objective, DEFAULT_EPSILON)?);
    }
    Ok(CheckResult {
        name: "dream_objective".into(),
        trials: PRIMITIVE_TRIALS,
        max_rel_error: worst,
    })
}

/// The whole suite, in a fixed order.
pub fn gradcheck_suite() -> Result<Vec<CheckResult>> {
    let mut all = primitive_checks()?;
    all.extend(penalty_checks()?);
    all.push(total_loss_check()?);
    all.push(dream_objective_check()?);
    Ok(all)
}

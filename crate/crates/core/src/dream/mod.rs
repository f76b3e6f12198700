//! Optimal inputs by regularized gradient ascent on filter activations.

use serde::{Deserialize, Serialize};

use crate::convnet::Model;
use crate::diffkit::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::mapview::Region;
use crate::rng::SplitMix64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DreamConfig {
    pub steps: usize,
    pub step_size: f64,
    pub l2_decay: f64,
    /// Zero or negative disables blurring.
    pub blur_sigma: f64,
    pub blur_every: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for DreamConfig {
    fn default() -> Self {
        Self {
            steps: 256,
            step_size: 0.1,
            l2_decay: 1e-3,
            blur_sigma: 0.5,
            blur_every: 4,
            init_scale: 0.01,
            seed: 0,
        }
    }
}

impl DreamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.steps >= 1
            && self.step_size > 0.0
            && self.l2_decay >= 0.0
            && self.blur_every >= 1
            && self.init_scale >= 0.0
            && [self.step_size, self.l2_decay, self.blur_sigma, self.init_scale]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid dream config {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DreamTarget {
    pub layer: usize,
    pub filters: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DreamResult {
    /// `[F x T]`.
    pub input: Tensor,
    /// Objective before the first step and after every step.
    pub trajectory: Vec<f64>,
    pub target: DreamTarget,
    pub seed: u64,
}

impl DreamResult {
    pub fn initial(&self) -> f64 {
        self.trajectory[0]
    }

    pub fn last(&self) -> f64 {
        *self.trajectory.last().expect("nonempty trajectory")
    }
}

/// One result per region cell plus the joint result over all region filters.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionDreams {
    pub region: Region,
    pub singles: Vec<DreamResult>,
    pub joint: DreamResult,
}

/// Graph computing the objective for a variable input named `input`.
pub struct ObjectiveGraph {
    pub graph: Graph,
    pub input: NodeId,
    pub objective: NodeId,
}

fn check_target(model: &Model, layer: usize, filters: &[usize]) -> Result<()> {
    let spec = model.layer(layer)?;
    if filters.is_empty() {
        return Err(Error::EmptyFilterSet);
    }
    let k = spec.filters.shape()[0];
    if let Some(bad) = filters.iter().find(|&&f| f >= k) {
        return Err(Error::OutOfBounds(format!("filter {bad} of {k} in layer {layer}")));
    }
    Ok(())
}

/// Records the mean over `filters` of each filter's time-mean activation.
pub fn objective_graph(model: &Model, x: &Tensor, layer: usize, filters: &[usize]) -> Result<ObjectiveGraph> {
    check_target(model, layer, filters)?;
    model.check_input(x)?;
    let mut graph = Graph::new();
    let nodes = model.record_params(&mut graph, false);
    let input = graph.param("input", x.clone());
    let out = model.record_forward(&mut graph, &nodes, input)?;
    let t = x.shape()[1];
    let picks = filters.iter().flat_map(|&k| k * t..(k + 1) * t).collect();
    let picked = graph.gather(out.activations[layer], picks)?;
    let objective = graph.mean(picked)?;
    Ok(ObjectiveGraph {
        graph,
        input,
        objective,
    })
}

pub fn objective(model: &Model, x: &Tensor, layer: usize, filters: &[usize]) -> Result<f64> {
    let og = objective_graph(model, x, layer, filters)?;
    Ok(og.graph.scalar(og.objective))
}

/// Normalized Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|w| w / s).collect()
}

fn blur_line(line: &[f64], kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let n = line.len() as isize;
    (0..n)
        .map(|i| {
            let (mut acc, mut wsum) = (0.0, 0.0);
            for (j, &w) in kernel.iter().enumerate() {
                let p = i + j as isize - r;
                if (0..n).contains(&p) {
                    acc += w * line[p as usize];
                    wsum += w;
                }
            }
            acc / wsum
        })
        .collect()
}

/// Separable blur of a `[rows x cols]` image; taps falling off the edge are
/// dropped and the rest renormalized.
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 2 {
        return Err(Error::Shape(format!("blur expects a 2-D image, got {s:?}")));
    }
    if sigma <= 0.0 {
        return Ok(image.clone());
    }
    let (rows, cols) = (s[0], s[1]);
    let kernel = gaussian_kernel(sigma);
    let mut data: Vec<f64> = image
        .data()
        .chunks(cols)
        .flat_map(|row| blur_line(row, &kernel))
        .collect();
    for c in 0..cols {
        let column: Vec<f64> = (0..rows).map(|r| data[r * cols + c]).collect();
        for (r, v) in blur_line(&column, &kernel).into_iter().enumerate() {
            data[r * cols + c] = v;
        }
    }
    Tensor::new(vec![rows, cols], data)
}

fn numerical(err: Error, step: usize) -> Error {
    match err {
        Error::NonFinite(msg) => Error::NonFinite(format!("dream step {step}: {msg}")),
        other => other,
    }
}

/// Gradient ascent from small Gaussian noise on `frames`-long inputs.
pub fn dream(
    model: &Model,
    layer: usize,
    filters: &[usize],
    frames: usize,
    config: &DreamConfig,
) -> Result<DreamResult> {
    config.validate()?;
    check_target(model, layer, filters)?;
    let f = model.config.input_channels;
    let mut rng = SplitMix64::new(config.seed);
    let init = (0..f * frames).map(|_| config.init_scale * rng.normal()).collect();
    let mut x = Tensor::new(vec![f, frames], init)?;
    let ObjectiveGraph {
        mut graph,
        input,
        objective,
    } = objective_graph(model, &x, layer, filters)?;
    let mut trajectory = Vec::with_capacity(config.steps + 1);
    trajectory.push(graph.scalar(objective));
    for step in 1..=config.steps {
        let grads = graph.backward(objective)?;
        let g = grads.of(input).expect("input gradient");
        let (eta, decay) = (config.step_size, config.step_size * config.l2_decay);
        let next = x
            .data()
            .iter()
            .zip(g.data())
            .map(|(v, d)| v + eta * d - decay * v)
            .collect();
        x = Tensor::new(vec![f, frames], next).map_err(|e| numerical(e, step))?;
        if step % config.blur_every == 0 {
            x = gaussian_blur(&x, config.blur_sigma)?;
        }
        graph.set_param(input, x.clone())?;
        graph.recompute().map_err(|e| numerical(e, step))?;
        trajectory.push(graph.scalar(objective));
    }
    Ok(DreamResult {
        input: x,
        trajectory,
        target: DreamTarget {
            layer,
            filters: filters.to_vec(),
        },
        seed: config.seed,
    })
}

/// Single-filter results for each region cell (seed + position in the
/// region) and a joint result over all of them (seed + 9).
pub fn dream_region(
    model: &Model,
    layer: usize,
    region: &Region,
    frames: usize,
    config: &DreamConfig,
) -> Result<RegionDreams> {
    let cols = model.layer(layer)?.grid.cols;
    let filters = region.indices(cols);
    let with_seed = |s: u64| DreamConfig {
        seed: config.seed.wrapping_add(s),
        ..*config
    };
    let singles = filters
        .iter()
        .enumerate()
        .map(|(i, &k)| dream(model, layer, &[k], frames, &with_seed(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let joint = dream(model, layer, &filters, frames, &with_seed(9))?;
    Ok(RegionDreams {
        region: region.clone(),
        singles,
        joint,
    })
}

/// Mean pairwise cosine similarity between dreamed inputs.
pub fn mean_pairwise_cosine(results: &[&DreamResult]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, a) in results.iter().enumerate() {
        for b in &results[i + 1..] {
            sum += crate::diffkit::cosine_similarity(a.input.data(), b.input.data())?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Config("need at least two results".into()));
    }
    Ok(sum / n as f64)
}

#[cfg(test)]
mod tests;

//! Grid-arranged 1D convolutional classifier.
//!
//! Architecture: a stack of `conv1d + ReLU` layers over time (input channels
//! are frequency bins), a global mean over time, and a dense head producing
//! class logits. Every conv layer owns a [`GridSpec`] and contributes a
//! topographic penalty term to the training loss.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::diffkit::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::fileio::{write_atomic, ByteReader};
use crate::rng::SplitMix64;
use crate::synthphone::Dataset;
use crate::topogrid::{
    neighbor_similarity_stats, penalty_node, topo_penalty_signed, FilterBank, GridSpec, PenaltySign, SimilarityStats,
};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TCKP";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Candidate coefficients tried by [`lambda_sweep`], in ascending order.
pub const SWEEP_LAMBDAS: [f64; 6] = [0.01, 0.03, 0.1, 0.3, 1.0, 3.0];

/// Accuracy drop (absolute) tolerated by the sweep relative to the λ=0 run.
pub const SWEEP_TOLERANCE: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub filters: usize,
    pub kernel: usize,
    pub grid: GridSpec,
}

impl LayerSpec {
    /// Layer with one filter per cell of a `rows x cols` grid.
    pub fn on_grid(rows: usize, cols: usize, kernel: usize) -> Self {
        Self {
            filters: rows * cols,
            kernel,
            grid: GridSpec {
                rows,
                cols,
                neighborhood: 3,
            },
        }
    }
}

/// Nonlinearity after every conv layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    /// ReLU clamped at 1. Keeps activations bounded.
    ClampedRelu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
    pub lambda: f64,
    #[serde(default)]
    pub penalty_sign: PenaltySign,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelConfig {
    /// Two conv layers of 64 filters (kernel 5) on 8x8 grids, λ = 0.
    pub fn desk_default(input_channels: usize, num_classes: usize) -> Self {
        Self {
            input_channels,
            num_classes,
            layers: vec![LayerSpec::on_grid(8, 8, 5), LayerSpec::on_grid(8, 8, 5)],
            lambda: 0.0,
            penalty_sign: PenaltySign::Similarity,
            learning_rate: 0.05,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_channels == 0 || self.num_classes < 2 {
            return bad("need >= 1 input channel and >= 2 classes".into());
        }
        if self.layers.is_empty() {
            return bad("need at least one conv layer".into());
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.grid.validate()?;
            if l.grid.cells() != l.filters {
                return bad(format!(
                    "layer {i}: grid {}x{} does not hold {} filters",
                    l.grid.rows, l.grid.cols, l.filters
                ));
            }
            if l.kernel % 2 == 0 {
                return bad(format!("layer {i}: kernel width {} must be odd", l.kernel));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be finite and >= 0", self.lambda));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `[K x C_in x w]`.
    pub filters: Tensor,
    /// `[K]`.
    pub bias: Tensor,
    pub grid: GridSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub conv: Vec<ConvLayer>,
    /// `[num_classes x K_last]`.
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

/// Parameter leaves of a model recorded on a graph.
#[derive(Clone, Debug)]
pub struct ModelNodes {
    pub conv: Vec<(NodeId, NodeId)>,
    pub head: (NodeId, NodeId),
}

/// Nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    /// Post-activation output of every conv layer, `[K_l x T]`.
    pub activations: Vec<NodeId>,
    pub logits: NodeId,
}

/// Post-activation outputs of every conv layer for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationRecord {
    pub layers: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    pub activations: ActivationRecord,
}

pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = SplitMix64::new(seed);
    let mut uniform = |shape: Vec<usize>, fan_in: usize| {
        let s = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform(-s, s)).collect();
        Tensor::new(shape, data).expect("finite init")
    };
    let mut channels = config.input_channels;
    let mut conv = Vec::with_capacity(config.layers.len());
    for spec in &config.layers {
        conv.push(ConvLayer {
            filters: uniform(vec![spec.filters, channels, spec.kernel], channels * spec.kernel),
            bias: Tensor::zeros(&[spec.filters]),
            grid: spec.grid,
        });
        channels = spec.filters;
    }
    Ok(Model {
        head_weight: uniform(vec![config.num_classes, channels], channels),
        head_bias: Tensor::zeros(&[config.num_classes]),
        conv,
        config: config.clone(),
    })
}

impl Model {
    /// `(name, tensor)` for every parameter in declaration order.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(2 * self.conv.len() + 2);
        for (i, l) in self.conv.iter().enumerate() {
            out.push((format!("conv{i}.filters"), &l.filters));
            out.push((format!("conv{i}.bias"), &l.bias));
        }
        out.push(("head.weight".into(), &self.head_weight));
        out.push(("head.bias".into(), &self.head_bias));
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::with_capacity(2 * self.conv.len() + 2);
        for l in &mut self.conv {
            out.push(&mut l.filters);
            out.push(&mut l.bias);
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    pub fn num_layers(&self) -> usize {
        self.conv.len()
    }

    pub fn layer(&self, index: usize) -> Result<&ConvLayer> {
        self.conv
            .get(index)
            .ok_or_else(|| Error::OutOfBounds(format!("layer {index} of {}", self.conv.len())))
    }

    pub fn filter_bank(&self, layer: usize) -> Result<FilterBank> {
        let l = self.layer(layer)?;
        FilterBank::from_tensor(l.grid, &l.filters)
    }

    pub fn neighbor_stats(&self, layer: usize) -> Result<SimilarityStats> {
        neighbor_similarity_stats(&self.filter_bank(layer)?)
    }

    /// Unscaled topographic penalty of one layer, with the configured sign.
    pub fn layer_penalty(&self, layer: usize) -> Result<f64> {
        topo_penalty_signed(&self.filter_bank(layer)?, self.config.penalty_sign)
    }

    /// Mean of the per-layer penalties.
    pub fn penalty(&self) -> Result<f64> {
        let mut sum = 0.0;
        for i in 0..self.conv.len() {
            sum += self.layer_penalty(i)?;
        }
        Ok(sum / self.conv.len() as f64)
    }

    /// Records the parameters as graph leaves: named parameters when
    /// `trainable`, constants otherwise.
    pub fn record_params(&self, g: &mut Graph, trainable: bool) -> ModelNodes {
        let mut leaf = |name: String, t: &Tensor| {
            if trainable {
                g.param(name, t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let conv = self
            .conv
            .iter()
            .enumerate()
            .map(|(i, l)| {
                (
                    leaf(format!("conv{i}.filters"), &l.filters),
                    leaf(format!("conv{i}.bias"), &l.bias),
                )
            })
            .collect();
        let head = (
            leaf("head.weight".into(), &self.head_weight),
            leaf("head.bias".into(), &self.head_bias),
        );
        ModelNodes { conv, head }
    }

    pub fn check_input(&self, input: &Tensor) -> Result<()> {
        let s = input.shape();
        if s.len() != 2 || s[0] != self.config.input_channels || s[1] == 0 {
            return Err(Error::Shape(format!(
                "model expects [{} x T] input, got {s:?}",
                self.config.input_channels
            )));
        }
        Ok(())
    }

    pub fn record_forward(&self, g: &mut Graph, nodes: &ModelNodes, input: NodeId) -> Result<ForwardNodes> {
        self.check_input(g.value(input))?;
        let mut x = input;
        let mut activations = Vec::with_capacity(self.conv.len());
        for &(f, b) in &nodes.conv {
            let pre = g.conv1d(x, f, b)?;
            x = match self.config.activation {
                Activation::Relu => g.relu(pre)?,
                Activation::ClampedRelu => g.clamped_relu(pre, 1.0)?,
            };
            activations.push(x);
        }
        let pooled = g.mean_time(x)?;
        let logits = g.dense(pooled, nodes.head.0, nodes.head.1)?;
        Ok(ForwardNodes { activations, logits })
    }
}

/// Logits and per-layer activations for every input.
pub fn forward(model: &Model, batch: &[Tensor]) -> Result<Vec<ForwardOutput>> {
    let mut g = Graph::new();
    let nodes = model.record_params(&mut g, false);
    batch
        .iter()
        .map(|x| {
            let input = g.constant(x.clone());
            let out = model.record_forward(&mut g, &nodes, input)?;
            Ok(ForwardOutput {
                logits: g.value(out.logits).data().to_vec(),
                activations: ActivationRecord {
                    layers: out.activations.iter().map(|&a| g.value(a).clone()).collect(),
                },
            })
        })
        .collect()
}

/// A recorded `CE + λ · mean_l penalty_l` loss.
pub struct LossGraph {
    pub graph: Graph,
    pub nodes: ModelNodes,
    pub loss: NodeId,
    pub cross_entropy: NodeId,
    /// Present only when λ > 0.
    pub penalty: Option<NodeId>,
    pub logits: Vec<NodeId>,
}

pub fn loss_graph(model: &Model, batch: &[&Tensor], labels: &[usize]) -> Result<LossGraph> {
    if batch.is_empty() || batch.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} inputs with {} labels",
            batch.len(),
            labels.len()
        )));
    }
    let mut g = Graph::new();
    let nodes = model.record_params(&mut g, true);
    let mut losses = Vec::with_capacity(batch.len());
    let mut logits = Vec::with_capacity(batch.len());
    for (x, &label) in batch.iter().zip(labels) {
        let input = g.constant((*x).clone());
        let out = model.record_forward(&mut g, &nodes, input)?;
        losses.push(g.softmax_cross_entropy(out.logits, label)?);
        logits.push(out.logits);
    }
    let stacked = g.stack(losses)?;
    let cross_entropy = g.mean(stacked)?;

    let lambda = model.config.lambda;
    let (loss, penalty) = if lambda > 0.0 {
        let terms = model
            .conv
            .iter()
            .zip(&nodes.conv)
            .map(|(l, &(f, _))| penalty_node(&mut g, f, &l.grid, model.config.penalty_sign))
            .collect::<Result<Vec<_>>>()?;
        let stacked = g.stack(terms)?;
        let penalty = g.mean(stacked)?;
        let scaled = g.scale(penalty, lambda)?;
        (g.add(cross_entropy, scaled)?, Some(penalty))
    } else {
        (cross_entropy, None)
    };
    Ok(LossGraph {
        graph: g,
        nodes,
        loss,
        cross_entropy,
        penalty,
        logits,
    })
}

pub fn total_loss(model: &Model, batch: &[&Tensor], labels: &[usize]) -> Result<f64> {
    let lg = loss_graph(model, batch, labels)?;
    Ok(lg.graph.scalar(lg.loss))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Accuracy and mean cross-entropy over the listed samples.
pub fn evaluate(model: &Model, dataset: &Dataset, indices: &[usize]) -> Result<(f64, f64)> {
    if indices.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut correct = 0usize;
    let mut ce = 0.0;
    for chunk in indices.chunks(64) {
        let inputs: Vec<Tensor> = chunk.iter().map(|&i| dataset.samples[i].spectrogram.clone()).collect();
        for (out, &i) in forward(model, &inputs)?.iter().zip(chunk) {
            let label = dataset.samples[i].label;
            if argmax(&out.logits) == label {
                correct += 1;
            }
            let m = out.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + out.logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            ce += lse - out.logits[label];
        }
    }
    let n = indices.len() as f64;
    Ok((correct as f64 / n, ce / n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean minibatch cross-entropy over the epoch (before each update).
    pub train_ce: f64,
    pub train_accuracy: f64,
    pub heldout_ce: f64,
    pub heldout_accuracy: f64,
    /// Mean of per-layer penalties after the epoch (unscaled by λ).
    pub penalty: f64,
    /// Mean neighbor cosine per conv layer after the epoch.
    pub neighbor_cosine: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub epochs: Vec<EpochMetrics>,
    /// λ selected by a sweep, when the model came out of one.
    #[serde(default)]
    pub lambda_star: Option<f64>,
    #[serde(default)]
    pub sweep: Vec<SweepEntry>,
}

impl TrainMetrics {
    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }
}

fn neighbor_cosines(model: &Model) -> Vec<f64> {
    (0..model.num_layers())
        .map(|i| model.neighbor_stats(i).map(|s| s.mean).unwrap_or(f64::NAN))
        .collect()
}

/// Plain minibatch SGD with the hyperparameters in `model.config`.
///
/// Batches follow a shuffle of the training split drawn from
/// `SplitMix64(seed + epoch)`.
pub fn train(model: Model, dataset: &Dataset) -> Result<(Model, TrainMetrics)> {
    train_with(model, dataset, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with(
    mut model: Model,
    dataset: &Dataset,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(Model, TrainMetrics)> {
    let cfg = model.config.clone();
    cfg.validate()?;
    if dataset.config.freq_bins != cfg.input_channels {
        return Err(Error::Shape(format!(
            "dataset has {} frequency bins, model expects {}",
            dataset.config.freq_bins, cfg.input_channels
        )));
    }
    if dataset.config.num_classes != cfg.num_classes {
        return Err(Error::Shape(format!(
            "dataset has {} classes, model expects {}",
            dataset.config.num_classes, cfg.num_classes
        )));
    }
    let (train_idx, held_idx) = dataset.split();
    let mut metrics = TrainMetrics::default();

    for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        SplitMix64::new(cfg.seed.wrapping_add(epoch as u64)).shuffle(&mut order);

        let mut ce_sum = 0.0;
        let mut correct = 0usize;
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let diverged = |detail: String| Error::Divergence {
                epoch,
                batch: batch_no,
                detail,
            };
            let inputs: Vec<&Tensor> = chunk.iter().map(|&i| &dataset.samples[i].spectrogram).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| dataset.samples[i].label).collect();
            let lg = loss_graph(&model, &inputs, &labels).map_err(|e| match e {
                Error::NonFinite(what) => diverged(format!("non-finite {what}")),
                other => other,
            })?;
            let loss = lg.graph.scalar(lg.loss);
            if !loss.is_finite() {
                return Err(diverged(format!("loss {loss}")));
            }
            ce_sum += lg.graph.scalar(lg.cross_entropy) * chunk.len() as f64;
            for (&node, &label) in lg.logits.iter().zip(&labels) {
                if argmax(lg.graph.value(node).data()) == label {
                    correct += 1;
                }
            }

            let grads = lg.graph.backward(lg.loss)?;
            for (param, (_, grad)) in model.parameters_mut().into_iter().zip(grads.params()) {
                let data: Vec<f64> = param
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(p, g)| p - cfg.learning_rate * g)
                    .collect();
                *param = Tensor::new(param.shape().to_vec(), data)
                    .map_err(|_| diverged("non-finite parameter after update".into()))?;
            }
        }

        let (heldout_accuracy, heldout_ce) = evaluate(&model, dataset, &held_idx)?;
        let n = train_idx.len().max(1) as f64;
        let m = EpochMetrics {
            epoch,
            train_ce: ce_sum / n,
            train_accuracy: correct as f64 / n,
            heldout_ce,
            heldout_accuracy,
            penalty: model.penalty()?,
            neighbor_cosine: neighbor_cosines(&model),
        };
        on_epoch(&m);
        metrics.epochs.push(m);
    }
    Ok((model, metrics))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub lambda: f64,
    pub heldout_accuracy: f64,
    pub neighbor_cosine: Vec<f64>,
}

pub struct TrainedRun {
    pub model: Model,
    pub metrics: TrainMetrics,
}

pub struct SweepResult {
    /// The λ = 0 control.
    pub baseline: TrainedRun,
    /// Every λ actually trained, in the order tried (λ = 0 first).
    pub entries: Vec<SweepEntry>,
    pub lambda_star: Option<f64>,
    /// The run at `lambda_star`.
    pub chosen: Option<TrainedRun>,
}

fn entry(lambda: f64, run: &TrainedRun) -> SweepEntry {
    let last = run.metrics.last();
    SweepEntry {
        lambda,
        heldout_accuracy: last.map_or(0.0, |m| m.heldout_accuracy),
        neighbor_cosine: last.map_or_else(Vec::new, |m| m.neighbor_cosine.clone()),
    }
}

/// How [`lambda_sweep`] picks λ* among candidates that keep held-out accuracy
/// within [`SWEEP_TOLERANCE`] of the λ = 0 control.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepRule {
    /// Strongest constraint that keeps accuracy. Candidates are tried in
    /// descending order and the first one within tolerance wins.
    #[default]
    Largest,
    /// Weakest candidate within tolerance, tried in ascending order.
    Smallest,
}

/// Trains the λ = 0 control, then candidates in the order given by `rule`,
/// stopping at the first whose final held-out accuracy is within
/// [`SWEEP_TOLERANCE`] of the control. Every run starts from the same
/// initialization.
pub fn lambda_sweep(
    config: &ModelConfig,
    dataset: &Dataset,
    candidates: &[f64],
    rule: SweepRule,
) -> Result<SweepResult> {
    let run = |lambda: f64| -> Result<TrainedRun> {
        let cfg = ModelConfig {
            lambda,
            ..config.clone()
        };
        let (model, metrics) = train(build_model(&cfg, cfg.seed)?, dataset)?;
        Ok(TrainedRun { model, metrics })
    };
    let baseline = run(0.0)?;
    let reference = entry(0.0, &baseline).heldout_accuracy;
    let mut entries = vec![entry(0.0, &baseline)];

    let mut order = candidates.to_vec();
    order.sort_by(f64::total_cmp);
    if rule == SweepRule::Largest {
        order.reverse();
    }
    let mut chosen = None;
    for lambda in order {
        let trained = run(lambda)?;
        let e = entry(lambda, &trained);
        let ok = e.heldout_accuracy >= reference - SWEEP_TOLERANCE;
        entries.push(e);
        if ok {
            chosen = Some((lambda, trained));
            break;
        }
    }
    let lambda_star = chosen.as_ref().map(|(l, _)| *l);
    let chosen = chosen.map(|(lambda, mut run)| {
        run.metrics.lambda_star = Some(lambda);
        run.metrics.sweep = entries.clone();
        run
    });
    Ok(SweepResult {
        baseline,
        entries,
        lambda_star,
        chosen,
    })
}

/// Everything stored in a checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub metrics: TrainMetrics,
    /// Hash of the training corpus configuration.
    pub dataset_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct ParamInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    metrics: TrainMetrics,
    dataset_hash: Option<String>,
    parameters: Vec<ParamInfo>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self.model.parameters();
        let header = CheckpointHeader {
            config: self.model.config.clone(),
            metrics: self.metrics.clone(),
            dataset_hash: self.dataset_hash.clone(),
            parameters: params
                .iter()
                .map(|(name, t)| ParamInfo {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(9 + json.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in params {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let version = r.u8("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let len = r.u32("header length")? as usize;
        let json_at = r.offset();
        let header: CheckpointHeader = match serde_json::from_slice(r.take(len, "header")?) {
            Ok(h) => h,
            Err(e) => {
                return Err(Error::Parse {
                    offset: json_at,
                    msg: format!("header JSON: {e}"),
                })
            }
        };
        // Shapes come from the config; the stored list must agree with it.
        let mut model = build_model(&header.config, 0).map_err(|e| Error::Parse {
            offset: json_at,
            msg: format!("invalid model config: {e}"),
        })?;
        let expected: Vec<(String, Vec<usize>)> = model
            .parameters()
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        let stored: Vec<(String, Vec<usize>)> = header.parameters.into_iter().map(|p| (p.name, p.shape)).collect();
        if expected != stored {
            return r.fail("parameter list does not match the model config");
        }
        for param in model.parameters_mut() {
            let mut data = Vec::with_capacity(param.len());
            for _ in 0..param.len() {
                let at = r.offset();
                let v = r.f64("parameter")?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        offset: at,
                        msg: "non-finite parameter".into(),
                    });
                }
                data.push(v);
            }
            *param = Tensor::new(param.shape().to_vec(), data)?;
        }
        r.finish()?;
        Ok(Self {
            model,
            metrics: header.metrics,
            dataset_hash: header.dataset_hash,
        })
    }
}

pub fn save_checkpoint(model: &Model, metrics: &TrainMetrics, dataset_hash: Option<String>, path: &Path) -> Result<()> {
    let ckpt = Checkpoint {
        model: model.clone(),
        metrics: metrics.clone(),
        dataset_hash,
    };
    write_atomic(path, &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

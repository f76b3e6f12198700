//! Group-averaged, baseline-subtracted activation profiles.
//!
//! For each group of inputs, activations of one conv layer are averaged per
//! filter and timestep; the mean over all analysed inputs is then subtracted,
//! so values above zero mark filters that respond more to the group than on
//! average. The gradient-weighted variant averages `activation * d logit /
//! d activation` instead, where the logit is that of the sample's own class.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::convnet::{forward, Model};
use crate::diffkit::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::fileio::write_atomic;
use crate::mapview::GridMap;
use crate::synthphone::Dataset;
use crate::topogrid::GridSpec;

/// Assignment of every sample to exactly one named group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grouping {
    assignment: Vec<usize>,
    names: Vec<String>,
}

impl Grouping {
    pub fn new(assignment: Vec<usize>, names: Vec<String>) -> Result<Self> {
        if let Some(bad) = assignment.iter().find(|&&g| g >= names.len()) {
            return Err(Error::OutOfBounds(format!("group id {bad} of {}", names.len())));
        }
        let g = Self { assignment, names };
        for (i, &n) in g.sizes().iter().enumerate() {
            if n == 0 {
                return Err(Error::EmptyGroup(g.names[i].clone()));
            }
        }
        Ok(g)
    }

    /// One group per class label, named `P0`, `P1`, ...
    pub fn by_label(dataset: &Dataset) -> Result<Self> {
        Self::new(dataset.samples.iter().map(|s| s.label).collect(), dataset.class_names())
    }

    /// Every sample in a single group.
    pub fn single(samples: usize, name: impl Into<String>) -> Result<Self> {
        Self::new(vec![0; samples], vec![name.into()])
    }

    /// Parses `sample_index,group_name` lines (header required). Groups are
    /// numbered in order of first appearance.
    pub fn from_csv(text: &str, samples: usize) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("sample_index,group_name") {
            return Err(Error::Parse {
                offset: 0,
                msg: "expected header `sample_index,group_name`".into(),
            });
        }
        let mut offset = "sample_index,group_name\n".len();
        let mut assignment: Vec<Option<usize>> = vec![None; samples];
        let mut names: Vec<String> = Vec::new();
        let mut ids: HashMap<String, usize> = HashMap::new();
        for line in lines {
            let bad = |msg: String| Error::Parse { offset, msg };
            if line.trim().is_empty() {
                offset += line.len() + 1;
                continue;
            }
            let (idx, name) = line
                .split_once(',')
                .ok_or_else(|| bad(format!("expected two fields: `{line}`")))?;
            let idx: usize = idx.trim().parse().map_err(|_| bad(format!("bad index `{idx}`")))?;
            if idx >= samples {
                return Err(bad(format!("sample index {idx} of {samples}")));
            }
            if assignment[idx].is_some() {
                return Err(bad(format!("sample {idx} assigned twice")));
            }
            let name = name.trim().to_string();
            let next = ids.len();
            let id = *ids.entry(name.clone()).or_insert_with(|| {
                names.push(name);
                next
            });
            assignment[idx] = Some(id);
            offset += line.len() + 1;
        }
        let assignment = assignment
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.ok_or(Error::Parse {
                    offset,
                    msg: format!("sample {i} has no group"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(assignment, names)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.names.len()];
        for &g in &self.assignment {
            sizes[g] += 1;
        }
        sizes
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NapMode {
    Nap,
    GradNap,
}

impl NapMode {
    pub fn label(self) -> &'static str {
        match self {
            NapMode::Nap => "NAP",
            NapMode::GradNap => "GradNAP (reconstructed)",
        }
    }
}

/// Per-group, per-filter, per-timestep profile values of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NapMap {
    pub layer: usize,
    pub mode: NapMode,
    pub grid: GridSpec,
    pub group_names: Vec<String>,
    pub group_sizes: Vec<usize>,
    pub filters: usize,
    pub frames: usize,
    /// `[group][filter][t]`, group mean minus baseline.
    pub values: Vec<f64>,
    /// `[filter][t]`, mean over all samples.
    pub baseline: Vec<f64>,
}

impl NapMap {
    pub fn value(&self, group: usize, filter: usize, t: usize) -> f64 {
        self.values[(group * self.filters + filter) * self.frames + t]
    }

    pub fn group_values(&self, group: usize) -> &[f64] {
        let n = self.filters * self.frames;
        &self.values[group * n..(group + 1) * n]
    }

    pub fn group_index(&self, name: &str) -> Result<usize> {
        self.group_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::OutOfBounds(format!("no group named `{name}`")))
    }
}

/// Group means minus the all-sample mean of per-sample `[K x T]` records.
/// Sums run in sample order.
pub fn aggregate(
    records: &[Tensor],
    grouping: &Grouping,
    layer: usize,
    mode: NapMode,
    grid: GridSpec,
) -> Result<NapMap> {
    if records.len() != grouping.assignment.len() {
        return Err(Error::Shape(format!(
            "{} records for {} grouped samples",
            records.len(),
            grouping.assignment.len()
        )));
    }
    let shape = records
        .first()
        .map(|r| r.shape().to_vec())
        .ok_or_else(|| Error::Shape("no samples to profile".into()))?;
    if shape.len() != 2 || records.iter().any(|r| r.shape() != shape.as_slice()) {
        return Err(Error::Shape("records must share one [K x T] shape".into()));
    }
    let (filters, frames) = (shape[0], shape[1]);
    if filters != grid.cells() {
        return Err(Error::Shape(format!(
            "{filters} filters for a {}x{} grid",
            grid.rows, grid.cols
        )));
    }
    let n = filters * frames;
    let sizes = grouping.sizes();
    let mut sums = vec![0.0; sizes.len() * n];
    let mut total = vec![0.0; n];
    for (rec, &g) in records.iter().zip(&grouping.assignment) {
        let dst = &mut sums[g * n..(g + 1) * n];
        for ((s, t), v) in dst.iter_mut().zip(total.iter_mut()).zip(rec.data()) {
            *s += v;
            *t += v;
        }
    }
    let baseline: Vec<f64> = total.iter().map(|t| t / records.len() as f64).collect();
    let mut values = sums;
    for (g, &size) in sizes.iter().enumerate() {
        for (v, b) in values[g * n..(g + 1) * n].iter_mut().zip(&baseline) {
            *v = *v / size as f64 - b;
        }
    }
    Ok(NapMap {
        layer,
        mode,
        grid,
        group_names: grouping.names.clone(),
        group_sizes: sizes,
        filters,
        frames,
        values,
        baseline,
    })
}

fn check_alignment(model: &Model, dataset: &Dataset, grouping: &Grouping, layer: usize) -> Result<GridSpec> {
    let grid = model.layer(layer)?.grid;
    if grouping.assignment.len() != dataset.len() {
        return Err(Error::Shape(format!(
            "grouping covers {} samples, dataset has {}",
            grouping.assignment.len(),
            dataset.len()
        )));
    }
    Ok(grid)
}

/// Activation profile of `layer` (post-ReLU outputs).
pub fn nap(model: &Model, dataset: &Dataset, grouping: &Grouping, layer: usize) -> Result<NapMap> {
    let grid = check_alignment(model, dataset, grouping, layer)?;
    let mut records = Vec::with_capacity(dataset.len());
    for chunk in dataset.samples.chunks(64) {
        let inputs: Vec<Tensor> = chunk.iter().map(|s| s.spectrogram.clone()).collect();
        for out in forward(model, &inputs)? {
            records.push(out.activations.layers[layer].clone());
        }
    }
    aggregate(&records, grouping, layer, NapMode::Nap, grid)
}

/// `activation * d(own-class logit) / d(activation)` for one input.
pub fn relevance(model: &Model, input: &Tensor, class: usize, layer: usize) -> Result<Tensor> {
    model.layer(layer)?;
    if class >= model.config.num_classes {
        return Err(Error::OutOfBounds(format!(
            "class {class} of {}",
            model.config.num_classes
        )));
    }
    let mut g = Graph::new();
    let nodes = model.record_params(&mut g, false);
    // The input is a parameter only so that gradients flow through every
    // layer; its own gradient is discarded.
    let x = g.param("input", input.clone());
    let out = model.record_forward(&mut g, &nodes, x)?;
    let target = g.gather(out.logits, vec![class])?;
    let grads = g.backward(target)?;
    let act = g.value(out.activations[layer]);
    let data = match grads.of(out.activations[layer]) {
        Some(grad) => act.data().iter().zip(grad.data()).map(|(a, d)| a * d).collect(),
        None => vec![0.0; act.len()],
    };
    Tensor::new(act.shape().to_vec(), data)
}

/// Gradient-weighted profile of `layer`. Every group must contain a single
/// class; the gradient target is that class's logit.
pub fn gradnap(model: &Model, dataset: &Dataset, grouping: &Grouping, layer: usize) -> Result<NapMap> {
    let grid = check_alignment(model, dataset, grouping, layer)?;
    let mut class_of: Vec<Option<usize>> = vec![None; grouping.names.len()];
    for (s, &g) in dataset.samples.iter().zip(&grouping.assignment) {
        match class_of[g] {
            Some(c) if c != s.label => {
                return Err(Error::Config(format!(
                    "group `{}` mixes classes {c} and {}; gradient target undefined",
                    grouping.names[g], s.label
                )))
            }
            _ => class_of[g] = Some(s.label),
        }
    }
    let records = dataset
        .samples
        .iter()
        .map(|s| relevance(model, &s.spectrogram, s.label, layer))
        .collect::<Result<Vec<_>>>()?;
    aggregate(&records, grouping, layer, NapMode::GradNap, grid)
}

/// Mean over time of one group's values, laid out on the layer grid.
pub fn time_average(napmap: &NapMap, group: usize) -> Result<GridMap> {
    if group >= napmap.group_names.len() {
        return Err(Error::OutOfBounds(format!(
            "group {group} of {}",
            napmap.group_names.len()
        )));
    }
    let values = napmap
        .group_values(group)
        .chunks(napmap.frames)
        .map(|row| row.iter().sum::<f64>() / napmap.frames as f64)
        .collect();
    GridMap::new(
        napmap.grid.rows,
        napmap.grid.cols,
        values,
        format!(
            "{} layer {} group {}",
            napmap.mode.label(),
            napmap.layer,
            napmap.group_names[group]
        ),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub name: String,
    pub size: usize,
    pub file: String,
}

/// `manifest.json` of an exported profile directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NapManifest {
    pub layer: usize,
    pub mode: NapMode,
    pub mode_label: String,
    pub grid: GridSpec,
    pub filters: usize,
    pub frames: usize,
    pub groups: Vec<GroupEntry>,
    pub baseline_file: String,
    pub dataset_hash: String,
}

pub const NAP_MANIFEST: &str = "manifest.json";
const CSV_HEADER: &str = "filter,row,col,t,value";

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn profile_csv(grid: &GridSpec, frames: usize, values: &[f64]) -> String {
    let mut out = String::with_capacity(values.len() * 16);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for (k, row) in values.chunks(frames).enumerate() {
        let (r, c) = grid.coords(k);
        for (t, v) in row.iter().enumerate() {
            writeln!(out, "{k},{r},{c},{t},{v}").unwrap();
        }
    }
    out
}

fn parse_profile_csv(text: &str, filters: usize, frames: usize, file: &str) -> Result<Vec<f64>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("{file}: expected header `{CSV_HEADER}`"),
        });
    }
    let mut offset = CSV_HEADER.len() + 1;
    let mut values = Vec::with_capacity(filters * frames);
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        let parsed = (fields.len() == 5)
            .then(|| {
                let k: usize = fields[0].parse().ok()?;
                let t: usize = fields[3].parse().ok()?;
                let v: f64 = fields[4].parse().ok()?;
                (k == i / frames && t == i % frames && v.is_finite()).then_some(v)
            })
            .flatten();
        match parsed {
            Some(v) => values.push(v),
            None => {
                return Err(Error::Parse {
                    offset,
                    msg: format!("{file}: bad line `{line}`"),
                })
            }
        }
        offset += line.len() + 1;
    }
    if values.len() != filters * frames {
        return Err(Error::Parse {
            offset,
            msg: format!("{file}: {} values, expected {}", values.len(), filters * frames),
        });
    }
    Ok(values)
}

/// Writes `manifest.json`, one CSV per group and `baseline.csv` into `dir`.
pub fn export(napmap: &NapMap, dir: &Path, dataset_hash: &str) -> Result<NapManifest> {
    fs::create_dir_all(dir)?;
    let mut groups = Vec::with_capacity(napmap.group_names.len());
    for (g, name) in napmap.group_names.iter().enumerate() {
        let file = format!("group_{g}_{}.csv", file_stem(name));
        let text = profile_csv(&napmap.grid, napmap.frames, napmap.group_values(g));
        write_atomic(&dir.join(&file), text.as_bytes())?;
        groups.push(GroupEntry {
            name: name.clone(),
            size: napmap.group_sizes[g],
            file,
        });
    }
    let baseline_file = "baseline.csv".to_string();
    let text = profile_csv(&napmap.grid, napmap.frames, &napmap.baseline);
    write_atomic(&dir.join(&baseline_file), text.as_bytes())?;
    let manifest = NapManifest {
        layer: napmap.layer,
        mode: napmap.mode,
        mode_label: napmap.mode.label().to_string(),
        grid: napmap.grid,
        filters: napmap.filters,
        frames: napmap.frames,
        groups,
        baseline_file,
        dataset_hash: dataset_hash.to_string(),
    };
    write_atomic(&dir.join(NAP_MANIFEST), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reads a directory written by [`export`].
pub fn import(dir: &Path) -> Result<(NapMap, NapManifest)> {
    let manifest: NapManifest = serde_json::from_slice(&fs::read(dir.join(NAP_MANIFEST))?)?;
    manifest.grid.validate()?;
    if manifest.grid.cells() != manifest.filters || manifest.frames == 0 {
        return Err(Error::Shape(format!(
            "manifest grid {}x{} vs {} filters, {} frames",
            manifest.grid.rows, manifest.grid.cols, manifest.filters, manifest.frames
        )));
    }
    let read = |file: &str| -> Result<Vec<f64>> {
        let text = fs::read_to_string(dir.join(file))?;
        parse_profile_csv(&text, manifest.filters, manifest.frames, file)
    };
    let mut values = Vec::with_capacity(manifest.groups.len() * manifest.filters * manifest.frames);
    for g in &manifest.groups {
        values.extend(read(&g.file)?);
    }
    let napmap = NapMap {
        layer: manifest.layer,
        mode: manifest.mode,
        grid: manifest.grid,
        group_names: manifest.groups.iter().map(|g| g.name.clone()).collect(),
        group_sizes: manifest.groups.iter().map(|g| g.size).collect(),
        filters: manifest.filters,
        frames: manifest.frames,
        values,
        baseline: read(&manifest.baseline_file)?,
    };
    Ok((napmap, manifest))
}

#[cfg(test)]
mod tests;

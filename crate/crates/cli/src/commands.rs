use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::json;
use topomap::checks::{gradcheck_suite, GRADCHECK_TOLERANCE};
use topomap::convnet::{
    build_model, evaluate, lambda_sweep, load_checkpoint, save_checkpoint, train_with, Checkpoint, SWEEP_LAMBDAS,
};
use topomap::dream::{dream, dream_region};
use topomap::fileio::write_atomic;
use topomap::mapview::{argmax_region, export_csv, render_pgm, render_ppm, smooth};
use topomap::napkit::{self, export, import, time_average, NapManifest, NAP_MANIFEST};
use topomap::synthphone::{generate, read_dataset, write_dataset};
use topomap::{
    Activation, Dataset, DreamConfig, DreamResult, GridMap, GridSpec, Grouping, LayerSpec, ModelConfig, NapMap,
    PenaltySign, Region, SweepRule, SynthConfig,
};

use crate::args::*;
use crate::manifest::{beside, Recorder, DIR_MANIFEST};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(topomap::Error),
    CheckFailed(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::CheckFailed(m) => write!(f, "{m}"),
        }
    }
}

impl From<topomap::Error> for CliError {
    fn from(e: topomap::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

type CmdResult<T = ()> = Result<T, CliError>;

pub fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Nap(a) => nap(a),
        Command::Render(a) => render(a),
        Command::Region(a) => region(a),
        Command::Dream(a) => dream_cmd(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn ensure_parent(path: &Path) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// Writes a line to stdout; a closed pipe is not an error.
fn emit(line: &str) -> CmdResult {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{line}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn print_json(value: &impl Serialize) -> CmdResult {
    emit(&serde_json::to_string_pretty(value).map_err(topomap::Error::from)?)
}

fn synth(a: SynthArgs) -> CmdResult {
    let cfg = SynthConfig {
        num_classes: a.classes,
        freq_bins: a.freq,
        frames: a.frames,
        samples_per_class: a.per_class,
        noise_std: a.noise,
        seed: a.seed,
    };
    cfg.validate()?;
    let mut rec = Recorder::start("synth", &a)?;
    rec.resolve("dataset_hash", cfg.hash())?;
    let ds = generate(&cfg)?;
    ensure_parent(&a.out)?;
    write_dataset(&ds, &a.out)?;
    rec.finish(std::slice::from_ref(&a.out), &beside(&a.out))?;
    eprintln!("wrote {} samples to {}", ds.len(), a.out.display());
    Ok(())
}

/// Parses `8x8,8x8` into one grid per layer.
pub fn parse_grids(text: &str) -> CmdResult<Vec<GridSpec>> {
    text.split(',')
        .map(|part| {
            let bad = || CliError::Usage(format!("bad --grid entry `{part}`, expected ROWSxCOLS"));
            let (r, c) = part.trim().split_once('x').ok_or_else(bad)?;
            let r: usize = r.parse().map_err(|_| bad())?;
            let c: usize = c.parse().map_err(|_| bad())?;
            GridSpec::square3(r, c).map_err(|e| CliError::Usage(e.to_string()))
        })
        .collect()
}

fn model_config(a: &TrainArgs, grids: Vec<GridSpec>, ds: &Dataset) -> CmdResult<ModelConfig> {
    let layers = grids
        .into_iter()
        .map(|g| LayerSpec::on_grid(g.rows, g.cols, a.kernel))
        .collect();
    let cfg = ModelConfig {
        input_channels: ds.config.freq_bins,
        num_classes: ds.config.num_classes,
        layers,
        lambda: a.lambda,
        penalty_sign: match a.penalty_sign {
            SignArg::Similarity => PenaltySign::Similarity,
            SignArg::LiteralCosine => PenaltySign::LiteralCosine,
        },
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        activation: match a.activation {
            ActivationArg::Relu => Activation::Relu,
            ActivationArg::ClampedRelu => Activation::ClampedRelu,
        },
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn fmt_cos(v: &[f64]) -> String {
    v.iter().map(|c| format!("{c:.3}")).collect::<Vec<_>>().join(" ")
}

fn train(a: TrainArgs) -> CmdResult {
    let grids = parse_grids(&a.grid)?;
    let mut rec = Recorder::start("train", &a)?;
    rec.input(&a.data)?;
    let ds = read_dataset(&a.data)?;
    let cfg = model_config(&a, grids, &ds)?;
    let quiet = a.quiet;
    let (model, metrics) = if a.lambda_sweep {
        let rule = match a.sweep_rule {
            RuleArg::Largest => SweepRule::Largest,
            RuleArg::Smallest => SweepRule::Smallest,
        };
        rec.resolve("sweep_candidates", SWEEP_LAMBDAS)?;
        let result = lambda_sweep(&cfg, &ds, &SWEEP_LAMBDAS, rule)?;
        for e in &result.entries {
            eprintln!(
                "lambda {:<6} heldout_acc {:.4} neighbor_cos [{}]",
                e.lambda,
                e.heldout_accuracy,
                fmt_cos(&e.neighbor_cosine)
            );
        }
        match result.chosen {
            Some(run) => {
                eprintln!("lambda* = {}", result.lambda_star.unwrap_or(0.0));
                (run.model, run.metrics)
            }
            None => {
                eprintln!("no candidate kept held-out accuracy; saving the lambda = 0 control");
                let mut m = result.baseline.metrics;
                m.sweep = result.entries;
                (result.baseline.model, m)
            }
        }
    } else {
        train_with(build_model(&cfg, cfg.seed)?, &ds, |m| {
            if !quiet {
                eprintln!(
                    "epoch {:>3} train_ce {:.4} heldout_acc {:.4} penalty {:.4} neighbor_cos [{}]",
                    m.epoch,
                    m.train_ce,
                    m.heldout_accuracy,
                    m.penalty,
                    fmt_cos(&m.neighbor_cosine)
                );
            }
        })?
    };
    rec.resolve("model_config", &model.config)?;
    rec.resolve("dataset_hash", ds.config.hash())?;
    ensure_parent(&a.out)?;
    save_checkpoint(&model, &metrics, Some(ds.config.hash()), &a.out)?;
    rec.finish(std::slice::from_ref(&a.out), &beside(&a.out))?;
    Ok(())
}

fn load_pair(model: &Path, data: &Path) -> CmdResult<(Checkpoint, Dataset)> {
    let ckpt = load_checkpoint(model)?;
    let ds = read_dataset(data)?;
    let c = &ckpt.model.config;
    if ds.config.freq_bins != c.input_channels || ds.config.num_classes != c.num_classes {
        return Err(topomap::Error::Shape(format!(
            "dataset has {} bins / {} classes, model expects {} / {}",
            ds.config.freq_bins, ds.config.num_classes, c.input_channels, c.num_classes
        ))
        .into());
    }
    Ok((ckpt, ds))
}

fn eval(a: EvalArgs) -> CmdResult {
    let (ckpt, ds) = load_pair(&a.model, &a.data)?;
    let model = &ckpt.model;
    let (train_idx, held_idx) = ds.split();
    let (acc, ce) = evaluate(model, &ds, &held_idx)?;
    let (train_acc, train_ce) = evaluate(model, &ds, &train_idx)?;
    let layers = (0..model.num_layers())
        .map(|i| {
            let layer = model.layer(i)?;
            let stats = model.neighbor_stats(i).ok();
            Ok(json!({
                "layer": i,
                "grid": [layer.grid.rows, layer.grid.cols],
                "penalty": model.layer_penalty(i)?,
                "neighbor_cosine": stats.map(|s| json!({"mean": s.mean, "min": s.min, "max": s.max})),
            }))
        })
        .collect::<topomap::Result<Vec<_>>>()?;
    print_json(&json!({
        "accuracy": acc,
        "heldout_ce": ce,
        "heldout_samples": held_idx.len(),
        "train_accuracy": train_acc,
        "train_ce": train_ce,
        "lambda": model.config.lambda,
        "lambda_star": ckpt.metrics.lambda_star,
        "penalty": model.penalty()?,
        "layers": layers,
        "dataset_hash": ds.config.hash(),
        "dataset_matches_training": ckpt.dataset_hash.as_deref() == Some(ds.config.hash().as_str()),
    }))
}

fn nap(a: NapArgs) -> CmdResult {
    let mut rec = Recorder::start("nap", &a)?;
    rec.input(&a.model)?;
    rec.input(&a.data)?;
    let (ckpt, ds) = load_pair(&a.model, &a.data)?;
    let grouping = match &a.groups {
        Some(path) => {
            rec.input(path)?;
            Grouping::from_csv(&fs::read_to_string(path)?, ds.len())?
        }
        None => Grouping::by_label(&ds)?,
    };
    if a.layer >= ckpt.model.num_layers() {
        return Err(CliError::Usage(format!(
            "--layer {} but the model has {} conv layers",
            a.layer,
            ckpt.model.num_layers()
        )));
    }
    let map = match a.mode {
        ModeArg::Nap => napkit::nap(&ckpt.model, &ds, &grouping, a.layer)?,
        ModeArg::Gradnap => napkit::gradnap(&ckpt.model, &ds, &grouping, a.layer)?,
    };
    let manifest = export(&map, &a.out_dir, &ds.config.hash())?;
    let mut outputs = vec![a.out_dir.join(NAP_MANIFEST)];
    outputs.extend(manifest.groups.iter().map(|g| a.out_dir.join(&g.file)));
    outputs.push(a.out_dir.join(&manifest.baseline_file));
    rec.finish(&outputs, &a.out_dir.join(DIR_MANIFEST))?;
    eprintln!(
        "{} of layer {} for {} groups written to {}",
        map.mode.label(),
        a.layer,
        manifest.groups.len(),
        a.out_dir.display()
    );
    Ok(())
}

fn load_nap(dir: &Path, layer: usize, group: &str) -> CmdResult<(NapMap, NapManifest, usize)> {
    let (map, manifest) = import(dir)?;
    if map.layer != layer {
        return Err(CliError::Usage(format!(
            "--layer {layer} but {} holds layer {}",
            dir.display(),
            map.layer
        )));
    }
    let g = map.group_index(group).map_err(|_| {
        CliError::Usage(format!(
            "no group `{group}` in {}; available: {}",
            dir.display(),
            map.group_names.join(", ")
        ))
    })?;
    Ok((map, manifest, g))
}

/// Smoothed time-averaged map of a group and its most responsive region.
fn responsive_region(map: &NapMap, group: usize) -> CmdResult<(GridMap, Region)> {
    let smoothed = smooth(&time_average(map, group)?);
    let region = argmax_region(&smoothed);
    Ok((smoothed, region))
}

fn render(a: RenderArgs) -> CmdResult {
    let mut rec = Recorder::start("render", &a)?;
    rec.input(&a.nap.join(NAP_MANIFEST))?;
    let (map, _, g) = load_nap(&a.nap, a.layer, &a.group)?;
    let mut grid = time_average(&map, g)?;
    if a.smooth {
        grid = smooth(&grid);
    }
    ensure_parent(&a.out)?;
    write_atomic(&a.out, &render_ppm(&grid, a.cell_px as usize))?;
    let mut outputs = vec![a.out.clone()];
    if let Some(csv) = &a.csv {
        ensure_parent(csv)?;
        write_atomic(csv, export_csv(&grid).as_bytes())?;
        outputs.push(csv.clone());
    }
    rec.finish(&outputs, &beside(&a.out))?;
    Ok(())
}

fn region(a: RegionArgs) -> CmdResult {
    let (map, _, g) = load_nap(&a.nap, a.layer, &a.group)?;
    let (smoothed, region) = responsive_region(&map, g)?;
    let filters = region.indices(smoothed.cols);
    print_json(&json!({
        "group": a.group,
        "layer": a.layer,
        "mode": map.mode.label(),
        "center": [region.center.0, region.center.1],
        "center_value": smoothed.get(region.center.0, region.center.1),
        "cells": region.cells.iter().map(|&(r, c)| [r, c]).collect::<Vec<_>>(),
        "filters": filters,
        "values": region.cells.iter().map(|&(r, c)| smoothed.get(r, c)).collect::<Vec<_>>(),
    }))
}

#[derive(Serialize)]
struct DreamSummary {
    name: String,
    layer: usize,
    filters: Vec<usize>,
    seed: u64,
    initial_objective: f64,
    final_objective: f64,
    trajectory: Vec<f64>,
}

fn write_dream(dir: &Path, name: &str, r: &DreamResult, outputs: &mut Vec<PathBuf>) -> CmdResult<DreamSummary> {
    let s = r.input.shape();
    let image = GridMap::new(s[0], s[1], r.input.data().to_vec(), name)?;
    for (ext, bytes) in [("pgm", render_pgm(&image)), ("csv", export_csv(&image).into_bytes())] {
        let path = dir.join(format!("{name}.{ext}"));
        write_atomic(&path, &bytes)?;
        outputs.push(path);
    }
    Ok(DreamSummary {
        name: name.to_string(),
        layer: r.target.layer,
        filters: r.target.filters.clone(),
        seed: r.seed,
        initial_objective: r.initial(),
        final_objective: r.last(),
        trajectory: r.trajectory.clone(),
    })
}

pub const DEFAULT_DREAM_FRAMES: usize = 32;

fn dream_cmd(a: DreamArgs) -> CmdResult {
    let mut rec = Recorder::start("dream", &a)?;
    rec.input(&a.model)?;
    let ckpt = load_checkpoint(&a.model)?;
    let model = &ckpt.model;
    let config = DreamConfig {
        steps: a.steps,
        step_size: a.step_size,
        l2_decay: a.l2_decay,
        blur_sigma: a.blur_sigma,
        blur_every: a.blur_every,
        init_scale: a.init_scale,
        seed: a.seed,
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if a.layer >= model.num_layers() {
        return Err(CliError::Usage(format!(
            "--layer {} but the model has {} conv layers",
            a.layer,
            model.num_layers()
        )));
    }
    fs::create_dir_all(&a.out_dir)?;
    let mut outputs = Vec::new();
    let mut summaries = Vec::new();
    let mut report = json!({});
    match (&a.region_from_nap, a.filter) {
        (Some(dir), _) => {
            let group = a.group.as_deref().expect("clap requires --group");
            rec.input(&dir.join(NAP_MANIFEST))?;
            let (map, _, g) = load_nap(dir, a.layer, group)?;
            if map.grid != model.layer(a.layer)?.grid {
                return Err(CliError::Usage(format!(
                    "{} was not computed for this model's grid",
                    dir.display()
                )));
            }
            let frames = a.frames.unwrap_or(map.frames);
            rec.resolve("frames", frames)?;
            let (_, region) = responsive_region(&map, g)?;
            let dreams = dream_region(model, a.layer, &region, frames, &config)?;
            for ((r, c), single) in region.cells.iter().zip(&dreams.singles) {
                let name = format!("cell_{r}_{c}_filter_{}", single.target.filters[0]);
                summaries.push(write_dream(&a.out_dir, &name, single, &mut outputs)?);
            }
            summaries.push(write_dream(&a.out_dir, "joint", &dreams.joint, &mut outputs)?);
            report = json!({
                "group": group,
                "center": [region.center.0, region.center.1],
                "cells": region.cells.iter().map(|&(r, c)| [r, c]).collect::<Vec<_>>(),
            });
        }
        (None, Some(k)) => {
            let frames = a.frames.unwrap_or(DEFAULT_DREAM_FRAMES);
            rec.resolve("frames", frames)?;
            let r = dream(model, a.layer, &[k], frames, &config)?;
            summaries.push(write_dream(&a.out_dir, &format!("filter_{k}"), &r, &mut outputs)?);
        }
        (None, None) => unreachable!("clap requires --filter or --region-from-nap"),
    }
    rec.resolve("dream_config", config)?;
    report["results"] = serde_json::to_value(&summaries).map_err(topomap::Error::from)?;
    let results = a.out_dir.join("results.json");
    write_atomic(
        &results,
        &serde_json::to_vec_pretty(&report).map_err(topomap::Error::from)?,
    )?;
    outputs.push(results);
    rec.finish(&outputs, &a.out_dir.join(DIR_MANIFEST))?;
    for s in &summaries {
        eprintln!(
            "{:<24} objective {:.5} -> {:.5}",
            s.name, s.initial_objective, s.final_objective
        );
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CmdResult {
    let ScaleArg::Tiny = a.scale;
    let started = Instant::now();
    let results = gradcheck_suite()?;
    let mut failed = Vec::new();
    for r in &results {
        let ok = r.passed();
        emit(&format!(
            "{:<30} trials {:>3}  max_rel_error {:.3e}  {}",
            r.name,
            r.trials,
            r.max_rel_error,
            if ok { "ok" } else { "FAIL" }
        ))?;
        if !ok {
            failed.push(r.name.clone());
        }
    }
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    emit(&format!(
        "max relative error {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:e}) in {:.2}s",
        started.elapsed().as_secs_f64()
    ))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "gradient check failed: {}",
            failed.join(", ")
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_parse_per_layer() {
        let grids = parse_grids("8x8,4x2").unwrap();
        assert_eq!(
            (grids[0].rows, grids[0].cols, grids[1].rows, grids[1].cols),
            (8, 8, 4, 2)
        );
        for bad in ["8", "8x", "x8", "8x8,", "0x3", "8*8"] {
            assert!(matches!(parse_grids(bad), Err(CliError::Usage(_))), "{bad}");
        }
    }
}

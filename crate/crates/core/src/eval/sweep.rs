use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{arg_err, Result};
use crate::heatmap::{maps_for_batch, Criterion, Heatmap};
use crate::net::{HeatmapMode, Network, ParamStore};
use crate::pipeline::{preprocess, PreprocConfig};
use crate::tensor::{QNorm, Scalar, Tensor4};
use crate::trainer::TrainingData;

use super::metrics::{froc_area, heatmap_to_detections, roc_auc, Detection, Truth};
use super::scene::{RegionKind, ToyScene};

/// Preprocess every scene; labels are the scene labels as 0/1 targets.
pub fn prepare_scenes(scenes: &[ToyScene], cfg: &PreprocConfig) -> Result<TrainingData> {
    let images: Vec<Tensor4<f64>> = scenes.par_iter().map(|s| preprocess(&s.image, cfg)).collect::<Result<_>>()?;
    let labels = scenes.iter().map(|s| s.label as f64).collect();
    TrainingData::new(Tensor4::stack(&images)?, labels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// FROC range in mean false positives per image.
    pub mu: f64,
    /// Maps are binarised at this quantile of all pixel values of one checkpoint.
    pub detection_quantile: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { mu: 10.0, detection_quantile: 0.95 }
    }
}

/// The map criterion used for evaluation: π for hue networks, ω (q = ∞) otherwise.
pub fn eval_criterion(net: &Network) -> Criterion {
    match net.heatmap_mode() {
        HeatmapMode::Hue => Criterion::Hue,
        HeatmapMode::Plain => Criterion::Sensitivity(QNorm::Infinity),
    }
}

/// Metrics of one checkpoint on a scene set. Undefined values (one class
/// only, no lesion of a type) are NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEval {
    pub predictions: Vec<f64>,
    pub az_image: f64,
    pub froc_bright: f64,
    pub froc_dark: f64,
    /// Both lesion types as targets.
    pub froc_lesion: f64,
    /// Mean heatmap mass per image.
    pub l1_heatmap: f64,
    /// Mean over images of the share of map mass on vessel masks.
    pub vessel_mass: f64,
    pub maps: Vec<Heatmap>,
}

fn quantile(mut v: Vec<f64>, q: f64) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let k = ((v.len() - 1) as f64 * q).round() as usize;
    v[k.min(v.len() - 1)]
}

fn froc_for(dets: &[Vec<Detection>], scenes: &[ToyScene], kinds: &[RegionKind], mu: f64) -> Result<f64> {
    let truth: Vec<Truth> = scenes
        .iter()
        .map(|s| s.regions.iter().filter(|r| kinds.contains(&r.kind)).map(|r| r.mask.clone()).collect())
        .collect();
    if truth.iter().all(|t| t.is_empty()) {
        return Ok(f64::NAN);
    }
    froc_area(dets, &truth, mu)
}

pub fn evaluate_checkpoint<T: Scalar>(
    net: &Network,
    store: &ParamStore<T>,
    inputs: &Tensor4<f64>,
    scenes: &[ToyScene],
    cfg: &EvalConfig,
) -> Result<CheckpointEval> {
    if inputs.dims().n != scenes.len() {
        return Err(arg_err!("{} inputs for {} scenes", inputs.dims().n, scenes.len()));
    }
    let x: Tensor4<T> = inputs.cast();
    let predictions: Vec<f64> = (0..scenes.len())
        .into_par_iter()
        .map(|n| Ok(Scalar::to_f64(net.predict(store, &x.image(n))?[0])))
        .collect::<Result<_>>()?;
    let labels: Vec<bool> = scenes.iter().map(|s| s.label == 1).collect();
    let az_image = roc_auc(&predictions, &labels).unwrap_or(f64::NAN);

    let maps = maps_for_batch(net, store, &x, eval_criterion(net), "")?;
    let all: Vec<f64> = maps.iter().flat_map(|m| m.values().iter().copied()).collect();
    let threshold = quantile(all, cfg.detection_quantile);
    let dets: Vec<Vec<Detection>> = maps
        .iter()
        .map(|m| heatmap_to_detections(m, &[threshold]).remove(0).detections)
        .collect();
    let froc_bright = froc_for(&dets, scenes, &[RegionKind::BrightLesion], cfg.mu)?;
    let froc_dark = froc_for(&dets, scenes, &[RegionKind::DarkLesion], cfg.mu)?;
    let froc_lesion = froc_for(&dets, scenes, &[RegionKind::BrightLesion, RegionKind::DarkLesion], cfg.mu)?;
    let l1_heatmap = maps.iter().map(Heatmap::mass).sum::<f64>() / maps.len().max(1) as f64;

    let mut shares = Vec::new();
    for (m, s) in maps.iter().zip(scenes) {
        let total = m.mass();
        if total > 0.0 && s.regions_of(RegionKind::Vessel).next().is_some() {
            let vessel = s.kind_mask(RegionKind::Vessel);
            let on: f64 = m.values().iter().zip(&vessel).filter(|(_, &v)| v).map(|(x, _)| x).sum();
            shares.push(on / total);
        }
    }
    let vessel_mass = if shares.is_empty() { f64::NAN } else { shares.iter().sum::<f64>() / shares.len() as f64 };
    Ok(CheckpointEval { predictions, az_image, froc_bright, froc_dark, froc_lesion, l1_heatmap, vessel_mass, maps })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub iteration: u64,
    pub nu: f64,
    pub az_image: f64,
    pub froc_bright: f64,
    pub froc_dark: f64,
    pub l1_heatmap: f64,
}

/// A checkpoint to evaluate.
pub struct SweepInput<T> {
    pub iteration: u64,
    pub nu: f64,
    pub store: ParamStore<T>,
}

/// Rows sorted by iteration (then ν, then values); `best[k]` lists the rows
/// attaining the maximum of the k-th of `az_image`, `froc_bright`, `froc_dark`.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub best: [Vec<usize>; 3],
}

pub const SWEEP_HEADER: &str = "iteration,nu,az_image,froc_bright,froc_dark,l1_heatmap,best";

impl SweepTable {
    pub fn from_rows(mut rows: Vec<SweepRow>) -> Self {
        let key = |r: &SweepRow| [r.nu, r.az_image, r.froc_bright, r.froc_dark, r.l1_heatmap];
        rows.sort_by(|a, b| {
            a.iteration.cmp(&b.iteration).then_with(|| {
                key(a).iter().zip(key(b)).map(|(x, y)| x.total_cmp(&y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
            })
        });
        let col = |r: &SweepRow, k: usize| [r.az_image, r.froc_bright, r.froc_dark][k];
        let best = [0, 1, 2].map(|k| {
            let max = rows.iter().map(|r| col(r, k)).filter(|v| !v.is_nan()).fold(f64::NEG_INFINITY, f64::max);
            (0..rows.len()).filter(|&i| col(&rows[i], k) == max).collect()
        });
        SweepTable { rows, best }
    }

    pub fn to_csv(&self) -> String {
        let names = ["az_image", "froc_bright", "froc_dark"];
        let mut s = format!("{SWEEP_HEADER}\n");
        for (i, r) in self.rows.iter().enumerate() {
            let marks: Vec<&str> = (0..3).filter(|&k| self.best[k].contains(&i)).map(|k| names[k]).collect();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.iteration,
                r.nu,
                r.az_image,
                r.froc_bright,
                r.froc_dark,
                r.l1_heatmap,
                marks.join(";")
            );
        }
        s
    }
}

/// Evaluate every checkpoint on the same scenes.
pub fn checkpoint_sweep<T: Scalar>(
    net: &Network,
    checkpoints: &[SweepInput<T>],
    inputs: &Tensor4<f64>,
    scenes: &[ToyScene],
    cfg: &EvalConfig,
) -> Result<SweepTable> {
    if checkpoints.is_empty() {
        return Err(arg_err!("no checkpoints to evaluate"));
    }
    let rows = checkpoints
        .iter()
        .map(|c| {
            let e = evaluate_checkpoint(net, &c.store, inputs, scenes, cfg)?;
            Ok(SweepRow {
                iteration: c.iteration,
                nu: c.nu,
                az_image: e.az_image,
                froc_bright: e.froc_bright,
                froc_dark: e.froc_dark,
                l1_heatmap: e.l1_heatmap,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable::from_rows(rows))
}

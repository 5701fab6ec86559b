use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use gradmine::eval::{
    checkpoint_sweep, evaluate_checkpoint, gen_toy_dataset, near_vessel_fraction, prepare_scenes, read_dataset,
    write_dataset, SweepInput, ToyScene,
};
use gradmine::gradcheck::{self, SuiteConfig};
use gradmine::heatmap::{blend_maps, export_map, maps_for_batch, Criterion, ExportScale, Heatmap};
use gradmine::net::{load_checkpoint, save_checkpoint, Network, ParamStore, Precision};
use gradmine::pipeline::{preprocess_with_mask, AugmentRanges, RawImage};
use gradmine::trainer::{train as run_training, TrainOptions, TrainingData};
use gradmine::{Dims, QNorm, Scalar, Tensor4};

use crate::config::RunConfig;
use crate::{tensorfile, CliError};

/// Dispatch on the configured precision.
macro_rules! with_precision {
    ($p:expr, $f:ident($($arg:expr),*)) => {
        match $p {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn is_nonempty_dir(p: &Path) -> bool {
    std::fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

pub fn gen_toy(cfg: &RunConfig, force: bool) -> anyhow::Result<()> {
    let out = cfg.require("out", &cfg.out)?;
    cfg.scene.validate()?;
    if is_nonempty_dir(&out) {
        if !force {
            bail!(CliError::Usage(format!("{} exists and is not empty; pass --force to replace it", out.display())));
        }
        std::fs::remove_dir_all(&out).with_context(|| format!("clearing {}", out.display()))?;
    }
    let scenes = gen_toy_dataset(cfg.seed, cfg.count, &cfg.scene)?;
    write_dataset(&out, &scenes)?;
    let positive = scenes.iter().filter(|s| s.label == 1).count();
    println!(
        "wrote {} scenes to {} ({positive} referable, near-vessel lesion fraction {:.3})",
        scenes.len(),
        out.display(),
        near_vessel_fraction(&scenes)
    );
    Ok(())
}

enum Input {
    Raw(RawImage),
    /// An already preprocessed `1×w×h×3` tensor.
    Tensor(Tensor4<f64>),
}

/// Named inputs from dataset directories (with `manifest.csv`), image files,
/// or `.gmt` tensors written by `preprocess`.
fn load_inputs(inputs: &[PathBuf], cfg: &RunConfig) -> anyhow::Result<Vec<(String, Input)>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.join("manifest.csv").is_file() {
            for (i, s) in read_dataset(p, &cfg.scene)?.into_iter().enumerate() {
                out.push((format!("scene_{i:05}"), Input::Raw(s.image)));
            }
        } else if p.extension().is_some_and(|e| e == "gmt") {
            out.push((stem(p), Input::Tensor(tensorfile::read(p)?)));
        } else {
            out.push((stem(p), Input::Raw(RawImage::read(p).with_context(|| format!("reading {}", p.display()))?)));
        }
    }
    let mut names: Vec<&str> = out.iter().map(|(n, _)| n.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        bail!(CliError::Usage("input images must have distinct names".into()));
    }
    Ok(out)
}

fn preprocess_all(inputs: &[(String, Input)], cfg: &RunConfig) -> anyhow::Result<Tensor4<f64>> {
    cfg.preproc.validate()?;
    let tensors = inputs
        .iter()
        .map(|(name, input)| match input {
            Input::Raw(img) => Ok(preprocess_with_mask(img, &cfg.preproc).with_context(|| name.clone())?.tensor),
            Input::Tensor(t) => Ok(t.clone()),
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    if tensors.is_empty() {
        bail!(CliError::Usage("no input images".into()));
    }
    Ok(Tensor4::stack(&tensors).context("inputs differ in shape")?)
}

/// `[-1, 1]` onto gray levels, for looking at preprocessed crops.
fn preview(t: &Tensor4<f64>) -> anyhow::Result<RawImage> {
    let d = t.dims();
    let level = |v: f64| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
    Ok(RawImage::from_fn(d.w, d.h, |x, y| [0, 1, 2].map(|c| level(t.at(0, x, y, c))))?)
}

pub fn preprocess(cfg: &RunConfig, inputs: &[PathBuf]) -> anyhow::Result<()> {
    let out = cfg.require("out", &cfg.out)?;
    let images = load_inputs(inputs, cfg)?;
    let batch = preprocess_all(&images, cfg)?;
    std::fs::create_dir_all(&out)?;
    for (n, (name, _)) in images.iter().enumerate() {
        let t = batch.image(n);
        tensorfile::write(&out.join(format!("{name}.gmt")), &t)?;
        preview(&t)?.write(&out.join(format!("{name}.ppm")))?;
    }
    println!("preprocessed {} images into {}", images.len(), out.display());
    Ok(())
}

fn load_training_data(dir: &Path, cfg: &RunConfig) -> anyhow::Result<(Vec<ToyScene>, TrainingData)> {
    let scenes = read_dataset(dir, &cfg.scene).with_context(|| format!("reading dataset {}", dir.display()))?;
    if scenes.is_empty() {
        bail!(CliError::Usage(format!("dataset {} is empty", dir.display())));
    }
    let data = prepare_scenes(&scenes, &cfg.preproc)?;
    Ok((scenes, data))
}

const LOG_HEADER: &str = "iteration,loss,l0,heat_l1,val_az,val_l1_heatmap";

fn checkpoint_name(iteration: u64) -> String {
    format!("ckpt_{iteration:07}.gmck")
}

/// Checkpoints in `dir` sorted by iteration.
fn checkpoints_in(dir: &Path) -> anyhow::Result<Vec<(u64, PathBuf)>> {
    let mut found = Vec::new();
    if !dir.is_dir() {
        return Ok(found);
    }
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(it) = name.strip_prefix("ckpt_").and_then(|s| s.strip_suffix(".gmck")).and_then(|s| s.parse().ok()) {
            found.push((it, p));
        }
    }
    found.sort();
    Ok(found)
}

pub fn train(cfg: &RunConfig, two_pass: bool, resume: bool) -> anyhow::Result<()> {
    let net = cfg.network()?;
    cfg.train.validate()?;
    if cfg.eval_every == 0 || cfg.train.checkpoint_every == 0 || cfg.train.checkpoint_every % cfg.eval_every != 0 {
        bail!(CliError::Usage("checkpoint_every must be a positive multiple of eval_every".into()));
    }
    let out = cfg.require("out", &cfg.out)?;
    let data_dir = cfg.require("data", &cfg.data)?;
    if !resume && !checkpoints_in(&out)?.is_empty() {
        bail!(CliError::Usage(format!("{} already holds checkpoints; pass --resume to continue", out.display())));
    }
    with_precision!(cfg.precision, train_typed(cfg, &net, &out, &data_dir, two_pass, resume))
}

fn train_typed<T: Scalar>(
    cfg: &RunConfig,
    net: &Network,
    out: &Path,
    data_dir: &Path,
    two_pass: bool,
    resume: bool,
) -> anyhow::Result<()> {
    let (_, data) = load_training_data(data_dir, cfg)?;
    let val = if cfg.val_data.as_os_str().is_empty() { None } else { Some(load_training_data(&cfg.val_data, cfg)?) };
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.txt"), cfg.render(false))?;

    let log_path = out.join("train_log.csv");
    let mut store = match checkpoints_in(out)?.pop().filter(|_| resume) {
        Some((_, p)) => {
            let s: ParamStore<T> = load_checkpoint(&p).with_context(|| format!("loading {}", p.display()))?;
            s.check_network(net)?;
            eprintln!("resuming from {} (iteration {})", p.display(), s.step());
            s
        }
        None => ParamStore::init(net, cfg.seed),
    };
    // keep log rows up to the resume point
    let mut log = String::from(LOG_HEADER);
    log.push('\n');
    if store.step() > 0 {
        let old = std::fs::read_to_string(&log_path).unwrap_or_default();
        for line in old.lines().skip(1) {
            let it: u64 = line.split(',').next().and_then(|v| v.parse().ok()).unwrap_or(u64::MAX);
            if it <= store.step() {
                log.push_str(line);
                log.push('\n');
            }
        }
    }
    std::fs::write(&log_path, &log)?;

    let opts = TrainOptions { augment: cfg.augment.then(|| AugmentRanges::for_crop(cfg.preproc.crop)), two_pass };
    let until = cfg.train.iterations;
    let mut acc = (0.0, 0.0, 0.0, 0usize);
    let started = Instant::now();
    run_training(net, &mut store, &data, &cfg.train, &opts, until, |it, report, store| {
        acc.0 += report.loss;
        acc.1 += report.l0;
        acc.2 += report.heat_l1;
        acc.3 += 1;
        if it % cfg.eval_every == 0 || it == until {
            let (az, l1) = match &val {
                Some((scenes, vd)) => {
                    let e = evaluate_checkpoint(net, store, &vd.inputs, scenes, &cfg.eval)?;
                    (e.az_image, e.l1_heatmap)
                }
                None => (f64::NAN, f64::NAN),
            };
            let k = acc.3 as f64;
            let row = format!("{it},{},{},{},{az},{l1}\n", acc.0 / k, acc.1 / k, acc.2 / k);
            let mut f = OpenOptions::new().append(true).open(&log_path)?;
            f.write_all(row.as_bytes())?;
            eprint!("[{:>7.1}s] {row}", started.elapsed().as_secs_f64());
            acc = (0.0, 0.0, 0.0, 0);
        }
        if it % cfg.train.checkpoint_every == 0 || it == until {
            save_checkpoint(store, &out.join(checkpoint_name(it)))?;
        }
        Ok(())
    })?;
    println!("trained to iteration {} in {}", store.step(), out.display());
    Ok(())
}

fn parse_criterion(name: &str, q: &str) -> anyhow::Result<Criterion> {
    Ok(match name {
        "hue" => Criterion::Hue,
        _ => Criterion::Sensitivity(q.parse::<QNorm>()?.validate()?),
    })
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn map_tensor(m: &Heatmap) -> anyhow::Result<Tensor4<f64>> {
    Ok(Tensor4::from_vec(Dims::new(1, m.width(), m.height(), 1), m.values().to_vec())?)
}

/// PGM preview, scale sidecar and raw values of one map.
fn emit_map(m: &Heatmap, dir: &Path, name: &str) -> anyhow::Result<()> {
    export_map(m, &dir.join(format!("{name}.pgm")), ExportScale::MinMax)?;
    tensorfile::write(&dir.join(format!("{name}.gmt")), &map_tensor(m)?)
}

pub fn heatmap(
    cfg: &RunConfig,
    checkpoints: &[PathBuf],
    criterion: &str,
    q: &str,
    blend: Option<&str>,
    inputs: &[PathBuf],
) -> anyhow::Result<()> {
    let criterion = parse_criterion(criterion, q)?;
    let weights: Option<Vec<f64>> = blend
        .map(|b| {
            b.split(',')
                .map(|w| w.trim().parse().map_err(|_| CliError::Usage(format!("bad blend weight {w:?}"))))
                .collect::<Result<_, _>>()
        })
        .transpose()?;
    if let Some(w) = &weights {
        if w.len() != checkpoints.len() {
            bail!(CliError::Usage(format!("{} blend weights for {} checkpoints", w.len(), checkpoints.len())));
        }
    }
    let net = cfg.network()?;
    let out = cfg.require("out", &cfg.out)?;
    let images = load_inputs(inputs, cfg)?;
    let batch = preprocess_all(&images, cfg)?;
    let per_ckpt = with_precision!(cfg.precision, maps_typed(&net, checkpoints, &batch, criterion))?;
    std::fs::create_dir_all(&out)?;
    for (n, (name, _)) in images.iter().enumerate() {
        match &weights {
            Some(w) => {
                let maps: Vec<Heatmap> = per_ckpt.iter().map(|m| m[n].clone()).collect();
                emit_map(&blend_maps(&maps, w)?, &out, name)?;
            }
            None if checkpoints.len() == 1 => emit_map(&per_ckpt[0][n], &out, name)?,
            None => {
                for (c, maps) in checkpoints.iter().zip(&per_ckpt) {
                    emit_map(&maps[n], &out, &format!("{name}.{}", stem(c)))?;
                }
            }
        }
    }
    println!("wrote {criterion} maps for {} images to {}", images.len(), out.display());
    Ok(())
}

fn maps_typed<T: Scalar>(
    net: &Network,
    checkpoints: &[PathBuf],
    batch: &Tensor4<f64>,
    criterion: Criterion,
) -> anyhow::Result<Vec<Vec<Heatmap>>> {
    let x: Tensor4<T> = batch.cast();
    checkpoints
        .iter()
        .map(|c| {
            let store: ParamStore<T> = load_checkpoint(c).with_context(|| format!("loading {}", c.display()))?;
            store.check_network(net)?;
            Ok(maps_for_batch(net, &store, &x, criterion, &stem(c))?)
        })
        .collect()
}

/// ν of a checkpoint: from the `config.txt` its training run left beside it,
/// else the configured value.
fn checkpoint_nu(path: &Path, cfg: &RunConfig) -> anyhow::Result<f64> {
    let Some(run) = path.parent().map(|d| d.join("config.txt")).filter(|p| p.is_file()) else {
        return Ok(cfg.train.nu);
    };
    let mut c = RunConfig::default();
    c.apply_text(&std::fs::read_to_string(&run)?).with_context(|| format!("reading {}", run.display()))?;
    Ok(c.train.nu)
}

pub fn eval(cfg: &RunConfig, checkpoints: &[PathBuf]) -> anyhow::Result<()> {
    if checkpoints.is_empty() {
        bail!(CliError::Usage("no checkpoints given".into()));
    }
    let net = cfg.network()?;
    let data_dir = cfg.require("data", &cfg.data)?;
    let (scenes, data) = load_training_data(&data_dir, cfg)?;
    let csv = with_precision!(cfg.precision, eval_typed(cfg, &net, checkpoints, &scenes, &data))?;
    if cfg.out.as_os_str().is_empty() {
        print!("{csv}");
    } else {
        std::fs::write(&cfg.out, csv).with_context(|| format!("writing {}", cfg.out.display()))?;
    }
    Ok(())
}

fn eval_typed<T: Scalar>(
    cfg: &RunConfig,
    net: &Network,
    checkpoints: &[PathBuf],
    scenes: &[ToyScene],
    data: &TrainingData,
) -> anyhow::Result<String> {
    let inputs = checkpoints
        .iter()
        .map(|c| {
            let store: ParamStore<T> = load_checkpoint(c).with_context(|| format!("loading {}", c.display()))?;
            store.check_network(net)?;
            Ok(SweepInput { iteration: store.step(), nu: checkpoint_nu(c, cfg)?, store })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(checkpoint_sweep(net, &inputs, &data.inputs, scenes, &cfg.eval)?.to_csv())
}

pub fn gradcheck(cfg: &RunConfig, ops: Option<&str>, mutant: bool) -> anyhow::Result<()> {
    let suite = SuiteConfig {
        seed: cfg.seed,
        ops: ops.map(|o| o.split(',').map(|s| s.trim().to_string()).collect()),
        ..SuiteConfig::default()
    };
    let started = Instant::now();
    let report = if mutant { gradcheck::mutants::inverted_slope_report(&suite)? } else { gradcheck::run_suite(&suite)? };
    let mut summary = report.render();
    let _ = writeln!(summary, "{} in {:.1}s", if report.passed() { "PASS" } else { "FAIL" }, started.elapsed().as_secs_f64());
    print!("{summary}");
    if !report.passed() {
        let failed: Vec<String> = report.by_operator().into_iter().filter(|(_, _, ok)| !ok).map(|(op, _, _)| op).collect();
        bail!(CliError::Conformance(format!("conformance failure in {}", failed.join(", "))));
    }
    Ok(())
}

//! Input-gradient heatmaps of a trained network.
//!
//! Both criteria differentiate the raw scalar output `f_n` (top gradient 1),
//! with dropout in inference mode:
//!
//! - sensitivity `ω_{x,y} = ‖(∂f/∂D⁽⁰⁾_{x,y,c})_c‖_q`;
//! - hue-constrained `π_{x,y} = |∂f(m ∘ D⁽⁰⁾)/∂m_{x,y}|` at `m = 1`, which
//!   needs a network built in hue mode.

use std::fmt::{self, Display};
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{arg_err, shape_err, state_err, Error, Result};
use crate::net::{HeatmapMode, Network, ParamStore};
use crate::ops::Phase;
use crate::pipeline::{read_pgm, write_pgm};
use crate::tensor::{channel_q_norm, QNorm, Scalar, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Criterion {
    Sensitivity(QNorm),
    Hue,
}

impl Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Criterion::Sensitivity(q) => write!(f, "sensitivity(q={q})"),
            Criterion::Hue => write!(f, "hue"),
        }
    }
}

/// Where a map came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub checkpoint: String,
    pub criterion: Criterion,
    /// Blend weight; 1 for a map computed directly.
    pub weight: f64,
}

/// A nonnegative `w×h` map, indexed `x·h + y` like a tensor plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    w: usize,
    h: usize,
    values: Vec<f64>,
    sources: Vec<Provenance>,
}

impl Heatmap {
    pub fn new(w: usize, h: usize, values: Vec<f64>, sources: Vec<Provenance>) -> Result<Self> {
        if values.len() != w * h || w == 0 || h == 0 {
            return Err(shape_err!("{} values for a {w}x{h} map", values.len()));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0)) {
            return Err(arg_err!("heatmap values must be nonnegative, found {v}"));
        }
        Ok(Heatmap { w, h, values, sources })
    }

    /// From a single-image, single-channel tensor of absolute values.
    fn from_plane<T: Scalar>(t: &Tensor4<T>, source: Provenance) -> Result<Self> {
        let d = t.dims();
        let values = t.data().iter().map(|v| Scalar::to_f64(v.abs())).collect();
        Heatmap::new(d.w, d.h, values, vec![source])
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[x * self.h + y]
    }

    pub fn sources(&self) -> &[Provenance] {
        &self.sources
    }

    /// Sum of all values.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

fn single_image<T: Scalar>(net: &Network, image: &Tensor4<T>) -> Result<()> {
    if image.dims() != net.input_dims(1) {
        return Err(shape_err!("heatmaps take one image of {}, got {}", net.input_dims(1), image.dims()));
    }
    Ok(())
}

/// `∂f/∂D⁽⁰⁾` (and `∂f/∂m` in hue mode) for one image.
fn output_gradients<T: Scalar>(
    net: &Network,
    store: &ParamStore<T>,
    image: &Tensor4<T>,
) -> Result<crate::net::InputGrads<T>> {
    single_image(net, image)?;
    let (_, mut trace) = net.forward_pass(store, image, &mut Phase::Inference)?;
    Ok(net.backward_pass(store, &[T::one()], &mut trace)?.input)
}

pub fn sensitivity_map<T: Scalar>(
    net: &Network,
    store: &ParamStore<T>,
    image: &Tensor4<T>,
    q: QNorm,
    checkpoint: &str,
) -> Result<Heatmap> {
    let q = q.validate()?;
    let g = output_gradients(net, store, image)?;
    let source = Provenance { checkpoint: checkpoint.into(), criterion: Criterion::Sensitivity(q), weight: 1.0 };
    Heatmap::from_plane(&channel_q_norm(&g.image, q)?, source)
}

pub fn hue_constrained_map<T: Scalar>(
    net: &Network,
    store: &ParamStore<T>,
    image: &Tensor4<T>,
    checkpoint: &str,
) -> Result<Heatmap> {
    if net.heatmap_mode() != HeatmapMode::Hue {
        return Err(state_err!("hue-constrained maps need a network built with the m-mask (heatmap = hue)"));
    }
    let g = output_gradients(net, store, image)?;
    let mask = g.mask.ok_or_else(|| state_err!("backward pass produced no mask gradient"))?;
    let source = Provenance { checkpoint: checkpoint.into(), criterion: Criterion::Hue, weight: 1.0 };
    Heatmap::from_plane(&mask, source)
}

/// One map per image of `batch`, computed in parallel.
pub fn maps_for_batch<T: Scalar>(
    net: &Network,
    store: &ParamStore<T>,
    batch: &Tensor4<T>,
    criterion: Criterion,
    checkpoint: &str,
) -> Result<Vec<Heatmap>> {
    (0..batch.dims().n)
        .into_par_iter()
        .map(|n| {
            let image = batch.image(n);
            match criterion {
                Criterion::Sensitivity(q) => sensitivity_map(net, store, &image, q, checkpoint),
                Criterion::Hue => hue_constrained_map(net, store, &image, checkpoint),
            }
        })
        .collect()
}

/// Pixelwise weighted mean; weights must be nonnegative and sum to 1.
pub fn blend_maps(maps: &[Heatmap], weights: &[f64]) -> Result<Heatmap> {
    let first = maps.first().ok_or_else(|| arg_err!("nothing to blend"))?;
    if maps.len() != weights.len() {
        return Err(arg_err!("{} maps but {} weights", maps.len(), weights.len()));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(arg_err!("blend weights must be nonnegative"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(arg_err!("blend weights sum to {total}, expected 1"));
    }
    let mut values = vec![0.0; first.values.len()];
    let mut sources = Vec::new();
    for (m, &w) in maps.iter().zip(weights) {
        if (m.w, m.h) != (first.w, first.h) {
            return Err(arg_err!("cannot blend a {}x{} map with a {}x{} map", m.w, m.h, first.w, first.h));
        }
        for (acc, v) in values.iter_mut().zip(&m.values) {
            *acc += w * v;
        }
        sources.extend(m.sources.iter().map(|s| Provenance { weight: s.weight * w, ..s.clone() }));
    }
    Heatmap::new(first.w, first.h, values, sources)
}

/// How exported gray levels map back to values: `offset + scale·level/255`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ExportScale {
    /// `[0, max]` onto `0..=255`, larger values saturate.
    FixedMax(f64),
    /// `[min, max]` of the map onto `0..=255`.
    MinMax,
}

/// Scaling constants written to the sidecar.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExportInfo {
    pub offset: f64,
    pub scale: f64,
    /// Min-max scaling of a constant map: every level is 0.
    pub degenerate: bool,
}

/// Sidecar path: `map.pgm` gets `map.scale.txt`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("scale.txt")
}

/// Write an 8-bit PGM plus the `.scale.txt` sidecar.
pub fn export_map(map: &Heatmap, path: &Path, scale: ExportScale) -> Result<ExportInfo> {
    let info = match scale {
        ExportScale::FixedMax(m) if m > 0.0 && m.is_finite() => ExportInfo { offset: 0.0, scale: m, degenerate: false },
        ExportScale::FixedMax(m) => return Err(arg_err!("fixed export maximum must be positive, got {m}")),
        ExportScale::MinMax => {
            let lo = map.values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = map.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            ExportInfo { offset: lo, scale: hi - lo, degenerate: hi == lo }
        }
    };
    let mut levels = vec![0u8; map.w * map.h];
    if !info.degenerate {
        // PGM rows run along x
        for y in 0..map.h {
            for x in 0..map.w {
                let t = ((map.at(x, y) - info.offset) / info.scale).clamp(0.0, 1.0);
                levels[y * map.w + x] = (t * 255.0).round() as u8;
            }
        }
    }
    write_pgm(path, map.w, map.h, &levels)?;
    let mut f = std::fs::File::create(sidecar_path(path))?;
    writeln!(f, "offset {:?}", info.offset)?;
    writeln!(f, "scale {:?}", info.scale)?;
    if info.degenerate {
        writeln!(f, "# degenerate range: constant map, all levels 0")?;
    }
    Ok(info)
}

/// Read an exported map back through its sidecar.
pub fn load_exported(path: &Path) -> Result<Heatmap> {
    let (w, h, levels) = read_pgm(path)?;
    let text = std::fs::read_to_string(sidecar_path(path))?;
    let mut offset = None;
    let mut scale = None;
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        let (k, v) = line.split_once(' ').ok_or_else(|| Error::Format(format!("bad sidecar line {line:?}")))?;
        let v: f64 = v.trim().parse().map_err(|_| Error::Format(format!("bad sidecar value {v:?}")))?;
        match k {
            "offset" => offset = Some(v),
            "scale" => scale = Some(v),
            _ => return Err(Error::Format(format!("unknown sidecar key {k:?}"))),
        }
    }
    let (offset, scale) = offset.zip(scale).ok_or_else(|| Error::Format("sidecar lacks offset/scale".into()))?;
    let mut values = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            values[x * h + y] = offset + scale * levels[y * w + x] as f64 / 255.0;
        }
    }
    Heatmap::new(w, h, values, Vec::new())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{LayerSpec, NetworkSpec, Precision};
    use crate::rng::Rng;

    fn random_map(w: usize, h: usize, seed: u64) -> Heatmap {
        let mut rng = Rng::new(seed);
        Heatmap::new(w, h, (0..w * h).map(|_| rng.uniform(0.0, 3.0)).collect(), Vec::new()).unwrap()
    }

    fn small_net(mode: HeatmapMode) -> Network {
        Network::build(&NetworkSpec {
            input: (6, 5, 3),
            precision: Precision::F64,
            heatmap: mode,
            layers: vec![
                LayerSpec::Conv { filters: 2, window: (3, 3), stride: 1, out: None, bias: crate::ops::BiasMode::Tied },
                LayerSpec::LeakyRelu { alpha: 0.33 },
                LayerSpec::Dense { units: 1 },
            ],
        })
        .unwrap()
    }

    #[test]
    fn zero_network_gives_zero_maps() {
        let net = small_net(HeatmapMode::Hue);
        let store = ParamStore::<f64>::zeros(&net);
        let x = Tensor4::filled(net.input_dims(1), 0.7);
        let s = sensitivity_map(&net, &store, &x, QNorm::Infinity, "z").unwrap();
        assert!(s.values().iter().all(|&v| v == 0.0));
        assert_eq!((s.width(), s.height()), (6, 5));
        let p = hue_constrained_map(&net, &store, &x, "z").unwrap();
        assert!(p.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_image_gives_zero_hue_map() {
        let net = small_net(HeatmapMode::Hue);
        let store = ParamStore::<f64>::init(&net, 2);
        let p = hue_constrained_map(&net, &store, &Tensor4::zeros(net.input_dims(1)), "c").unwrap();
        assert!(p.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hue_needs_mask_node() {
        let net = small_net(HeatmapMode::Plain);
        let store = ParamStore::<f64>::init(&net, 2);
        let x = Tensor4::filled(net.input_dims(1), 0.7);
        assert!(matches!(hue_constrained_map(&net, &store, &x, "c"), Err(Error::State(_))));
        assert!(sensitivity_map(&net, &store, &x, QNorm::Finite(0), "c").is_err());
        assert!(sensitivity_map(&net, &store, &Tensor4::filled(net.input_dims(2), 0.1), QNorm::Infinity, "c").is_err());
    }

    #[test]
    fn maps_are_deterministic() {
        let net = small_net(HeatmapMode::Hue);
        let store = ParamStore::<f64>::init(&net, 5);
        let mut rng = Rng::new(1);
        let batch = Tensor4::from_fn(net.input_dims(4), |_, _, _, _| rng.uniform(-1.0, 1.0));
        let a = maps_for_batch(&net, &store, &batch, Criterion::Hue, "k").unwrap();
        let b = maps_for_batch(&net, &store, &batch, Criterion::Hue, "k").unwrap();
        assert_eq!(a, b);
        assert_eq!(a[2], hue_constrained_map(&net, &store, &batch.image(2), "k").unwrap());
    }

    #[test]
    fn blend_cases() {
        let a = random_map(4, 3, 1);
        assert_eq!(blend_maps(std::slice::from_ref(&a), &[1.0]).unwrap().values(), a.values());
        let twice = blend_maps(&[a.clone(), a.clone()], &[0.3, 0.7]).unwrap();
        for (x, y) in twice.values().iter().zip(a.values()) {
            assert!((x - y).abs() <= 1e-15 * y.max(1.0));
        }
        let maps = [random_map(4, 3, 2), random_map(4, 3, 3), random_map(4, 3, 4)];
        let w = [0.5, 0.3, 0.2];
        let b = blend_maps(&maps, &w).unwrap();
        for i in 0..12 {
            let mut want = 0.0;
            for k in 0..3 {
                want += w[k] * maps[k].values()[i];
            }
            assert_eq!(b.values()[i], want);
        }
        assert_eq!(b.sources().len(), 0);
        assert!(blend_maps(&maps, &[0.5, 0.5, 0.5]).is_err());
        assert!(blend_maps(&maps, &[0.5, 0.5]).is_err());
        assert!(blend_maps(&maps, &[1.2, -0.2, 0.0]).is_err());
        assert!(blend_maps(&[a, random_map(3, 4, 1)], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn export_zero_and_constant_maps() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.pgm");
        let zero = Heatmap::new(5, 4, vec![0.0; 20], Vec::new()).unwrap();
        export_map(&zero, &p, ExportScale::FixedMax(1.0)).unwrap();
        assert_eq!(read_pgm(&p).unwrap().2, vec![0; 20]);
        let constant = Heatmap::new(5, 4, vec![2.5; 20], Vec::new()).unwrap();
        let info = export_map(&constant, &p, ExportScale::MinMax).unwrap();
        assert!(info.degenerate);
        assert_eq!(read_pgm(&p).unwrap().2, vec![0; 20]);
        assert!(std::fs::read_to_string(sidecar_path(&p)).unwrap().contains("degenerate"));
        assert_eq!(load_exported(&p).unwrap().values(), constant.values());
        assert!(export_map(&zero, &p, ExportScale::FixedMax(0.0)).is_err());
        assert!(export_map(&zero, &dir.path().join("missing/z.pgm"), ExportScale::MinMax).is_err());
    }

    #[test]
    fn export_round_trip_within_one_level() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.pgm");
        let m = random_map(7, 9, 11);
        for scale in [ExportScale::MinMax, ExportScale::FixedMax(3.0)] {
            let info = export_map(&m, &p, scale).unwrap();
            let back = load_exported(&p).unwrap();
            assert_eq!((back.width(), back.height()), (7, 9));
            for (a, b) in m.values().iter().zip(back.values()) {
                assert!((a - b).abs() <= info.scale / 255.0, "{a} vs {b}");
            }
        }
    }
}

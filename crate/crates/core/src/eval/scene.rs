//! Synthetic fundus-like scenes with lesion ground truth.
//!
//! Each scene is a textured disc on black with small bright and dark blobs
//! (the lesions) and a few vessel-like Bézier curves (the confounders). A
//! share of the lesions sits next to a curve, so backpropagated sensitivity
//! can leak from a lesion onto its neighbouring vessel.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{arg_err, Error, Result};
use crate::pipeline::RawImage;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RegionKind {
    BrightLesion,
    DarkLesion,
    Vessel,
}

impl RegionKind {
    pub fn tag(self) -> &'static str {
        match self {
            RegionKind::BrightLesion => "bright",
            RegionKind::DarkLesion => "dark",
            RegionKind::Vessel => "vessel",
        }
    }

    pub fn from_tag(s: &str) -> Result<Self> {
        match s {
            "bright" => Ok(RegionKind::BrightLesion),
            "dark" => Ok(RegionKind::DarkLesion),
            "vessel" => Ok(RegionKind::Vessel),
            _ => Err(Error::Format(format!("unknown region kind {s:?}"))),
        }
    }

    pub fn is_lesion(self) -> bool {
        self != RegionKind::Vessel
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Disc { radius: f64 },
    /// Cubic Bézier through four control points, drawn `half_width` thick.
    Curve { points: [(f64, f64); 4], half_width: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub kind: RegionKind,
    pub center: (f64, f64),
    pub radius: f64,
    pub shape: Shape,
    /// Covered pixels, indexed `x·h + y`, sorted.
    pub mask: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    /// Image side in pixels.
    pub size: usize,
    pub fov_radius: f64,
    /// Chance that a scene has any dark lesion; the count is then uniform in `1..=max_lesions`.
    pub p_dark: f64,
    pub p_bright: f64,
    pub max_lesions: usize,
    pub curves: (usize, usize),
    pub lesion_radius: (f64, f64),
    pub vessel_half_width: (f64, f64),
    /// Chance that a lesion is placed within two radii of a curve.
    pub near_vessel: f64,
    /// Darkening factor of dark lesions and of vessels.
    pub dark_lesion_factor: f64,
    pub vessel_factor: f64,
    /// Added to a bright lesion, RGB.
    pub bright_lift: [f64; 3],
    pub noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            size: 64,
            fov_radius: 30.0,
            p_dark: 0.25,
            p_bright: 0.4,
            max_lesions: 6,
            curves: (1, 4),
            lesion_radius: (1.5, 3.0),
            vessel_half_width: (0.6, 1.1),
            near_vessel: 0.5,
            dark_lesion_factor: 0.45,
            vessel_factor: 0.6,
            bright_lift: [80.0, 70.0, 15.0],
            noise: 2.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.size >= crate::pipeline::MIN_SIDE
            && self.fov_radius > 4.0
            && 2.0 * self.fov_radius < self.size as f64
            && (0.0..=1.0).contains(&self.p_dark)
            && (0.0..=1.0).contains(&self.p_bright)
            && (0.0..=1.0).contains(&self.near_vessel)
            && self.curves.0 <= self.curves.1
            && self.lesion_radius.0 > 0.0
            && self.lesion_radius.0 <= self.lesion_radius.1
            && self.vessel_half_width.0 > 0.0
            && self.vessel_half_width.0 <= self.vessel_half_width.1
            && self.noise >= 0.0;
        if !ok {
            return Err(arg_err!("invalid scene config {self:?}"));
        }
        Ok(())
    }

    fn center(&self) -> f64 {
        (self.size as f64 - 1.0) / 2.0
    }

    fn in_fov(&self, x: f64, y: f64) -> bool {
        let c = self.center();
        (x - c).powi(2) + (y - c).powi(2) <= self.fov_radius * self.fov_radius
    }
}

/// A scene is referable iff it has a dark lesion or at least two bright ones.
pub fn label_rule(regions: &[Region]) -> u8 {
    let count = |k| regions.iter().filter(|r| r.kind == k).count();
    u8::from(count(RegionKind::DarkLesion) >= 1 || count(RegionKind::BrightLesion) >= 2)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyScene {
    pub image: RawImage,
    pub regions: Vec<Region>,
    pub label: u8,
}

impl ToyScene {
    pub fn regions_of(&self, kind: RegionKind) -> impl Iterator<Item = &Region> {
        self.regions.iter().filter(move |r| r.kind == kind)
    }

    /// Union of the masks of `kind`, indexed `x·h + y`.
    pub fn kind_mask(&self, kind: RegionKind) -> Vec<bool> {
        let mut m = vec![false; self.image.width() * self.image.height()];
        for r in self.regions_of(kind) {
            for &i in &r.mask {
                m[i] = true;
            }
        }
        m
    }

    /// Region list as text; masks are re-derived from the shapes on load.
    pub fn sidecar(&self) -> String {
        let mut s = format!("label {}\n", self.label);
        for r in &self.regions {
            let _ = match &r.shape {
                Shape::Disc { radius } => writeln!(s, "{} {:?} {:?} {:?}", r.kind.tag(), r.center.0, r.center.1, radius),
                Shape::Curve { points, half_width } => {
                    let _ = write!(s, "{} {:?}", r.kind.tag(), half_width);
                    for (x, y) in points {
                        let _ = write!(s, " {x:?} {y:?}");
                    }
                    writeln!(s)
                }
            };
        }
        s
    }

    /// Inverse of [`ToyScene::sidecar`] for an image of the given config.
    pub fn parse_sidecar(text: &str, image: RawImage, cfg: &SceneConfig) -> Result<ToyScene> {
        let bad = |l: &str| Error::Format(format!("bad region line {l:?}"));
        let mut label = None;
        let mut regions = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let mut it = line.split_whitespace();
            let head = it.next().ok_or_else(|| bad(line))?;
            let nums: Vec<f64> = it.map(|v| v.parse().map_err(|_| bad(line))).collect::<Result<_>>()?;
            if head == "label" {
                label = Some(match nums.as_slice() {
                    [v] if *v == 0.0 || *v == 1.0 => *v as u8,
                    _ => return Err(bad(line)),
                });
                continue;
            }
            let kind = RegionKind::from_tag(head)?;
            let region = match (kind, nums.as_slice()) {
                (RegionKind::Vessel, &[hw, x0, y0, x1, y1, x2, y2, x3, y3]) => {
                    curve_region([(x0, y0), (x1, y1), (x2, y2), (x3, y3)], hw, cfg)
                }
                (RegionKind::BrightLesion | RegionKind::DarkLesion, &[x, y, r]) => disc_region(kind, (x, y), r, cfg),
                _ => return Err(bad(line)),
            };
            regions.push(region);
        }
        let label = label.ok_or_else(|| Error::Format("region list lacks a label line".into()))?;
        Ok(ToyScene { image, regions, label })
    }
}

fn bezier(p: &[(f64, f64); 4], t: f64) -> (f64, f64) {
    let u = 1.0 - t;
    let (a, b, c, d) = (u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t);
    (a * p[0].0 + b * p[1].0 + c * p[2].0 + d * p[3].0, a * p[0].1 + b * p[1].1 + c * p[2].1 + d * p[3].1)
}

const CURVE_SAMPLES: usize = 200;

fn curve_polyline(p: &[(f64, f64); 4]) -> Vec<(f64, f64)> {
    (0..=CURVE_SAMPLES).map(|i| bezier(p, i as f64 / CURVE_SAMPLES as f64)).collect()
}

fn segment_distance(q: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((q.0 - a.0) * dx + (q.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    ((q.0 - a.0 - t * dx).powi(2) + (q.1 - a.1 - t * dy).powi(2)).sqrt()
}

/// Distance from `q` to a sampled curve.
pub fn curve_distance(line: &[(f64, f64)], q: (f64, f64)) -> f64 {
    line.windows(2).map(|s| segment_distance(q, s[0], s[1])).fold(f64::INFINITY, f64::min)
}

/// Distance to the curve for pixels within `reach` of it, `∞` elsewhere.
fn curve_field(line: &[(f64, f64)], n: usize, reach: f64) -> Vec<f64> {
    let mut field = vec![f64::INFINITY; n * n];
    let clip = |v: f64| (v.max(0.0) as usize).min(n - 1);
    for s in line.windows(2) {
        let (a, b) = (s[0], s[1]);
        let (x0, x1) = (clip((a.0.min(b.0) - reach).floor()), clip((a.0.max(b.0) + reach).ceil()));
        let (y0, y1) = (clip((a.1.min(b.1) - reach).floor()), clip((a.1.max(b.1) + reach).ceil()));
        for x in x0..=x1 {
            for y in y0..=y1 {
                let d = segment_distance((x as f64, y as f64), a, b);
                if d <= reach && d < field[x * n + y] {
                    field[x * n + y] = d;
                }
            }
        }
    }
    field
}

fn disc_region(kind: RegionKind, center: (f64, f64), radius: f64, cfg: &SceneConfig) -> Region {
    let n = cfg.size;
    let mut mask = Vec::new();
    for x in 0..n {
        for y in 0..n {
            let d2 = (x as f64 - center.0).powi(2) + (y as f64 - center.1).powi(2);
            if d2 <= radius * radius && cfg.in_fov(x as f64, y as f64) {
                mask.push(x * n + y);
            }
        }
    }
    Region { kind, center, radius, shape: Shape::Disc { radius }, mask }
}

fn curve_region(points: [(f64, f64); 4], half_width: f64, cfg: &SceneConfig) -> Region {
    let n = cfg.size;
    let field = curve_field(&curve_polyline(&points), n, half_width + 0.5);
    let mut mask = Vec::new();
    for x in 0..n {
        for y in 0..n {
            if cfg.in_fov(x as f64, y as f64) && field[x * n + y] <= half_width + 0.5 {
                mask.push(x * n + y);
            }
        }
    }
    let center = bezier(&points, 0.5);
    Region { kind: RegionKind::Vessel, center, radius: half_width, shape: Shape::Curve { points, half_width }, mask }
}

fn random_in_disc(rng: &mut Rng, c: f64, r: f64) -> (f64, f64) {
    let rho = r * rng.unit().sqrt();
    let phi = rng.uniform(0.0, std::f64::consts::TAU);
    (c + rho * phi.cos(), c + rho * phi.sin())
}

fn count(rng: &mut Rng, p: f64, max: usize) -> usize {
    if max > 0 && rng.bernoulli(p) {
        rng.int_in(1, max)
    } else {
        0
    }
}

/// Scene `index` of the dataset seeded by `seed`; independent of other scenes.
pub fn gen_scene(seed: u64, index: u64, cfg: &SceneConfig) -> Result<ToyScene> {
    cfg.validate()?;
    let mut rng = Rng::derive(seed, index);
    let n = cfg.size;
    let c = cfg.center();
    let r = cfg.fov_radius;

    let mut regions = Vec::new();
    let n_curves = rng.int_in(cfg.curves.0, cfg.curves.1);
    let mut lines = Vec::new();
    for _ in 0..n_curves {
        // ends near the rim, controls anywhere inside
        let a0 = rng.uniform(0.0, std::f64::consts::TAU);
        let a1 = a0 + rng.uniform(0.6, 1.4) * std::f64::consts::PI;
        let rim = |a: f64, k: f64| (c + k * r * a.cos(), c + k * r * a.sin());
        let p0 = rim(a0, 0.95);
        let p3 = rim(a1, 0.95);
        let p1 = random_in_disc(&mut rng, c, 0.7 * r);
        let p2 = random_in_disc(&mut rng, c, 0.7 * r);
        let hw = rng.uniform(cfg.vessel_half_width.0, cfg.vessel_half_width.1);
        let region = curve_region([p0, p1, p2, p3], hw, cfg);
        lines.push(curve_polyline(&[p0, p1, p2, p3]));
        regions.push(region);
    }

    let n_dark = count(&mut rng, cfg.p_dark, cfg.max_lesions);
    let n_bright = count(&mut rng, cfg.p_bright, cfg.max_lesions);
    let kinds = std::iter::repeat(RegionKind::DarkLesion)
        .take(n_dark)
        .chain(std::iter::repeat(RegionKind::BrightLesion).take(n_bright));
    let mut placed: Vec<((f64, f64), f64)> = Vec::new();
    // lesions stay well inside the FOV so preprocessing erosion keeps them
    let inner = 0.75 * r;
    for kind in kinds {
        let rad = rng.uniform(cfg.lesion_radius.0, cfg.lesion_radius.1);
        let near = rng.bernoulli(cfg.near_vessel);
        let mut center = None;
        for _ in 0..50 {
            let cand = if near {
                let line = &lines[rng.int_in(0, lines.len() - 1)];
                let (bx, by) = line[rng.int_in(0, line.len() - 1)];
                let off = rng.uniform(1.0, 2.0) * rad;
                let phi = rng.uniform(0.0, std::f64::consts::TAU);
                (bx + off * phi.cos(), by + off * phi.sin())
            } else {
                random_in_disc(&mut rng, c, inner)
            };
            let inside = (cand.0 - c).powi(2) + (cand.1 - c).powi(2) <= inner * inner;
            let clear = placed.iter().all(|(p, pr)| ((p.0 - cand.0).powi(2) + (p.1 - cand.1).powi(2)).sqrt() > pr + rad + 1.0);
            if inside && clear {
                center = Some(cand);
                break;
            }
        }
        // a lesion that finds no room is dropped; the label follows the final list
        if let Some(cand) = center {
            placed.push((cand, rad));
            regions.push(disc_region(kind, cand, rad, cfg));
        }
    }

    // background: vignetted base colour with smooth texture
    let base = [150.0, 75.0, 35.0];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let a = rng.uniform(0.0, std::f64::consts::TAU);
            let f = rng.uniform(0.05, 0.15);
            (f * a.cos(), f * a.sin(), rng.uniform(0.0, std::f64::consts::TAU), rng.uniform(3.0, 8.0))
        })
        .collect();
    let mut px = vec![[0.0f64; 3]; n * n];
    for x in 0..n {
        for y in 0..n {
            let (fx, fy) = (x as f64, y as f64);
            if !cfg.in_fov(fx, fy) {
                continue;
            }
            let rho = ((fx - c).powi(2) + (fy - c).powi(2)).sqrt() / r;
            let shade = 1.0 - 0.2 * rho * rho;
            let tex: f64 = waves.iter().map(|(kx, ky, ph, amp)| amp * (kx * fx + ky * fy + ph).sin()).sum();
            px[x * n + y] = [0, 1, 2].map(|ch| base[ch] * shade + tex * (1.0 - 0.4 * ch as f64));
        }
    }
    // anti-aliased coverage in [0, 1]
    for reg in &regions {
        let field = match &reg.shape {
            Shape::Curve { points, half_width } => Some(curve_field(&curve_polyline(points), n, half_width + 1.0)),
            Shape::Disc { .. } => None,
        };
        for x in 0..n {
            for y in 0..n {
                let (fx, fy) = (x as f64, y as f64);
                if !cfg.in_fov(fx, fy) {
                    continue;
                }
                let d = match &field {
                    Some(f) => f[x * n + y],
                    None => ((fx - reg.center.0).powi(2) + (fy - reg.center.1).powi(2)).sqrt(),
                };
                let cov = (reg.radius + 0.5 - d).clamp(0.0, 1.0);
                if cov == 0.0 {
                    continue;
                }
                let p = &mut px[x * n + y];
                for (ch, v) in p.iter_mut().enumerate() {
                    let target = match reg.kind {
                        RegionKind::Vessel => *v * cfg.vessel_factor,
                        RegionKind::DarkLesion => *v * cfg.dark_lesion_factor,
                        RegionKind::BrightLesion => *v + cfg.bright_lift[ch],
                    };
                    *v += cov * (target - *v);
                }
            }
        }
    }
    let mut bytes = vec![0u8; n * n * 3];
    for y in 0..n {
        for x in 0..n {
            let inside = cfg.in_fov(x as f64, y as f64);
            for ch in 0..3 {
                let v = if inside { px[x * n + y][ch] + cfg.noise * rng.normal() } else { 0.0 };
                // keep the FOV above the detection threshold everywhere
                let v = if inside { v.clamp(16.0, 255.0) } else { 0.0 };
                bytes[(y * n + x) * 3 + ch] = v.round() as u8;
            }
        }
    }
    let image = RawImage::new(n, n, bytes)?;
    let label = label_rule(&regions);
    Ok(ToyScene { image, regions, label })
}

/// `count` scenes; scene `i` depends only on `(seed, i)`.
pub fn gen_toy_dataset(seed: u64, count: usize, cfg: &SceneConfig) -> Result<Vec<ToyScene>> {
    cfg.validate()?;
    (0..count as u64).into_par_iter().map(|i| gen_scene(seed, i, cfg)).collect()
}

/// Fraction of lesions whose centre lies within two radii of some vessel curve.
pub fn near_vessel_fraction(scenes: &[ToyScene]) -> f64 {
    let mut near = 0usize;
    let mut total = 0usize;
    for s in scenes {
        let lines: Vec<Vec<(f64, f64)>> = s
            .regions
            .iter()
            .filter_map(|r| match &r.shape {
                Shape::Curve { points, .. } => Some(curve_polyline(points)),
                Shape::Disc { .. } => None,
            })
            .collect();
        for r in s.regions.iter().filter(|r| r.kind.is_lesion()) {
            total += 1;
            if lines.iter().any(|l| curve_distance(l, r.center) <= 2.0 * r.radius) {
                near += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        near as f64 / total as f64
    }
}

/// Write `scene_NNNNN.ppm` + `.regions.txt` pairs and `manifest.csv`.
pub fn write_dataset(dir: &Path, scenes: &[ToyScene]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::from("index,file,label,bright,dark,vessels\n");
    for (i, s) in scenes.iter().enumerate() {
        let stem = format!("scene_{i:05}");
        s.image.write(&dir.join(format!("{stem}.ppm")))?;
        std::fs::write(dir.join(format!("{stem}.regions.txt")), s.sidecar())?;
        let k = |kind| s.regions_of(kind).count();
        let _ = writeln!(
            manifest,
            "{i},{stem}.ppm,{},{},{},{}",
            s.label,
            k(RegionKind::BrightLesion),
            k(RegionKind::DarkLesion),
            k(RegionKind::Vessel)
        );
    }
    std::fs::write(dir.join("manifest.csv"), manifest)?;
    Ok(())
}

/// Load every scene listed in `dir/manifest.csv`.
pub fn read_dataset(dir: &Path, cfg: &SceneConfig) -> Result<Vec<ToyScene>> {
    let manifest = std::fs::read_to_string(dir.join("manifest.csv"))?;
    let mut lines = manifest.lines();
    if lines.next() != Some("index,file,label,bright,dark,vessels") {
        return Err(Error::Format("unexpected manifest header".into()));
    }
    let mut out = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let file = line.split(',').nth(1).ok_or_else(|| Error::Format(format!("bad manifest row {line:?}")))?;
        let image = RawImage::read(&dir.join(file))?;
        let stem = file.trim_end_matches(".ppm");
        let text = std::fs::read_to_string(dir.join(format!("{stem}.regions.txt")))?;
        out.push(ToyScene::parse_sidecar(&text, image, cfg)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lesion(kind: RegionKind) -> Region {
        disc_region(kind, (30.0, 30.0), 2.0, &SceneConfig::default())
    }

    #[test]
    fn label_rule_cases() {
        assert_eq!(label_rule(&[]), 0);
        assert_eq!(label_rule(&[lesion(RegionKind::DarkLesion)]), 1);
        assert_eq!(label_rule(&[lesion(RegionKind::BrightLesion)]), 0);
        assert_eq!(label_rule(&[lesion(RegionKind::BrightLesion), lesion(RegionKind::BrightLesion)]), 1);
        assert_eq!(label_rule(&[lesion(RegionKind::Vessel), lesion(RegionKind::BrightLesion)]), 0);
    }

    #[test]
    fn scenes_are_seeded_and_independent() {
        let cfg = SceneConfig::default();
        let a = gen_toy_dataset(7, 6, &cfg).unwrap();
        let b = gen_toy_dataset(7, 6, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[4], gen_scene(7, 4, &cfg).unwrap());
        assert_ne!(a[0].image, gen_toy_dataset(8, 1, &cfg).unwrap()[0].image);
    }

    #[test]
    fn regions_inside_fov_and_nonempty() {
        let cfg = SceneConfig::default();
        for s in gen_toy_dataset(3, 40, &cfg).unwrap() {
            for r in &s.regions {
                assert!(!r.mask.is_empty());
                for &i in &r.mask {
                    assert!(cfg.in_fov((i / cfg.size) as f64, (i % cfg.size) as f64));
                }
            }
        }
    }

    #[test]
    fn sidecar_round_trip() {
        let cfg = SceneConfig::default();
        for s in gen_toy_dataset(5, 10, &cfg).unwrap() {
            let back = ToyScene::parse_sidecar(&s.sidecar(), s.image.clone(), &cfg).unwrap();
            assert_eq!(back, s);
        }
    }

    #[test]
    fn dataset_dir_round_trip() {
        let cfg = SceneConfig::default();
        let scenes = gen_toy_dataset(2, 4, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &scenes).unwrap();
        assert_eq!(read_dataset(dir.path(), &cfg).unwrap(), scenes);
    }
}

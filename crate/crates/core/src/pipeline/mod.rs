//! Fundus-style preprocessing and seeded data augmentation.
//!
//! Preprocessing estimates the camera's field of view (FOV), rescales so the
//! FOV is `fov_width` pixels wide, subtracts a Gaussian-blurred background
//! (`I_n = gain·(I_r − I_b)/255`, clamped to `[−1, 1]`), zeroes everything
//! outside the eroded FOV and resamples a square around the FOV to the crop
//! size. Planes are `Tensor4<f64>` with `n = 1`, in the usual index order.

mod image;

pub use image::{read_pgm, write_pgm, RawImage, MIN_SIDE};

use crate::error::{arg_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::{Dims, Tensor4};

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocConfig {
    pub fov_width: usize,
    pub sigma: f64,
    pub gain: f64,
    pub erosion: f64,
    pub crop: usize,
    /// Mean channel intensity in `[0, 1]` above which a pixel belongs to the FOV.
    pub fov_threshold: f64,
}

impl Default for PreprocConfig {
    fn default() -> Self {
        PreprocConfig { fov_width: 512, sigma: 8.5, gain: 4.0, erosion: 0.05, crop: 448, fov_threshold: 10.0 / 255.0 }
    }
}

impl PreprocConfig {
    /// Settings for 64×64 synthetic scenes with a 60 px FOV. As in the
    /// defaults, the erosion depth is about 3σ so the black surround does not
    /// leak into the kept region.
    pub fn toy() -> Self {
        PreprocConfig { fov_width: 60, sigma: 2.0, erosion: 0.1, crop: 64, ..PreprocConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.fov_width > 0
            && self.crop > 0
            && self.sigma > 0.0
            && self.gain > 0.0
            && self.erosion > 0.0
            && self.fov_threshold > 0.0;
        if !positive || !(self.erosion < 0.5) || !(self.fov_threshold < 1.0) || !self.sigma.is_finite() {
            return Err(arg_err!("invalid preprocessing config {self:?}"));
        }
        Ok(())
    }
}

/// Estimated field of view: the largest bright 8-connected component.
#[derive(Clone, Debug, PartialEq)]
pub struct Fov {
    pub width: usize,
    /// Image extent.
    pub w: usize,
    pub h: usize,
    /// Indexed `x·h + y`.
    pub mask: Vec<bool>,
    /// Inclusive bounding box `(x0, y0, x1, y1)`.
    pub bbox: (usize, usize, usize, usize),
}

impl Fov {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        self.mask[x * self.h + y]
    }

    pub fn center(&self) -> (f64, f64) {
        let (x0, y0, x1, y1) = self.bbox;
        ((x0 + x1) as f64 / 2.0, (y0 + y1) as f64 / 2.0)
    }
}

/// 8-connected components of `mask` (indexed `x·h + y`), in scan order.
pub fn components(mask: &[bool], w: usize, h: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            comp.push(i);
            let (x, y) = ((i / h) as isize, (i % h) as isize);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = nx as usize * h + ny as usize;
                    if mask[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

pub fn estimate_fov(image: &RawImage, threshold: f64) -> Result<Fov> {
    let (w, h) = (image.width(), image.height());
    let bright: Vec<bool> = (0..w * h).map(|i| image.intensity(i / h, i % h) > threshold).collect();
    // first of the largest, for determinism
    let best = components(&bright, w, h)
        .into_iter()
        .reduce(|a, b| if b.len() > a.len() { b } else { a })
        .ok_or_else(|| Error::Preprocess(format!("no pixel above the FOV threshold {threshold}")))?;
    let mut mask = vec![false; w * h];
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for &i in &best {
        mask[i] = true;
        let (x, y) = (i / h, i % h);
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    Ok(Fov { width: x1 - x0 + 1, w, h, mask, bbox: (x0, y0, x1, y1) })
}

/// Normalised Gaussian taps on `[−⌈4σ⌉, ⌈4σ⌉]`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable Gaussian blur of every channel, replicating edge pixels.
pub fn gaussian_blur(t: &Tensor4<f64>, sigma: f64) -> Tensor4<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let d = t.dims();
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut along_x = Tensor4::zeros(d);
    for n in 0..d.n {
        for x in 0..d.w {
            for y in 0..d.h {
                for c in 0..d.c {
                    let mut acc = 0.0;
                    for (j, &kv) in k.iter().enumerate() {
                        acc += kv * t.at(n, clamp(x as isize + j as isize - r, d.w), y, c);
                    }
                    along_x.set(n, x, y, c, acc);
                }
            }
        }
    }
    let mut out = Tensor4::zeros(d);
    for n in 0..d.n {
        for x in 0..d.w {
            for y in 0..d.h {
                for c in 0..d.c {
                    let mut acc = 0.0;
                    for (j, &kv) in k.iter().enumerate() {
                        acc += kv * along_x.at(n, x, clamp(y as isize + j as isize - r, d.h), c);
                    }
                    out.set(n, x, y, c, acc);
                }
            }
        }
    }
    out
}

/// Bilinear sample of image `n`, channel `c`, at `(x, y)`; zero outside.
fn bilinear(t: &Tensor4<f64>, n: usize, x: f64, y: f64, c: usize) -> f64 {
    let d = t.dims();
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let get = |xi: f64, yi: f64| {
        if xi < 0.0 || yi < 0.0 || xi >= d.w as f64 || yi >= d.h as f64 {
            0.0
        } else {
            t.at(n, xi as usize, yi as usize, c)
        }
    };
    let mut v = (1.0 - fx) * (1.0 - fy) * get(x0, y0);
    if fx != 0.0 {
        v += fx * (1.0 - fy) * get(x0 + 1.0, y0);
    }
    if fy != 0.0 {
        v += (1.0 - fx) * fy * get(x0, y0 + 1.0);
    }
    if fx != 0.0 && fy != 0.0 {
        v += fx * fy * get(x0 + 1.0, y0 + 1.0);
    }
    v
}

/// Resample by pixel centres: output `(x, y)` reads source `((x + ½)·s − ½, …)`
/// with `s = src/dst` per axis, edges clamped.
pub fn resize_bilinear(t: &Tensor4<f64>, w: usize, h: usize) -> Tensor4<f64> {
    let d = t.dims();
    let (sx, sy) = (d.w as f64 / w as f64, d.h as f64 / h as f64);
    Tensor4::from_fn(Dims::new(d.n, w, h, d.c), |n, x, y, c| {
        let u = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (d.w - 1) as f64);
        let v = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (d.h - 1) as f64);
        bilinear(t, n, u, v, c)
    })
}

/// Squared Euclidean distance from each pixel to the nearest pixel outside
/// `mask`, where everything beyond the image border counts as outside.
fn squared_distance_to_outside(mask: &[bool], w: usize, h: usize) -> Vec<f64> {
    // 1-D lower-envelope transform (Felzenszwalb–Huttenlocher) along y then x
    fn edt_1d(f: &[f64]) -> Vec<f64> {
        let n = f.len();
        let mut v = vec![0usize; n];
        let mut z = vec![0.0f64; n + 1];
        let mut k = 0usize;
        z[0] = f64::NEG_INFINITY;
        z[1] = f64::INFINITY;
        let mut started = false;
        for q in 0..n {
            if !f[q].is_finite() {
                continue;
            }
            if !started {
                v[0] = q;
                started = true;
                continue;
            }
            loop {
                let p = v[k];
                let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64);
                if s <= z[k] && k > 0 {
                    k -= 1;
                } else {
                    k += 1;
                    v[k] = q;
                    z[k] = s;
                    z[k + 1] = f64::INFINITY;
                    break;
                }
            }
        }
        if !started {
            return vec![f64::INFINITY; n];
        }
        let mut out = vec![0.0; n];
        let mut k = 0;
        for (q, o) in out.iter_mut().enumerate() {
            while z[k + 1] < q as f64 {
                k += 1;
            }
            let p = v[k];
            *o = (q as f64 - p as f64).powi(2) + f[p];
        }
        out
    }
    // pad by one outside pixel on every side
    let (pw, ph) = (w + 2, h + 2);
    let mut g = vec![0.0; pw * ph];
    for x in 0..pw {
        let col: Vec<f64> = (0..ph)
            .map(|y| {
                let inside = x >= 1 && y >= 1 && x <= w && y <= h && mask[(x - 1) * h + (y - 1)];
                if inside {
                    f64::INFINITY
                } else {
                    0.0
                }
            })
            .collect();
        g[x * ph..(x + 1) * ph].copy_from_slice(&edt_1d(&col));
    }
    let mut out = vec![0.0; w * h];
    for y in 1..=h {
        let row: Vec<f64> = (0..pw).map(|x| g[x * ph + y]).collect();
        let d = edt_1d(&row);
        for x in 1..=w {
            out[(x - 1) * h + (y - 1)] = d[x];
        }
    }
    out
}

/// Keep the mask pixels farther than `radius` from any outside pixel.
pub fn erode(mask: &[bool], w: usize, h: usize, radius: f64) -> Vec<bool> {
    squared_distance_to_outside(mask, w, h).into_iter().map(|d2| d2 > radius * radius).collect()
}

/// Output of [`preprocess_with_mask`].
#[derive(Clone, Debug)]
pub struct Preprocessed {
    /// `1×crop×crop×3`.
    pub tensor: Tensor4<f64>,
    /// Eroded FOV in output coordinates, indexed `x·crop + y`.
    pub mask: Vec<bool>,
}

pub fn preprocess(image: &RawImage, cfg: &PreprocConfig) -> Result<Tensor4<f64>> {
    Ok(preprocess_with_mask(image, cfg)?.tensor)
}

pub fn preprocess_with_mask(image: &RawImage, cfg: &PreprocConfig) -> Result<Preprocessed> {
    cfg.validate()?;
    let fov = estimate_fov(image, cfg.fov_threshold)?;
    let s = cfg.fov_width as f64 / fov.width as f64;
    let (rw, rh) = (
        ((image.width() as f64 * s).round() as usize).max(1),
        ((image.height() as f64 * s).round() as usize).max(1),
    );
    let raw = image.to_tensor::<f64>().scale(255.0);
    let ir = if (rw, rh) == (image.width(), image.height()) { raw } else { resize_bilinear(&raw, rw, rh) };
    // nearest-neighbour FOV mask at the new size
    let (sx, sy) = (image.width() as f64 / rw as f64, image.height() as f64 / rh as f64);
    let near = |v: usize, s: f64, hi: usize| (((v as f64 + 0.5) * s) as usize).min(hi - 1);
    let mask: Vec<bool> = (0..rw * rh).map(|i| fov.contains(near(i / rh, sx, fov.w), near(i % rh, sy, fov.h))).collect();
    let eroded = erode(&mask, rw, rh, cfg.erosion * cfg.fov_width as f64);

    let ib = gaussian_blur(&ir, cfg.sigma);
    let mut normalized = ir.zip_map(&ib, |r, b| (cfg.gain * (r - b) / 255.0).clamp(-1.0, 1.0))?;
    for (i, px) in normalized.data_mut().chunks_exact_mut(3).enumerate() {
        if !eroded[i] {
            px.fill(0.0);
        }
    }

    // square of side fov_width around the FOV centre, resampled to crop×crop
    let (cx, cy) = fov.center();
    let (cx, cy) = ((cx + 0.5) * s - 0.5, (cy + 0.5) * s - 0.5);
    let side = cfg.fov_width as f64;
    let k = side / cfg.crop as f64;
    let src = |o: usize, centre: f64| centre - side / 2.0 + (o as f64 + 0.5) * k;
    let crop = cfg.crop;
    let mut out_mask = vec![false; crop * crop];
    let tensor = Tensor4::from_fn(Dims::new(1, crop, crop, 3), |_, x, y, c| {
        let (u, v) = (src(x, cx), src(y, cy));
        let (ui, vi) = (u.round(), v.round());
        let inside = ui >= 0.0
            && vi >= 0.0
            && (ui as usize) < rw
            && (vi as usize) < rh
            && eroded[ui as usize * rh + vi as usize];
        if c == 0 {
            out_mask[x * crop + y] = inside;
        }
        if inside {
            bilinear(&normalized, 0, u, v, c)
        } else {
            0.0
        }
    });
    Ok(Preprocessed { tensor, mask: out_mask })
}

/// Parameter ranges for [`augment`]; each parameter is drawn uniformly.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentRanges {
    pub rotation_deg: (f64, f64),
    /// Translation in pixels, per axis.
    pub translate: (f64, f64),
    pub scale: (f64, f64),
    pub flip_probability: f64,
    pub contrast: (f64, f64),
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            rotation_deg: (0.0, 360.0),
            translate: (-10.0, 10.0),
            scale: (0.85, 1.15),
            flip_probability: 0.5,
            contrast: (0.6, 1.67),
        }
    }
}

impl AugmentRanges {
    /// Translation scaled from a 448 px crop to `crop` px.
    pub fn for_crop(crop: usize) -> Self {
        let t = 10.0 * crop as f64 / 448.0;
        AugmentRanges { translate: (-t, t), ..AugmentRanges::default() }
    }

    pub fn draw(&self, rng: &mut Rng) -> AugmentParams {
        let mut u = |(lo, hi): (f64, f64)| if lo == hi { lo } else { rng.uniform(lo, hi) };
        let rotation_deg = u(self.rotation_deg);
        let tx = u(self.translate);
        let ty = u(self.translate);
        let scale = u(self.scale);
        let contrast = u(self.contrast);
        let flip = rng.bernoulli(self.flip_probability);
        AugmentParams { rotation_deg, tx, ty, scale, flip, contrast }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub rotation_deg: f64,
    pub tx: f64,
    pub ty: f64,
    pub scale: f64,
    pub flip: bool,
    pub contrast: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams { rotation_deg: 0.0, tx: 0.0, ty: 0.0, scale: 1.0, flip: false, contrast: 1.0 }
    }
}

/// Contrast, then rotation/scale about the image centre plus translation
/// (bilinear, zero border), then horizontal flip. Every image in `t` gets the
/// same parameters.
pub fn apply_augment(t: &Tensor4<f64>, p: &AugmentParams) -> Tensor4<f64> {
    let d = t.dims();
    let contrasted = t.scale(p.contrast);
    let (sin, cos) = p.rotation_deg.to_radians().sin_cos();
    let (cx, cy) = ((d.w as f64 - 1.0) / 2.0, (d.h as f64 - 1.0) / 2.0);
    let geometric = Tensor4::from_fn(d, |n, x, y, c| {
        // inverse map: undo translation, rotation and scale
        let (ox, oy) = (x as f64 - cx - p.tx, y as f64 - cy - p.ty);
        let u = (cos * ox + sin * oy) / p.scale + cx;
        let v = (-sin * ox + cos * oy) / p.scale + cy;
        bilinear(&contrasted, n, u, v, c)
    });
    if p.flip {
        flip_horizontal(&geometric)
    } else {
        geometric
    }
}

pub fn flip_horizontal(t: &Tensor4<f64>) -> Tensor4<f64> {
    let d = t.dims();
    Tensor4::from_fn(d, |n, x, y, c| t.at(n, d.w - 1 - x, y, c))
}

/// Draw parameters from `ranges` and apply them.
pub fn augment(t: &Tensor4<f64>, rng: &mut Rng, ranges: &AugmentRanges) -> Tensor4<f64> {
    apply_augment(t, &ranges.draw(rng))
}

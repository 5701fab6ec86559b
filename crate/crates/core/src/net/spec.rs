//! Declarative network descriptions and their text format.
//!
//! ```text
//! input = 64x64x3
//! precision = f32
//! heatmap = hue
//! conv filters=8 window=4x4 stride=2 out=32x32 bias=untied
//! leaky alpha=0.33
//! maxpool window=3x3 stride=2
//! dense units=1
//! ```

use std::fmt::{self, Display, Write as _};
use std::str::FromStr;

use crate::error::{arg_err, Error, Result};
use crate::ops::BiasMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            _ => Err(arg_err!("unknown precision {s:?}")),
        }
    }
}

impl Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

/// Which input the heatmap (and the sparsity penalty) is taken with respect to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeatmapMode {
    /// Plain sensitivity: derivatives with respect to every input channel.
    Plain,
    /// Hue-constrained: a one-channel multiplicative mask `m` (all ones) is
    /// applied to the input and derivatives are taken with respect to `m`.
    Hue,
}

impl FromStr for HeatmapMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" | "sensitivity" => Ok(HeatmapMode::Plain),
            "hue" => Ok(HeatmapMode::Hue),
            _ => Err(arg_err!("unknown heatmap mode {s:?}")),
        }
    }
}

impl Display for HeatmapMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeatmapMode::Plain => "plain",
            HeatmapMode::Hue => "hue",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv {
        filters: usize,
        window: (usize, usize),
        stride: usize,
        out: Option<(usize, usize)>,
        bias: BiasMode,
    },
    Dense {
        units: usize,
    },
    LeakyRelu {
        alpha: f64,
    },
    MaxPool {
        window: (usize, usize),
        stride: usize,
        out: Option<(usize, usize)>,
    },
    MeanPool {
        window: (usize, usize),
        stride: usize,
        out: Option<(usize, usize)>,
    },
    RmsPool {
        window: (usize, usize),
        stride: usize,
        out: Option<(usize, usize)>,
    },
    Dropout {
        p: u32,
    },
    Maxout {
        p: usize,
    },
}

impl LayerSpec {
    /// Tag stored in checkpoints.
    pub fn kind_tag(&self) -> u8 {
        match self {
            LayerSpec::Conv { .. } => 1,
            LayerSpec::Dense { .. } => 2,
            LayerSpec::LeakyRelu { .. } => 3,
            LayerSpec::MaxPool { .. } => 4,
            LayerSpec::MeanPool { .. } => 5,
            LayerSpec::RmsPool { .. } => 6,
            LayerSpec::Dropout { .. } => 7,
            LayerSpec::Maxout { .. } => 8,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Dense { .. })
    }
}

/// Ordered layer list plus input extent, precision and heatmap mode.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    /// Per-image input extent `(w, h, c)`.
    pub input: (usize, usize, usize),
    pub precision: Precision,
    pub heatmap: HeatmapMode,
    pub layers: Vec<LayerSpec>,
}

fn pair(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s.split_once('x').ok_or_else(|| arg_err!("expected WxH, got {s:?}"))?;
    Ok((num(a)?, num(b)?))
}

fn num<N: FromStr>(s: &str) -> Result<N> {
    s.trim().parse().map_err(|_| arg_err!("bad number {s:?}"))
}

fn fmt_pair(p: (usize, usize)) -> String {
    format!("{}x{}", p.0, p.1)
}

impl LayerSpec {
    fn parse(line: &str) -> Result<Self> {
        let mut words = line.split_whitespace();
        let kind = words.next().ok_or_else(|| arg_err!("empty layer line"))?;
        let mut kv = std::collections::BTreeMap::new();
        for w in words {
            let (k, v) = w.split_once('=').ok_or_else(|| arg_err!("expected key=value in {line:?}"))?;
            if kv.insert(k, v).is_some() {
                return Err(arg_err!("duplicate key {k:?} in {line:?}"));
            }
        }
        let mut take = |k: &str| kv.remove(k);
        let window = |v: Option<&str>| v.ok_or_else(|| arg_err!("{kind}: missing window")).and_then(pair);
        let stride = |v: Option<&str>| v.map(num).transpose().map(|s| s.unwrap_or(1));
        let out = |v: Option<&str>| v.map(pair).transpose();
        let spec = match kind {
            "conv" => LayerSpec::Conv {
                filters: num(take("filters").ok_or_else(|| arg_err!("conv: missing filters"))?)?,
                window: window(take("window"))?,
                stride: stride(take("stride"))?,
                out: out(take("out"))?,
                bias: match take("bias").unwrap_or("untied") {
                    "tied" => BiasMode::Tied,
                    "untied" => BiasMode::Untied,
                    b => return Err(arg_err!("unknown bias mode {b:?}")),
                },
            },
            "dense" => LayerSpec::Dense {
                units: num(take("units").ok_or_else(|| arg_err!("dense: missing units"))?)?,
            },
            "leaky" => LayerSpec::LeakyRelu { alpha: take("alpha").map(num).transpose()?.unwrap_or(0.33) },
            "maxpool" | "meanpool" | "rmspool" => {
                let (window, stride, out) = (window(take("window"))?, stride(take("stride"))?, out(take("out"))?);
                match kind {
                    "maxpool" => LayerSpec::MaxPool { window, stride, out },
                    "meanpool" => LayerSpec::MeanPool { window, stride, out },
                    _ => LayerSpec::RmsPool { window, stride, out },
                }
            }
            "dropout" => LayerSpec::Dropout { p: num(take("p").ok_or_else(|| arg_err!("dropout: missing p"))?)? },
            "maxout" => LayerSpec::Maxout { p: num(take("p").ok_or_else(|| arg_err!("maxout: missing p"))?)? },
            other => return Err(arg_err!("unknown layer kind {other:?}")),
        };
        if let Some(k) = kv.keys().next() {
            return Err(arg_err!("unknown key {k:?} for {kind}"));
        }
        Ok(spec)
    }
}

impl Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pool = |f: &mut fmt::Formatter<'_>, k: &str, w, s, o: &Option<(usize, usize)>| {
            write!(f, "{k} window={} stride={s}", fmt_pair(w))?;
            if let Some(o) = o {
                write!(f, " out={}", fmt_pair(*o))?;
            }
            Ok(())
        };
        match self {
            LayerSpec::Conv { filters, window, stride, out, bias } => {
                write!(f, "conv filters={filters} window={} stride={stride}", fmt_pair(*window))?;
                if let Some(o) = out {
                    write!(f, " out={}", fmt_pair(*o))?;
                }
                let b = if *bias == BiasMode::Tied { "tied" } else { "untied" };
                write!(f, " bias={b}")
            }
            LayerSpec::Dense { units } => write!(f, "dense units={units}"),
            LayerSpec::LeakyRelu { alpha } => write!(f, "leaky alpha={alpha}"),
            LayerSpec::MaxPool { window, stride, out } => pool(f, "maxpool", *window, *stride, out),
            LayerSpec::MeanPool { window, stride, out } => pool(f, "meanpool", *window, *stride, out),
            LayerSpec::RmsPool { window, stride, out } => pool(f, "rmspool", *window, *stride, out),
            LayerSpec::Dropout { p } => write!(f, "dropout p={p}"),
            LayerSpec::Maxout { p } => write!(f, "maxout p={p}"),
        }
    }
}

impl FromStr for NetworkSpec {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut input = None;
        let mut precision = Precision::F32;
        let mut heatmap = HeatmapMode::Hue;
        let mut layers = Vec::new();
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some((k, v)) = line.split_once('=').filter(|(k, _)| !k.trim().contains(' ')) {
                match k.trim() {
                    "input" => {
                        let parts: Vec<&str> = v.trim().split('x').collect();
                        let [w, h, c] = parts[..] else {
                            return Err(arg_err!("input must be WxHxC, got {v:?}"));
                        };
                        input = Some((num(w)?, num(h)?, num(c)?));
                    }
                    "precision" => precision = v.trim().parse()?,
                    "heatmap" => heatmap = v.trim().parse()?,
                    other => return Err(arg_err!("unknown network key {other:?}")),
                }
                continue;
            }
            layers.push(LayerSpec::parse(line)?);
        }
        let input = input.ok_or_else(|| arg_err!("network spec lacks an input line"))?;
        Ok(NetworkSpec { input, precision, heatmap, layers })
    }
}

impl Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        let (w, h, c) = self.input;
        writeln!(s, "input = {w}x{h}x{c}")?;
        writeln!(s, "precision = {}", self.precision)?;
        writeln!(s, "heatmap = {}", self.heatmap)?;
        for l in &self.layers {
            writeln!(s, "{l}")?;
        }
        f.write_str(&s)
    }
}

/// Reference architectures.
pub mod presets {
    use super::*;

    fn conv(filters: usize, k: usize, stride: usize, out: usize) -> LayerSpec {
        LayerSpec::Conv { filters, window: (k, k), stride, out: Some((out, out)), bias: BiasMode::Untied }
    }

    fn maxpool(k: usize, stride: usize, out: usize) -> LayerSpec {
        LayerSpec::MaxPool { window: (k, k), stride, out: Some((out, out)) }
    }

    fn stack(rows: Vec<LayerSpec>, alpha: f64) -> Vec<LayerSpec> {
        let mut out = Vec::new();
        for l in rows {
            let is_conv = matches!(l, LayerSpec::Conv { .. });
            out.push(l);
            if is_conv {
                out.push(LayerSpec::LeakyRelu { alpha });
            }
        }
        out
    }

    fn head() -> Vec<LayerSpec> {
        vec![
            LayerSpec::Dropout { p: 2 },
            LayerSpec::Dense { units: 1024 },
            LayerSpec::Maxout { p: 2 },
            LayerSpec::Dropout { p: 2 },
            LayerSpec::Dense { units: 1024 },
            LayerSpec::Maxout { p: 2 },
            LayerSpec::Dense { units: 1 },
        ]
    }

    /// "net B": 448×448 input, 4×4 convolutions, RMS pooling, maxout head.
    pub fn net_b(alpha: f64) -> NetworkSpec {
        let rows = vec![
            conv(32, 4, 2, 224),
            conv(32, 4, 1, 225),
            maxpool(3, 2, 112),
            conv(64, 4, 2, 56),
            conv(64, 4, 1, 57),
            conv(64, 4, 1, 56),
            maxpool(3, 2, 27),
            conv(128, 4, 1, 28),
            conv(128, 4, 1, 27),
            conv(128, 4, 1, 28),
            maxpool(3, 2, 13),
            conv(256, 4, 1, 14),
            conv(256, 4, 1, 13),
            conv(256, 4, 1, 14),
            maxpool(3, 2, 6),
            conv(512, 4, 1, 5),
            LayerSpec::RmsPool { window: (3, 3), stride: 2, out: Some((2, 2)) },
        ];
        let mut layers = stack(rows, alpha);
        layers.extend(head());
        NetworkSpec { input: (448, 448, 3), precision: Precision::F32, heatmap: HeatmapMode::Hue, layers }
    }

    /// "net A": 448×448 input, 3×3 convolutions.
    pub fn net_a(alpha: f64) -> NetworkSpec {
        let rows = vec![
            conv(32, 5, 2, 224),
            conv(32, 3, 1, 224),
            maxpool(3, 2, 111),
            conv(64, 3, 2, 56),
            conv(64, 3, 1, 56),
            conv(64, 3, 1, 56),
            maxpool(3, 2, 27),
            conv(128, 3, 1, 27),
            conv(128, 3, 1, 27),
            conv(128, 3, 1, 27),
            maxpool(3, 2, 13),
            conv(256, 3, 1, 13),
            conv(256, 3, 1, 13),
            conv(256, 3, 1, 13),
            maxpool(3, 2, 6),
            conv(512, 3, 1, 6),
            conv(512, 3, 1, 6),
            LayerSpec::RmsPool { window: (3, 3), stride: 3, out: Some((2, 2)) },
        ];
        let mut layers = stack(rows, alpha);
        layers.extend(head());
        NetworkSpec { input: (448, 448, 3), precision: Precision::F32, heatmap: HeatmapMode::Hue, layers }
    }

    /// Desk-scale reference net for 64×64 toy scenes. Piecewise linear, so
    /// its forward-second gradients are exact derivatives of the L1 penalty
    /// with the top gradient held fixed.
    pub fn toy(alpha: f64) -> NetworkSpec {
        let rows = vec![
            conv(8, 4, 2, 32),
            maxpool(3, 2, 15),
            conv(16, 3, 1, 15),
            maxpool(3, 2, 7),
            conv(16, 3, 1, 7),
            LayerSpec::MeanPool { window: (3, 3), stride: 2, out: Some((3, 3)) },
        ];
        let mut layers = stack(rows, alpha);
        layers.push(LayerSpec::Dense { units: 1 });
        NetworkSpec { input: (64, 64, 3), precision: Precision::F32, heatmap: HeatmapMode::Hue, layers }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        for spec in [presets::net_b(0.33), presets::toy(0.1)] {
            let text = spec.to_string();
            let back: NetworkSpec = text.parse().unwrap();
            assert_eq!(back, spec);
        }
    }

    #[test]
    fn parse_errors() {
        assert!("conv filters=2 window=3x3".parse::<NetworkSpec>().is_err());
        assert!("input = 8x8x3\nconv window=3x3".parse::<NetworkSpec>().is_err());
        assert!("input = 8x8x3\nconv filters=2 window=3x3 colour=red".parse::<NetworkSpec>().is_err());
        assert!("input = 8x8x3\nwarp speed=9".parse::<NetworkSpec>().is_err());
        let s: NetworkSpec = "input = 8x8x3 # comment\nleaky\ndense units=1\n".parse().unwrap();
        assert_eq!(s.layers, vec![LayerSpec::LeakyRelu { alpha: 0.33 }, LayerSpec::Dense { units: 1 }]);
    }
}

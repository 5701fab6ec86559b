//! `key = value` run configuration shared by every subcommand.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use gradmine::eval::{EvalConfig, SceneConfig};
use gradmine::net::{presets, Network, NetworkSpec, Precision, TrainConfig};
use gradmine::pipeline::PreprocConfig;

use crate::CliError;

/// Every setting a command may read. Paths left empty are unset.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// `toy`, `net-a`, `net-b`, or a path to a network spec file.
    pub net: String,
    /// Leaky-rectifier slope of the preset networks.
    pub alpha: f64,
    pub precision: Precision,
    pub train: TrainConfig,
    pub eval_every: u64,
    pub augment: bool,
    pub preproc: PreprocConfig,
    pub scene: SceneConfig,
    pub count: usize,
    pub eval: EvalConfig,
    pub data: PathBuf,
    pub val_data: PathBuf,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            net: "toy".into(),
            alpha: 0.33,
            precision: Precision::F64,
            train: TrainConfig { lr: 1e-3, iterations: 2000, checkpoint_every: 500, ..TrainConfig::default() },
            eval_every: 100,
            augment: true,
            preproc: PreprocConfig::toy(),
            scene: SceneConfig::default(),
            count: 2000,
            eval: EvalConfig::default(),
            data: PathBuf::new(),
            val_data: PathBuf::new(),
            out: PathBuf::new(),
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse().map_err(|_| CliError::Usage(format!("{key}: cannot parse {v:?}")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>, CliError> {
    v.split(',').map(|s| num(key, s.trim())).collect()
}

fn pair<T: FromStr + Copy>(key: &str, v: &str) -> Result<(T, T), CliError> {
    match list(key, v)?.as_slice() {
        &[a, b] => Ok((a, b)),
        _ => Err(CliError::Usage(format!("{key}: expected two comma-separated values, got {v:?}"))),
    }
}

fn boolean(key: &str, v: &str) -> Result<bool, CliError> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Usage(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn schedule(key: &str, v: &str) -> Result<Vec<(u64, f64)>, CliError> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|item| {
            let (it, lr) = item
                .split_once(':')
                .ok_or_else(|| CliError::Usage(format!("{key}: expected iteration:lr, got {item:?}")))?;
            Ok((num(key, it.trim())?, num(key, lr.trim())?))
        })
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Set one key; unknown keys and unparsable values are errors.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), CliError> {
        let v = v.trim();
        let t = &mut self.train;
        let p = &mut self.preproc;
        let s = &mut self.scene;
        match key {
            "seed" => self.seed = num(key, v)?,
            "net" => self.net = v.into(),
            "alpha" => self.alpha = num(key, v)?,
            "precision" => self.precision = v.parse().map_err(|e| CliError::Usage(format!("{key}: {e}")))?,
            "nu" => t.nu = num(key, v)?,
            "lr" => t.lr = num(key, v)?,
            "lr_schedule" => t.lr_schedule = schedule(key, v)?,
            "l2" => t.l2 = num(key, v)?,
            "batch" => t.batch = num(key, v)?,
            "dropout_p" => t.dropout_p = num(key, v)?,
            "iterations" => t.iterations = num(key, v)?,
            "checkpoint_every" => t.checkpoint_every = num(key, v)?,
            "beta1" => t.beta1 = num(key, v)?,
            "beta2" => t.beta2 = num(key, v)?,
            "eps" => t.eps = num(key, v)?,
            "eval_every" => self.eval_every = num(key, v)?,
            "augment" => self.augment = boolean(key, v)?,
            "preproc.fov_width" => p.fov_width = num(key, v)?,
            "preproc.sigma" => p.sigma = num(key, v)?,
            "preproc.gain" => p.gain = num(key, v)?,
            "preproc.erosion" => p.erosion = num(key, v)?,
            "preproc.crop" => p.crop = num(key, v)?,
            "preproc.fov_threshold" => p.fov_threshold = num(key, v)?,
            "scene.count" => self.count = num(key, v)?,
            "scene.size" => s.size = num(key, v)?,
            "scene.fov_radius" => s.fov_radius = num(key, v)?,
            "scene.p_dark" => s.p_dark = num(key, v)?,
            "scene.p_bright" => s.p_bright = num(key, v)?,
            "scene.max_lesions" => s.max_lesions = num(key, v)?,
            "scene.curves" => s.curves = pair(key, v)?,
            "scene.lesion_radius" => s.lesion_radius = pair(key, v)?,
            "scene.vessel_half_width" => s.vessel_half_width = pair(key, v)?,
            "scene.near_vessel" => s.near_vessel = num(key, v)?,
            "scene.dark_lesion_factor" => s.dark_lesion_factor = num(key, v)?,
            "scene.vessel_factor" => s.vessel_factor = num(key, v)?,
            "scene.bright_lift" => {
                s.bright_lift = list::<f64>(key, v)?
                    .try_into()
                    .map_err(|_| CliError::Usage(format!("{key}: expected three values")))?
            }
            "scene.noise" => s.noise = num(key, v)?,
            "eval.mu" => self.eval.mu = num(key, v)?,
            "eval.detection_quantile" => self.eval.detection_quantile = num(key, v)?,
            "data" => self.data = v.into(),
            "val_data" => self.val_data = v.into(),
            "out" => self.out = v.into(),
            _ => return Err(CliError::Usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Apply a `key = value` file; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Apply `KEY=VALUE` overrides.
    pub fn apply_overrides(&mut self, items: &[String]) -> Result<(), CliError> {
        for item in items {
            let (k, v) =
                item.split_once('=').ok_or_else(|| CliError::Usage(format!("expected KEY=VALUE, got {item:?}")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let p = &self.preproc;
        let s = &self.scene;
        let path = |p: &Path| p.display().to_string();
        vec![
            ("seed", self.seed.to_string()),
            ("net", self.net.clone()),
            ("alpha", self.alpha.to_string()),
            ("precision", self.precision.to_string()),
            ("nu", t.nu.to_string()),
            ("lr", t.lr.to_string()),
            ("lr_schedule", t.lr_schedule.iter().map(|(i, l)| format!("{i}:{l}")).collect::<Vec<_>>().join(",")),
            ("l2", t.l2.to_string()),
            ("batch", t.batch.to_string()),
            ("dropout_p", t.dropout_p.to_string()),
            ("iterations", t.iterations.to_string()),
            ("checkpoint_every", t.checkpoint_every.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("eps", t.eps.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("augment", self.augment.to_string()),
            ("preproc.fov_width", p.fov_width.to_string()),
            ("preproc.sigma", p.sigma.to_string()),
            ("preproc.gain", p.gain.to_string()),
            ("preproc.erosion", p.erosion.to_string()),
            ("preproc.crop", p.crop.to_string()),
            ("preproc.fov_threshold", p.fov_threshold.to_string()),
            ("scene.count", self.count.to_string()),
            ("scene.size", s.size.to_string()),
            ("scene.fov_radius", s.fov_radius.to_string()),
            ("scene.p_dark", s.p_dark.to_string()),
            ("scene.p_bright", s.p_bright.to_string()),
            ("scene.max_lesions", s.max_lesions.to_string()),
            ("scene.curves", format!("{},{}", s.curves.0, s.curves.1)),
            ("scene.lesion_radius", format!("{},{}", s.lesion_radius.0, s.lesion_radius.1)),
            ("scene.vessel_half_width", format!("{},{}", s.vessel_half_width.0, s.vessel_half_width.1)),
            ("scene.near_vessel", s.near_vessel.to_string()),
            ("scene.dark_lesion_factor", s.dark_lesion_factor.to_string()),
            ("scene.vessel_factor", s.vessel_factor.to_string()),
            ("scene.bright_lift", join(&s.bright_lift)),
            ("scene.noise", s.noise.to_string()),
            ("eval.mu", self.eval.mu.to_string()),
            ("eval.detection_quantile", self.eval.detection_quantile.to_string()),
            ("data", path(&self.data)),
            ("val_data", path(&self.val_data)),
            ("out", path(&self.out)),
        ]
    }

    /// The resolved config as a loadable file. Path keys are left out when
    /// `with_paths` is false so run directories do not depend on where they live.
    pub fn render(&self, with_paths: bool) -> String {
        self.entries()
            .into_iter()
            .filter(|(k, _)| with_paths || !matches!(*k, "data" | "val_data" | "out"))
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// The network spec named by `net`, with `precision` applied.
    pub fn network_spec(&self) -> anyhow::Result<NetworkSpec> {
        let mut spec = match self.net.as_str() {
            "toy" => presets::toy(self.alpha),
            "net-a" => presets::net_a(self.alpha),
            "net-b" => presets::net_b(self.alpha),
            path => {
                let text = std::fs::read_to_string(path).map_err(|e| anyhow::Error::new(e).context(format!("reading {path}")))?;
                text.parse()?
            }
        };
        spec.precision = self.precision;
        Ok(spec)
    }

    /// Build the network and check it accepts preprocessed crops.
    pub fn network(&self) -> anyhow::Result<Network> {
        let net = Network::build(&self.network_spec()?)?;
        let d = net.input_dims(1);
        if (d.w, d.h, d.c) != (self.preproc.crop, self.preproc.crop, 3) {
            return Err(CliError::Usage(format!(
                "network input {}x{}x{} does not match preprocessed crops {c}x{c}x3",
                d.w,
                d.h,
                d.c,
                c = self.preproc.crop
            ))
            .into());
        }
        Ok(net)
    }

    pub fn require(&self, key: &str, p: &Path) -> Result<PathBuf, CliError> {
        if p.as_os_str().is_empty() {
            return Err(CliError::Usage(format!("{key} is not set")));
        }
        Ok(p.to_path_buf())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_round_trips() {
        let mut c = RunConfig::default();
        c.apply_text("nu = 1e-3\nlr_schedule = 100:0.0005,200:0.0001 # decay\nscene.curves = 2,3\nout = /tmp/x\n").unwrap();
        let mut d = RunConfig::default();
        d.apply_text(&c.render(true)).unwrap();
        assert_eq!(c, d);
        assert_eq!(c.train.lr_schedule, vec![(100, 0.0005), (200, 0.0001)]);
        assert!(!c.render(false).contains("out ="));
    }

    #[test]
    fn unknown_and_malformed_keys_fail() {
        let mut c = RunConfig::default();
        assert!(c.apply_text("learning_rate = 1").is_err());
        assert!(c.apply_text("nu 3").is_err());
        assert!(c.set("batch", "-1").is_err());
        assert!(c.set("scene.bright_lift", "1,2").is_err());
        assert!(c.apply_overrides(&["seed=9".into()]).is_ok());
        assert_eq!(c.seed, 9);
    }
}

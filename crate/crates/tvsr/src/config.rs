//! `key=value` configuration with `#` comments, layered as
//! defaults < config file < command-line flags.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use tvsr_core::model::{TvsrnConfig, Variant};
use tvsr_core::synth::{Acquisition, PhantomSpec};
use tvsr_core::train::TrainConfig;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct Key {
    pub name: &'static str,
    /// Empty means no default: the key must come from a file or a flag.
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key { name, default, help }
}

pub const COMMON_KEYS: &[Key] = &[
    key("seed", "0", "random seed"),
    key("threads", "1", "worker threads; 1 is bit-deterministic"),
    key("log_level", "info", "error, warn, info, debug or trace"),
];

pub const MODEL_KEYS: &[Key] = &[
    key("variant", "full", "full, no_tab or encoder_only"),
    key("channels", "8", "embedding channels (encoder_only defaults to 32)"),
    key("n_enc", "4", "encoder layers (encoder_only defaults to 8)"),
    key("m_fim", "1", "feature interaction modules"),
    key("scale", "5", "through-plane upsampling factor"),
    key("depth", "4", "thick slices per model input"),
    key("window_xy", "8", "in-plane attention window"),
    key("window_z", "4", "through-plane attention window"),
    key("mlp_ratio", "4", "hidden width multiplier of the layer MLPs"),
    key("head_channels", "16", "channels per attention head"),
];

pub const TRAIN_KEYS: &[Key] = &[
    key("lr", "0.0001", "Adam learning rate"),
    key("batch", "1", "cubes per step (gradients averaged)"),
    key("steps", "1000", "total optimizer steps"),
    key("cube", "4,64,64", "thick cube D,H,W"),
    key("beta1", "0.9", "Adam first-moment decay"),
    key("beta2", "0.999", "Adam second-moment decay"),
    key("eps", "0.00000001", "Adam epsilon"),
    key("random_crop", "true", "uniform random crop origin"),
    key("hflip", "true", "random joint width mirror"),
    key("checkpoint_every", "0", "checkpoint interval in steps, 0 for final only"),
];

pub const PHANTOM_KEYS: &[Key] = &[
    key("dims", "41,64,64", "thin phantom D,H,W"),
    key("primitives", "12", "shapes per phantom"),
    key("blur_sigma", "1.5", "phantom smoothing in voxels"),
    key("spacing_xy", "0.7", "in-plane spacing in mm"),
    key("z_blur", "1", "through-plane blur of the simulated acquisition, voxels"),
    key("noise_hu", "20", "noise of the simulated acquisition, HU"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Default,
    File,
    Flag,
}

/// Effective settings of one command.
#[derive(Clone, Debug)]
pub struct Settings {
    keys: Vec<Key>,
    values: BTreeMap<&'static str, (String, Source)>,
}

/// Parses `key=value` lines. Blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("{origin}:{}: expected key=value, got {line:?}", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_tuple3<T: FromStr>(s: &str) -> Option<(T, T, T)> {
    let parts: Vec<T> = s.split(',').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
    match parts[..] {
        [_, _, _] => {
            let mut it = parts.into_iter();
            Some((it.next()?, it.next()?, it.next()?))
        }
        _ => None,
    }
}

pub fn parse_pair<T: FromStr>(s: &str) -> Option<(T, T)> {
    let (a, b) = s.split_once(',')?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

pub fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

impl Settings {
    pub fn new(groups: &[&[Key]]) -> Self {
        let keys: Vec<Key> = groups.iter().flat_map(|g| g.iter().copied()).collect();
        let values = keys
            .iter()
            .filter(|k| !k.default.is_empty())
            .map(|k| (k.name, (k.default.to_string(), Source::Default)))
            .collect();
        Self { keys, values }
    }

    pub fn keys(&self) -> &[Key] {
        &self.keys
    }

    pub fn set(&mut self, name: &str, value: impl Into<String>, source: Source) -> Result<()> {
        let key = self
            .keys
            .iter()
            .find(|k| k.name == name)
            .ok_or_else(|| Error::Usage(format!("unknown config key {name:?}")))?;
        self.values.insert(key.name, (value.into(), source));
        Ok(())
    }

    /// Applies a config file; unknown keys are rejected.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("cannot read config file {}: {e}", path.display())))?;
        for (k, v) in parse_kv(&text, &path.display().to_string())? {
            self.set(&k, v, Source::File)
                .map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?;
        }
        Ok(())
    }

    pub fn source(&self, name: &str) -> Option<Source> {
        self.values.get(name).map(|(_, s)| *s)
    }

    pub fn is_explicit(&self, name: &str) -> bool {
        matches!(self.source(name), Some(Source::File | Source::Flag))
    }

    pub fn raw(&self, name: &str) -> Option<&str> {
        self.values.get(name).map(|(v, _)| v.as_str())
    }

    pub fn str(&self, name: &str) -> Result<&str> {
        self.raw(name).ok_or_else(|| Error::Usage(format!("missing required setting --{}", name.replace('_', "-"))))
    }

    fn parsed<T>(&self, name: &str, what: &str, f: impl FnOnce(&str) -> Option<T>) -> Result<T> {
        let raw = self.str(name)?;
        f(raw).ok_or_else(|| Error::Usage(format!("{name}: cannot parse {raw:?} as {what}")))
    }

    pub fn get<T: FromStr>(&self, name: &str) -> Result<T> {
        self.parsed(name, std::any::type_name::<T>(), |s| s.parse().ok())
    }

    pub fn bool(&self, name: &str) -> Result<bool> {
        self.parsed(name, "a boolean", parse_bool)
    }

    pub fn triple<T: FromStr>(&self, name: &str) -> Result<(T, T, T)> {
        self.parsed(name, "a D,H,W triple", parse_tuple3)
    }

    pub fn pair<T: FromStr>(&self, name: &str) -> Result<(T, T)> {
        self.parsed(name, "an a,b pair", parse_pair)
    }

    /// One `key=value` line per set key, in declaration order.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for k in &self.keys {
            if let Some((v, _)) = self.values.get(k.name) {
                out.push_str(&format!("{}={}\n", k.name, v));
            }
        }
        out
    }

    pub fn model_config(&self) -> Result<TvsrnConfig> {
        let variant = self.parsed("variant", "a model variant", Variant::parse)?;
        let mut cfg = TvsrnConfig::for_variant(variant);
        if self.is_explicit("channels") || variant != Variant::EncoderOnly {
            cfg.channels = self.get("channels")?;
        }
        if self.is_explicit("n_enc") || variant != Variant::EncoderOnly {
            cfg.n_enc = self.get("n_enc")?;
        }
        cfg.m_fim = self.get("m_fim")?;
        cfg.scale = self.get("scale")?;
        cfg.depth = self.get("depth")?;
        cfg.window_xy = self.get("window_xy")?;
        cfg.window_z = self.get("window_z")?;
        cfg.mlp_ratio = self.get("mlp_ratio")?;
        cfg.head_channels = self.get("head_channels")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            lr: self.get("lr")?,
            batch: self.get("batch")?,
            steps: self.get("steps")?,
            seed: self.get("seed")?,
            cube: self.triple("cube")?,
            beta1: self.get("beta1")?,
            beta2: self.get("beta2")?,
            eps: self.get("eps")?,
            random_crop: self.bool("random_crop")?,
            hflip: self.bool("hflip")?,
            checkpoint_every: self.get("checkpoint_every")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn phantom(&self) -> Result<(PhantomSpec, Acquisition)> {
        let spec = PhantomSpec {
            dims: self.triple("dims")?,
            seed: self.get("seed")?,
            primitives: self.get("primitives")?,
            blur_sigma: self.get("blur_sigma")?,
            spacing_xy: self.get("spacing_xy")?,
            ..PhantomSpec::default()
        };
        let acq = Acquisition { z_blur: self.get("z_blur")?, noise_hu: self.get("noise_hu")? };
        Ok((spec, acq))
    }
}

fn line(out: &mut String, k: &str, v: impl Display) {
    out.push_str(&format!("{k}={v}\n"));
}

/// Model settings as `key=value` text, readable by [`model_from_kv`].
pub fn model_to_kv(cfg: &TvsrnConfig) -> String {
    let mut s = String::new();
    line(&mut s, "variant", cfg.variant.name());
    line(&mut s, "channels", cfg.channels);
    line(&mut s, "n_enc", cfg.n_enc);
    line(&mut s, "m_fim", cfg.m_fim);
    line(&mut s, "scale", cfg.scale);
    line(&mut s, "depth", cfg.depth);
    line(&mut s, "window_xy", cfg.window_xy);
    line(&mut s, "window_z", cfg.window_z);
    line(&mut s, "mlp_ratio", cfg.mlp_ratio);
    line(&mut s, "head_channels", cfg.head_channels);
    s
}

pub fn train_to_kv(cfg: &TrainConfig) -> String {
    let mut s = String::new();
    line(&mut s, "lr", cfg.lr);
    line(&mut s, "batch", cfg.batch);
    line(&mut s, "steps", cfg.steps);
    line(&mut s, "seed", cfg.seed);
    line(&mut s, "cube", format!("{},{},{}", cfg.cube.0, cfg.cube.1, cfg.cube.2));
    line(&mut s, "beta1", cfg.beta1);
    line(&mut s, "beta2", cfg.beta2);
    line(&mut s, "eps", cfg.eps);
    line(&mut s, "random_crop", cfg.random_crop);
    line(&mut s, "hflip", cfg.hflip);
    line(&mut s, "checkpoint_every", cfg.checkpoint_every);
    s
}

/// Reads settings text over the model and training keys, plus any `extra`
/// keys the caller accepts.
pub fn settings_from_kv(text: &str, origin: &str, extra: &'static [Key]) -> Result<Settings> {
    let mut s = Settings::new(&[MODEL_KEYS, TRAIN_KEYS, &COMMON_KEYS[..1], extra]);
    for (k, v) in parse_kv(text, origin)? {
        s.set(&k, v, Source::File)?;
    }
    Ok(s)
}

pub fn model_from_kv(text: &str) -> Result<TvsrnConfig> {
    settings_from_kv(text, "model", &[])?.model_config()
}

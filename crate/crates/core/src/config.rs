//! Plain-text run configuration: one `key = value` per line, `#` comments.
//!
//! Keys are grouped by prefix (`network.`, `training.`, `sampler.`,
//! `consensus.`, `phantom.`) plus a few top-level ones. Every key has a
//! default; [`RunConfig::to_text`] lists them all. Unknown keys are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::consensus::ConsensusConfig;
use crate::error::{Error, Result};
use crate::nn::NetworkConfig;
use crate::phantom::PhantomConfig;
use crate::sampler::SamplerConfig;
use crate::training::TrainingConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub training: TrainingConfig,
    pub sampler: SamplerConfig,
    pub consensus: ConsensusConfig,
    pub phantom: PhantomConfig,
    pub data_dir: Option<PathBuf>,
    pub models_dir: Option<PathBuf>,
    /// Archive holding VGG11 convolution weights for encoder transfer.
    pub vgg_weights: Option<PathBuf>,
    pub vgg_transfer: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            network: NetworkConfig::default(),
            training: TrainingConfig::default(),
            sampler: SamplerConfig::default(),
            consensus: ConsensusConfig::default(),
            phantom: PhantomConfig::default(),
            data_dir: None,
            models_dir: None,
            vgg_weights: None,
            vgg_transfer: false,
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid value `{value}` for `{key}`"))),
    }
}

fn parse_list<T: FromStr, const N: usize>(key: &str, value: &str) -> Result<[T; N]> {
    let items = value
        .split(',')
        .map(|s| parse::<T>(key, s.trim()))
        .collect::<Result<Vec<_>>>()?;
    items
        .try_into()
        .map_err(|_| Error::Config(format!("`{key}` needs {N} comma-separated values")))
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one key. The single `seed` key reseeds every component.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let n = &mut self.network;
        let t = &mut self.training;
        let s = &mut self.sampler;
        let c = &mut self.consensus;
        let p = &mut self.phantom;
        match key {
            "seed" => {
                let seed: u64 = parse(key, v)?;
                self.seed = seed;
                t.seed = seed;
                s.seed = seed;
                p.seed = seed;
            }
            "data_dir" => self.data_dir = parse_path(v),
            "models_dir" => self.models_dir = parse_path(v),
            "vgg_weights" => self.vgg_weights = parse_path(v),
            "vgg_transfer" => self.vgg_transfer = parse_bool(key, v)?,

            "network.base_width" => n.base_width = parse(key, v)?,
            "network.depth" => n.depth = parse(key, v)?,
            "network.use_residual" => n.use_residual = parse_bool(key, v)?,
            "network.use_batchnorm" => n.use_batchnorm = parse_bool(key, v)?,
            "network.e2d" => {
                n.e2d = parse_bool(key, v)?;
                n.in_channels = if n.e2d { 3 } else { 1 };
                s.e2d = n.e2d;
            }

            "training.momentum" => t.momentum = parse(key, v)?,
            "training.lr0" => t.lr0 = parse(key, v)?,
            "training.epochs" => t.epochs = parse(key, v)?,
            "training.decay_epoch" => t.decay_epoch = parse(key, v)?,
            "training.decay_factor" => t.decay_factor = parse(key, v)?,
            "training.batch_size" => t.batch_size = parse(key, v)?,
            "training.loss" => t.loss = parse(key, v)?,
            "training.smooth" => t.smooth = parse(key, v)?,
            "training.max_steps_per_epoch" => t.max_steps_per_epoch = parse(key, v)?,
            "training.val_crop_size" => t.val_crop_size = parse(key, v)?,
            "training.val_batch_size" => t.val_batch_size = parse(key, v)?,
            "training.workers" => t.workers = parse(key, v)?,

            "sampler.patch_size" => s.patch_size = parse(key, v)?,
            "sampler.p_random_position" => s.p_random_position = parse(key, v)?,
            "sampler.p_hflip" => s.p_hflip = parse(key, v)?,
            "sampler.brightness_range" => s.brightness_range = parse(key, v)?,
            "sampler.p_noise" => s.p_noise = parse(key, v)?,
            "sampler.noise_variance" => s.noise_variance = parse(key, v)?,
            "sampler.noise_mean" => s.noise_mean = parse(key, v)?,

            "consensus.weights" => c.weights = parse_list(key, v)?,
            "consensus.threshold" => c.threshold = parse(key, v)?,
            "consensus.connectivity" => c.connectivity = parse(key, v)?,
            "consensus.keep_components" => c.keep_components = parse(key, v)?,
            "consensus.crop_size" => c.crop_size = parse(key, v)?,
            "consensus.batch_size" => c.batch_size = parse(key, v)?,

            "phantom.dims" => {
                let [x, y, z] = parse_list::<usize, 3>(key, v)?;
                p.dims = (x, y, z);
            }
            "phantom.semi_axes" => p.semi_axes = parse_list(key, v)?,
            "phantom.semi_axis_jitter" => p.semi_axis_jitter = parse(key, v)?,
            "phantom.lateral_offset" => p.lateral_offset = parse(key, v)?,
            "phantom.center_jitter" => p.center_jitter = parse(key, v)?,
            "phantom.background_intensity" => p.background_intensity = parse(key, v)?,
            "phantom.target_intensity" => p.target_intensity = parse(key, v)?,
            "phantom.distractor_intensities" => {
                p.distractor_intensities = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "phantom.distractor_count" => p.distractor_count = parse(key, v)?,
            "phantom.distractor_radius" => {
                let [lo, hi] = parse_list::<f64, 2>(key, v)?;
                p.distractor_radius = (lo, hi);
            }
            "phantom.noise_std" => p.noise_std = parse(key, v)?,
            "phantom.raw_scale" => p.raw_scale = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    /// Checks every component's invariants.
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.training.validate()?;
        self.sampler.validate()?;
        self.consensus.validate()?;
        if self.sampler.e2d != self.network.e2d {
            return Err(Error::Config("sampler.e2d and network.e2d disagree".into()));
        }
        Ok(())
    }

    /// Every key with its current value, in a form [`RunConfig::parse`] accepts.
    pub fn to_text(&self) -> String {
        let (n, t, s, c, p) = (&self.network, &self.training, &self.sampler, &self.consensus, &self.phantom);
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("data_dir", show_path(&self.data_dir));
        kv("models_dir", show_path(&self.models_dir));
        kv("vgg_weights", show_path(&self.vgg_weights));
        kv("vgg_transfer", self.vgg_transfer.to_string());
        kv("network.base_width", n.base_width.to_string());
        kv("network.depth", n.depth.to_string());
        kv("network.use_residual", n.use_residual.to_string());
        kv("network.use_batchnorm", n.use_batchnorm.to_string());
        kv("network.e2d", n.e2d.to_string());
        kv("training.momentum", t.momentum.to_string());
        kv("training.lr0", t.lr0.to_string());
        kv("training.epochs", t.epochs.to_string());
        kv("training.decay_epoch", t.decay_epoch.to_string());
        kv("training.decay_factor", t.decay_factor.to_string());
        kv("training.batch_size", t.batch_size.to_string());
        kv("training.loss", t.loss.to_string());
        kv("training.smooth", t.smooth.to_string());
        kv("training.max_steps_per_epoch", t.max_steps_per_epoch.to_string());
        kv("training.val_crop_size", t.val_crop_size.to_string());
        kv("training.val_batch_size", t.val_batch_size.to_string());
        kv("training.workers", t.workers.to_string());
        kv("sampler.patch_size", s.patch_size.to_string());
        kv("sampler.p_random_position", s.p_random_position.to_string());
        kv("sampler.p_hflip", s.p_hflip.to_string());
        kv("sampler.brightness_range", s.brightness_range.to_string());
        kv("sampler.p_noise", s.p_noise.to_string());
        kv("sampler.noise_variance", s.noise_variance.to_string());
        kv("sampler.noise_mean", s.noise_mean.to_string());
        kv("consensus.weights", join(&c.weights));
        kv("consensus.threshold", c.threshold.to_string());
        kv("consensus.connectivity", c.connectivity.to_string());
        kv("consensus.keep_components", c.keep_components.to_string());
        kv("consensus.crop_size", c.crop_size.to_string());
        kv("consensus.batch_size", c.batch_size.to_string());
        kv("phantom.dims", join(&[p.dims.0, p.dims.1, p.dims.2]));
        kv("phantom.semi_axes", join(&p.semi_axes));
        kv("phantom.semi_axis_jitter", p.semi_axis_jitter.to_string());
        kv("phantom.lateral_offset", p.lateral_offset.to_string());
        kv("phantom.center_jitter", p.center_jitter.to_string());
        kv("phantom.background_intensity", p.background_intensity.to_string());
        kv("phantom.target_intensity", p.target_intensity.to_string());
        kv("phantom.distractor_intensities", join(&p.distractor_intensities));
        kv("phantom.distractor_count", p.distractor_count.to_string());
        kv("phantom.distractor_radius", join(&[p.distractor_radius.0, p.distractor_radius.1]));
        kv("phantom.noise_std", p.noise_std.to_string());
        kv("phantom.raw_scale", p.raw_scale.to_string());
        out
    }
}

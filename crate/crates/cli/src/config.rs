//! Run configuration shared by every verb.
//!
//! Values are resolved from three layers, later layers winning: a
//! `key=value` config file, the `FTVSR_SEED` environment variable, and
//! command-line flags. The resolved configuration is validated as a whole
//! before any work starts and is echoed to `config.txt` in the output
//! directory, where it can be passed back with `--config`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ftvsr::degradation::DegradationSpec;
use ftvsr::kv::KvFile;
use ftvsr::metrics::ChannelMode;
use ftvsr::model::{Augment, ModelConfig};

pub const SEED_ENV: &str = "FTVSR_SEED";
pub const ECHO_FILE: &str = "config.txt";

const MODEL_KEYS: &[&str] = &[
    "scale",
    "block",
    "cells",
    "channels",
    "dim",
    "heads",
    "hidden_channels",
    "phi_width",
    "scheme",
    "attention",
];
const DEGRADATION_KEYS: &[&str] = &[
    "kernel",
    "kernel_sigma",
    "kernel_size",
    "noise_sigma",
    "compression",
    "q",
    "compression_block",
];
const RUN_KEYS: &[&str] = &[
    "seed",
    "base_lr",
    "final_lr",
    "total_steps",
    "batch",
    "augment",
    "checkpoint_every",
    "jobs",
    "channel_mode",
    "band_lo",
    "band_hi",
];
const PATH_KEYS: &[&str] = &["input", "output", "checkpoint", "lr", "hr", "sr", "reference"];

/// Every key a config file or flag may set.
pub fn known_keys() -> impl Iterator<Item = &'static str> {
    MODEL_KEYS.iter().chain(DEGRADATION_KEYS).chain(RUN_KEYS).chain(PATH_KEYS).copied()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Paths {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub lr: Option<PathBuf>,
    pub hr: Option<PathBuf>,
    pub sr: Option<PathBuf>,
    pub reference: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    /// Shares `scale` with the model.
    pub degradation: DegradationSpec,
    pub base_lr: f64,
    pub final_lr: f64,
    pub total_steps: u64,
    /// Clips per training step.
    pub batch: usize,
    pub augment: Augment,
    pub checkpoint_every: u64,
    pub jobs: usize,
    pub channel_mode: ChannelMode,
    pub band_lo: usize,
    /// Defaults to the last band of the block size.
    pub band_hi: Option<usize>,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        RunConfig {
            seed: 0,
            degradation: DegradationSpec::bi(model.scale),
            model,
            base_lr: 2e-4,
            final_lr: 1e-6,
            total_steps: 1000,
            batch: 1,
            augment: Augment::None,
            checkpoint_every: 100,
            jobs: 1,
            channel_mode: ChannelMode::Rgb,
            band_lo: 0,
            band_hi: None,
            paths: Paths::default(),
        }
    }
}

fn set<T: std::str::FromStr>(kv: &KvFile, key: &str, slot: &mut T) -> Result<()> {
    if let Some(raw) = kv.get(key) {
        *slot = raw
            .parse()
            .map_err(|_| anyhow::anyhow!("bad value for `{}`: `{}`", key, raw))?;
    }
    Ok(())
}

impl RunConfig {
    /// Builds and validates a configuration from resolved key/value pairs.
    /// Unknown keys are rejected.
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        if let Some((k, _)) = kv.iter().find(|(k, _)| !known_keys().any(|n| n == *k)) {
            bail!("unknown configuration key `{}`", k);
        }
        let mut c = RunConfig::default();
        c.model = ModelConfig::from_kv(kv)?;
        let mut dkv = KvFile::new();
        dkv.set("scale", c.model.scale);
        for key in DEGRADATION_KEYS {
            if let Some(v) = kv.get(key) {
                dkv.set(key, v);
            }
        }
        c.degradation = DegradationSpec::from_kv(&dkv)?;
        set(kv, "seed", &mut c.seed)?;
        set(kv, "base_lr", &mut c.base_lr)?;
        set(kv, "final_lr", &mut c.final_lr)?;
        set(kv, "total_steps", &mut c.total_steps)?;
        set(kv, "batch", &mut c.batch)?;
        if let Some(a) = kv.get("augment") {
            c.augment = Augment::parse(a)?;
        }
        set(kv, "checkpoint_every", &mut c.checkpoint_every)?;
        set(kv, "jobs", &mut c.jobs)?;
        if let Some(m) = kv.get("channel_mode") {
            c.channel_mode = m.parse()?;
        }
        set(kv, "band_lo", &mut c.band_lo)?;
        if let Some(v) = kv.get("band_hi") {
            c.band_hi = Some(v.parse().map_err(|_| anyhow::anyhow!("bad value for `band_hi`: `{}`", v))?);
        }
        let path = |key: &str| kv.get(key).map(PathBuf::from);
        c.paths = Paths {
            input: path("input"),
            output: path("output"),
            checkpoint: path("checkpoint"),
            lr: path("lr"),
            hr: path("hr"),
            sr: path("sr"),
            reference: path("reference"),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.degradation.validate()?;
        if self.degradation.scale != self.model.scale {
            bail!("degradation scale {} differs from model scale {}", self.degradation.scale, self.model.scale);
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            bail!("base_lr must be positive, got {}", self.base_lr);
        }
        if !(self.final_lr >= 0.0 && self.final_lr <= self.base_lr) {
            bail!("final_lr must lie in [0, base_lr], got {}", self.final_lr);
        }
        if self.total_steps == 0 || self.batch == 0 || self.checkpoint_every == 0 || self.jobs == 0 {
            bail!("total_steps, batch, checkpoint_every and jobs must all be positive");
        }
        if let Some(hi) = self.band_hi {
            if self.band_lo > hi {
                bail!("band range is empty: band_lo {} > band_hi {}", self.band_lo, hi);
            }
        }
        Ok(())
    }

    /// The resolved configuration, in a stable key order.
    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        kv.set("seed", self.seed);
        kv.merge(&self.model.to_kv());
        let d = self.degradation.to_kv();
        for (k, v) in d.iter().filter(|(k, _)| *k != "scale") {
            kv.set(k, v);
        }
        kv.set("base_lr", self.base_lr);
        kv.set("final_lr", self.final_lr);
        kv.set("total_steps", self.total_steps);
        kv.set("batch", self.batch);
        kv.set("augment", self.augment.name());
        kv.set("checkpoint_every", self.checkpoint_every);
        kv.set("jobs", self.jobs);
        kv.set("channel_mode", self.channel_mode.name());
        kv.set("band_lo", self.band_lo);
        if let Some(hi) = self.band_hi {
            kv.set("band_hi", hi);
        }
        let p = &self.paths;
        for (key, value) in [
            ("input", &p.input),
            ("output", &p.output),
            ("checkpoint", &p.checkpoint),
            ("lr", &p.lr),
            ("hr", &p.hr),
            ("sr", &p.sr),
            ("reference", &p.reference),
        ] {
            if let Some(v) = value {
                kv.set(key, v.display());
            }
        }
        kv
    }

    /// Layers the config file, the seed variable and flag overrides, then
    /// validates the result.
    pub fn resolve(file: Option<&Path>, env_seed: Option<&str>, flags: &KvFile) -> Result<Self> {
        let mut kv = match file {
            Some(path) => KvFile::load(path).with_context(|| format!("reading config {}", path.display()))?,
            None => KvFile::new(),
        };
        if let Some(seed) = env_seed {
            kv.set("seed", seed.trim());
        }
        kv.merge(flags);
        Self::from_kv(&kv)
    }

    /// Writes the resolved configuration next to a command's outputs.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.to_kv().save(dir.join(ECHO_FILE))?;
        Ok(())
    }

    pub fn require<'a>(&self, path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
        path.as_deref().with_context(|| format!("--{} is required", flag))
    }

    /// A rayon pool with `jobs` workers.
    pub fn pool(&self) -> Result<rayon::ThreadPool> {
        Ok(rayon::ThreadPoolBuilder::new().num_threads(self.jobs).build()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags(pairs: &[(&str, &str)]) -> KvFile {
        let mut kv = KvFile::new();
        for (k, v) in pairs {
            kv.set(k, v);
        }
        kv
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = RunConfig::from_kv(&flags(&[("scale", "2"), ("scheme", "tf"), ("q", "4"), ("compression", "quantize"), ("output", "out")])).unwrap();
        assert_eq!(c.model.scale, 2);
        assert_eq!(c.degradation.scale, 2);
        assert_eq!(RunConfig::from_kv(&c.to_kv()).unwrap(), c);
    }

    #[test]
    fn flags_beat_env_beat_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.txt");
        std::fs::write(&file, "seed=1\ndim=16\n").unwrap();
        let c = RunConfig::resolve(Some(&file), None, &KvFile::new()).unwrap();
        assert_eq!((c.seed, c.model.dim), (1, 16));
        let c = RunConfig::resolve(Some(&file), Some("2"), &KvFile::new()).unwrap();
        assert_eq!(c.seed, 2);
        let c = RunConfig::resolve(Some(&file), Some("2"), &flags(&[("seed", "3")])).unwrap();
        assert_eq!(c.seed, 3);
    }

    #[test]
    fn invalid_values_are_rejected() {
        for bad in [
            [("dim", "30"), ("heads", "4")],
            [("scheme", "xy"), ("seed", "0")],
            [("band_lo", "5"), ("band_hi", "2")],
            [("jobs", "0"), ("seed", "0")],
            [("typo_key", "1"), ("seed", "0")],
            [("base_lr", "-1"), ("seed", "0")],
            [("seed", "abc"), ("jobs", "1")],
        ] {
            assert!(RunConfig::from_kv(&flags(&bad)).is_err(), "{:?}", bad);
        }
    }
}

//! Flat `key=value` run configuration.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use cdcd_core::data::WorldSpec;
use cdcd_core::denoiser::DenoiserConfig;
use cdcd_core::diffusion::ScheduleConfig;
use cdcd_core::eval::BenchSpec;
use cdcd_core::losses::LossConfig;
use cdcd_core::optim::AdamW;
use cdcd_core::sampler::SamplerConfig;
use cdcd_core::trainer::TrainConfig;

/// Every recognised key with its default value.
const DEFAULTS: &[(&str, &str)] = &[
    ("world.name", "W1"),
    ("world.classes", "4"),
    ("world.codebook", "16"),
    ("world.seq_len", "16"),
    ("world.concentration", "0.3"),
    ("world.seed", "1"),
    ("world.train_per_class", "64"),
    ("world.heldout_per_class", "16"),
    ("schedule.steps", "8"),
    ("schedule.kernel", "mask-uniform"),
    ("schedule.shape", "linear"),
    ("schedule.terminal", "1"),
    ("model.width", "64"),
    ("model.blocks", "2"),
    ("model.heads", "2"),
    ("model.ff_mult", "4"),
    ("loss.lambda", "5e-5"),
    ("loss.mode", "vanilla"),
    ("loss.negatives", "10"),
    ("loss.kind", "intra"),
    ("loss.chunk", "auto"),
    ("loss.adaptive", "linear-decay"),
    ("loss.vb", "single-term"),
    ("loss.aux_weight", "1"),
    ("loss.sample_source", "positive"),
    ("train.epochs", "30"),
    ("train.batch_size", "32"),
    ("train.lr", "4.5e-4"),
    ("train.beta1", "0.9"),
    ("train.beta2", "0.96"),
    ("train.eps", "1e-8"),
    ("train.weight_decay", "0.01"),
    ("train.clip", "1"),
    ("train.seed", "0"),
    ("train.rho", "1"),
    ("train.eval_interval", "5"),
    ("train.eval_draws", "1"),
    ("train.eval_seed", "0"),
    ("sample.truncation", "0.86"),
    ("sample.count", "16"),
    ("sample.seed", "0"),
    ("eval.per_class", "64"),
    ("eval.mi_negatives", "10"),
    ("eval.seed", "0"),
    ("eval.exact", "auto"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|&(k, v)| (k, v.to_string())).collect(),
        }
    }
}

/// Whether `eval` computes the exact likelihood.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExactMode {
    /// Only when the model is small enough.
    Auto,
    /// Always; a model that is too large is an error.
    On,
    Off,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub per_class: usize,
    pub mi_negatives: usize,
    pub seed: u64,
    pub exact: ExactMode,
}

/// A fully typed configuration.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub world: WorldSpec,
    pub train_per_class: usize,
    pub heldout_per_class: usize,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalSettings,
}

impl Resolved {
    pub fn bench_spec(&self, steps: Vec<usize>, variants: Vec<String>, seeds: Vec<u64>) -> BenchSpec {
        BenchSpec {
            world: self.world.clone(),
            train_per_class: self.train_per_class,
            heldout_per_class: self.heldout_per_class,
            steps,
            variants,
            seeds,
            base: self.train.clone(),
            sampler: self.sampler,
            eval_per_class: self.eval.per_class,
        }
    }
}

impl RunConfig {
    /// Defaults, then the file at `path` (if any), then each `k=v` override.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            cfg.apply_text(&text).with_context(|| format!("in config {}", p.display()))?;
        }
        for o in overrides {
            cfg.apply_override(o).with_context(|| format!("in --set {o}"))?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (k, _) = DEFAULTS
            .iter()
            .find(|(k, _)| *k == key)
            .ok_or_else(|| anyhow!("unknown config key '{key}'"))?;
        self.values.insert(k, value.trim().to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("no key {key}"))
    }

    pub fn apply_override(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair.split_once('=').ok_or_else(|| anyhow!("expected key=value, found '{pair}'"))?;
        self.set(k.trim(), v)
    }

    /// Apply `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.apply_override(line).with_context(|| format!("line {}", i + 1))?;
        }
        Ok(())
    }

    /// Every key in sorted order; loading it back reproduces this config.
    pub fn snapshot(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.get(key);
        v.parse().map_err(|e| anyhow!("{key}: cannot parse '{v}': {e}"))
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let world = WorldSpec {
            name: self.get("world.name").to_string(),
            classes: self.parse("world.classes")?,
            codebook: self.parse("world.codebook")?,
            seq_len: self.parse("world.seq_len")?,
            concentration: self.parse("world.concentration")?,
            seed: self.parse("world.seed")?,
        };
        if world.name.is_empty() || world.name.contains(|c: char| c == ',' || c.is_whitespace()) {
            bail!("world.name must be non-empty without commas or spaces");
        }
        let schedule = ScheduleConfig {
            steps: self.parse("schedule.steps")?,
            codebook: world.codebook,
            kernel: self.parse("schedule.kernel")?,
            shape: self.parse("schedule.shape")?,
            terminal: self.parse("schedule.terminal")?,
        };
        let seed: u64 = self.parse("train.seed")?;
        let mut denoiser = DenoiserConfig::new(&schedule, world.seq_len, world.classes);
        denoiser.width = self.parse("model.width")?;
        denoiser.blocks = self.parse("model.blocks")?;
        denoiser.heads = self.parse("model.heads")?;
        denoiser.ff_mult = self.parse("model.ff_mult")?;
        denoiser.seed = seed;
        let loss = LossConfig {
            lambda: self.parse("loss.lambda")?,
            mode: self.parse("loss.mode")?,
            negatives: self.parse("loss.negatives")?,
            kind: self.parse("loss.kind")?,
            chunk: match self.get("loss.chunk") {
                "auto" => None,
                _ => Some(self.parse("loss.chunk")?),
            },
            adaptive: self.parse("loss.adaptive")?,
            vb: self.parse("loss.vb")?,
            aux_weight: self.parse("loss.aux_weight")?,
            sample_source: self.parse("loss.sample_source")?,
        };
        let train = TrainConfig {
            epochs: self.parse("train.epochs")?,
            batch_size: self.parse("train.batch_size")?,
            optimizer: AdamW {
                lr: self.parse("train.lr")?,
                beta1: self.parse("train.beta1")?,
                beta2: self.parse("train.beta2")?,
                eps: self.parse("train.eps")?,
                weight_decay: self.parse("train.weight_decay")?,
            },
            clip: self.parse("train.clip")?,
            seed,
            rho: self.parse("train.rho")?,
            eval_interval: self.parse("train.eval_interval")?,
            eval_draws: self.parse("train.eval_draws")?,
            eval_seed: self.parse("train.eval_seed")?,
            loss,
            schedule,
            denoiser,
        };
        train.validate()?;
        cdcd_core::diffusion::build_schedule(&train.schedule)?;
        let sampler = SamplerConfig {
            truncation: self.parse("sample.truncation")?,
            count: self.parse("sample.count")?,
            seed: self.parse("sample.seed")?,
        };
        sampler.validate()?;
        let eval = EvalSettings {
            per_class: self.parse("eval.per_class")?,
            mi_negatives: self.parse("eval.mi_negatives")?,
            seed: self.parse("eval.seed")?,
            exact: match self.get("eval.exact") {
                "auto" => ExactMode::Auto,
                "on" => ExactMode::On,
                "off" => ExactMode::Off,
                other => bail!("eval.exact: expected auto, on or off, found '{other}'"),
            },
        };
        Ok(Resolved {
            world,
            train_per_class: self.parse("world.train_per_class")?,
            heldout_per_class: self.parse("world.heldout_per_class")?,
            train,
            sampler,
            eval,
        })
    }
}

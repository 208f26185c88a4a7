//! Run configuration: a line-based `key = value` file where every key has a
//! default and unknown keys are rejected.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::model::{Ablation, ModelConfig, PoolSource};

/// When the reference set is re-encoded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefRefresh {
    Epoch,
    Batch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// CSV panel; empty means "generate from the `synth_*` keys".
    pub data: String,
    pub synth: SyntheticSpec,
    pub window: usize,
    pub horizon: usize,
    pub stride: usize,
    pub hidden: usize,
    pub references: usize,
    pub gcn_depth: usize,
    pub pool: PoolSource,
    pub tau: f64,
    pub s_eval: usize,
    pub beta_z: f64,
    pub beta_g: f64,
    pub prior_p: f64,
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub train_frac: f64,
    pub valid_frac: f64,
    pub ref_refresh: RefRefresh,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: String::new(),
            synth: SyntheticSpec::default(),
            window: 20,
            horizon: 5,
            stride: 1,
            hidden: 60,
            references: 30,
            gcn_depth: 2,
            pool: PoolSource::Refined,
            tau: 0.5,
            s_eval: 10,
            beta_z: 1e-3,
            beta_g: 1e-4,
            prior_p: 0.1,
            lr: 1e-3,
            batch: 64,
            max_epochs: 500,
            patience: 200,
            seed: 1,
            ablation: Ablation::Full,
            train_frac: 0.7,
            valid_frac: 0.1,
            ref_refresh: RefRefresh::Epoch,
        }
    }
}

/// Every recognised key, in serialization order.
pub const KEYS: &[&str] = &[
    "data",
    "synth_n",
    "synth_t",
    "synth_density",
    "synth_coupling",
    "synth_noise",
    "synth_seed",
    "window",
    "horizon",
    "stride",
    "hidden",
    "references",
    "gcn_depth",
    "pool",
    "tau",
    "s_eval",
    "beta_z",
    "beta_g",
    "prior_p",
    "lr",
    "batch",
    "max_epochs",
    "patience",
    "seed",
    "ablation",
    "train_frac",
    "valid_frac",
    "ref_refresh",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data" => self.data = value.to_string(),
            "synth_n" => self.synth.series = parse(key, value)?,
            "synth_t" => self.synth.len = parse(key, value)?,
            "synth_density" => self.synth.density = parse(key, value)?,
            "synth_coupling" => self.synth.coupling = parse(key, value)?,
            "synth_noise" => self.synth.noise = parse(key, value)?,
            "synth_seed" => self.synth.seed = parse(key, value)?,
            "window" => self.window = parse(key, value)?,
            "horizon" => self.horizon = parse(key, value)?,
            "stride" => self.stride = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "references" => self.references = parse(key, value)?,
            "gcn_depth" => self.gcn_depth = parse(key, value)?,
            "pool" => self.pool = value.parse()?,
            "tau" => self.tau = parse(key, value)?,
            "s_eval" => self.s_eval = parse(key, value)?,
            "beta_z" => self.beta_z = parse(key, value)?,
            "beta_g" => self.beta_g = parse(key, value)?,
            "prior_p" => self.prior_p = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "ablation" => self.ablation = value.parse()?,
            "train_frac" => self.train_frac = parse(key, value)?,
            "valid_frac" => self.valid_frac = parse(key, value)?,
            "ref_refresh" => {
                self.ref_refresh = match value {
                    "epoch" => RefRefresh::Epoch,
                    "batch" => RefRefresh::Batch,
                    _ => return Err(Error::Config(format!("`ref_refresh`: expected epoch or batch, got `{value}`"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "data" => self.data.clone(),
            "synth_n" => self.synth.series.to_string(),
            "synth_t" => self.synth.len.to_string(),
            "synth_density" => self.synth.density.to_string(),
            "synth_coupling" => self.synth.coupling.to_string(),
            "synth_noise" => self.synth.noise.to_string(),
            "synth_seed" => self.synth.seed.to_string(),
            "window" => self.window.to_string(),
            "horizon" => self.horizon.to_string(),
            "stride" => self.stride.to_string(),
            "hidden" => self.hidden.to_string(),
            "references" => self.references.to_string(),
            "gcn_depth" => self.gcn_depth.to_string(),
            "pool" => self.pool.to_string(),
            "tau" => self.tau.to_string(),
            "s_eval" => self.s_eval.to_string(),
            "beta_z" => self.beta_z.to_string(),
            "beta_g" => self.beta_g.to_string(),
            "prior_p" => self.prior_p.to_string(),
            "lr" => self.lr.to_string(),
            "batch" => self.batch.to_string(),
            "max_epochs" => self.max_epochs.to_string(),
            "patience" => self.patience.to_string(),
            "seed" => self.seed.to_string(),
            "ablation" => self.ablation.to_string(),
            "train_frac" => self.train_frac.to_string(),
            "valid_frac" => self.valid_frac.to_string(),
            "ref_refresh" => match self.ref_refresh {
                RefRefresh::Epoch => "epoch".into(),
                RefRefresh::Batch => "batch".into(),
            },
            _ => return None,
        })
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", k + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", k + 1, message(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        RunConfig::parse(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), message(e))))
    }

    /// One `key=value` line per key, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            writeln!(out, "{key}={}", self.get(key).expect("known key")).expect("string write");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("window", self.window),
            ("horizon", self.horizon),
            ("stride", self.stride),
            ("hidden", self.hidden),
            ("references", self.references),
            ("gcn_depth", self.gcn_depth),
            ("s_eval", self.s_eval),
            ("batch", self.batch),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{key}` must be >= 1")));
            }
        }
        if self.window < 2 {
            return Err(Error::Config("`window` must be >= 2".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("`tau` must be > 0, got {}", self.tau)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("`lr` must be > 0, got {}", self.lr)));
        }
        for (key, v) in [("beta_z", self.beta_z), ("beta_g", self.beta_g)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("`{key}` must be >= 0, got {v}")));
            }
        }
        if !(self.prior_p > 0.0 && self.prior_p < 1.0) {
            return Err(Error::Config(format!("`prior_p` must be in (0, 1), got {}", self.prior_p)));
        }
        if !(self.train_frac > 0.0 && self.valid_frac > 0.0 && self.train_frac + self.valid_frac < 1.0) {
            return Err(Error::Config(format!(
                "split fractions {} / {} must be positive and leave a test set",
                self.train_frac, self.valid_frac
            )));
        }
        if self.data.is_empty() {
            self.synth.validate()?;
        }
        if self.pool == PoolSource::Reference && self.ablation == Ablation::NoRefCorr {
            return Err(Error::Config("`pool = z` needs the reference network".into()));
        }
        Ok(())
    }

    pub fn model(&self, series: usize) -> ModelConfig {
        ModelConfig {
            series,
            window: self.window,
            horizon: self.horizon,
            hidden: self.hidden,
            gcn_depth: self.gcn_depth,
            ablation: self.ablation,
            pool: self.pool,
            prior: self.prior_p,
        }
    }
}

fn message(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

//! Plain-text checkpoints.
//!
//! ```text
//! STOIC-CKPT v1
//! config.<key>=<value>          one line per config key
//! meta.<key>=<value>
//! series <name>                 one line per series, in column order
//! tensors <count>
//! <name> dims <d1> <d2> ...     then one line of values
//! ```
//!
//! Values are printed with 17 significant digits, which reproduces every
//! `f64` exactly on parse.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::{ParamStore, RngStream, Tensor};
use crate::config::{RunConfig, KEYS};
use crate::data::NormStats;
use crate::encoders::ReferenceSet;
use crate::error::{Error, Result};
use crate::model::Model;

pub const MAGIC: &str = "STOIC-CKPT";
pub const VERSION: &str = "v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub series: Vec<String>,
    pub stats: NormStats,
    /// Normalized reference windows `[M, L]`.
    pub reference_windows: Tensor,
    /// Parameters in registration order.
    pub params: Vec<(String, Tensor)>,
    pub best_valid_crps: f64,
    pub best_epoch: usize,
    pub epochs: usize,
}

/// A checkpoint rebuilt into a runnable model.
#[derive(Clone, Debug)]
pub struct LoadedModel {
    pub model: Model,
    pub store: ParamStore,
    pub refs: ReferenceSet,
}

fn fmt_value(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").expect("string write");
}

fn write_tensor(out: &mut String, name: &str, t: &Tensor) {
    out.push_str(name);
    out.push_str(" dims");
    for d in t.shape() {
        write!(out, " {d}").expect("string write");
    }
    out.push('\n');
    for (k, &v) in t.data().iter().enumerate() {
        if k > 0 {
            out.push(' ');
        }
        fmt_value(out, v);
    }
    out.push('\n');
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Vec<(String, Tensor)> {
        store.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MAGIC} {VERSION}\n");
        for key in KEYS {
            writeln!(out, "config.{key}={}", self.config.get(key).expect("known key")).expect("string write");
        }
        out.push_str("meta.best_valid_crps=");
        fmt_value(&mut out, self.best_valid_crps);
        writeln!(out, "\nmeta.best_epoch={}", self.best_epoch).expect("string write");
        writeln!(out, "meta.epochs={}", self.epochs).expect("string write");
        for name in &self.series {
            writeln!(out, "series {name}").expect("string write");
        }
        let constant = Tensor::vector(self.stats.constant.iter().map(|&c| f64::from(u8::from(c))).collect());
        let fixed = [
            ("norm.mean", Tensor::vector(self.stats.mean.clone())),
            ("norm.std", Tensor::vector(self.stats.std.clone())),
            ("norm.constant", constant),
            ("refs.windows", self.reference_windows.clone()),
        ];
        writeln!(out, "tensors {}", fixed.len() + self.params.len()).expect("string write");
        for (name, t) in &fixed {
            write_tensor(&mut out, name, t);
        }
        for (name, t) in &self.params {
            write_tensor(&mut out, name, t);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Checkpoint::parse(&text).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Checkpoint> {
        let mut lines = text.lines().enumerate().map(|(k, l)| (k + 1, l)).peekable();
        let bad = |line: usize, msg: &str| Error::Checkpoint(format!("line {line}: {msg}"));
        match lines.next() {
            Some((_, head)) => {
                let mut parts = head.split(' ');
                if parts.next() != Some(MAGIC) {
                    return Err(bad(1, "not a checkpoint (bad magic)"));
                }
                match parts.next() {
                    Some(VERSION) => {}
                    Some(v) => {
                        return Err(bad(1, &format!("unsupported checkpoint version `{v}`; this build reads {VERSION}")))
                    }
                    None => return Err(bad(1, "missing version tag")),
                }
            }
            None => return Err(bad(1, "empty file")),
        }

        let mut config = RunConfig::default();
        let mut best_valid_crps = None;
        let mut best_epoch = None;
        let mut epochs = None;
        let mut series = Vec::new();
        let mut tensor_count = None;
        let mut last_line = 1;
        for (no, line) in lines.by_ref() {
            last_line = no;
            if let Some(rest) = line.strip_prefix("config.") {
                let (k, v) = rest.split_once('=').ok_or_else(|| bad(no, "expected key=value"))?;
                config.set(k, v).map_err(|e| bad(no, &e.to_string()))?;
            } else if let Some(rest) = line.strip_prefix("meta.") {
                let (k, v) = rest.split_once('=').ok_or_else(|| bad(no, "expected key=value"))?;
                match k {
                    "best_valid_crps" => best_valid_crps = Some(v.parse().map_err(|_| bad(no, "bad number"))?),
                    "best_epoch" => best_epoch = Some(v.parse().map_err(|_| bad(no, "bad integer"))?),
                    "epochs" => epochs = Some(v.parse().map_err(|_| bad(no, "bad integer"))?),
                    _ => return Err(bad(no, &format!("unknown meta key `{k}`"))),
                }
            } else if let Some(name) = line.strip_prefix("series ") {
                series.push(name.to_string());
            } else if let Some(n) = line.strip_prefix("tensors ") {
                tensor_count = Some(n.parse::<usize>().map_err(|_| bad(no, "bad tensor count"))?);
                break;
            } else {
                return Err(bad(no, &format!("unexpected line `{line}`")));
            }
        }
        let count = tensor_count.ok_or_else(|| bad(last_line + 1, "missing `tensors` line"))?;
        config.validate().map_err(|e| bad(last_line, &format!("invalid config: {e}")))?;

        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let (no, head) = lines.next().ok_or_else(|| bad(last_line + 1, "truncated: missing tensor header"))?;
            let mut parts = head.split(' ');
            let name = parts.next().filter(|s| !s.is_empty()).ok_or_else(|| bad(no, "missing tensor name"))?;
            if parts.next() != Some("dims") {
                return Err(bad(no, "expected `<name> dims ...`"));
            }
            let shape = parts
                .map(|d| d.parse::<usize>().map_err(|_| bad(no, &format!("bad dimension `{d}`"))))
                .collect::<Result<Vec<_>>>()?;
            let (vno, values) = lines.next().ok_or_else(|| bad(no + 1, "truncated: missing tensor values"))?;
            last_line = vno;
            let data = if values.is_empty() {
                Vec::new()
            } else {
                values
                    .split(' ')
                    .map(|v| v.parse::<f64>().map_err(|_| bad(vno, &format!("bad value `{v}`"))))
                    .collect::<Result<Vec<_>>>()?
            };
            let t = Tensor::new(shape, data).map_err(|e| bad(vno, &e.to_string()))?;
            tensors.push((name.to_string(), t));
        }
        if let Some((no, _)) = lines.next() {
            return Err(bad(no, "trailing content after the last tensor"));
        }

        let mut take = |name: &str| -> Result<Tensor> {
            match tensors.first() {
                Some((n, _)) if n == name => Ok(tensors.remove(0).1),
                _ => Err(Error::Checkpoint(format!("missing `{name}` block"))),
            }
        };
        let mean = take("norm.mean")?.into_data();
        let std = take("norm.std")?.into_data();
        let constant = take("norm.constant")?.into_data().iter().map(|&c| c != 0.0).collect();
        let reference_windows = take("refs.windows")?;
        if mean.len() != series.len() || std.len() != series.len() {
            return Err(Error::Checkpoint(format!(
                "normalization covers {} series, header lists {}",
                mean.len(),
                series.len()
            )));
        }
        Ok(Checkpoint {
            config,
            series,
            stats: NormStats { mean, std, constant },
            reference_windows,
            params: tensors,
            best_valid_crps: best_valid_crps.ok_or_else(|| Error::Checkpoint("missing meta.best_valid_crps".into()))?,
            best_epoch: best_epoch.ok_or_else(|| Error::Checkpoint("missing meta.best_epoch".into()))?,
            epochs: epochs.ok_or_else(|| Error::Checkpoint("missing meta.epochs".into()))?,
        })
    }

    /// Rebuilds the model from the config and checks every parameter
    /// against the shapes it expects.
    pub fn restore(&self) -> Result<LoadedModel> {
        let mut store = ParamStore::new();
        let model = Model::new(
            self.config.model(self.series.len()),
            &mut store,
            &mut RngStream::derive(self.config.seed, "init"),
        )?;
        if store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "config expects {} parameters, checkpoint has {}",
                store.len(),
                self.params.len()
            )));
        }
        for (name, value) in &self.params {
            let expected = store
                .by_name(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{name}`")))?
                .value
                .shape()
                .to_vec();
            if expected != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, config expects {expected:?}",
                    value.shape()
                )));
            }
            store.set_by_name(name, value.clone())?;
        }
        if self.reference_windows.shape().len() != 2 || self.reference_windows.cols() != self.config.window {
            return Err(Error::Checkpoint(format!(
                "reference windows {:?} do not match window {}",
                self.reference_windows.shape(),
                self.config.window
            )));
        }
        let refs = ReferenceSet::encode(&model.pte, &store, Vec::new(), &self.reference_windows)?;
        Ok(LoadedModel { model, store, refs })
    }
}

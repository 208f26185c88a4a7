//! Series panels, normalization, windowing and synthetic data.

use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;

use crate::autodiff::{RngStream, Tensor};
use crate::error::{Error, Result};

/// `T` time steps of `N` named series, stored time-major as `[T, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesPanel {
    pub names: Vec<String>,
    pub values: Tensor,
    pub frequency: String,
}

impl SeriesPanel {
    pub fn new(names: Vec<String>, values: Tensor) -> Result<Self> {
        let s = values.shape();
        if s.len() != 2 || s[0] == 0 || s[1] == 0 || s[1] != names.len() {
            return Err(Error::Data(format!(
                "panel needs [T >= 1, N = {}] values, got {s:?}",
                names.len()
            )));
        }
        if let Some(k) = values.first_non_finite() {
            return Err(Error::Data(format!(
                "non-finite value at time {} in series `{}`",
                k / names.len(),
                names[k % names.len()]
            )));
        }
        Ok(SeriesPanel {
            names,
            values,
            frequency: String::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn series(&self) -> usize {
        self.names.len()
    }

    pub fn at(&self, t: usize, i: usize) -> f64 {
        self.values.data()[t * self.series() + i]
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        (0..self.len()).map(|t| self.at(t, i)).collect()
    }

    /// Reorders series; `order[k]` is the old index of new series `k`.
    pub fn permute(&self, order: &[usize]) -> Result<SeriesPanel> {
        let n = self.series();
        let mut seen = vec![false; n];
        if order.len() != n || order.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::InvalidArgument("permute: not a permutation".into()));
        }
        let mut data = Vec::with_capacity(self.values.len());
        for t in 0..self.len() {
            data.extend(order.iter().map(|&i| self.at(t, i)));
        }
        Ok(SeriesPanel {
            names: order.iter().map(|&i| self.names[i].clone()).collect(),
            values: Tensor::new(vec![self.len(), n], data)?,
            frequency: self.frequency.clone(),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.names.join(",");
        out.push('\n');
        for t in 0..self.len() {
            for i in 0..self.series() {
                if i > 0 {
                    out.push(',');
                }
                // Display prints the shortest string that parses back exactly
                write!(out, "{}", self.at(t, i)).expect("string write");
            }
            out.push('\n');
        }
        out
    }
}

/// Reads a header of series names followed by one row per time step.
pub fn load_csv(path: &Path) -> Result<SeriesPanel> {
    let mut text = String::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    parse_csv(&text).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Rows in messages are 1-based file lines; the header is row 1.
pub fn parse_csv(text: &str) -> Result<SeriesPanel> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| Error::Data(format!("row 1: {e}")))?,
        None => return Err(Error::Data("empty file".into())),
    };
    let names: Vec<String> = header.iter().map(str::to_string).collect();
    if names.iter().any(String::is_empty) {
        return Err(Error::Data("row 1: empty series name".into()));
    }
    let n = names.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for record in records {
        let record = record.map_err(|e| Error::Data(format!("row {}: {e}", rows + 2)))?;
        let row = record.position().map_or(rows + 2, |p| p.line() as usize);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if record.len() != n {
            return Err(Error::Data(format!(
                "row {row}: expected {n} cells, found {}",
                record.len()
            )));
        }
        for (col, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                Error::Data(format!(
                    "row {row}, column {} (`{}`): cannot parse `{cell}` as a number",
                    col + 1,
                    names[col]
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "row {row}, column {} (`{}`): missing or non-finite value",
                    col + 1,
                    names[col]
                )));
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Data("no data rows".into()));
    }
    SeriesPanel::new(names, Tensor::new(vec![rows, n], data)?)
}

/// Per-series z-scoring statistics (population standard deviation).
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Series whose std fell below `MIN_STD` and was replaced by 1.
    pub constant: Vec<bool>,
}

pub const MIN_STD: f64 = 1e-8;

impl NormStats {
    pub fn fit(panel: &SeriesPanel) -> NormStats {
        let (t, n) = (panel.len(), panel.series());
        let mut mean = vec![0.0; n];
        let mut var = vec![0.0; n];
        for i in 0..n {
            mean[i] = (0..t).map(|k| panel.at(k, i)).sum::<f64>() / t as f64;
            var[i] = (0..t).map(|k| (panel.at(k, i) - mean[i]).powi(2)).sum::<f64>() / t as f64;
        }
        let mut constant = vec![false; n];
        let std = var
            .iter()
            .zip(&mut constant)
            .map(|(v, flag)| {
                let s = v.sqrt();
                if s < MIN_STD {
                    *flag = true;
                    1.0
                } else {
                    s
                }
            })
            .collect();
        NormStats { mean, std, constant }
    }

    pub fn series(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, panel: &SeriesPanel) -> Result<SeriesPanel> {
        if panel.series() != self.series() {
            return Err(Error::Data(format!(
                "normalization stats cover {} series, panel has {}",
                self.series(),
                panel.series()
            )));
        }
        let n = self.series();
        let data = panel
            .values
            .data()
            .iter()
            .enumerate()
            .map(|(k, &x)| (x - self.mean[k % n]) / self.std[k % n])
            .collect();
        Ok(SeriesPanel {
            names: panel.names.clone(),
            values: Tensor::new(panel.values.shape().to_vec(), data)?,
            frequency: panel.frequency.clone(),
        })
    }

    /// Undoes z-scoring for values of series `i`.
    pub fn denormalize(&self, i: usize, x: f64) -> f64 {
        x * self.std[i] + self.mean[i]
    }
}

pub fn normalize(panel: &SeriesPanel) -> Result<(SeriesPanel, NormStats)> {
    let stats = NormStats::fit(panel);
    Ok((stats.apply(panel)?, stats))
}

/// Inverse of [`normalize`] for time-major `[T, N]` values.
pub fn inverse_transform(values: &Tensor, stats: &NormStats) -> Result<Tensor> {
    let n = stats.series();
    if values.shape().len() != 2 || values.cols() != n {
        return Err(Error::shape(
            "inverse_transform",
            format!("{:?} for {n} series", values.shape()),
        ));
    }
    Ok(values.map_indexed(|k, x| stats.denormalize(k % n, x)))
}

/// Series-major windows: `inputs [B, N, L]`, `targets [B, N, horizon]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub starts: Vec<usize>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn series(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn window(&self) -> usize {
        self.inputs.shape()[2]
    }

    pub fn horizon(&self) -> usize {
        self.targets.shape()[2]
    }

    /// Windows `idx` in the given order.
    pub fn select(&self, idx: &[usize]) -> WindowBatch {
        let (n, l, h) = (self.series(), self.window(), self.horizon());
        let mut inputs = Vec::with_capacity(idx.len() * n * l);
        let mut targets = Vec::with_capacity(idx.len() * n * h);
        for &b in idx {
            inputs.extend_from_slice(&self.inputs.data()[b * n * l..(b + 1) * n * l]);
            targets.extend_from_slice(&self.targets.data()[b * n * h..(b + 1) * n * h]);
        }
        WindowBatch {
            inputs: Tensor::new(vec![idx.len(), n, l], inputs).expect("window shape"),
            targets: Tensor::new(vec![idx.len(), n, h], targets).expect("window shape"),
            starts: idx.iter().map(|&b| self.starts[b]).collect(),
        }
    }

    /// Contiguous range of windows.
    pub fn slice(&self, range: std::ops::Range<usize>) -> WindowBatch {
        self.select(&range.collect::<Vec<_>>())
    }

    /// Inputs of window `b` as `[N, L]`.
    pub fn inputs_of(&self, b: usize) -> Tensor {
        let (n, l) = (self.series(), self.window());
        Tensor::new(vec![n, l], self.inputs.data()[b * n * l..(b + 1) * n * l].to_vec()).expect("window shape")
    }

    /// Targets of window `b` as `[N, horizon]`.
    pub fn targets_of(&self, b: usize) -> Tensor {
        let (n, h) = (self.series(), self.horizon());
        Tensor::new(vec![n, h], self.targets.data()[b * n * h..(b + 1) * n * h].to_vec()).expect("window shape")
    }
}

/// Window start indices `0, stride, ...` with `t + window + horizon <= T`.
pub fn window_starts(len: usize, window: usize, horizon: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 {
        return Err(Error::InvalidArgument("make_windows: stride must be >= 1".into()));
    }
    if window == 0 || horizon == 0 {
        return Err(Error::InvalidArgument(
            "make_windows: window and horizon must be >= 1".into(),
        ));
    }
    if window + horizon > len {
        return Err(Error::Data(format!(
            "make_windows: window {window} + horizon {horizon} exceeds {len} time steps"
        )));
    }
    Ok((0..=len - window - horizon).step_by(stride).collect())
}

/// All admissible windows of the panel as a single batch.
pub fn make_windows(panel: &SeriesPanel, window: usize, horizon: usize, stride: usize) -> Result<WindowBatch> {
    let starts = window_starts(panel.len(), window, horizon, stride)?;
    let n = panel.series();
    let mut inputs = Vec::with_capacity(starts.len() * n * window);
    let mut targets = Vec::with_capacity(starts.len() * n * horizon);
    for &t in &starts {
        for i in 0..n {
            inputs.extend((t..t + window).map(|k| panel.at(k, i)));
        }
        for i in 0..n {
            targets.extend((t + window..t + window + horizon).map(|k| panel.at(k, i)));
        }
    }
    Ok(WindowBatch {
        inputs: Tensor::new(vec![starts.len(), n, window], inputs)?,
        targets: Tensor::new(vec![starts.len(), n, horizon], targets)?,
        starts,
    })
}

/// Contiguous train / validation / test ranges over `count` windows.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: std::ops::Range<usize>,
    pub valid: std::ops::Range<usize>,
    pub test: std::ops::Range<usize>,
}

/// Rounds the train and validation sizes down; the test set takes the rest.
/// Every part must end up non-empty.
pub fn split_windows(count: usize, train_frac: f64, valid_frac: f64) -> Result<Split> {
    if !(train_frac > 0.0 && valid_frac > 0.0 && train_frac + valid_frac < 1.0) {
        return Err(Error::Config(format!(
            "split fractions {train_frac}/{valid_frac} leave no test set"
        )));
    }
    let train = (count as f64 * train_frac).floor() as usize;
    let valid = (count as f64 * valid_frac).floor() as usize;
    if train == 0 || valid == 0 || train + valid >= count {
        return Err(Error::Data(format!(
            "{count} windows are too few for a {train_frac}/{valid_frac} split"
        )));
    }
    Ok(Split {
        train: 0..train,
        valid: train..train + valid,
        test: train + valid..count,
    })
}

/// Parameters of the sparse VAR(1) generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub series: usize,
    pub len: usize,
    pub density: f64,
    pub coupling: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            series: 10,
            len: 2000,
            density: 0.2,
            coupling: 1.0,
            noise: 0.1,
            seed: 1,
        }
    }
}

pub const SPECTRAL_RADIUS: f64 = 0.9;
pub const SELF_WEIGHT: f64 = 0.5;
pub const BURN_IN: usize = 100;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.series == 0 || self.len == 0 {
            return Err(Error::Config("synthetic: series and length must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.density) {
            return Err(Error::Config(format!(
                "synthetic: density must be in [0, 1], got {}",
                self.density
            )));
        }
        if !(self.coupling.is_finite() && self.coupling >= 0.0) || !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Config("synthetic: coupling and noise must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Identifiability warning; not enforced.
    pub fn warning(&self) -> Option<String> {
        (self.len < 10 * self.series).then(|| {
            format!(
                "T = {} is below 10 * N = {}; the graph may not be identifiable",
                self.len,
                10 * self.series
            )
        })
    }

    pub fn to_text(&self) -> String {
        format!(
            "series={}\nlen={}\ndensity={}\ncoupling={}\nnoise={}\nseed={}\nspectral_radius={}\nburn_in={}\n",
            self.series, self.len, self.density, self.coupling, self.noise, self.seed, SPECTRAL_RADIUS, BURN_IN
        )
    }
}

/// Symmetric 0/1 adjacency, each unordered pair present with probability
/// `density`.
pub fn random_adjacency(n: usize, density: f64, rng: &mut RngStream) -> Tensor {
    let mut a = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            if rng.bernoulli(density) {
                a.set(&[i, j], 1.0);
                a.set(&[j, i], 1.0);
            }
        }
    }
    a
}

pub fn spectral_radius(w: &Tensor) -> Result<f64> {
    let n = w.rows();
    let m = DMatrix::from_row_slice(n, n, w.data());
    let radius = m
        .complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max);
    if !radius.is_finite() {
        return Err(Error::Numerical("spectral radius is not finite".into()));
    }
    Ok(radius)
}

/// VAR(1) transition matrix for a given adjacency, rescaled to spectral
/// radius 0.9.
pub fn var_transition(adj: &Tensor, coupling: f64, rng: &mut RngStream) -> Result<Tensor> {
    let n = adj.rows();
    let mut w = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                w.set(&[i, j], SELF_WEIGHT);
            } else if adj.get(&[i, j]) != 0.0 {
                let sign = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
                w.set(&[i, j], coupling * sign);
            }
        }
    }
    let radius = spectral_radius(&w)?;
    if radius < 1e-12 {
        return Err(Error::Numerical(format!(
            "cannot rescale a transition matrix with spectral radius {radius}"
        )));
    }
    let w = w.map(|x| x * SPECTRAL_RADIUS / radius);
    let check = spectral_radius(&w)?;
    if (check - SPECTRAL_RADIUS).abs() > 1e-8 {
        return Err(Error::Numerical(format!(
            "rescaled spectral radius is {check}, expected {SPECTRAL_RADIUS}"
        )));
    }
    Ok(w)
}

/// Simulates `y_t = W y_{t-1} + eps_t` after a 100-step burn-in and
/// returns the panel with its ground-truth adjacency.
pub fn synth_var(spec: &SyntheticSpec) -> Result<(SeriesPanel, Tensor)> {
    spec.validate()?;
    let n = spec.series;
    let adj = random_adjacency(n, spec.density, &mut RngStream::derive(spec.seed, "synth.graph"));
    let w = var_transition(&adj, spec.coupling, &mut RngStream::derive(spec.seed, "synth.weights"))?;
    let mut rng = RngStream::derive(spec.seed, "synth.noise");
    let mut y = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut data = Vec::with_capacity(spec.len * n);
    for step in 0..BURN_IN + spec.len {
        for i in 0..n {
            let drift: f64 = (0..n).map(|j| w.data()[i * n + j] * y[j]).sum();
            next[i] = drift + spec.noise * rng.normal();
        }
        std::mem::swap(&mut y, &mut next);
        if step >= BURN_IN {
            data.extend_from_slice(&y);
        }
    }
    let names = (0..n).map(|i| format!("s{i}")).collect();
    let mut panel = SeriesPanel::new(names, Tensor::new(vec![spec.len, n], data)?)?;
    panel.frequency = "synthetic".into();
    Ok((panel, adj))
}

/// Adds `rho * std_i * eps` to every value of series `i`. Each series draws
/// from its own stream keyed by its name, so the result does not depend on
/// column order.
pub fn inject_noise(panel: &SeriesPanel, rho: f64, seed: u64) -> Result<SeriesPanel> {
    if !(rho >= 0.0 && rho.is_finite()) {
        return Err(Error::InvalidArgument(format!("inject_noise: rho must be >= 0, got {rho}")));
    }
    if rho == 0.0 {
        return Ok(panel.clone());
    }
    let stats = NormStats::fit(panel);
    let n = panel.series();
    let mut values = panel.values.clone();
    for i in 0..n {
        let mut rng = RngStream::derive(seed, &format!("noise.{}", panel.names[i]));
        let scale = rho * if stats.constant[i] { 0.0 } else { stats.std[i] };
        for t in 0..panel.len() {
            values.data_mut()[t * n + i] += scale * rng.normal();
        }
    }
    SeriesPanel::new(panel.names.clone(), values)
}

/// Fully connected components over equal labels.
pub fn sector_partition_graph<S: AsRef<str>>(labels: &[S]) -> Tensor {
    let n = labels.len();
    let mut a = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            if i != j && labels[i].as_ref() == labels[j].as_ref() {
                a.set(&[i, j], 1.0);
            }
        }
    }
    a
}

/// `N x N` matrix with a header of series names.
pub fn matrix_to_csv(names: &[String], m: &Tensor) -> String {
    let mut out = names.join(",");
    out.push('\n');
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|x| x.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Reads a square matrix written by [`matrix_to_csv`].
pub fn load_matrix_csv(path: &Path) -> Result<(Vec<String>, Tensor)> {
    let panel = load_csv(path)?;
    if panel.len() != panel.series() {
        return Err(Error::Data(format!(
            "{}: expected a square matrix, found {} rows for {} columns",
            path.display(),
            panel.len(),
            panel.series()
        )));
    }
    let n = panel.series();
    Ok((panel.names, panel.values.reshape(&[n, n])?))
}

/// Writes `data.csv`, `adjacency.csv` and `spec.txt` into `dir`.
pub fn write_synthetic(dir: &Path, spec: &SyntheticSpec, panel: &SeriesPanel, adj: &Tensor) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("data.csv"), panel.to_csv())?;
    fs::write(dir.join("adjacency.csv"), matrix_to_csv(&panel.names, adj))?;
    fs::write(dir.join("spec.txt"), spec.to_text())?;
    Ok(())
}

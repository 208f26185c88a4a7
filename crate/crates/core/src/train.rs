//! Training loop, probabilistic evaluation and the experiment drivers.

use crate::autodiff::{Adam, NoiseSource, ParamStore, RngStream, Tape, Tensor};
use crate::checkpoint::{Checkpoint, LoadedModel};
use crate::config::{RefRefresh, RunConfig};
use crate::data::{
    inject_noise, load_csv, make_windows, split_windows, synth_var, window_starts, NormStats, SeriesPanel,
    Split, WindowBatch,
};
use crate::decoder::{elbo_loss, mixture_moments, ForecastDistribution};
use crate::encoders::{ReferenceKey, ReferenceSet};
use crate::error::{Error, Result};
use crate::graph::{
    confident_edges, edge_probability, graph_correlation, gumbel_sample, EdgeLogits, GraphCorrelation,
    GraphPosterior,
};
use crate::metrics::{crps_increase_percent, default_levels, EvalAccumulator, EvalReport};
use crate::model::{Model, SampleMode};

/// The panel named by the config, or a synthetic one with its adjacency.
pub fn load_panel(cfg: &RunConfig) -> Result<(SeriesPanel, Option<Tensor>)> {
    if cfg.data.is_empty() {
        let (panel, adj) = synth_var(&cfg.synth)?;
        Ok((panel, Some(adj)))
    } else {
        Ok((load_csv(std::path::Path::new(&cfg.data))?, None))
    }
}

/// A panel normalized and cut into split windows.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub names: Vec<String>,
    pub stats: NormStats,
    pub normalized: SeriesPanel,
    pub windows: WindowBatch,
    pub split: Split,
}

impl Prepared {
    pub fn train(&self) -> WindowBatch {
        self.windows.slice(self.split.train.clone())
    }

    pub fn valid(&self) -> WindowBatch {
        self.windows.slice(self.split.valid.clone())
    }

    pub fn test(&self) -> WindowBatch {
        self.windows.slice(self.split.test.clone())
    }
}

/// Normalization statistics come from the time steps covered by training
/// windows only.
pub fn prepare(panel: &SeriesPanel, cfg: &RunConfig) -> Result<Prepared> {
    let starts = window_starts(panel.len(), cfg.window, cfg.horizon, cfg.stride)?;
    let split = split_windows(starts.len(), cfg.train_frac, cfg.valid_frac)?;
    let train_end = starts[split.train.end - 1] + cfg.window + cfg.horizon;
    let head = SeriesPanel::new(
        panel.names.clone(),
        Tensor::new(
            vec![train_end, panel.series()],
            panel.values.data()[..train_end * panel.series()].to_vec(),
        )?,
    )?;
    let stats = NormStats::fit(&head);
    let normalized = stats.apply(panel)?;
    let windows = make_windows(&normalized, cfg.window, cfg.horizon, cfg.stride)?;
    Ok(Prepared {
        names: panel.names.clone(),
        stats,
        normalized,
        windows,
        split,
    })
}

/// Normal draws continue from a stream; every uniform request replays the
/// same block, so all chunks of one evaluation draw share one graph.
struct DrawNoise {
    normals: RngStream,
    uniforms: Vec<f64>,
}

impl NoiseSource for DrawNoise {
    fn normals(&mut self, n: usize) -> Vec<f64> {
        self.normals.normals(n)
    }

    fn uniforms(&mut self, n: usize) -> Vec<f64> {
        assert_eq!(n, self.uniforms.len(), "one graph per evaluation draw");
        self.uniforms.clone()
    }
}

/// Evaluation-time view of a model.
#[derive(Clone, Copy)]
pub struct Predictor<'a> {
    pub model: &'a Model,
    pub store: &'a ParamStore,
    pub refs: &'a ReferenceSet,
    pub tau: f64,
    pub chunk: usize,
}

impl<'a> Predictor<'a> {
    pub fn from_loaded(loaded: &'a LoadedModel, cfg: &RunConfig) -> Self {
        Predictor {
            model: &loaded.model,
            store: &loaded.store,
            refs: &loaded.refs,
            tau: cfg.tau,
            chunk: cfg.batch,
        }
    }

    /// Global edge logits for a set of windows `[W, N, L]`.
    pub fn graph_logits(&self, inputs: &Tensor) -> Result<Option<Tensor>> {
        if self.model.ggm.is_none() {
            return Ok(None);
        }
        self.model.graph_logits(self.store, inputs, self.chunk).map(Some)
    }

    /// Predictive distribution per window, in normalized units: `samples`
    /// joint draws of latents and a hard graph, moment-matched per cell.
    pub fn forecast(&self, inputs: &Tensor, samples: usize, seed: u64) -> Result<Vec<ForecastDistribution>> {
        if samples == 0 {
            return Err(Error::InvalidArgument("forecast: need at least one sample".into()));
        }
        let s = inputs.shape();
        let (w, n, l) = (s[0], s[1], s[2]);
        let horizon = self.model.config.horizon;
        let logits = self.graph_logits(inputs)?;
        let pairs = n * (n - 1) / 2;
        let mut draws: Vec<Vec<(Tensor, Tensor)>> = vec![Vec::with_capacity(samples); w];
        for k in 0..samples {
            let mut graph_rng = RngStream::derive(seed, &format!("eval.graph.{k}"));
            let uniforms = if logits.is_some() { graph_rng.uniforms(pairs) } else { Vec::new() };
            let mut noise = DrawNoise {
                normals: RngStream::derive(seed, &format!("eval.latent.{k}")),
                uniforms,
            };
            let mut start = 0;
            while start < w {
                let len = self.chunk.min(w - start);
                let chunk = Tensor::new(vec![len, n, l], inputs.data()[start * n * l..(start + len) * n * l].to_vec())?;
                let mut tape = Tape::with_nan_check(false);
                let pass = self.model.forward(
                    &mut tape,
                    self.store,
                    &chunk,
                    Some(self.refs),
                    &mut noise,
                    SampleMode { tau: self.tau, hard: true },
                    logits.as_ref(),
                )?;
                let (mu, sigma) = (tape.value(pass.mu), tape.value(pass.sigma));
                let cell = n * horizon;
                for b in 0..len {
                    let take = |t: &Tensor| Tensor::new(vec![n, horizon], t.data()[b * cell..(b + 1) * cell].to_vec());
                    draws[start + b].push((take(mu)?, take(sigma)?));
                }
                start += len;
            }
        }
        draws.iter().map(|d| mixture_moments(d)).collect()
    }
}

/// Moves a normalized `[N, horizon]` forecast back to data units.
pub fn denormalize(dist: &ForecastDistribution, stats: &NormStats) -> Result<ForecastDistribution> {
    let h = dist.mu.cols();
    let mu = dist.mu.map_indexed(|k, x| stats.denormalize(k / h, x));
    let sigma = dist.sigma.map_indexed(|k, s| s * stats.std[k / h]);
    ForecastDistribution::new(mu, sigma)
}

/// Scores normalized forecasts against normalized targets in data units.
pub fn score(forecasts: &[ForecastDistribution], windows: &WindowBatch, stats: &NormStats) -> Result<EvalReport> {
    let mut acc = EvalAccumulator::new(&default_levels())?;
    let h = windows.horizon();
    for (b, f) in forecasts.iter().enumerate() {
        let d = denormalize(f, stats)?;
        let y = windows.targets_of(b).map_indexed(|k, x| stats.denormalize(k / h, x));
        acc.add(&d, y.data())?;
    }
    acc.finish()
}

pub fn evaluate_windows(
    predictor: &Predictor<'_>,
    windows: &WindowBatch,
    stats: &NormStats,
    samples: usize,
    seed: u64,
) -> Result<EvalReport> {
    if windows.is_empty() {
        return Err(Error::Data("no windows to evaluate".into()));
    }
    let forecasts = predictor.forecast(&windows.inputs, samples, seed)?;
    score(&forecasts, windows, stats)
}

/// Evaluates a checkpoint on every window of `panel`.
pub fn evaluate(ckpt: &Checkpoint, panel: &SeriesPanel) -> Result<EvalReport> {
    let (loaded, windows) = windows_for(ckpt, panel)?;
    let cfg = &ckpt.config;
    let p = Predictor::from_loaded(&loaded, cfg);
    evaluate_windows(&p, &windows, &ckpt.stats, cfg.s_eval, eval_seed(cfg))
}

fn check_series(ckpt: &Checkpoint, panel: &SeriesPanel) -> Result<()> {
    if panel.series() != ckpt.series.len() {
        return Err(Error::Data(format!(
            "checkpoint was trained on {} series, data has {}",
            ckpt.series.len(),
            panel.series()
        )));
    }
    Ok(())
}

fn windows_for(ckpt: &Checkpoint, panel: &SeriesPanel) -> Result<(LoadedModel, WindowBatch)> {
    check_series(ckpt, panel)?;
    let cfg = &ckpt.config;
    let normalized = ckpt.stats.apply(panel)?;
    let windows = make_windows(&normalized, cfg.window, cfg.horizon, cfg.stride)?;
    Ok((ckpt.restore()?, windows))
}

pub fn eval_seed(cfg: &RunConfig) -> u64 {
    crate::autodiff::rng::mix_label(cfg.seed, "eval")
}

fn valid_seed(cfg: &RunConfig) -> u64 {
    crate::autodiff::rng::mix_label(cfg.seed, "valid")
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub nll: f64,
    pub kl_latent: f64,
    pub kl_graph: f64,
    pub valid_crps: f64,
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,total,nll,kl_z,kl_g,valid_crps\n");
    for e in log {
        out.push_str(&format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
            e.epoch, e.total, e.nll, e.kl_latent, e.kl_graph, e.valid_crps
        ));
    }
    out
}

#[derive(Debug)]
pub struct TrainRun {
    /// Best-validation parameters; on abort, the last good ones.
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    /// Set when training stopped on a numerical failure.
    pub abort: Option<Error>,
}

fn sample_references(
    windows: &WindowBatch,
    count: usize,
    rng: &mut RngStream,
) -> (Vec<ReferenceKey>, Tensor) {
    let (n, l) = (windows.series(), windows.window());
    let mut keys = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count * l);
    for _ in 0..count {
        let b = rng.index(windows.len());
        let series = rng.index(n);
        keys.push(ReferenceKey {
            window_start: windows.starts[b],
            series,
        });
        let off = (b * n + series) * l;
        data.extend_from_slice(&windows.inputs.data()[off..off + l]);
    }
    (keys, Tensor::new(vec![count, l], data).expect("reference shape"))
}

struct Best {
    params: Vec<(String, Tensor)>,
    refs: Tensor,
    crps: f64,
    epoch: usize,
}

/// Trains the configured model on `panel`.
pub fn train(cfg: &RunConfig, panel: &SeriesPanel) -> Result<TrainRun> {
    cfg.validate()?;
    let prep = prepare(panel, cfg)?;
    train_prepared(cfg, &prep)
}

pub fn train_prepared(cfg: &RunConfig, prep: &Prepared) -> Result<TrainRun> {
    train_with(cfg, prep, &mut |_: &EpochProgress<'_>| {})
}

/// State handed to the per-epoch callback of [`train_with`].
pub struct EpochProgress<'a> {
    pub log: &'a EpochLog,
    pub model: &'a Model,
    pub store: &'a ParamStore,
    pub best_epoch: usize,
}

/// [`train_prepared`] with a hook called after every validated epoch.
pub fn train_with(cfg: &RunConfig, prep: &Prepared, on_epoch: &mut dyn FnMut(&EpochProgress<'_>)) -> Result<TrainRun> {
    let n = prep.names.len();
    let mut store = ParamStore::new();
    let model = Model::new(cfg.model(n), &mut store, &mut RngStream::derive(cfg.seed, "init"))?;
    let adam = Adam::new(cfg.lr);
    let train = prep.train();
    let valid = prep.valid();
    let mut shuffle = RngStream::derive(cfg.seed, "shuffle");
    let mut ref_rng = RngStream::derive(cfg.seed, "refs");
    let mut noise = RngStream::derive(cfg.seed, "noise.train");
    let mode = SampleMode { tau: cfg.tau, hard: false };

    let (mut keys, mut ref_windows) = sample_references(&train, cfg.references, &mut ref_rng);
    let mut best = Best {
        params: Checkpoint::from_store(&store),
        refs: ref_windows.clone(),
        crps: f64::INFINITY,
        epoch: 0,
    };
    let mut log = Vec::new();
    let mut abort = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = 0;

    'epochs: for epoch in 1..=cfg.max_epochs {
        epochs = epoch;
        if epoch > 1 {
            (keys, ref_windows) = sample_references(&train, cfg.references, &mut ref_rng);
        }
        let mut refs = ReferenceSet::encode(&model.pte, &store, keys.clone(), &ref_windows)?;
        shuffle.shuffle(&mut order);
        let (mut total, mut nll, mut klz, mut klg, mut seen) = (0.0, 0.0, 0.0, 0.0, 0usize);
        for idx in order.chunks(cfg.batch) {
            if cfg.ref_refresh == RefRefresh::Batch {
                refs = ReferenceSet::encode(&model.pte, &store, keys.clone(), &ref_windows)?;
            }
            let batch = train.select(idx);
            let mut tape = Tape::new();
            let step = (|| -> Result<(f64, f64, f64, f64)> {
                let pass = model.forward(&mut tape, &store, &batch.inputs, Some(&refs), &mut noise, mode, None)?;
                let (loss, nll) = model.loss(&mut tape, &pass, &batch.targets, cfg.beta_z, cfg.beta_g)?;
                let parts = (
                    tape.scalar(loss),
                    tape.scalar(nll),
                    tape.scalar(pass.kl_latent),
                    pass.kl_graph.map_or(0.0, |g| tape.scalar(g)),
                );
                // names the offending component before any update is applied
                elbo_loss(parts.1, parts.2, parts.3, cfg.beta_z, cfg.beta_g)?;
                tape.backward(loss, &mut store)?;
                adam.step(&mut store)?;
                Ok(parts)
            })();
            match step {
                Ok((t, l, z, g)) => {
                    let w = idx.len() as f64;
                    total += t * w;
                    nll += l * w;
                    klz += z * w;
                    klg += g * w;
                    seen += idx.len();
                }
                Err(e @ (Error::NonFinite { .. } | Error::Numerical(_))) => {
                    abort = Some(e);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        // validate with the reference set re-encoded by the current encoder so
        // the retained checkpoint reproduces this score exactly
        let refs = ReferenceSet::encode(&model.pte, &store, keys.clone(), &ref_windows)?;
        let predictor = Predictor {
            model: &model,
            store: &store,
            refs: &refs,
            tau: cfg.tau,
            chunk: cfg.batch,
        };
        let report = match evaluate_windows(&predictor, &valid, &prep.stats, cfg.s_eval, valid_seed(cfg)) {
            Ok(r) => r,
            Err(e @ (Error::NonFinite { .. } | Error::Numerical(_))) => {
                abort = Some(e);
                break;
            }
            Err(e) => return Err(e),
        };
        let s = seen.max(1) as f64;
        log.push(EpochLog {
            epoch,
            total: total / s,
            nll: nll / s,
            kl_latent: klz / s,
            kl_graph: klg / s,
            valid_crps: report.crps,
        });
        let improved = report.crps < best.crps;
        if improved {
            best = Best {
                params: Checkpoint::from_store(&store),
                refs: ref_windows.clone(),
                crps: report.crps,
                epoch,
            };
        }
        on_epoch(&EpochProgress {
            log: log.last().expect("logged"),
            model: &model,
            store: &store,
            best_epoch: best.epoch,
        });
        if !improved && epoch - best.epoch >= cfg.patience {
            break;
        }
    }

    Ok(TrainRun {
        checkpoint: Checkpoint {
            config: cfg.clone(),
            series: prep.names.clone(),
            stats: prep.stats.clone(),
            reference_windows: best.refs,
            params: best.params,
            best_valid_crps: best.crps,
            best_epoch: best.epoch,
            epochs,
        },
        log,
        abort,
    })
}

/// Test-split report for a trained checkpoint.
pub fn evaluate_test(ckpt: &Checkpoint, prep: &Prepared) -> Result<EvalReport> {
    let loaded = ckpt.restore()?;
    let p = Predictor::from_loaded(&loaded, &ckpt.config);
    evaluate_windows(&p, &prep.test(), &prep.stats, ckpt.config.s_eval, eval_seed(&ckpt.config))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RobustnessRow {
    pub rho: f64,
    pub crps: f64,
    pub pct_increase: f64,
}

pub fn robustness_csv(rows: &[RobustnessRow]) -> String {
    let mut out = String::from("rho,crps,pct_increase\n");
    for r in rows {
        out.push_str(&format!("{},{:.17e},{:.17e}\n", r.rho, r.crps, r.pct_increase));
    }
    out
}

/// CRPS with Gaussian input noise at each `rho`; targets stay clean. Every
/// level uses the same evaluation draws.
pub fn robustness_experiment(ckpt: &Checkpoint, panel: &SeriesPanel, rhos: &[f64]) -> Result<Vec<RobustnessRow>> {
    check_series(ckpt, panel)?;
    let normalized = ckpt.stats.apply(panel)?;
    robustness_normalized(ckpt, &normalized, None, rhos)
}

/// As [`robustness_experiment`], restricted to windows `range` of the
/// normalized panel.
pub fn robustness_normalized(
    ckpt: &Checkpoint,
    normalized: &SeriesPanel,
    range: Option<std::ops::Range<usize>>,
    rhos: &[f64],
) -> Result<Vec<RobustnessRow>> {
    if rhos.is_empty() {
        return Err(Error::InvalidArgument("robustness: empty rho list".into()));
    }
    if rhos[0] != 0.0 {
        return Err(Error::InvalidArgument("robustness: the rho list must start with 0".into()));
    }
    let cfg = &ckpt.config;
    let loaded = ckpt.restore()?;
    let p = Predictor::from_loaded(&loaded, cfg);
    let clean = make_windows(normalized, cfg.window, cfg.horizon, cfg.stride)?;
    let pick = |w: WindowBatch| match &range {
        Some(r) => w.slice(r.clone()),
        None => w,
    };
    let clean = pick(clean);
    let mut rows = Vec::with_capacity(rhos.len());
    let mut base = None;
    for &rho in rhos {
        let noisy = inject_noise(normalized, rho, crate::autodiff::rng::mix_label(cfg.seed, "robustness"))?;
        let windows = WindowBatch {
            inputs: pick(make_windows(&noisy, cfg.window, cfg.horizon, cfg.stride)?).inputs,
            targets: clean.targets.clone(),
            starts: clean.starts.clone(),
        };
        let crps = evaluate_windows(&p, &windows, &ckpt.stats, cfg.s_eval, eval_seed(cfg))?.crps;
        let clean_crps = *base.get_or_insert(crps);
        rows.push(RobustnessRow {
            rho,
            crps,
            pct_increase: crps_increase_percent(clean_crps, crps)?,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct GraphRecovery {
    pub logits: EdgeLogits,
    pub posterior: GraphPosterior,
    pub correlation: Option<GraphCorrelation>,
    pub confident: Vec<(usize, usize, f64)>,
}

/// `samples` hard graphs from the global logits of all windows in `panel`.
pub fn graph_recovery_experiment(
    ckpt: &Checkpoint,
    panel: &SeriesPanel,
    reference: Option<&Tensor>,
    samples: usize,
    threshold: f64,
) -> Result<GraphRecovery> {
    let (loaded, windows) = windows_for(ckpt, panel)?;
    graph_recovery_windows(ckpt, &loaded, &windows.inputs, reference, samples, threshold)
}

pub fn graph_recovery_windows(
    ckpt: &Checkpoint,
    loaded: &LoadedModel,
    inputs: &Tensor,
    reference: Option<&Tensor>,
    samples: usize,
    threshold: f64,
) -> Result<GraphRecovery> {
    let n = ckpt.series.len();
    if let Some(r) = reference {
        if r.shape() != [n, n] {
            return Err(Error::Data(format!(
                "reference adjacency is {:?}, model has {n} series",
                r.shape()
            )));
        }
    }
    if samples == 0 {
        return Err(Error::InvalidArgument("graph export needs at least one sample".into()));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!("threshold must be in [0, 1], got {threshold}")));
    }
    let cfg = &ckpt.config;
    let p = Predictor::from_loaded(loaded, cfg);
    let logits = EdgeLogits(
        p.graph_logits(inputs)?
            .ok_or_else(|| Error::InvalidArgument(format!("ablation `{}` has no graph", cfg.ablation)))?,
    );
    let mut rng = RngStream::derive(cfg.seed, "graph.export");
    let graphs = (0..samples)
        .map(|_| gumbel_sample(&logits, cfg.tau, &mut rng, true))
        .collect::<Result<Vec<_>>>()?;
    let posterior = edge_probability(&graphs)?;
    let correlation = reference.map(|r| graph_correlation(&posterior, r)).transpose()?;
    let confident = confident_edges(&posterior, threshold);
    Ok(GraphRecovery {
        logits,
        posterior,
        correlation,
        confident,
    })
}

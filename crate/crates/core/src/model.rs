//! The full forecaster: encoders, latent graph, aggregation and heads wired
//! into one differentiable forward pass.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{NoiseSource, ParamStore, RngStream, Tape, Tensor, Var};
use crate::decoder::{elbo_loss_var, gaussian_nll_var, Aggregator, Decoder, GlobalPool};
use crate::encoders::{kl_gaussian_var, reparam_sample_var, Pte, Rcn, ReferenceSet};
use crate::error::{Error, Result};
use crate::graph::{debug_check_graph, graph_kl_var, gumbel_sample_var, Ggm, Rgne};

/// Which components are switched off.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Full,
    /// No graph generation or GCN; `U` is the sampled PTE embedding.
    NoGraph,
    /// No reference correlation; two-way aggregation over `{u, g}`.
    NoRefCorr,
    /// Concatenation instead of weighted aggregation.
    NoWtAgg,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::NoGraph,
        Ablation::NoRefCorr,
        Ablation::NoWtAgg,
    ];

    pub fn uses_graph(self) -> bool {
        self != Ablation::NoGraph
    }

    pub fn uses_refcorr(self) -> bool {
        self != Ablation::NoRefCorr
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Full => "full",
            Ablation::NoGraph => "no-graph",
            Ablation::NoRefCorr => "no-refcorr",
            Ablation::NoWtAgg => "no-wtagg",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}`")))
    }
}

/// Source rows for the global embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolSource {
    /// Graph-refined embeddings.
    Refined,
    /// Reference-correlated embeddings.
    Reference,
    /// Sampled PTE embeddings.
    Temporal,
}

impl fmt::Display for PoolSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolSource::Refined => "u",
            PoolSource::Reference => "z",
            PoolSource::Temporal => "pte",
        })
    }
}

impl FromStr for PoolSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "u" => Ok(PoolSource::Refined),
            "z" => Ok(PoolSource::Reference),
            "pte" => Ok(PoolSource::Temporal),
            _ => Err(Error::Config(format!("unknown pool source `{s}` (u, z or pte)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub series: usize,
    pub window: usize,
    pub horizon: usize,
    pub hidden: usize,
    pub gcn_depth: usize,
    pub ablation: Ablation,
    pub pool: PoolSource,
    /// Bernoulli prior on each edge.
    pub prior: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.series < 2 {
            return Err(Error::Config(format!("need at least 2 series, got {}", self.series)));
        }
        if self.window < 2 || self.horizon < 1 || self.hidden < 1 || self.gcn_depth < 1 {
            return Err(Error::Config(
                "window >= 2, horizon >= 1, hidden >= 1 and gcn_depth >= 1 are required".into(),
            ));
        }
        if !(self.prior > 0.0 && self.prior < 1.0) {
            return Err(Error::Config(format!("prior_p must be in (0, 1), got {}", self.prior)));
        }
        if self.pool == PoolSource::Reference && !self.ablation.uses_refcorr() {
            return Err(Error::Config("pool source `z` needs the reference network".into()));
        }
        Ok(())
    }

    /// Width of the decoder input.
    pub fn decoder_input(&self) -> usize {
        if self.ablation == Ablation::NoWtAgg {
            3 * self.hidden
        } else {
            self.hidden
        }
    }
}

/// How the graph is sampled in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleMode {
    pub tau: f64,
    pub hard: bool,
}

/// Tape handles produced by [`Model::forward`]. Forecast rows are laid out
/// window-major: row `b * N + i` is series `i` of window `b`.
#[derive(Clone, Copy, Debug)]
pub struct ForwardPass {
    pub mu: Var,
    pub sigma: Var,
    pub kl_latent: Var,
    pub kl_graph: Option<Var>,
    /// Batch-averaged edge logits `[1, N, N]`.
    pub logits: Option<Var>,
    pub adjacency: Option<Var>,
    pub weights: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub pte: Pte,
    pub rcn: Option<Rcn>,
    pub ggm: Option<Ggm>,
    pub rgne: Option<Rgne>,
    pub pool: GlobalPool,
    pub aggregator: Option<Aggregator>,
    pub decoder: Decoder,
}

impl Model {
    /// Registers every parameter in `store`, in a fixed order.
    pub fn new(config: ModelConfig, store: &mut ParamStore, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let pte = Pte::new(store, rng, h)?;
        let rcn = if config.ablation.uses_refcorr() {
            Some(Rcn::new(store, rng, h)?)
        } else {
            None
        };
        let (ggm, rgne) = if config.ablation.uses_graph() {
            (
                Some(Ggm::new(store, rng, h, h)?),
                Some(Rgne::new(store, rng, h, config.gcn_depth)?),
            )
        } else {
            (None, None)
        };
        let pool = GlobalPool::new(store, rng, h)?;
        let aggregator = match config.ablation {
            Ablation::NoWtAgg => None,
            Ablation::NoRefCorr => Some(Aggregator::new(store, rng, h, &["u", "g"])?),
            _ => Some(Aggregator::new(store, rng, h, &["u", "z", "g"])?),
        };
        let decoder = Decoder::new(store, rng, config.decoder_input(), h, config.horizon)?;
        Ok(Model {
            config,
            pte,
            rcn,
            ggm,
            rgne,
            pool,
            aggregator,
            decoder,
        })
    }

    fn check_inputs(&self, inputs: &Tensor) -> Result<(usize, usize)> {
        let s = inputs.shape();
        let c = &self.config;
        if s.len() != 3 || s[1] != c.series || s[2] != c.window || s[0] == 0 {
            return Err(Error::shape(
                "forward",
                format!("inputs {s:?}, expected [B, {}, {}]", c.series, c.window),
            ));
        }
        Ok((s[0], s[1]))
    }

    /// Runs the model on `inputs: [B, N, L]`.
    ///
    /// Noise is drawn in a fixed order: latent normals, then edge uniforms.
    /// `logits` replaces the batch-averaged edge logits with a fixed
    /// `[N, N]` matrix.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inputs: &Tensor,
        refs: Option<&ReferenceSet>,
        noise: &mut dyn NoiseSource,
        mode: SampleMode,
        logits: Option<&Tensor>,
    ) -> Result<ForwardPass> {
        let (b, n) = self.check_inputs(inputs)?;
        let rows = inputs.clone().reshape(&[b * n, self.config.window])?;
        let lat = self.pte.encode(tape, store, &rows)?;
        let kl_latent = kl_gaussian_var(tape, lat)?;
        let e = reparam_sample_var(tape, lat, noise)?;

        let (u, kl_graph, logit_var, adjacency) = match (&self.ggm, &self.rgne) {
            (Some(ggm), Some(rgne)) => {
                let l = match logits {
                    Some(fixed) => {
                        if fixed.shape() != [n, n] {
                            return Err(Error::shape("forward", format!("logits {:?}", fixed.shape())));
                        }
                        tape.constant(fixed.clone().reshape(&[1, n, n])?)
                    }
                    None => {
                        let per_window = ggm.logits(tape, store, lat, n)?;
                        let flat = tape.reshape(per_window, &[b, n * n])?;
                        let mean = tape.group_mean(flat, b)?;
                        tape.reshape(mean, &[1, n, n])?
                    }
                };
                let kl = graph_kl_var(tape, l, self.config.prior)?;
                let a = gumbel_sample_var(tape, l, mode.tau, noise, mode.hard)?;
                if logits.is_none() {
                    debug_check_graph("forward", tape.value(a));
                }
                let flat = tape.reshape(a, &[1, n * n])?;
                let tiled = tape.repeat_rows(flat, b);
                let adj = tape.reshape(tiled, &[b, n, n])?;
                let u = rgne.refine(tape, store, adj, e)?;
                (u, Some(kl), Some(l), Some(a))
            }
            _ => (e, None, None, None),
        };

        let z = match &self.rcn {
            Some(rcn) => {
                let refs = refs.ok_or_else(|| {
                    Error::InvalidArgument("forward: reference set required".into())
                })?;
                Some(rcn.encode(tape, store, lat.mu, refs)?.z)
            }
            None => None,
        };

        let pooled_from = match self.config.pool {
            PoolSource::Refined => u,
            PoolSource::Reference => z.expect("validated"),
            PoolSource::Temporal => e,
        };
        let g = self.pool.forward(tape, store, pooled_from, n)?;
        let g = tape.repeat_rows(g, n);

        let (k, weights) = match (&self.aggregator, z) {
            (Some(agg), Some(z)) => {
                let (k, w) = agg.forward(tape, store, &[u, z, g])?;
                (k, Some(w))
            }
            (Some(agg), None) => {
                let (k, w) = agg.forward(tape, store, &[u, g])?;
                (k, Some(w))
            }
            (None, Some(z)) => (tape.concat_cols(&[u, z, g])?, None),
            (None, None) => unreachable!("no-wtagg keeps the reference network"),
        };
        debug_assert_eq!(tape.value(k).cols(), self.config.decoder_input());
        let (mu, sigma) = self.decoder.forward(tape, store, k)?;
        Ok(ForwardPass {
            mu,
            sigma,
            kl_latent,
            kl_graph,
            logits: logit_var,
            adjacency,
            weights,
        })
    }

    /// Training objective for a forward pass; `targets: [B, N, horizon]`.
    /// Returns `(total, nll)`.
    pub fn loss(
        &self,
        tape: &mut Tape,
        pass: &ForwardPass,
        targets: &Tensor,
        beta_latent: f64,
        beta_graph: f64,
    ) -> Result<(Var, Var)> {
        let rows = tape.value(pass.mu).rows();
        let y = tape.constant(targets.clone().reshape(&[rows, self.config.horizon])?);
        let nll = gaussian_nll_var(tape, pass.mu, pass.sigma, y)?;
        let total = elbo_loss_var(tape, nll, pass.kl_latent, pass.kl_graph, beta_latent, beta_graph)?;
        Ok((total, nll))
    }

    /// Edge logits averaged over all windows of `inputs: [B, N, L]`, which
    /// is the global graph the model assigns to that data.
    pub fn graph_logits(&self, store: &ParamStore, inputs: &Tensor, chunk: usize) -> Result<Tensor> {
        let ggm = self
            .ggm
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("this model has no graph module".into()))?;
        let (b, n) = self.check_inputs(inputs)?;
        let l = self.config.window;
        let chunk = chunk.max(1);
        let mut acc = vec![0.0; n * n];
        let mut start = 0;
        while start < b {
            let len = chunk.min(b - start);
            let rows = Tensor::new(
                vec![len * n, l],
                inputs.data()[start * n * l..(start + len) * n * l].to_vec(),
            )?;
            let mut tape = Tape::with_nan_check(false);
            let lat = self.pte.encode(&mut tape, store, &rows)?;
            let logits = ggm.logits(&mut tape, store, lat, n)?;
            for (k, v) in tape.value(logits).data().iter().enumerate() {
                acc[k % (n * n)] += v;
            }
            start += len;
        }
        acc.iter_mut().for_each(|v| *v /= b as f64);
        Tensor::new(vec![n, n], acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::FixedNoise;
    use crate::encoders::ReferenceKey;

    fn config(ablation: Ablation) -> ModelConfig {
        ModelConfig {
            series: 3,
            window: 4,
            horizon: 2,
            hidden: 5,
            gcn_depth: 2,
            ablation,
            pool: PoolSource::Refined,
            prior: 0.1,
        }
    }

    fn inputs(b: usize) -> Tensor {
        let data = (0..b * 12).map(|k| ((k * 7 % 11) as f64 - 5.0) / 4.0).collect();
        Tensor::new(vec![b, 3, 4], data).unwrap()
    }

    fn refs(model: &Model, store: &ParamStore) -> ReferenceSet {
        let windows = inputs(1).reshape(&[3, 4]).unwrap();
        let keys = (0..3).map(|s| ReferenceKey { window_start: 0, series: s }).collect();
        ReferenceSet::encode(&model.pte, store, keys, &windows).unwrap()
    }

    const TRAIN: SampleMode = SampleMode { tau: 0.5, hard: false };

    #[test]
    fn decoder_widths_follow_ablation() {
        for a in Ablation::ALL {
            let mut store = ParamStore::new();
            let m = Model::new(config(a), &mut store, &mut RngStream::new(1)).unwrap();
            let want = if a == Ablation::NoWtAgg { 15 } else { 5 };
            assert_eq!(m.decoder.input_size(), want, "{a}");
            assert_eq!(store.id("nn_g1.W").is_some(), a != Ablation::NoGraph);
            assert_eq!(store.id("nn_z1.l0.W").is_some(), a != Ablation::NoRefCorr);
        }
    }

    #[test]
    fn default_decoder_widths() {
        for a in Ablation::ALL {
            let cfg = crate::config::RunConfig { ablation: a, ..Default::default() };
            let mut store = ParamStore::new();
            let m = Model::new(cfg.model(10), &mut store, &mut RngStream::new(1)).unwrap();
            let want = if a == Ablation::NoWtAgg { 180 } else { 60 };
            assert_eq!(m.decoder.input_size(), want, "{a}");
            assert_eq!(store.by_name("dec.trunk.W").unwrap().value.shape(), [want, 60]);
        }
    }

    #[test]
    fn forward_shapes_and_loss() {
        for a in Ablation::ALL {
            let mut store = ParamStore::new();
            let m = Model::new(config(a), &mut store, &mut RngStream::new(2)).unwrap();
            let r = refs(&m, &store);
            let mut tape = Tape::new();
            let pass = m
                .forward(&mut tape, &store, &inputs(4), Some(&r), &mut RngStream::new(3), TRAIN, None)
                .unwrap();
            assert_eq!(tape.shape(pass.mu), &[12, 2]);
            assert!(tape.value(pass.sigma).data().iter().all(|&s| s >= 1e-4));
            assert_eq!(pass.kl_graph.is_some(), a.uses_graph());
            let targets = Tensor::zeros(&[4, 3, 2]);
            let (loss, _) = m.loss(&mut tape, &pass, &targets, 1e-3, 1e-4).unwrap();
            assert!(tape.scalar(loss).is_finite());
            tape.backward(loss, &mut store).unwrap();
        }
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.to_string().parse::<Ablation>().unwrap(), a);
        }
        assert!("nograph".parse::<Ablation>().is_err());
        assert!("q".parse::<PoolSource>().is_err());
        let mut bad = config(Ablation::NoRefCorr);
        bad.pool = PoolSource::Reference;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn fixed_noise_forward_is_deterministic() {
        let mut store = ParamStore::new();
        let m = Model::new(config(Ablation::Full), &mut store, &mut RngStream::new(5)).unwrap();
        let r = refs(&m, &store);
        let run = || {
            let mut tape = Tape::new();
            let p = m
                .forward(&mut tape, &store, &inputs(2), Some(&r), &mut FixedNoise::default(), TRAIN, None)
                .unwrap();
            tape.value(p.mu).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn global_logits_average_windows() {
        let mut store = ParamStore::new();
        let m = Model::new(config(Ablation::Full), &mut store, &mut RngStream::new(6)).unwrap();
        let x = inputs(5);
        let whole = m.graph_logits(&store, &x, 5).unwrap();
        let chunked = m.graph_logits(&store, &x, 2).unwrap();
        for (a, b) in whole.data().iter().zip(chunked.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        // the forward pass averages the same quantity on the tape
        let r = refs(&m, &store);
        let mut tape = Tape::new();
        let p = m
            .forward(&mut tape, &store, &x, Some(&r), &mut FixedNoise::default(), TRAIN, None)
            .unwrap();
        for (a, b) in tape.value(p.logits.unwrap()).data().iter().zip(whole.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

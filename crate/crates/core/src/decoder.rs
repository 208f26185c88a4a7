//! Embedding aggregation, Gaussian forecast heads and the training objective.

use crate::autodiff::{Activation, Linear, Mlp, ParamStore, RngStream, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Lower bound added to every predicted standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-4;

/// Global embedding `g = mlp(mean of rows)` per group of `n` rows.
#[derive(Clone, Debug)]
pub struct GlobalPool {
    pub mlp: Mlp,
}

impl GlobalPool {
    pub fn new(store: &mut ParamStore, rng: &mut RngStream, hidden: usize) -> Result<Self> {
        Ok(GlobalPool {
            mlp: Mlp::new(
                store,
                rng,
                "global",
                &[hidden, hidden, hidden],
                Activation::Relu,
                Activation::Identity,
            )?,
        })
    }

    /// `u: [B * n, h]` -> `[B, h]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, u: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(Error::InvalidArgument("global_embedding: no series".into()));
        }
        let pooled = tape.group_mean(u, n)?;
        self.mlp.forward(tape, store, pooled)
    }
}

/// Per-series softmax weights over the aggregated components.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregationWeights {
    /// `[rows, components]`; each row sums to one.
    pub weights: Tensor,
}

/// Weighted aggregation: `e_c = w_c . tanh(W_c h_c)` per component,
/// `alpha = softmax(e)`, `k = sum_c alpha_c h_c`.
#[derive(Clone, Debug)]
pub struct Aggregator {
    pub projections: Vec<Linear>,
    pub scorers: Vec<Linear>,
    pub dim: usize,
}

impl Aggregator {
    /// `labels` name the components, e.g. `["u", "z", "g"]`.
    pub fn new(store: &mut ParamStore, rng: &mut RngStream, dim: usize, labels: &[&str]) -> Result<Self> {
        let mut projections = Vec::new();
        let mut scorers = Vec::new();
        for l in labels {
            projections.push(Linear::without_bias(store, rng, &format!("agg.{l}.proj"), dim, dim)?);
            scorers.push(Linear::without_bias(store, rng, &format!("agg.{l}.score"), dim, 1)?);
        }
        Ok(Aggregator {
            projections,
            scorers,
            dim,
        })
    }

    pub fn components(&self) -> usize {
        self.projections.len()
    }

    /// Returns `(k [rows, dim], alpha [rows, components])`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, parts: &[Var]) -> Result<(Var, Var)> {
        if parts.len() != self.components() {
            return Err(Error::shape(
                "weighted_aggregate",
                format!("{} components, expected {}", parts.len(), self.components()),
            ));
        }
        let rows = tape.value(parts[0]).rows();
        for &p in parts {
            if tape.shape(p) != [rows, self.dim] {
                return Err(Error::shape(
                    "weighted_aggregate",
                    format!("component {:?}, expected [{rows}, {}]", tape.shape(p), self.dim),
                ));
            }
        }
        let mut scores = Vec::with_capacity(parts.len());
        for ((&h, proj), scorer) in parts.iter().zip(&self.projections).zip(&self.scorers) {
            let x = proj.forward(tape, store, h)?;
            let x = tape.tanh(x);
            scores.push(scorer.forward(tape, store, x)?);
        }
        let scores = tape.concat_cols(&scores)?;
        let alpha = tape.softmax_rows(scores);
        let mut k: Option<Var> = None;
        for (c, &h) in parts.iter().enumerate() {
            let a = tape.slice_cols(alpha, c, 1)?;
            let term = tape.mul_col(a, h)?;
            k = Some(match k {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
        Ok((k.expect("at least one component"), alpha))
    }
}

/// Value-level weighted aggregation of single vectors.
pub fn weighted_aggregate(
    agg: &Aggregator,
    store: &ParamStore,
    parts: &[&[f64]],
) -> Result<(Vec<f64>, AggregationWeights)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = parts
        .iter()
        .map(|p| tape.constant(Tensor::new(vec![1, p.len()], p.to_vec()).expect("row")))
        .collect();
    let (k, alpha) = agg.forward(&mut tape, store, &vars)?;
    Ok((
        tape.value(k).data().to_vec(),
        AggregationWeights {
            weights: tape.value(alpha).clone(),
        },
    ))
}

/// `u ++ z ++ g`.
pub fn concat_aggregate(u: &[f64], z: &[f64], g: &[f64]) -> Result<Vec<f64>> {
    if u.len() != z.len() || z.len() != g.len() {
        return Err(Error::shape(
            "concat_aggregate",
            format!("{} / {} / {}", u.len(), z.len(), g.len()),
        ));
    }
    Ok(u.iter().chain(z).chain(g).copied().collect())
}

/// Direct multi-horizon Gaussian heads:
/// `mu = W_mu relu(trunk(k))`, `sigma = softplus(W_s relu(trunk(k))) + 1e-4`.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub trunk: Linear,
    pub mu_head: Linear,
    pub sigma_head: Linear,
    pub horizon: usize,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut RngStream,
        input: usize,
        hidden: usize,
        horizon: usize,
    ) -> Result<Self> {
        if horizon < 1 {
            return Err(Error::InvalidArgument("decode: horizon must be >= 1".into()));
        }
        Ok(Decoder {
            trunk: Linear::new(store, rng, "dec.trunk", input, hidden)?,
            mu_head: Linear::new(store, rng, "dec.mu", hidden, horizon)?,
            sigma_head: Linear::new(store, rng, "dec.sigma", hidden, horizon)?,
            horizon,
        })
    }

    pub fn input_size(&self) -> usize {
        self.trunk.input
    }

    /// `k: [rows, input]` -> `(mu, sigma)`, each `[rows, horizon]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, k: Var) -> Result<(Var, Var)> {
        let h = self.trunk.forward(tape, store, k)?;
        let h = tape.relu(h);
        let mu = self.mu_head.forward(tape, store, h)?;
        let s = self.sigma_head.forward(tape, store, h)?;
        let s = tape.softplus(s);
        let sigma = tape.shift(s, SIGMA_FLOOR);
        Ok((mu, sigma))
    }
}

/// Value-level decode of a single aggregated embedding.
pub fn decode(dec: &Decoder, store: &ParamStore, k: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, k.len()], k.to_vec())?);
    let (mu, sigma) = dec.forward(&mut tape, store, x)?;
    Ok((tape.value(mu).data().to_vec(), tape.value(sigma).data().to_vec()))
}

const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_7;

/// Mean Gaussian negative log-likelihood over all cells.
pub fn gaussian_nll(mu: &[f64], sigma: &[f64], y: &[f64]) -> Result<f64> {
    if mu.len() != sigma.len() || mu.len() != y.len() || mu.is_empty() {
        return Err(Error::shape(
            "gaussian_nll",
            format!("{} / {} / {}", mu.len(), sigma.len(), y.len()),
        ));
    }
    let mut total = 0.0;
    for ((&m, &s), &t) in mu.iter().zip(sigma).zip(y) {
        if !(s > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "gaussian_nll: sigma must be > 0, got {s}"
            )));
        }
        total += HALF_LN_TWO_PI + s.ln() + (t - m).powi(2) / (2.0 * s * s);
    }
    Ok(total / mu.len() as f64)
}

pub fn gaussian_nll_var(tape: &mut Tape, mu: Var, sigma: Var, y: Var) -> Result<Var> {
    let resid = tape.sub(y, mu)?;
    let sq = tape.square(resid);
    let var = tape.square(sigma);
    let var2 = tape.scale(var, 2.0);
    let quad = tape.div(sq, var2)?;
    let log_s = tape.ln(sigma);
    let cell = tape.add(log_s, quad)?;
    let m = tape.mean(cell);
    Ok(tape.shift(m, HALF_LN_TWO_PI))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub nll: f64,
    pub kl_latent: f64,
    pub kl_graph: f64,
    pub total: f64,
    pub beta_latent: f64,
    pub beta_graph: f64,
}

/// `total = (nll + beta_z * kl_latent) + beta_g * kl_graph`.
pub fn elbo_loss(nll: f64, kl_latent: f64, kl_graph: f64, beta_latent: f64, beta_graph: f64) -> Result<LossBreakdown> {
    for (name, v) in [
        ("nll", nll),
        ("kl_latent", kl_latent),
        ("kl_graph", kl_graph),
        ("beta_latent", beta_latent),
        ("beta_graph", beta_graph),
    ] {
        if !v.is_finite() {
            return Err(Error::Numerical(format!("loss component `{name}` is {v}")));
        }
    }
    Ok(LossBreakdown {
        nll,
        kl_latent,
        kl_graph,
        total: nll + beta_latent * kl_latent + beta_graph * kl_graph,
        beta_latent,
        beta_graph,
    })
}

/// Tape version of [`elbo_loss`] with the same composition order.
pub fn elbo_loss_var(
    tape: &mut Tape,
    nll: Var,
    kl_latent: Var,
    kl_graph: Option<Var>,
    beta_latent: f64,
    beta_graph: f64,
) -> Result<Var> {
    let a = tape.scale(kl_latent, beta_latent);
    let mut total = tape.add(nll, a)?;
    if let Some(g) = kl_graph {
        let b = tape.scale(g, beta_graph);
        total = tape.add(total, b)?;
    }
    Ok(total)
}

/// Per-series, per-step Gaussian forecast, `[series, horizon]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastDistribution {
    pub mu: Tensor,
    pub sigma: Tensor,
}

impl ForecastDistribution {
    pub fn new(mu: Tensor, sigma: Tensor) -> Result<Self> {
        if mu.shape() != sigma.shape() {
            return Err(Error::shape(
                "forecast",
                format!("mu {:?} vs sigma {:?}", mu.shape(), sigma.shape()),
            ));
        }
        if let Some(k) = sigma.data().iter().position(|s| !(*s > 0.0)) {
            return Err(Error::Numerical(format!(
                "forecast sigma at cell {k} is not positive"
            )));
        }
        Ok(ForecastDistribution { mu, sigma })
    }
}

/// Moment-matches an equally weighted Gaussian mixture per cell.
pub fn mixture_moments(samples: &[(Tensor, Tensor)]) -> Result<ForecastDistribution> {
    let (first_mu, _) = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("mixture_moments: no samples".into()))?;
    let shape = first_mu.shape().to_vec();
    let cells = first_mu.len();
    let mut mean = vec![0.0; cells];
    let mut second = vec![0.0; cells];
    for (mu, sigma) in samples {
        if mu.shape() != shape.as_slice() || sigma.shape() != shape.as_slice() {
            return Err(Error::shape("mixture_moments", "component shapes differ"));
        }
        for k in 0..cells {
            let (m, s) = (mu.data()[k], sigma.data()[k]);
            mean[k] += m;
            second[k] += s * s + m * m;
        }
    }
    let count = samples.len() as f64;
    let mut sd = vec![0.0; cells];
    for k in 0..cells {
        mean[k] /= count;
        let v = second[k] / count - mean[k] * mean[k];
        sd[k] = v.max(1e-8).sqrt();
    }
    if samples.len() == 1 {
        // exact pass-through; avoids the round trip through s^2 + m^2 - m^2
        return Ok(ForecastDistribution {
            mu: samples[0].0.clone(),
            sigma: samples[0].1.clone(),
        });
    }
    Ok(ForecastDistribution {
        mu: Tensor::new(shape.clone(), mean)?,
        sigma: Tensor::new(shape, sd)?,
    })
}

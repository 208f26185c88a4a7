//! Probabilistic temporal encoder (PTE) and reference correlation network
//! (RCN).
//!
//! The PTE maps each series' input window to a diagonal Gaussian over a
//! latent embedding: a bi-directional GRU summary is fed through the `nn_h`
//! trunk and two linear heads (mean, log-variance). The RCN attends from a
//! series' latent mean to a cached set of encoded reference windows.

use crate::autodiff::{
    Activation, BiGru, Linear, Mlp, NoiseSource, ParamStore, RngStream, Tape, Tensor, Var,
};
use crate::error::{Error, Result};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// Diagonal Gaussian over a latent embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGaussian {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl LatentGaussian {
    /// Builds a latent, clamping `logvar` into `[-10, 10]`.
    pub fn new(mu: Vec<f64>, logvar: Vec<f64>) -> Result<Self> {
        if mu.len() != logvar.len() {
            return Err(Error::shape(
                "latent",
                format!("mu has {} dims, logvar {}", mu.len(), logvar.len()),
            ));
        }
        let logvar = logvar
            .into_iter()
            .map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX))
            .collect();
        Ok(LatentGaussian { mu, logvar })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.logvar.iter().map(|v| (0.5 * v).exp()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub window: usize,
    pub references: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden: 60,
            window: 20,
            references: 30,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden < 1 || self.window < 2 || self.references < 1 {
            return Err(Error::InvalidArgument(format!(
                "encoder config needs hidden >= 1, window >= 2, references >= 1: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Mean and (clamped) log-variance of a batch of latents, each `[rows, hidden]`.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub mu: Var,
    pub logvar: Var,
}

/// Probabilistic temporal encoder.
#[derive(Clone, Debug)]
pub struct Pte {
    pub gru: BiGru,
    pub trunk: Linear,
    pub mean_head: Linear,
    pub logvar_head: Linear,
    pub hidden: usize,
}

impl Pte {
    pub fn new(store: &mut ParamStore, rng: &mut RngStream, hidden: usize) -> Result<Self> {
        Ok(Pte {
            gru: BiGru::new(store, rng, "pte", 1, hidden)?,
            trunk: Linear::new(store, rng, "nn_h.trunk", 2 * hidden, hidden)?,
            mean_head: Linear::new(store, rng, "nn_h.mean", hidden, hidden)?,
            logvar_head: Linear::new(store, rng, "nn_h.logvar", hidden, hidden)?,
            hidden,
        })
    }

    /// Encodes `windows: [rows, L]`, one scalar history per row.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, windows: &Tensor) -> Result<LatentVars> {
        let s = windows.shape();
        if s.len() != 2 {
            return Err(Error::shape("pte_encode", format!("windows {s:?}")));
        }
        let (rows, len) = (s[0], s[1]);
        if len < 2 {
            return Err(Error::InvalidArgument(format!(
                "pte_encode: window length {len} < 2"
            )));
        }
        if let Some(k) = windows.first_non_finite() {
            return Err(Error::Data(format!(
                "pte_encode: non-finite input at row {}, step {}",
                k / len,
                k % len
            )));
        }
        let steps: Vec<Var> = (0..len)
            .map(|t| {
                let col = (0..rows).map(|r| windows.data()[r * len + t]).collect();
                tape.constant(Tensor::new(vec![rows, 1], col).expect("column"))
            })
            .collect();
        let h = self.gru.encode(tape, store, &steps)?;
        let h = self.trunk.forward(tape, store, h)?;
        let h = tape.relu(h);
        let mu = self.mean_head.forward(tape, store, h)?;
        let lv = self.logvar_head.forward(tape, store, h)?;
        let logvar = tape.clamp(lv, LOGVAR_MIN, LOGVAR_MAX);
        Ok(LatentVars { mu, logvar })
    }
}

/// Value-level PTE: `window` is `[N, L]`, one row per series.
pub fn pte_encode(pte: &Pte, store: &ParamStore, window: &Tensor) -> Result<Vec<LatentGaussian>> {
    let mut tape = Tape::new();
    let lat = pte.encode(&mut tape, store, window)?;
    latents_from_tape(&tape, lat)
}

pub(crate) fn latents_from_tape(tape: &Tape, lat: LatentVars) -> Result<Vec<LatentGaussian>> {
    let (mu, lv) = (tape.value(lat.mu), tape.value(lat.logvar));
    (0..mu.rows())
        .map(|r| LatentGaussian::new(mu.row(r).to_vec(), lv.row(r).to_vec()))
        .collect()
}

/// `z = mu + exp(logvar / 2) * eps` with `eps ~ N(0, I)` drawn from `noise`.
pub fn reparam_sample_var(
    tape: &mut Tape,
    lat: LatentVars,
    noise: &mut dyn NoiseSource,
) -> Result<Var> {
    let shape = tape.shape(lat.mu).to_vec();
    let eps = noise.normals(shape.iter().product());
    let eps = tape.constant(Tensor::new(shape, eps)?);
    let half = tape.scale(lat.logvar, 0.5);
    let sigma = tape.exp(half);
    let spread = tape.mul(sigma, eps)?;
    tape.add(lat.mu, spread)
}

pub fn reparam_sample(lat: &LatentGaussian, noise: &mut dyn NoiseSource) -> Vec<f64> {
    let eps = noise.normals(lat.dim());
    lat.mu
        .iter()
        .zip(lat.sigma())
        .zip(eps)
        .map(|((m, s), e)| m + s * e)
        .collect()
}

/// KL(N(mu, diag exp(logvar)) || N(0, I)).
pub fn kl_gaussian(lat: &LatentGaussian) -> f64 {
    0.5 * lat
        .mu
        .iter()
        .zip(&lat.logvar)
        .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
        .sum::<f64>()
}

/// Per-row KL summed over dimensions, averaged over rows.
pub fn kl_gaussian_var(tape: &mut Tape, lat: LatentVars) -> Result<Var> {
    let rows = tape.value(lat.mu).rows() as f64;
    let m2 = tape.square(lat.mu);
    let var = tape.exp(lat.logvar);
    let a = tape.add(m2, var)?;
    let b = tape.sub(a, lat.logvar)?;
    let c = tape.shift(b, -1.0);
    let total = tape.sum(c);
    Ok(tape.scale(total, 0.5 / rows))
}

/// One cached reference: a series history drawn from the training windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReferenceKey {
    pub window_start: usize,
    pub series: usize,
}

/// Encoded reference windows used as RCN keys and values.
#[derive(Clone, Debug)]
pub struct ReferenceSet {
    pub keys: Vec<ReferenceKey>,
    /// `[M, hidden]` PTE means of the reference windows.
    pub encodings: Tensor,
    stale: bool,
}

impl ReferenceSet {
    pub fn from_encodings(encodings: Tensor) -> Result<Self> {
        if encodings.shape().len() != 2 || encodings.shape()[0] == 0 {
            return Err(Error::InvalidArgument(
                "reference set needs at least one encoding".into(),
            ));
        }
        Ok(ReferenceSet {
            keys: Vec::new(),
            encodings,
            stale: false,
        })
    }

    /// Encodes `windows: [M, L]` with the current encoder parameters.
    pub fn encode(pte: &Pte, store: &ParamStore, keys: Vec<ReferenceKey>, windows: &Tensor) -> Result<Self> {
        let mut tape = Tape::with_nan_check(false);
        let lat = pte.encode(&mut tape, store, windows)?;
        let mut set = ReferenceSet::from_encodings(tape.value(lat.mu).clone())?;
        set.keys = keys;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.encodings.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_stale(&self) -> bool {
        self.stale
    }

    /// Flags the cached encodings as out of date with the encoder parameters.
    pub fn mark_stale(&mut self) {
        self.stale = true;
    }
}

/// Reference correlation network: scaled dot-product attention from
/// `nn_z1(query mean)` to `nn_z2(reference)`, followed by a residual MLP.
#[derive(Clone, Debug)]
pub struct Rcn {
    pub query: Mlp,
    pub key: Mlp,
    pub residual: Mlp,
    pub hidden: usize,
}

/// RCN output: embeddings `[rows, hidden]` and attention weights `[rows, M]`.
#[derive(Clone, Copy, Debug)]
pub struct RcnOutput {
    pub z: Var,
    pub attention: Var,
}

impl Rcn {
    pub fn new(store: &mut ParamStore, rng: &mut RngStream, hidden: usize) -> Result<Self> {
        let sizes = [hidden, hidden, hidden];
        Ok(Rcn {
            query: Mlp::new(store, rng, "nn_z1", &sizes, Activation::Relu, Activation::Identity)?,
            key: Mlp::new(store, rng, "nn_z2", &sizes, Activation::Relu, Activation::Identity)?,
            residual: Mlp::new(store, rng, "rcn.residual", &sizes, Activation::Relu, Activation::Identity)?,
            hidden,
        })
    }

    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        query_mu: Var,
        refs: &ReferenceSet,
    ) -> Result<RcnOutput> {
        if refs.is_empty() {
            return Err(Error::InvalidArgument("rcn_encode: empty reference set".into()));
        }
        if refs.is_stale() {
            return Err(Error::InvalidArgument(
                "rcn_encode: reference encodings are stale".into(),
            ));
        }
        let r = tape.constant(refs.encodings.clone());
        let q = self.query.forward(tape, store, query_mu)?;
        let k = self.key.forward(tape, store, r)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let dim = tape.value(q).cols() as f64;
        let scores = tape.scale(scores, 1.0 / dim.sqrt());
        let attention = tape.softmax_rows(scores);
        let pooled = tape.matmul(attention, r)?;
        let delta = self.residual.forward(tape, store, pooled)?;
        let z = tape.add(pooled, delta)?;
        Ok(RcnOutput { z, attention })
    }
}

/// Value-level RCN over a list of query latents.
pub fn rcn_encode(
    rcn: &Rcn,
    store: &ParamStore,
    queries: &[LatentGaussian],
    refs: &ReferenceSet,
) -> Result<(Tensor, Tensor)> {
    let rows: Vec<Vec<f64>> = queries.iter().map(|l| l.mu.clone()).collect();
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::from_rows(&rows)?);
    let out = rcn.encode(&mut tape, store, q, refs)?;
    Ok((tape.value(out.z).clone(), tape.value(out.attention).clone()))
}

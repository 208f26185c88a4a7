//! Latent graph inference.
//!
//! The graph generation module scores every unordered pair of series from
//! their latent means and standard deviations, a binary-concrete
//! (Gumbel-softmax) relaxation samples a differentiable adjacency, and the
//! refined graph neural encoder (RGNE) propagates sampled embeddings over it.
//! Analysis helpers turn sampled graphs into edge probabilities, confident
//! edge lists and correlations against reference graphs.

use crate::autodiff::tape::sigmoid;
use crate::autodiff::{
    Activation, GcnLayer, GruCell, Linear, NoiseSource, ParamStore, RngStream, Tape, Tensor, Var,
};
use crate::encoders::{LatentGaussian, LatentVars};
use crate::error::{Error, Result};

/// Symmetric `N x N` pair scores; the diagonal carries no meaning.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeLogits(pub Tensor);

impl EdgeLogits {
    pub fn nodes(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(&[i, j])
    }
}

/// Relaxed (or straight-through hard) adjacency sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledGraph {
    pub adjacency: Tensor,
    pub temperature: f64,
    pub hard: bool,
}

impl SampledGraph {
    pub fn nodes(&self) -> usize {
        self.adjacency.shape()[0]
    }
}

/// Empirical edge frequencies over sampled graphs.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphPosterior {
    pub edge_prob: Tensor,
    pub samples: usize,
}

impl GraphPosterior {
    pub fn nodes(&self) -> usize {
        self.edge_prob.shape()[0]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.edge_prob.get(&[i, j])
    }
}

/// Graph generation module: `s_ij = nn_g2(relu(nn_g1([mu_i, mu_j, sigma_i, sigma_j])))`,
/// symmetrized as `(s_ij + s_ji) / 2`.
///
/// `nn_g1` is stored as one `[4h, hidden]` weight. Its four row blocks act on
/// `mu_i`, `mu_j`, `sigma_i` and `sigma_j`, which lets the first layer be
/// evaluated once per node and summed per pair.
#[derive(Clone, Debug)]
pub struct Ggm {
    pub first: Linear,
    pub second: Linear,
    pub latent: usize,
}

impl Ggm {
    pub fn new(store: &mut ParamStore, rng: &mut RngStream, latent: usize, hidden: usize) -> Result<Self> {
        Ok(Ggm {
            first: Linear::new(store, rng, "nn_g1", 4 * latent, hidden)?,
            second: Linear::new(store, rng, "nn_g2", hidden, 1)?,
            latent,
        })
    }

    /// Edge logits `[B, n, n]` for latents laid out as `[B * n, h]`.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, lat: LatentVars, n: usize) -> Result<Var> {
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "edge_logits needs at least 2 series, got {n}"
            )));
        }
        let h = self.latent;
        if tape.value(lat.mu).cols() != h {
            return Err(Error::shape("edge_logits", "latent width mismatch"));
        }
        let rows = tape.value(lat.mu).rows();
        let half = tape.scale(lat.logvar, 0.5);
        let sigma = tape.exp(half);
        let w = tape.param(store, self.first.weight);
        let block = |tape: &mut Tape, k: usize| tape.slice_rows(w, k * h, h);
        let (w_mu_i, w_mu_j, w_s_i, w_s_j) =
            (block(tape, 0)?, block(tape, 1)?, block(tape, 2)?, block(tape, 3)?);
        let pm = tape.matmul(lat.mu, w_mu_i)?;
        let ps = tape.matmul(sigma, w_s_i)?;
        let p = tape.add(pm, ps)?;
        let p = match self.first.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(p, b)?
            }
            None => p,
        };
        let qm = tape.matmul(lat.mu, w_mu_j)?;
        let qs = tape.matmul(sigma, w_s_j)?;
        let q = tape.add(qm, qs)?;
        let pairs = tape.pair_sum(p, q, n)?;
        let hidden = tape.relu(pairs);
        let s = self.second.forward(tape, store, hidden)?;
        let s = tape.reshape(s, &[rows / n, n, n])?;
        let st = tape.transpose(s)?;
        let both = tape.add(s, st)?;
        Ok(tape.scale(both, 0.5))
    }
}

/// Value-level edge logits for one set of latents.
pub fn edge_logits(ggm: &Ggm, store: &ParamStore, latents: &[LatentGaussian]) -> Result<EdgeLogits> {
    let n = latents.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "edge_logits needs at least 2 series, got {n}"
        )));
    }
    let mu: Vec<Vec<f64>> = latents.iter().map(|l| l.mu.clone()).collect();
    let lv: Vec<Vec<f64>> = latents.iter().map(|l| l.logvar.clone()).collect();
    let mut tape = Tape::new();
    let lat = LatentVars {
        mu: tape.constant(Tensor::from_rows(&mu)?),
        logvar: tape.constant(Tensor::from_rows(&lv)?),
    };
    let logits = ggm.logits(&mut tape, store, lat, n)?;
    Ok(EdgeLogits(tape.value(logits).clone().reshape(&[n, n])?))
}

/// Symmetric logistic noise with zero diagonal: one `ln u - ln(1 - u)` draw
/// per unordered pair, `u` taken from `noise` in row-major upper-triangle order.
pub fn logistic_noise(batch: usize, n: usize, noise: &mut dyn NoiseSource) -> Tensor {
    let pairs = n * (n - 1) / 2;
    let u = noise.uniforms(batch * pairs);
    let mut t = Tensor::zeros(&[batch, n, n]);
    let mut k = 0;
    for b in 0..batch {
        for i in 0..n {
            for j in i + 1..n {
                let l = u[k].ln() - (-u[k]).ln_1p();
                t.set(&[b, i, j], l);
                t.set(&[b, j, i], l);
                k += 1;
            }
        }
    }
    t
}

/// Debug builds check that every `[.., n, n]` graph is symmetric with a
/// zero diagonal.
pub(crate) fn debug_check_graph(op: &str, t: &Tensor) {
    if !cfg!(debug_assertions) {
        return;
    }
    let s = t.shape();
    let n = s[s.len() - 1];
    for g in 0..t.len() / (n * n) {
        let m = &t.data()[g * n * n..(g + 1) * n * n];
        for i in 0..n {
            assert!(m[i * n + i] == 0.0, "{op}: nonzero diagonal at {i}");
            for j in i + 1..n {
                assert!(m[i * n + j] == m[j * n + i], "{op}: asymmetric at ({i}, {j})");
            }
        }
    }
}

fn off_diagonal_mask(batch: usize, n: usize) -> Tensor {
    let mut t = Tensor::full(&[batch, n, n], 1.0);
    for b in 0..batch {
        for i in 0..n {
            t.set(&[b, i, i], 0.0);
        }
    }
    t
}

/// Binary-concrete sample `sigmoid((logit + l) / tau)` per unordered pair,
/// mirrored, with zero diagonal. With `hard`, the forward value is
/// thresholded at 0.5 while gradients follow the relaxed sample.
pub fn gumbel_sample_var(
    tape: &mut Tape,
    logits: Var,
    tau: f64,
    noise: &mut dyn NoiseSource,
    hard: bool,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "gumbel temperature must be > 0, got {tau}"
        )));
    }
    let s = tape.shape(logits).to_vec();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::shape("gumbel_sample", format!("{s:?}")));
    }
    let (b, n) = (s[0], s[1]);
    let l = tape.constant(logistic_noise(b, n, noise));
    let x = tape.add(logits, l)?;
    let x = tape.scale(x, 1.0 / tau);
    let a = tape.sigmoid(x);
    let mask = tape.constant(off_diagonal_mask(b, n));
    let a = tape.mul(a, mask)?;
    let a = if hard { tape.straight_through(a) } else { a };
    Ok(a)
}

pub fn gumbel_sample(
    logits: &EdgeLogits,
    tau: f64,
    noise: &mut dyn NoiseSource,
    hard: bool,
) -> Result<SampledGraph> {
    let n = logits.nodes();
    let mut tape = Tape::new();
    let l = tape.constant(logits.0.clone().reshape(&[1, n, n])?);
    let a = gumbel_sample_var(&mut tape, l, tau, noise, hard)?;
    Ok(SampledGraph {
        adjacency: tape.value(a).clone().reshape(&[n, n])?,
        temperature: tau,
        hard,
    })
}

/// Mean over samples of the adjacencies thresholded at 0.5.
pub fn edge_probability(samples: &[SampledGraph]) -> Result<GraphPosterior> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("edge_probability: no samples".into()))?;
    let n = first.nodes();
    let mut acc = Tensor::zeros(&[n, n]);
    for s in samples {
        if s.adjacency.shape() != [n, n] {
            return Err(Error::shape(
                "edge_probability",
                format!("mixed sizes {:?} and {:?}", [n, n], s.adjacency.shape()),
            ));
        }
        for (a, &x) in acc.data_mut().iter_mut().zip(s.adjacency.data()) {
            if x > 0.5 {
                *a += 1.0;
            }
        }
    }
    let k = samples.len() as f64;
    acc.data_mut().iter_mut().for_each(|a| *a /= k);
    for i in 0..n {
        acc.set(&[i, i], 0.0);
    }
    debug_check_graph("edge_probability", &acc);
    Ok(GraphPosterior {
        edge_prob: acc,
        samples: samples.len(),
    })
}

/// Refined graph neural encoder: two GCN passes over the sampled adjacency
/// followed by one GRU gating step against the sampled embedding.
#[derive(Clone, Debug)]
pub struct Rgne {
    pub convs: Vec<GcnLayer>,
    pub gru: GruCell,
    pub hidden: usize,
}

impl Rgne {
    pub fn new(store: &mut ParamStore, rng: &mut RngStream, hidden: usize, depth: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::InvalidArgument("rgne depth must be >= 1".into()));
        }
        let convs = (0..depth)
            .map(|k| {
                let act = if k + 1 == depth {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                GcnLayer::new(store, rng, &format!("rgne.gcn{}", k + 1), hidden, hidden, act)
            })
            .collect::<Result<_>>()?;
        Ok(Rgne {
            convs,
            gru: GruCell::new(store, rng, "rgne.gru", hidden, hidden)?,
            hidden,
        })
    }

    /// `adj: [B, n, n]`, `embeddings: [B * n, h]` -> refined `[B * n, h]`.
    pub fn refine(&self, tape: &mut Tape, store: &ParamStore, adj: Var, embeddings: Var) -> Result<Var> {
        let sa = tape.shape(adj).to_vec();
        let se = tape.shape(embeddings).to_vec();
        if sa.len() != 3 || se.len() != 2 || sa[0] * sa[1] != se[0] || se[1] != self.hidden {
            return Err(Error::shape("rgne_refine", format!("adj {sa:?}, embeddings {se:?}")));
        }
        let (b, n) = (sa[0], sa[1]);
        let mut h = tape.reshape(embeddings, &[b, n, self.hidden])?;
        for conv in &self.convs {
            h = conv.forward(tape, store, h, adj)?;
        }
        let x = tape.reshape(h, &[b * n, self.hidden])?;
        self.gru.forward(tape, store, x, embeddings)
    }
}

/// Value-level RGNE for one graph.
pub fn rgne_refine(
    rgne: &Rgne,
    store: &ParamStore,
    graph: &SampledGraph,
    embeddings: &Tensor,
) -> Result<Tensor> {
    let n = graph.nodes();
    let mut tape = Tape::new();
    let a = tape.constant(graph.adjacency.clone().reshape(&[1, n, n])?);
    let e = tape.constant(embeddings.clone());
    let u = rgne.refine(&mut tape, store, a, e)?;
    Ok(tape.value(u).clone())
}

fn check_prior(prior: f64) -> Result<()> {
    if !(prior > 0.0 && prior < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "graph prior must lie in (0, 1), got {prior}"
        )));
    }
    Ok(())
}

/// Sum over unordered pairs of KL(Bernoulli(sigmoid(logit)) || Bernoulli(prior)).
pub fn graph_kl(logits: &EdgeLogits, prior: f64) -> Result<f64> {
    check_prior(prior)?;
    let n = logits.nodes();
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += crate::autodiff::tape::bernoulli_kl(logits.get(i, j), prior);
        }
    }
    Ok(total)
}

/// Batched graph KL: per-graph pair sum, averaged over the batch.
pub fn graph_kl_var(tape: &mut Tape, logits: Var, prior: f64) -> Result<Var> {
    check_prior(prior)?;
    let s = tape.shape(logits).to_vec();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::shape("graph_kl", format!("{s:?}")));
    }
    let (b, n) = (s[0], s[1]);
    let mut mask = Tensor::zeros(&[b, n, n]);
    for g in 0..b {
        for i in 0..n {
            for j in i + 1..n {
                mask.set(&[g, i, j], 1.0);
            }
        }
    }
    let kl = tape.bernoulli_kl(logits, prior);
    let mask = tape.constant(mask);
    let kl = tape.mul(kl, mask)?;
    let total = tape.sum(kl);
    Ok(tape.scale(total, 1.0 / b as f64))
}

/// Pearson correlation between two graphs' upper triangles.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraphCorrelation {
    pub value: f64,
    /// Set when either vector is constant; `value` is then 0.
    pub degenerate: bool,
}

pub fn graph_correlation(posterior: &GraphPosterior, reference: &Tensor) -> Result<GraphCorrelation> {
    let n = posterior.nodes();
    if reference.shape() != [n, n] {
        return Err(Error::shape(
            "graph_correlation",
            format!("posterior is {n}x{n}, reference {:?}", reference.shape()),
        ));
    }
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "graph_correlation needs at least 3 nodes, got {n}"
        )));
    }
    let mut xs = Vec::with_capacity(n * (n - 1) / 2);
    let mut ys = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            xs.push(posterior.get(i, j));
            ys.push(reference.get(&[i, j]));
        }
    }
    Ok(pearson(&xs, &ys))
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> GraphCorrelation {
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    // a rounded mean can leave a constant vector with tiny nonzero spread
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    if constant(xs) || constant(ys) || sxx == 0.0 || syy == 0.0 {
        return GraphCorrelation {
            value: 0.0,
            degenerate: true,
        };
    }
    GraphCorrelation {
        value: (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

/// Pairs `(i, j, p)` with `i < j` and `p > threshold`, most probable first.
pub fn confident_edges(posterior: &GraphPosterior, threshold: f64) -> Vec<(usize, usize, f64)> {
    let n = posterior.nodes();
    let mut out = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = posterior.get(i, j);
            if p > threshold {
                out.push((i, j, p));
            }
        }
    }
    // stable sort keeps (i, j) order among ties
    out.sort_by(|a, b| b.2.total_cmp(&a.2));
    out
}

/// Sigmoid of every logit; the relaxed-sample limit for hard thresholds.
pub fn edge_marginals(logits: &EdgeLogits) -> Tensor {
    let n = logits.nodes();
    let mut t = logits.0.map(sigmoid);
    for i in 0..n {
        t.set(&[i, i], 0.0);
    }
    t
}

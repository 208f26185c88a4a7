//! Layer-by-layer finite-difference suites shared by the gradient tests and
//! the acceptance runner. Every case draws shapes, inputs and parameters
//! from its seed and reports the worst relative error.

#![allow(dead_code)]

use stoic_core::autodiff::check::{check_input, check_params, GradReport, DEFAULT_FLOOR, DEFAULT_STEP};
use stoic_core::autodiff::{Activation, BiGru, GcnLayer, GruCell, Mlp, NoiseSource, ParamStore, RngStream, Tape, Tensor, Var};
use stoic_core::decoder::{elbo_loss_var, gaussian_nll_var, Aggregator, Decoder, GlobalPool};
use stoic_core::encoders::{kl_gaussian_var, reparam_sample_var, LatentVars, Pte, Rcn, ReferenceSet};
use stoic_core::graph::{graph_kl_var, gumbel_sample_var, Ggm, Rgne};
use stoic_core::model::{Ablation, Model, ModelConfig, PoolSource, SampleMode};
use stoic_core::Result;

pub const LAYER_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;

pub fn random(rng: &mut RngStream, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(-scale, scale)).collect()).unwrap()
}

/// Moves every parameter off its initial value, biases included.
pub fn randomize(store: &mut ParamStore, rng: &mut RngStream, scale: f64) {
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    for name in names {
        let shape = store.by_name(&name).unwrap().value.shape().to_vec();
        store.set_by_name(&name, random(rng, &shape, scale)).unwrap();
    }
}

/// Scalar `sum(x * r)` for a fixed random `r`, so every output entry
/// carries its own weight.
pub fn project(tape: &mut Tape, x: Var, rng: &mut RngStream) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let r = tape.constant(random(rng, &shape, 1.0));
    let p = tape.mul(x, r)?;
    Ok(tape.sum(p))
}

fn dim(rng: &mut RngStream, lo: usize, hi: usize) -> usize {
    lo + rng.index(hi - lo + 1)
}

fn params(store: &mut ParamStore, f: &dyn Fn(&mut Tape, &ParamStore) -> Result<Var>) -> GradReport {
    check_params(store, DEFAULT_STEP, DEFAULT_FLOOR, f).unwrap()
}

fn input(x: &Tensor, f: &dyn Fn(&mut Tape, Var) -> Result<Var>) -> GradReport {
    check_input(x, DEFAULT_STEP, DEFAULT_FLOOR, f).unwrap()
}

/// Replays the same draws on every call, which freezes sampling noise
/// across the perturbed evaluations.
#[derive(Clone)]
pub struct Frozen(pub u64);

pub struct FrozenDraws {
    stream: RngStream,
}

impl Frozen {
    pub fn source(&self) -> FrozenDraws {
        FrozenDraws {
            stream: RngStream::derive(self.0, "frozen"),
        }
    }
}

impl NoiseSource for FrozenDraws {
    fn normals(&mut self, n: usize) -> Vec<f64> {
        self.stream.normals(n)
    }

    fn uniforms(&mut self, n: usize) -> Vec<f64> {
        self.stream.uniforms(n)
    }
}

pub fn mlp(seed: u64) -> GradReport {
    let mut rng = RngStream::derive(seed, "grad.mlp");
    let sizes = [dim(&mut rng, 1, 5), dim(&mut rng, 1, 5), dim(&mut rng, 1, 5), dim(&mut rng, 1, 4)];
    let hidden = [Activation::Tanh, Activation::Relu][seed as usize % 2];
    let mut store = ParamStore::new();
    let net = Mlp::new(&mut store, &mut rng, "mlp", &sizes, hidden, Activation::Tanh).unwrap();
    randomize(&mut store, &mut rng, 0.8);
    let rows = dim(&mut rng, 1, 4);
    let x = random(&mut rng, &[rows, sizes[0]], 1.0);
    let out_seed = rng.next_u64();
    let loss = |t: &mut Tape, s: &ParamStore, xv: Var| -> Result<Var> {
        let y = net.forward(t, s, xv)?;
        project(t, y, &mut RngStream::new(out_seed))
    };
    let p = params(&mut store, &|t, s| {
        let xv = t.constant(x.clone());
        loss(t, s, xv)
    });
    p.merge(input(&x, &|t, v| loss(t, &store, v)))
}

pub fn gru_cell(seed: u64) -> GradReport {
    let mut rng = RngStream::derive(seed, "grad.gru");
    let (inp, hid, rows) = (dim(&mut rng, 1, 4), dim(&mut rng, 1, 5), dim(&mut rng, 1, 3));
    let mut store = ParamStore::new();
    let cell = GruCell::new(&mut store, &mut rng, "cell", inp, hid).unwrap();
    randomize(&mut store, &mut rng, 0.8);
    let x = random(&mut rng, &[rows, inp], 1.0);
    let h = random(&mut rng, &[rows, hid], 1.0);
    let out_seed = rng.next_u64();
    let p = params(&mut store, &|t, s| {
        let (xv, hv) = (t.constant(x.clone()), t.constant(h.clone()));
        let y = cell.forward(t, s, xv, hv)?;
        project(t, y, &mut RngStream::new(out_seed))
    });
    let dx = input(&x, &|t, xv| {
        let hv = t.constant(h.clone());
        let y = cell.forward(t, &store, xv, hv)?;
        project(t, y, &mut RngStream::new(out_seed))
    });
    let dh = input(&h, &|t, hv| {
        let xv = t.constant(x.clone());
        let y = cell.forward(t, &store, xv, hv)?;
        project(t, y, &mut RngStream::new(out_seed))
    });
    p.merge(dx).merge(dh)
}

pub fn bigru(seed: u64) -> GradReport {
    let mut rng = RngStream::derive(seed, "grad.bigru");
    let (inp, hid, rows, len) = (dim(&mut rng, 1, 3), dim(&mut rng, 1, 4), dim(&mut rng, 1, 3), dim(&mut rng, 2, 4));
    let mut store = ParamStore::new();
    let gru = BiGru::new(&mut store, &mut rng, "bi", inp, hid).unwrap();
    randomize(&mut store, &mut rng, 0.8);
    let xs: Vec<Tensor> = (0..len).map(|_| random(&mut rng, &[rows, inp], 1.0)).collect();
    let out_seed = rng.next_u64();
    params(&mut store, &|t, s| {
        let steps: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let y = gru.encode(t, s, &steps)?;
        project(t, y, &mut RngStream::new(out_seed))
    })
}

fn adjacency(rng: &mut RngStream, b: usize, n: usize) -> Tensor {
    let mut a = Tensor::zeros(&[b, n, n]);
    for g in 0..b {
        for i in 0..n {
            for j in i + 1..n {
                let w = rng.uniform_open();
                a.set(&[g, i, j], w);
                a.set(&[g, j, i], w);
            }
        }
    }
    a
}

pub fn gcn(seed: u64) -> GradReport {
    let mut rng = RngStream::derive(seed, "grad.gcn");
    let (b, n, d, out) = (dim(&mut rng, 1, 2), dim(&mut rng, 2, 4), dim(&mut rng, 1, 4), dim(&mut rng, 1, 4));
    let mut store = ParamStore::new();
    let act = [Activation::Tanh, Activation::Identity][seed as usize % 2];
    let layer = GcnLayer::new(&mut store, &mut rng, "gcn", d, out, act).unwrap();
    let h = random(&mut rng, &[b, n, d], 1.0);
    let a = adjacency(&mut rng, b, n);
    let out_seed = rng.next_u64();
    let loss = |t: &mut Tape, s: &ParamStore, hv: Var, av: Var| -> Result<Var> {
        let y = layer.forward(t, s, hv, av)?;
        project(t, y, &mut RngStream::new(out_seed))
    };
    let p = params(&mut store, &|t, s| {
        let (hv, av) = (t.constant(h.clone()), t.constant(a.clone()));
        loss(t, s, hv, av)
    });
    let dh = input(&h, &|t, hv| {
        let av = t.constant(a.clone());
        loss(t, &store, hv, av)
    });
    // the adjacency path carries the graph gradient; a positive diagonal
    // keeps every perturbed entry nonnegative
    let mut a_pos = a.clone();
    for g in 0..b {
        for i in 0..n {
            a_pos.set(&[g, i, i], 0.1 + rng.uniform_open());
        }
    }
    let da = input(&a_pos, &|t, av| {
        let hv = t.constant(h.clone());
        loss(t, &store, hv, av)
    });
    p.merge(dh).merge(da)
}

pub fn decoder(seed: u64) -> GradReport {
    let mut rng = RngStream::derive(seed, "grad.decoder");
    let (inp, hid, horizon, rows) = (dim(&mut rng, 1, 5), dim(&mut rng, 1, 5), dim(&mut rng, 1, 3), dim(&mut rng, 1, 3));
    let mut store = ParamStore::new();
    let dec = Decoder::new(&mut store, &mut rng, inp, hid, horizon).unwrap();
    randomize(&mut store, &mut rng, 0.8);
    let k = random(&mut rng, &[rows, inp], 1.0);
    let out_seed = rng.next_u64();
    params(&mut store, &|t, s| {
        let kv = t.constant(k.clone());
        let (mu, sigma) = dec.forward(t, s, kv)?;
        let mut r = RngStream::new(out_seed);
        let a = project(t, mu, &mut r)?;
        let b = project(t, sigma, &mut r)?;
        t.add(a, b)
    })
}

pub fn aggregation(seed: u64) -> GradReport {
    let mut rng = RngStream::derive(seed, "grad.agg");
    let (d, rows, parts) = (dim(&mut rng, 1, 4), dim(&mut rng, 1, 3), dim(&mut rng, 2, 3));
    let labels = ["u", "z", "g"];
    let mut store = ParamStore::new();
    let agg = Aggregator::new(&mut store, &mut rng, d, &labels[..parts]).unwrap();
    let xs: Vec<Tensor> = (0..parts).map(|_| random(&mut rng, &[rows, d], 1.0)).collect();
    let out_seed = rng.next_u64();
    let p = params(&mut store, &|t, s| {
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let (k, alpha) = agg.forward(t, s, &vs)?;
        let mut r = RngStream::new(out_seed);
        let a = project(t, k, &mut r)?;
        let b = project(t, alpha, &mut r)?;
        t.add(a, b)
    });
    let dx = input(&xs[0], &|t, v| {
        let mut vs = vec![v];
        vs.extend(xs[1..].iter().map(|x| t.constant(x.clone())));
        let (k, _) = agg.forward(t, &store, &vs)?;
        project(t, k, &mut RngStream::new(out_seed))
    });
    p.merge(dx)
}

pub fn global_pool(seed: u64) -> GradReport {
    let mut rng = RngStream::derive(seed, "grad.pool");
    let (h, n, b) = (dim(&mut rng, 1, 4), dim(&mut rng, 1, 4), dim(&mut rng, 1, 2));
    let mut store = ParamStore::new();
    let pool = GlobalPool::new(&mut store, &mut rng, h).unwrap();
    randomize(&mut store, &mut rng, 0.8);
    let u = random(&mut rng, &[b * n, h], 1.0);
    let out_seed = rng.next_u64();
    params(&mut store, &|t, s| {
        let uv = t.constant(u.clone());
        let g = pool.forward(t, s, uv, n)?;
        project(t, g, &mut RngStream::new(out_seed))
    })
}

/// Gaussian NLL, latent KL, graph KL and the combined objective.
pub fn losses(seed: u64) -> GradReport {
    let mut rng = RngStream::derive(seed, "grad.loss");
    let (rows, cols) = (dim(&mut rng, 1, 4), dim(&mut rng, 1, 3));
    let mu = random(&mut rng, &[rows, cols], 2.0);
    let sigma = random(&mut rng, &[rows, cols], 1.0).map(|s| 0.2 + s.abs());
    let y = random(&mut rng, &[rows, cols], 2.0);
    let nll_mu = input(&mu, &|t, m| {
        let (s, yv) = (t.constant(sigma.clone()), t.constant(y.clone()));
        gaussian_nll_var(t, m, s, yv)
    });
    let nll_sigma = input(&sigma, &|t, s| {
        let (m, yv) = (t.constant(mu.clone()), t.constant(y.clone()));
        gaussian_nll_var(t, m, s, yv)
    });
    let lmu = random(&mut rng, &[rows, cols], 1.5);
    let lv = random(&mut rng, &[rows, cols], 1.5);
    let kl_mu = input(&lmu, &|t, m| {
        let logvar = t.constant(lv.clone());
        kl_gaussian_var(t, LatentVars { mu: m, logvar })
    });
    let kl_lv = input(&lv, &|t, logvar| {
        let m = t.constant(lmu.clone());
        kl_gaussian_var(t, LatentVars { mu: m, logvar })
    });
    let n = dim(&mut rng, 2, 4);
    let logits = random(&mut rng, &[1, n, n], 3.0);
    let prior = 0.05 + 0.9 * rng.uniform_open();
    let gkl = input(&logits, &|t, l| graph_kl_var(t, l, prior));
    let (bz, bg) = (rng.uniform_open(), rng.uniform_open());
    let elbo = input(&mu, &|t, m| {
        let (s, yv) = (t.constant(sigma.clone()), t.constant(y.clone()));
        let nll = gaussian_nll_var(t, m, s, yv)?;
        let mv = t.constant(lmu.clone());
        let sq = t.square(m);
        let logvar = t.add(sq, mv)?;
        let klz = kl_gaussian_var(t, LatentVars { mu: m, logvar })?;
        let l = t.constant(logits.clone());
        let klg = graph_kl_var(t, l, prior)?;
        elbo_loss_var(t, nll, klz, Some(klg), bz, bg)
    });
    nll_mu.merge(nll_sigma).merge(kl_mu).merge(kl_lv).merge(gkl).merge(elbo)
}

/// Relaxed Gumbel-sigmoid and straight-through samples with frozen noise.
pub fn gumbel(seed: u64) -> GradReport {
    let mut rng = RngStream::derive(seed, "grad.gumbel");
    let n = dim(&mut rng, 2, 4);
    let logits = random(&mut rng, &[1, n, n], 2.0);
    let tau = [0.1, 0.5, 1.0][seed as usize % 3];
    let frozen = Frozen(rng.next_u64());
    let out_seed = rng.next_u64();
    let relaxed = input(&logits, &|t, l| {
        let a = gumbel_sample_var(t, l, tau, &mut frozen.source(), false)?;
        project(t, a, &mut RngStream::new(out_seed))
    });
    // straight-through: analytic gradient of the hard path against finite
    // differences of the relaxed path
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let a = gumbel_sample_var(&mut tape, l, tau, &mut frozen.source(), true).unwrap();
    let loss = project(&mut tape, a, &mut RngStream::new(out_seed)).unwrap();
    let hard = tape.gradients(loss).unwrap()[l.index()].clone().unwrap();
    let mut report = relaxed.clone();
    let numeric = numeric_input(&logits, &|t, l| {
        let a = gumbel_sample_var(t, l, tau, &mut frozen.source(), false)?;
        project(t, a, &mut RngStream::new(out_seed))
    });
    let worst = hard
        .iter()
        .zip(&numeric)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(DEFAULT_FLOOR))
        .fold(0.0, f64::max);
    if worst > report.max_rel_error {
        report.max_rel_error = worst;
        report.worst = "straight_through".into();
    }
    report.checked += hard.len();
    report
}

pub fn numeric_input(x: &Tensor, f: &dyn Fn(&mut Tape, Var) -> Result<Var>) -> Vec<f64> {
    let eval = |x: Tensor| {
        let mut t = Tape::with_nan_check(false);
        let v = t.constant(x);
        let l = f(&mut t, v).unwrap();
        t.scalar(l)
    };
    (0..x.len())
        .map(|k| {
            let mut p = x.clone();
            p.data_mut()[k] += DEFAULT_STEP;
            let mut m = x.clone();
            m.data_mut()[k] -= DEFAULT_STEP;
            (eval(p) - eval(m)) / (2.0 * DEFAULT_STEP)
        })
        .collect()
}

pub fn pte(seed: u64) -> GradReport {
    let mut rng = RngStream::derive(seed, "grad.pte");
    let (h, rows, len) = (dim(&mut rng, 1, 3), dim(&mut rng, 1, 3), dim(&mut rng, 2, 4));
    let mut store = ParamStore::new();
    let enc = Pte::new(&mut store, &mut rng, h).unwrap();
    randomize(&mut store, &mut rng, 0.6);
    let w = random(&mut rng, &[rows, len], 1.0);
    let frozen = Frozen(rng.next_u64());
    let out_seed = rng.next_u64();
    params(&mut store, &|t, s| {
        let lat = enc.encode(t, s, &w)?;
        let e = reparam_sample_var(t, lat, &mut frozen.source())?;
        let kl = kl_gaussian_var(t, lat)?;
        let p = project(t, e, &mut RngStream::new(out_seed))?;
        t.add(p, kl)
    })
}

pub fn rcn(seed: u64) -> GradReport {
    let mut rng = RngStream::derive(seed, "grad.rcn");
    let (h, rows, m) = (dim(&mut rng, 1, 4), dim(&mut rng, 1, 3), dim(&mut rng, 1, 4));
    let mut store = ParamStore::new();
    let net = Rcn::new(&mut store, &mut rng, h).unwrap();
    randomize(&mut store, &mut rng, 0.8);
    let refs = ReferenceSet::from_encodings(random(&mut rng, &[m, h], 1.0)).unwrap();
    let q = random(&mut rng, &[rows, h], 1.0);
    let out_seed = rng.next_u64();
    let p = params(&mut store, &|t, s| {
        let qv = t.constant(q.clone());
        let out = net.encode(t, s, qv, &refs)?;
        project(t, out.z, &mut RngStream::new(out_seed))
    });
    p.merge(input(&q, &|t, qv| {
        let out = net.encode(t, &store, qv, &refs)?;
        project(t, out.z, &mut RngStream::new(out_seed))
    }))
}

pub fn ggm(seed: u64) -> GradReport {
    let mut rng = RngStream::derive(seed, "grad.ggm");
    let (h, hid, n, b) = (dim(&mut rng, 1, 3), dim(&mut rng, 1, 4), dim(&mut rng, 2, 4), dim(&mut rng, 1, 2));
    let mut store = ParamStore::new();
    let net = Ggm::new(&mut store, &mut rng, h, hid).unwrap();
    randomize(&mut store, &mut rng, 0.8);
    let mu = random(&mut rng, &[b * n, h], 1.0);
    let lv = random(&mut rng, &[b * n, h], 1.0);
    let out_seed = rng.next_u64();
    params(&mut store, &|t, s| {
        let lat = LatentVars {
            mu: t.constant(mu.clone()),
            logvar: t.constant(lv.clone()),
        };
        let l = net.logits(t, s, lat, n)?;
        project(t, l, &mut RngStream::new(out_seed))
    })
}

pub fn rgne(seed: u64) -> GradReport {
    let mut rng = RngStream::derive(seed, "grad.rgne");
    let (h, n, b, depth) = (dim(&mut rng, 1, 3), dim(&mut rng, 2, 4), dim(&mut rng, 1, 2), dim(&mut rng, 1, 2));
    let mut store = ParamStore::new();
    let net = Rgne::new(&mut store, &mut rng, h, depth).unwrap();
    randomize(&mut store, &mut rng, 0.8);
    let e = random(&mut rng, &[b * n, h], 1.0);
    let a = adjacency(&mut rng, b, n);
    let out_seed = rng.next_u64();
    params(&mut store, &|t, s| {
        let (av, ev) = (t.constant(a.clone()), t.constant(e.clone()));
        let u = net.refine(t, s, av, ev)?;
        project(t, u, &mut RngStream::new(out_seed))
    })
}

/// Tiny full model (N = 3, L = 4, horizon 2, hidden 5), relaxed graph and
/// latent noise frozen; every parameter is checked.
pub fn end_to_end(seed: u64, ablation: Ablation) -> GradReport {
    let mut rng = RngStream::derive(seed, "grad.model");
    let config = ModelConfig {
        series: 3,
        window: 4,
        horizon: 2,
        hidden: 5,
        gcn_depth: 2,
        ablation,
        pool: PoolSource::Refined,
        prior: 0.2,
    };
    let mut store = ParamStore::new();
    let model = Model::new(config, &mut store, &mut rng).unwrap();
    randomize(&mut store, &mut rng, 0.5);
    let b = 2;
    let inputs = random(&mut rng, &[b, 3, 4], 1.0);
    let targets = random(&mut rng, &[b, 3, 2], 1.0);
    let refs = ReferenceSet::from_encodings(random(&mut rng, &[4, 5], 1.0)).unwrap();
    let frozen = Frozen(rng.next_u64());
    params(&mut store, &|t, s| {
        let pass = model.forward(
            t,
            s,
            &inputs,
            Some(&refs),
            &mut frozen.source(),
            SampleMode { tau: 0.5, hard: false },
            None,
        )?;
        let (total, _) = model.loss(t, &pass, &targets, 0.1, 0.1)?;
        Ok(total)
    })
}

pub type Suite = (&'static str, fn(u64) -> GradReport);

pub const LAYERS: &[Suite] = &[
    ("mlp", mlp),
    ("gru_cell", gru_cell),
    ("bigru", bigru),
    ("gcn", gcn),
    ("decoder", decoder),
    ("aggregation", aggregation),
    ("global_pool", global_pool),
    ("losses", losses),
    ("gumbel", gumbel),
    ("pte", pte),
    ("rcn", rcn),
    ("ggm", ggm),
    ("rgne", rgne),
];

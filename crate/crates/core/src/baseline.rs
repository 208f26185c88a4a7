//! Ensemble-of-point-forecasters baseline: K independently seeded bi-GRU
//! regressors whose spread across members is read as predictive uncertainty.

use crate::autodiff::nn::{BiGru, Linear};
use crate::autodiff::{Adam, ParamStore, RngStream, Tape, Tensor, Var};
use crate::config::RunConfig;
use crate::decoder::{ForecastDistribution, SIGMA_FLOOR};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::train::{score, Prepared};

/// One point forecaster: bi-GRU over a single series history, then a linear
/// map to the horizon. Series share weights, as in the main model.
#[derive(Clone, Debug)]
pub struct PointForecaster {
    pub gru: BiGru,
    pub head: Linear,
    pub horizon: usize,
}

impl PointForecaster {
    pub fn new(store: &mut ParamStore, rng: &mut RngStream, hidden: usize, horizon: usize) -> Result<Self> {
        let gru = BiGru::new(store, rng, "base", 1, hidden)?;
        let head = Linear::new(store, rng, "base.head", gru.output_size(), horizon)?;
        Ok(PointForecaster { gru, head, horizon })
    }

    /// `inputs: [B, N, L]` -> `[B * N, horizon]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, inputs: &Tensor) -> Result<Var> {
        let s = inputs.shape();
        if s.len() != 3 {
            return Err(Error::shape("point_forecast", format!("inputs {s:?}")));
        }
        let (rows, len) = (s[0] * s[1], s[2]);
        let steps: Vec<Var> = (0..len)
            .map(|t| {
                let col = (0..rows).map(|r| inputs.data()[r * len + t]).collect();
                tape.constant(Tensor::new(vec![rows, 1], col).expect("column"))
            })
            .collect();
        let h = self.gru.encode(tape, store, &steps)?;
        self.head.forward(tape, store, h)
    }

    pub fn predict(&self, store: &ParamStore, inputs: &Tensor, chunk: usize) -> Result<Tensor> {
        let s = inputs.shape();
        let (w, n, l) = (s[0], s[1], s[2]);
        let mut out = Vec::with_capacity(w * n * self.horizon);
        let mut start = 0;
        while start < w {
            let len = chunk.max(1).min(w - start);
            let part = Tensor::new(vec![len, n, l], inputs.data()[start * n * l..(start + len) * n * l].to_vec())?;
            let mut tape = Tape::with_nan_check(false);
            let y = self.forward(&mut tape, store, &part)?;
            out.extend_from_slice(tape.value(y).data());
            start += len;
        }
        Tensor::new(vec![w, n, self.horizon], out)
    }
}

fn mse(pred: &Tensor, target: &Tensor) -> f64 {
    let d = pred.data();
    let t = target.data();
    d.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / d.len() as f64
}

/// A member trained with early stopping on validation MSE.
pub struct Member {
    pub net: PointForecaster,
    pub store: ParamStore,
    pub best_valid_mse: f64,
    pub best_epoch: usize,
}

pub fn train_member(cfg: &RunConfig, prep: &Prepared, seed: u64) -> Result<Member> {
    let mut store = ParamStore::new();
    let net = PointForecaster::new(&mut store, &mut RngStream::derive(seed, "baseline.init"), cfg.hidden, cfg.horizon)?;
    let adam = Adam::new(cfg.lr);
    let train = prep.train();
    let valid = prep.valid();
    let mut shuffle = RngStream::derive(seed, "baseline.shuffle");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (f64::INFINITY, 0, store.clone());
    for epoch in 1..=cfg.max_epochs {
        shuffle.shuffle(&mut order);
        for idx in order.chunks(cfg.batch) {
            let batch = train.select(idx);
            let mut tape = Tape::new();
            let pred = net.forward(&mut tape, &store, &batch.inputs)?;
            let rows = tape.value(pred).rows();
            let target = tape.constant(batch.targets.reshape(&[rows, cfg.horizon])?);
            let diff = tape.sub(pred, target)?;
            let sq = tape.square(diff);
            let loss = tape.mean(sq);
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFinite { op: "baseline mse".into() });
            }
            tape.backward(loss, &mut store)?;
            adam.step(&mut store)?;
        }
        let v = mse(&net.predict(&store, &valid.inputs, cfg.batch)?, &valid.targets);
        if v < best.0 {
            best = (v, epoch, store.clone());
        } else if epoch - best.1 >= cfg.patience {
            break;
        }
    }
    Ok(Member {
        net,
        store: best.2,
        best_valid_mse: best.0,
        best_epoch: best.1,
    })
}

/// Gaussian per cell from member point forecasts `[N, horizon]`: mean and
/// population standard deviation, floored.
pub fn ensemble_moments(preds: &[&Tensor]) -> Result<ForecastDistribution> {
    if preds.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "ensemble needs at least 2 members, got {}",
            preds.len()
        )));
    }
    let shape = preds[0].shape().to_vec();
    if let Some(p) = preds.iter().find(|p| p.shape() != shape.as_slice()) {
        return Err(Error::shape("ensemble_moments", format!("{shape:?} vs {:?}", p.shape())));
    }
    let k = preds.len() as f64;
    let cells = preds[0].len();
    let mut mu = vec![0.0; cells];
    let mut sigma = vec![0.0; cells];
    for c in 0..cells {
        let m = preds.iter().map(|p| p.data()[c]).sum::<f64>() / k;
        let var = preds.iter().map(|p| (p.data()[c] - m).powi(2)).sum::<f64>() / k;
        mu[c] = m;
        sigma[c] = var.sqrt().max(SIGMA_FLOOR);
    }
    ForecastDistribution::new(Tensor::new(shape.clone(), mu)?, Tensor::new(shape, sigma)?)
}

pub struct BaselineRun {
    pub report: EvalReport,
    /// `(seed, best validation MSE, best epoch)` per member.
    pub members: Vec<(u64, f64, usize)>,
    /// Per test window, on the normalized scale.
    pub forecasts: Vec<ForecastDistribution>,
}

/// Trains members with seeds `seed + 1 ..= seed + k` and scores the ensemble
/// on the test windows.
pub fn ensemble_baseline(cfg: &RunConfig, prep: &Prepared, k: usize) -> Result<BaselineRun> {
    if k < 2 {
        return Err(Error::Config(format!("baseline needs k >= 2 members, got {k}")));
    }
    let test = prep.test();
    let n = prep.names.len();
    let mut preds = Vec::with_capacity(k);
    let mut members = Vec::with_capacity(k);
    for m in 1..=k as u64 {
        let seed = cfg.seed + m;
        let member = train_member(cfg, prep, seed)?;
        preds.push(member.net.predict(&member.store, &test.inputs, cfg.batch)?);
        members.push((seed, member.best_valid_mse, member.best_epoch));
    }
    let cell = n * cfg.horizon;
    let forecasts = (0..test.len())
        .map(|b| {
            let window: Vec<Tensor> = preds
                .iter()
                .map(|p| Tensor::new(vec![n, cfg.horizon], p.data()[b * cell..(b + 1) * cell].to_vec()))
                .collect::<Result<_>>()?;
            ensemble_moments(&window.iter().collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BaselineRun {
        report: score(&forecasts, &test, &prep.stats)?,
        members,
        forecasts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::prepare;
    use crate::train::tests::tiny;

    #[test]
    fn two_member_arithmetic() {
        let a = Tensor::new(vec![1, 2], vec![1.0, 5.0]).unwrap();
        let b = Tensor::new(vec![1, 2], vec![3.0, 5.0]).unwrap();
        let d = ensemble_moments(&[&a, &b]).unwrap();
        assert_eq!(d.mu.data(), &[2.0, 5.0]);
        assert_eq!(d.sigma.data(), &[1.0, SIGMA_FLOOR]);
    }

    #[test]
    fn needs_two_members() {
        let a = Tensor::zeros(&[1, 1]);
        assert!(ensemble_moments(&[&a]).is_err());
        let cfg = tiny();
        let (panel, _) = crate::train::load_panel(&cfg).unwrap();
        let prep = prepare(&panel, &cfg).unwrap();
        assert!(matches!(ensemble_baseline(&cfg, &prep, 1), Err(Error::Config(_))));
    }

    #[test]
    fn identical_members_hit_the_floor() {
        let cfg = tiny();
        let (panel, _) = crate::train::load_panel(&cfg).unwrap();
        let prep = prepare(&panel, &cfg).unwrap();
        let x = prep.test().inputs;
        let p: Vec<Tensor> = (0..2)
            .map(|_| {
                let m = train_member(&cfg, &prep, 7).unwrap();
                m.net.predict(&m.store, &x, 4).unwrap()
            })
            .collect();
        assert_eq!(p[0], p[1]);
        let d = ensemble_moments(&[&p[0], &p[1]]).unwrap();
        assert!(d.sigma.data().iter().all(|&s| s == SIGMA_FLOOR));
    }

    #[test]
    fn tiny_end_to_end() {
        let cfg = tiny();
        let (panel, _) = crate::train::load_panel(&cfg).unwrap();
        let prep = prepare(&panel, &cfg).unwrap();
        let run = ensemble_baseline(&cfg, &prep, 3).unwrap();
        assert_eq!(run.members.iter().map(|m| m.0).collect::<Vec<_>>(), vec![cfg.seed + 1, cfg.seed + 2, cfg.seed + 3]);
        assert!(run.report.crps.is_finite() && run.report.rmse.is_finite());
        assert!((0.0..=1.0).contains(&run.report.confidence_score));
    }
}

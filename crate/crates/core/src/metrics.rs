//! Point and probabilistic forecast scores.

use libm::erfc;
use statrs::function::erf::erfc_inv;

use crate::decoder::ForecastDistribution;
use crate::error::{Error, Result};

const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_3;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density.
pub fn norm_pdf(z: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Standard normal CDF through `erfc`, accurate in both tails.
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal quantile, `p` in (0, 1); one Newton step on top of
/// `erfc_inv` brings it to the accuracy of [`norm_cdf`].
pub fn norm_ppf(p: f64) -> f64 {
    let x = -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p);
    let d = norm_pdf(x);
    if d > 0.0 && x.is_finite() {
        x - (norm_cdf(x) - p) / d
    } else {
        x
    }
}

fn check_pair(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("{} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument(format!("{op}: empty input")));
    }
    Ok(())
}

pub fn rmse(mu: &[f64], y: &[f64]) -> Result<f64> {
    check_pair("rmse", mu, y)?;
    let sse: f64 = mu.iter().zip(y).map(|(m, t)| (m - t) * (m - t)).sum();
    Ok((sse / mu.len() as f64).sqrt())
}

/// Closed-form CRPS of `N(mu, sigma^2)` against `y`; `sigma = 0` is the
/// point mass at `mu`.
pub fn crps_gaussian(mu: f64, sigma: f64, y: f64) -> Result<f64> {
    if sigma < 0.0 || sigma.is_nan() {
        return Err(Error::InvalidArgument(format!(
            "crps_gaussian: sigma must be >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok((y - mu).abs());
    }
    let z = (y - mu) / sigma;
    Ok(sigma * (z * (2.0 * norm_cdf(z) - 1.0) + 2.0 * norm_pdf(z) - FRAC_1_SQRT_PI))
}

/// Mean CRPS over all cells.
pub fn mean_crps(dist: &ForecastDistribution, y: &[f64]) -> Result<f64> {
    check_pair("crps", dist.mu.data(), y)?;
    let mut total = 0.0;
    for ((&m, &s), &t) in dist.mu.data().iter().zip(dist.sigma.data()).zip(y) {
        total += crps_gaussian(m, s, t)?;
    }
    Ok(total / y.len() as f64)
}

/// Fraction of cells inside the central `level` interval.
pub fn coverage(dist: &ForecastDistribution, y: &[f64], level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "coverage: level must be in (0, 1), got {level}"
        )));
    }
    check_pair("coverage", dist.mu.data(), y)?;
    let q = norm_ppf(0.5 * (1.0 + level));
    let inside = dist
        .mu
        .data()
        .iter()
        .zip(dist.sigma.data())
        .zip(y)
        .filter(|((&m, &s), &t)| (t - m).abs() <= q * s)
        .count();
    Ok(inside as f64 / y.len() as f64)
}

/// 0.05, 0.10, ..., 0.95.
pub fn default_levels() -> Vec<f64> {
    (1..=19).map(|k| k as f64 / 20.0).collect()
}

/// `1 - mean_k |coverage_k - level_k|` given precomputed coverages.
pub fn confidence_from_reliability(reliability: &[(f64, f64)]) -> Result<f64> {
    if reliability.is_empty() {
        return Err(Error::InvalidArgument("confidence_score: no levels".into()));
    }
    let gap: f64 = reliability.iter().map(|(c, cov)| (cov - c).abs()).sum();
    Ok(1.0 - gap / reliability.len() as f64)
}

pub fn reliability(dist: &ForecastDistribution, y: &[f64], levels: &[f64]) -> Result<Vec<(f64, f64)>> {
    for w in levels.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::InvalidArgument(
                "reliability: levels must be strictly increasing".into(),
            ));
        }
    }
    levels
        .iter()
        .map(|&c| Ok((c, coverage(dist, y, c)?)))
        .collect()
}

pub fn confidence_score(dist: &ForecastDistribution, y: &[f64], levels: &[f64]) -> Result<f64> {
    if levels.is_empty() {
        return Err(Error::InvalidArgument("confidence_score: no levels".into()));
    }
    confidence_from_reliability(&reliability(dist, y, levels)?)
}

pub fn crps_increase_percent(crps_clean: f64, crps_noisy: f64) -> Result<f64> {
    if !(crps_clean > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "crps_increase_percent: clean CRPS must be > 0, got {crps_clean}"
        )));
    }
    Ok(100.0 * (crps_noisy - crps_clean) / crps_clean)
}

/// Aggregated scores over a set of forecasts.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rmse: f64,
    pub crps: f64,
    pub confidence_score: f64,
    pub reliability: Vec<(f64, f64)>,
    pub cells: usize,
    pub windows: usize,
}

/// Accumulates forecasts window by window so that every cell is weighted
/// equally in the final report.
#[derive(Clone, Debug, Default)]
pub struct EvalAccumulator {
    levels: Vec<f64>,
    sq_err: f64,
    crps: f64,
    inside: Vec<usize>,
    quantiles: Vec<f64>,
    cells: usize,
    windows: usize,
}

impl EvalAccumulator {
    pub fn new(levels: &[f64]) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::InvalidArgument("evaluation: no levels".into()));
        }
        let mut quantiles = Vec::with_capacity(levels.len());
        for (k, &c) in levels.iter().enumerate() {
            if !(c > 0.0 && c < 1.0) || (k > 0 && c <= levels[k - 1]) {
                return Err(Error::InvalidArgument(format!(
                    "evaluation: levels must be strictly increasing in (0, 1), got {c}"
                )));
            }
            quantiles.push(norm_ppf(0.5 * (1.0 + c)));
        }
        Ok(EvalAccumulator {
            levels: levels.to_vec(),
            inside: vec![0; levels.len()],
            quantiles,
            ..Default::default()
        })
    }

    pub fn add(&mut self, dist: &ForecastDistribution, y: &[f64]) -> Result<()> {
        check_pair("evaluate", dist.mu.data(), y)?;
        for ((&m, &s), &t) in dist.mu.data().iter().zip(dist.sigma.data()).zip(y) {
            self.sq_err += (m - t) * (m - t);
            self.crps += crps_gaussian(m, s, t)?;
            let dev = (t - m).abs();
            for (count, q) in self.inside.iter_mut().zip(&self.quantiles) {
                if dev <= q * s {
                    *count += 1;
                }
            }
        }
        self.cells += y.len();
        self.windows += 1;
        Ok(())
    }

    pub fn finish(&self) -> Result<EvalReport> {
        if self.cells == 0 {
            return Err(Error::InvalidArgument("evaluation: no forecasts".into()));
        }
        let n = self.cells as f64;
        let reliability: Vec<(f64, f64)> = self
            .levels
            .iter()
            .zip(&self.inside)
            .map(|(&c, &k)| (c, k as f64 / n))
            .collect();
        let report = EvalReport {
            rmse: (self.sq_err / n).sqrt(),
            crps: self.crps / n,
            confidence_score: confidence_from_reliability(&reliability)?,
            reliability,
            cells: self.cells,
            windows: self.windows,
        };
        if !report.rmse.is_finite() || !report.crps.is_finite() {
            return Err(Error::Numerical("evaluation produced a non-finite score".into()));
        }
        Ok(report)
    }
}

impl EvalReport {
    /// Coverage at `level`, if it is on the report's grid.
    pub fn coverage_at(&self, level: f64) -> Option<f64> {
        self.reliability
            .iter()
            .find(|(c, _)| (c - level).abs() < 1e-12)
            .map(|(_, cov)| *cov)
    }

    /// `metric,name,value` rows.
    pub fn to_metrics_csv(&self, name: &str) -> String {
        let mut out = String::from("metric,name,value\n");
        for (metric, value) in [
            ("rmse", self.rmse),
            ("crps", self.crps),
            ("confidence_score", self.confidence_score),
            ("cells", self.cells as f64),
            ("windows", self.windows as f64),
        ] {
            out.push_str(&format!("{metric},{name},{value:.17e}\n"));
        }
        out
    }

    pub fn to_reliability_csv(&self) -> String {
        let mut out = String::from("level,coverage\n");
        for (c, cov) in &self.reliability {
            out.push_str(&format!("{c},{cov:.17e}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn dist(mu: Vec<f64>, sigma: Vec<f64>) -> ForecastDistribution {
        let n = mu.len();
        ForecastDistribution {
            mu: Tensor::new(vec![n], mu).unwrap(),
            sigma: Tensor::new(vec![n], sigma).unwrap(),
        }
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        assert!((rmse(&[1.0; 5], &[-1.5; 5]).unwrap() - 2.5).abs() < 1e-15);
        assert!(rmse(&[], &[]).is_err());
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn normal_helpers() {
        assert_eq!(norm_cdf(0.0), 0.5);
        assert!((norm_cdf(1.959963984540054) - 0.975).abs() < 1e-12);
        assert!((norm_ppf(0.975) - 1.959963984540054).abs() < 1e-12);
        assert!(norm_cdf(-40.0) >= 0.0 && norm_cdf(-10.0) > 0.0);
        // 40-digit reference values
        for (z, p) in [
            (-3.3, 4.834241423837775e-4),
            (0.4, 0.6554217416103242),
            (7.5, 0.999999999999968),
            (-9.0, 1.1285884059538406e-19),
        ] {
            assert!((norm_cdf(z) - p).abs() < 1e-12, "{z}");
        }
    }

    #[test]
    fn crps_examples() {
        assert_eq!(crps_gaussian(1.0, 0.0, -2.5).unwrap(), 3.5);
        let c = crps_gaussian(0.0, 1.0, 0.0).unwrap();
        assert!((c - 0.233695).abs() < 1e-6);
        assert!((c - (2.0 * norm_pdf(0.0) - FRAC_1_SQRT_PI)).abs() < 1e-15);
        let far = crps_gaussian(0.0, 1.0, 10.0).unwrap();
        assert!(far < 10.0 && far > 10.0 - 1.0 / std::f64::consts::PI.sqrt() - 1e-9);
        assert!(crps_gaussian(0.0, -1.0, 0.0).is_err());
    }

    #[test]
    fn coverage_examples() {
        let d = dist(vec![0.0, 1.0, 2.0], vec![1.0, 1.0, 1.0]);
        assert_eq!(coverage(&d, &[0.0, 1.0, 2.0], 0.95).unwrap(), 1.0);
        let tight = dist(vec![0.0, 1.0], vec![1e-12, 1e-12]);
        assert_eq!(coverage(&tight, &[0.5, 1.5], 0.95).unwrap(), 0.0);
        assert!(coverage(&d, &[0.0, 1.0, 2.0], 1.0).is_err());
        assert!(coverage(&d, &[0.0, 1.0, 2.0], 0.0).is_err());
    }

    #[test]
    fn confidence_examples() {
        let levels = default_levels();
        assert_eq!(levels.len(), 19);
        let perfect: Vec<(f64, f64)> = levels.iter().map(|&c| (c, c)).collect();
        assert!((confidence_from_reliability(&perfect).unwrap() - 1.0).abs() < 1e-15);
        let always: Vec<(f64, f64)> = levels.iter().map(|&c| (c, 1.0)).collect();
        assert!((confidence_from_reliability(&always).unwrap() - 0.5).abs() < 1e-12);
        let never: Vec<(f64, f64)> = levels.iter().map(|&c| (c, 0.0)).collect();
        assert!((confidence_from_reliability(&never).unwrap() - 0.5).abs() < 1e-12);
        assert!(confidence_from_reliability(&[]).is_err());
        let d = dist(vec![0.0], vec![1.0]);
        assert!(confidence_score(&d, &[0.0], &[]).is_err());
    }

    #[test]
    fn increase_examples() {
        assert_eq!(crps_increase_percent(0.5, 0.5).unwrap(), 0.0);
        assert!((crps_increase_percent(0.5, 0.6).unwrap() - 20.0).abs() < 1e-12);
        assert!(crps_increase_percent(0.5, 0.4).unwrap() < 0.0);
        assert!(crps_increase_percent(0.0, 0.4).is_err());
    }

    #[test]
    fn accumulator_matches_direct_metrics() {
        let d = dist(vec![0.0, 1.0, 2.0, -1.0], vec![1.0, 0.5, 2.0, 0.1]);
        let y = [0.3, 2.0, 1.0, -1.05];
        let mut acc = EvalAccumulator::new(&default_levels()).unwrap();
        acc.add(&d, &y).unwrap();
        let r = acc.finish().unwrap();
        assert!((r.rmse - rmse(d.mu.data(), &y).unwrap()).abs() < 1e-15);
        assert!((r.crps - mean_crps(&d, &y).unwrap()).abs() < 1e-15);
        let cs = confidence_score(&d, &y, &default_levels()).unwrap();
        assert!((r.confidence_score - cs).abs() < 1e-15);
        assert_eq!(r.coverage_at(0.5), Some(coverage(&d, &y, 0.5).unwrap()));
        assert!(r.to_metrics_csv("test").starts_with("metric,name,value\nrmse,test,"));
        assert_eq!(r.to_reliability_csv().lines().count(), 20);
    }
}

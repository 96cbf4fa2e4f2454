//! Noise processes and optimal scalar quantization of the standard normal law.
//!
//! A process is described by a known value at the root level followed by
//! `steps` stochastic stages, so a sampled path always has `steps + 1`
//! entries and lines up with the levels of a scenario tree:
//!
//! * `IidStdNormal`: root value `ξ_1 = 1`, then `ξ_2, …, ξ_T` i.i.d. N(0, 1).
//! * `GeomPrice`: root value `ξ_0 = s_0 − κ`, then `ξ_t = s_t − κ` with
//!   `s_t = s_{t−1}·exp(σ ε_t − σ²/2)`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::normal;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProcessKind {
    IidStdNormal,
    GeomPrice { sigma2: f64, kappa: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcessModel {
    #[serde(flatten)]
    pub kind: ProcessKind,
    /// Known noise value at the root level.
    pub root: f64,
    /// Number of stochastic stages after the root.
    pub steps: usize,
}

impl ProcessModel {
    /// `T` stages with a degenerate first stage `ξ_1 = 1`.
    pub fn iid_std_normal(horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(invalid("horizon must be at least 1"));
        }
        Ok(ProcessModel {
            kind: ProcessKind::IidStdNormal,
            root: 1.0,
            steps: horizon - 1,
        })
    }

    /// Geometric price process over `T` stochastic stages started at `s0`.
    pub fn geom_price(horizon: usize, sigma2: f64, kappa: f64, s0: f64) -> Result<Self> {
        if horizon == 0 {
            return Err(invalid("horizon must be at least 1"));
        }
        if !(sigma2 > 0.0) {
            return Err(invalid("sigma2 must be positive"));
        }
        if !(s0 > 0.0) {
            return Err(invalid("s0 must be positive"));
        }
        Ok(ProcessModel {
            kind: ProcessKind::GeomPrice { sigma2, kappa },
            root: s0 - kappa,
            steps: horizon,
        })
    }

    /// Number of tree levels (root included).
    pub fn levels(&self) -> usize {
        self.steps + 1
    }

    /// Map one level's noise value and a standard normal innovation to the
    /// next level's noise value.
    pub fn advance(&self, current: f64, eps: f64) -> f64 {
        match self.kind {
            ProcessKind::IidStdNormal => eps,
            ProcessKind::GeomPrice { sigma2, kappa } => {
                let s = current + kappa;
                s * (sigma2.sqrt() * eps - 0.5 * sigma2).exp() - kappa
            }
        }
    }

    /// Price level `s_t` for GEOM_PRICE noise values, identity otherwise.
    pub fn price(&self, xi: f64) -> f64 {
        match self.kind {
            ProcessKind::IidStdNormal => xi,
            ProcessKind::GeomPrice { kappa, .. } => xi + kappa,
        }
    }

    /// The path obtained from explicit innovations (one per stochastic stage).
    pub fn path_from_innovations(&self, eps: &[f64]) -> Result<Vec<f64>> {
        if eps.len() != self.steps {
            return Err(Error::DimensionMismatch(format!(
                "expected {} innovations, got {}",
                self.steps,
                eps.len()
            )));
        }
        let mut path = Vec::with_capacity(self.levels());
        path.push(self.root);
        for &e in eps {
            let last = *path.last().unwrap();
            path.push(self.advance(last, e));
        }
        Ok(path)
    }

    /// Sample one path from an explicit generator.
    pub fn sample_path_with<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut path = Vec::with_capacity(self.levels());
        path.push(self.root);
        for _ in 0..self.steps {
            let e: f64 = rng.sample(StandardNormal);
            let last = *path.last().unwrap();
            path.push(self.advance(last, e));
        }
        path
    }
}

/// Sample a path deterministically from `seed` (stream 0).
pub fn sample_path(model: &ProcessModel, seed: u64) -> Vec<f64> {
    model.sample_path_with(&mut rng::stream(seed, 0))
}

/// The law of the remaining stages given an observed path prefix (root
/// included). The last observed value becomes the new root.
pub fn conditional_model(model: &ProcessModel, history: &[f64]) -> Result<ProcessModel> {
    if history.is_empty() {
        return Err(invalid("history must contain at least the root value"));
    }
    if history.len() >= model.levels() {
        return Err(Error::EmptyRemainder {
            stage: history.len(),
            horizon: model.levels(),
        });
    }
    Ok(ProcessModel {
        kind: model.kind.clone(),
        root: *history.last().unwrap(),
        steps: model.levels() - history.len(),
    })
}

/// Lloyd fixed point for the standard normal law.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quantizer {
    pub b: usize,
    pub points: Vec<f64>,
    pub probs: Vec<f64>,
    pub distortion: f64,
    pub tol: f64,
}

pub const DEFAULT_QUANTIZER_TOL: f64 = 1e-10;
pub const QUANTIZER_MAX_ITER: usize = 10_000;

/// Normal mass of `[a, b]`, evaluated on the tail side that keeps precision.
fn mass(a: f64, b: f64) -> f64 {
    if a >= 0.0 {
        normal::cdf(-a) - normal::cdf(-b)
    } else {
        normal::cdf(b) - normal::cdf(a)
    }
}

fn x_pdf(x: f64) -> f64 {
    if x.is_infinite() {
        0.0
    } else {
        x * normal::pdf(x)
    }
}

fn cell_edges(points: &[f64]) -> Vec<f64> {
    let mut edges = Vec::with_capacity(points.len() + 1);
    edges.push(f64::NEG_INFINITY);
    edges.extend(points.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    edges.push(f64::INFINITY);
    edges
}

/// Cell masses and quadratic distortion of a point set.
pub fn cell_masses_and_distortion(points: &[f64]) -> (Vec<f64>, f64) {
    let edges = cell_edges(points);
    let mut probs = Vec::with_capacity(points.len());
    let mut d2 = 0.0;
    for (i, &p) in points.iter().enumerate() {
        let (a, b) = (edges[i], edges[i + 1]);
        let m = mass(a, b);
        let first = normal::pdf(a) - normal::pdf(b);
        let second = m + x_pdf(a) - x_pdf(b);
        d2 += second - 2.0 * p * first + p * p * m;
        probs.push(m);
    }
    (probs, d2)
}

/// Optimal `b`-point quantizer of N(0, 1) by Lloyd's fixed-point iteration,
/// started from the quantiles `(i + 0.5) / b`.
pub fn quantize_std_normal(b: usize, tol: f64) -> Result<Quantizer> {
    if b == 0 {
        return Err(invalid("quantizer needs at least one point"));
    }
    if !(tol > 0.0) {
        return Err(invalid("tolerance must be positive"));
    }
    let mut points: Vec<f64> = (0..b)
        .map(|i| normal::inv_cdf((i as f64 + 0.5) / b as f64))
        .collect();
    let mut movement = f64::INFINITY;
    for _ in 0..QUANTIZER_MAX_ITER {
        let edges = cell_edges(&points);
        let next: Vec<f64> = (0..b)
            .map(|i| {
                let (a, e) = (edges[i], edges[i + 1]);
                (normal::pdf(a) - normal::pdf(e)) / mass(a, e)
            })
            .collect();
        movement = next
            .iter()
            .zip(&points)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        points = next;
        if movement < tol {
            let (probs, distortion) = cell_masses_and_distortion(&points);
            return Ok(Quantizer {
                b,
                points,
                probs,
                distortion,
                tol,
            });
        }
    }
    Err(Error::QuantizerNotConverged {
        iterations: QUANTIZER_MAX_ITER,
        movement,
        last_points: points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geom_price_with_zero_innovation() {
        let m = ProcessModel::geom_price(3, 0.07, 1.0, 1.0).unwrap();
        let path = m.path_from_innovations(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(path[0], 0.0);
        assert!((path[1] + 1.0 - (-0.035f64).exp()).abs() < 1e-15);
        assert!((path[1] + 0.034_394_4).abs() < 1e-6);
    }

    #[test]
    fn iid_first_component_is_one() {
        let m = ProcessModel::iid_std_normal(5).unwrap();
        for seed in 0..20 {
            let p = sample_path(&m, seed);
            assert_eq!(p.len(), 5);
            assert_eq!(p[0], 1.0);
        }
    }

    #[test]
    fn same_seed_same_path() {
        let m = ProcessModel::geom_price(52, 0.0049, 1.0, 1.0).unwrap();
        assert_eq!(sample_path(&m, 11), sample_path(&m, 11));
        assert_ne!(sample_path(&m, 11), sample_path(&m, 12));
    }

    #[test]
    fn conditional_models() {
        let iid = ProcessModel::iid_std_normal(4).unwrap();
        let c = conditional_model(&iid, &[1.0, 0.3]).unwrap();
        assert_eq!(c.steps, 2);
        assert_eq!(c.kind, ProcessKind::IidStdNormal);

        let g = ProcessModel::geom_price(52, 0.0049, 1.0, 1.0).unwrap();
        let c = conditional_model(&g, &[0.0, -0.1, 0.2]).unwrap();
        assert!((c.price(c.root) - 1.2).abs() < 1e-15);
        assert_eq!(c.steps, 50);

        assert!(matches!(
            conditional_model(&iid, &[1.0, 0.0, 0.0, 0.0]),
            Err(Error::EmptyRemainder { .. })
        ));
    }

    #[test]
    fn quantizer_one_and_two_points() {
        let q1 = quantize_std_normal(1, 1e-10).unwrap();
        assert_eq!(q1.points, vec![0.0]);
        assert!((q1.probs[0] - 1.0).abs() < 1e-15);
        assert!((q1.distortion - 1.0).abs() < 1e-14);

        let q2 = quantize_std_normal(2, 1e-10).unwrap();
        let c = (2.0 / std::f64::consts::PI).sqrt();
        assert!((q2.points[1] - c).abs() < 1e-12);
        assert!((q2.points[0] + c).abs() < 1e-12);
        assert!((q2.probs[0] - 0.5).abs() < 1e-15);
        assert!((q2.distortion - (1.0 - 2.0 / std::f64::consts::PI)).abs() < 1e-12);
    }

    /// Brute-force the symmetric three-point quantizer {−c, 0, c} by a grid
    /// search over c on the exact distortion, then refine the grid.
    fn brute_force_three_point() -> f64 {
        let d = |c: f64| cell_masses_and_distortion(&[-c, 0.0, c]).1;
        let (mut lo, mut hi) = (0.5, 2.0);
        for _ in 0..6 {
            let n = 2000;
            let mut best = (f64::INFINITY, lo);
            for k in 0..=n {
                let c = lo + (hi - lo) * k as f64 / n as f64;
                let v = d(c);
                if v < best.0 {
                    best = (v, c);
                }
            }
            let w = (hi - lo) / n as f64;
            lo = best.1 - 2.0 * w;
            hi = best.1 + 2.0 * w;
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn quantizer_three_points_matches_grid_search() {
        let c = brute_force_three_point();
        // Frozen from the oracle: 1.224006
        assert!((c - 1.224_006).abs() < 1e-5, "oracle c = {c}");
        let q3 = quantize_std_normal(3, 1e-12).unwrap();
        assert!(q3.points[1].abs() < 1e-12);
        assert!((q3.points[2] - c).abs() < 1e-6);
        assert!((q3.points[0] + c).abs() < 1e-6);
    }

    #[test]
    fn quantizer_invariants_up_to_twenty_points() {
        let mut last = f64::INFINITY;
        for b in 1..=20 {
            let q = quantize_std_normal(b, 1e-10).unwrap();
            let total: f64 = q.probs.iter().sum();
            assert!((total - 1.0).abs() < 1e-12, "b={b} sum={total}");
            assert!(q.points.windows(2).all(|w| w[0] < w[1]));
            for i in 0..b {
                assert!((q.points[i] + q.points[b - 1 - i]).abs() < 1e-9);
            }
            if b <= 10 {
                assert!(q.distortion <= last);
                last = q.distortion;
            }
        }
    }

    #[test]
    fn quantizer_rejects_bad_input() {
        assert!(quantize_std_normal(0, 1e-10).is_err());
        assert!(quantize_std_normal(3, 0.0).is_err());
    }

    #[test]
    fn sample_moments() {
        let m = ProcessModel::iid_std_normal(2).unwrap();
        let n = 1_000_000usize;
        let mut r = rng::stream(5, 0);
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let z = m.sample_path_with(&mut r)[1];
            s1 += z;
            s2 += z * z;
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        let se = (1.0 / n as f64).sqrt();
        assert!(mean.abs() < 4.0 * se);
        assert!((var - 1.0).abs() < 4.0 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn geometric_price_is_a_martingale() {
        let m = ProcessModel::geom_price(52, 0.0049, 1.0, 1.0).unwrap();
        let n = 1_000_000usize;
        let mut r = rng::stream(9, 0);
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let s = m.price(*m.sample_path_with(&mut r).last().unwrap());
            s1 += s;
            s2 += s * s;
        }
        let mean = s1 / n as f64;
        let sd = (s2 / n as f64 - mean * mean).sqrt();
        assert!((mean - 1.0).abs() < 4.0 * sd / (n as f64).sqrt(), "mean={mean}");
    }
}

//! Minimization of `ρ⁻¹ log Σ_k p_k exp(ρ ⟨w_k, x⟩)` over a polyhedron by a
//! spectral projected-gradient method with monotone Armijo search.

use serde::{Deserialize, Serialize};

use super::qp::{Polyhedron, ProjectionOptions, Projector};
use super::{CsrMatrix, SolveResult, Status};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropicObjective {
    pub rho: f64,
    /// Row `k` holds the cost coefficients `w_k` of scenario `k`.
    pub paths: CsrMatrix,
    pub probs: Vec<f64>,
}

impl EntropicObjective {
    pub fn value(&self, x: &[f64]) -> f64 {
        let z = self.paths.mul_vec(x);
        self.value_from_costs(&z)
    }

    /// Certainty equivalent of scenario costs `z`.
    pub fn value_from_costs(&self, z: &[f64]) -> f64 {
        let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let s: f64 = z.iter().zip(&self.probs).map(|(&zk, &p)| p * (self.rho * (zk - m)).exp()).sum();
        m + s.ln() / self.rho
    }

    pub fn value_and_gradient(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let z = self.paths.mul_vec(x);
        let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let e: Vec<f64> = z.iter().zip(&self.probs).map(|(&zk, &p)| p * (self.rho * (zk - m)).exp()).collect();
        let s: f64 = e.iter().sum();
        let q: Vec<f64> = e.iter().map(|v| v / s).collect();
        (m + s.ln() / self.rho, self.paths.mul_transpose_vec(&q))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropicOptions {
    /// Tolerance on the sup-norm of `x − P(x − ∇f(x))`.
    pub tol: f64,
    pub max_iterations: usize,
}

impl Default for EntropicOptions {
    fn default() -> Self {
        EntropicOptions {
            tol: 1e-6,
            max_iterations: 20_000,
        }
    }
}

fn sup_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn solve_entropic(obj: &EntropicObjective, poly: &Polyhedron, start: Option<&[f64]>, opts: &EntropicOptions) -> SolveResult {
    let n = poly.dim();
    assert!(obj.rho > 0.0, "entropic objective needs rho > 0");
    let ones = vec![1.0; n];
    let popts = ProjectionOptions::default();
    let mut proj = Projector::new(poly);

    let x0: Vec<f64> = match start {
        Some(s) => s.to_vec(),
        None => (0..n).map(|j| 0.0f64.max(poly.lower[j]).min(poly.upper[j])).collect(),
    };
    let r = proj.project(&x0, &ones, &popts);
    if r.status == Status::Infeasible {
        return r;
    }
    let mut x = r.x;
    let (mut f, mut g) = obj.value_and_gradient(&x);
    let mut step = 1.0 / g.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-12);
    let mut iterations = 0;
    let mut gm = f64::INFINITY;
    let mut status = Status::IterLimit;

    while iterations < opts.max_iterations {
        // Stationarity check with a unit step.
        let trial: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - b).collect();
        let pu = proj.project(&trial, &ones, &popts).x;
        gm = sup_dist(&x, &pu);
        if gm < opts.tol {
            status = Status::Optimal;
            break;
        }
        let trial: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - step * b).collect();
        let p = if (step - 1.0).abs() < 1e-15 { pu } else { proj.project(&trial, &ones, &popts).x };
        let d: Vec<f64> = p.iter().zip(&x).map(|(a, b)| a - b).collect();
        let slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        if slope >= 0.0 {
            // Projection noise dominates the step; accept the point.
            status = Status::Optimal;
            break;
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + alpha * b).collect();
            let fnew = obj.value(&xn);
            if fnew <= f + 1e-4 * alpha * slope {
                accepted = Some((xn, fnew));
                break;
            }
            alpha *= 0.5;
        }
        iterations += 1;
        let Some((xn, fnew)) = accepted else {
            break;
        };
        let (_, gn) = obj.value_and_gradient(&xn);
        let sk: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yk: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let ss: f64 = sk.iter().map(|v| v * v).sum();
        let sy: f64 = sk.iter().zip(&yk).map(|(a, b)| a * b).sum();
        step = if sy > 0.0 { (ss / sy).clamp(1e-10, 1e10) } else { 1e10f64.min(step * 10.0) };
        x = xn;
        f = fnew;
        g = gn;
    }
    let pv = poly.max_violation(&x);
    SolveResult {
        status,
        x,
        objective: f,
        iterations,
        primal_residual: pv,
        dual_residual: gm,
        duals: Vec::new(),
        dual_objective: None,
        certificate: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_leaf() -> EntropicObjective {
        // x0 shared, x1/x2 per leaf; costs −ξ x with ξ = (0.5, 1.0, −0.4).
        EntropicObjective {
            rho: 1.0,
            paths: CsrMatrix::from_rows(3, vec![vec![(0, -0.5), (1, -1.0)], vec![(0, -0.5), (2, 0.4)]]),
            probs: vec![0.5, 0.5],
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let obj = two_leaf();
        let x = [0.3, 0.7, 0.2];
        let (_, g) = obj.value_and_gradient(&x);
        for j in 0..3 {
            let mut a = x;
            let mut b = x;
            a[j] += 1e-6;
            b[j] -= 1e-6;
            let fd = (obj.value(&a) - obj.value(&b)) / 2e-6;
            assert!((fd - g[j]).abs() <= 1e-5 * g[j].abs().max(1e-3));
        }
    }

    #[test]
    fn solves_small_budgeted_problem() {
        let obj = two_leaf();
        let mut poly = Polyhedron::boxed(vec![0.0; 3], vec![1.0; 3]);
        poly.add_row(vec![(0, 1.0), (1, 1.0)], f64::NEG_INFINITY, 1.0);
        poly.add_row(vec![(0, 1.0), (2, 1.0)], f64::NEG_INFINITY, 1.0);
        let r = solve_entropic(&obj, &poly, None, &EntropicOptions::default());
        assert_eq!(r.status, Status::Optimal);
        // Both plans have mean payoff 0.5; only exercising early is riskless.
        assert!((r.x[0] - 1.0).abs() < 1e-6 && r.x[1].abs() < 1e-6 && r.x[2].abs() < 1e-6, "{:?}", r.x);
        assert!((r.objective + 0.5).abs() < 1e-9);
        assert!(r.primal_residual < 1e-9);
    }
}

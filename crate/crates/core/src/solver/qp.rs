//! Projection onto a polyhedron in a diagonal metric:
//! `min (x − λ)ᵀ Λ⁻¹ (x − λ)` subject to row and bound constraints.
//!
//! Bounds are kept explicit and rows are dualized. For multipliers `μ` the
//! Lagrangian minimizer is `x(μ) = clamp(λ − Λ Aᵀμ, l, u)`, and the concave
//! dual is maximized by a projected Newton method (nonnegativity on the
//! multipliers of inequality rows) with an Armijo search along the projection
//! arc. The dual is piecewise quadratic, so the method terminates once the
//! set of clamped coordinates settles; degenerate problems can stall short of
//! the tolerance, and small ones then fall back to the exact active-set
//! method of [`super::active_set`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::active_set::project_active_set;
use super::{simplex, CsrMatrix, LinearProgram, SolveResult, Status};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Polyhedron {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub rows: CsrMatrix,
    pub row_lower: Vec<f64>,
    pub row_upper: Vec<f64>,
}

impl Polyhedron {
    pub fn boxed(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        let n = lower.len();
        Polyhedron {
            lower,
            upper,
            rows: CsrMatrix::new(n),
            row_lower: Vec::new(),
            row_upper: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn add_row<I: IntoIterator<Item = (usize, f64)>>(&mut self, terms: I, lower: f64, upper: f64) {
        self.rows.push_row(terms);
        self.row_lower.push(lower);
        self.row_upper.push(upper);
    }

    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut v: f64 = 0.0;
        for j in 0..self.dim() {
            v = v.max(self.lower[j] - x[j]).max(x[j] - self.upper[j]);
        }
        for i in 0..self.row_lower.len() {
            let ax = self.rows.row_dot(i, x);
            v = v.max(self.row_lower[i] - ax).max(ax - self.row_upper[i]);
        }
        v
    }

    fn clamp(&self, x: &mut [f64]) {
        for j in 0..x.len() {
            x[j] = x[j].max(self.lower[j]).min(self.upper[j]);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionOptions {
    /// Feasibility and complementarity tolerance.
    pub tol: f64,
    pub max_iterations: usize,
}

impl Default for ProjectionOptions {
    fn default() -> Self {
        ProjectionOptions {
            tol: 1e-10,
            max_iterations: 200,
        }
    }
}

/// Scaled projection of `target` onto `poly` with variances `scale`.
///
/// Small problems go to the finite dual active-set method; large ones to the
/// dual projected Newton iteration of [`Projector`].
pub fn project_scaled(target: &[f64], scale: &[f64], poly: &Polyhedron, opts: &ProjectionOptions) -> SolveResult {
    let n = poly.dim();
    assert_eq!(target.len(), n);
    assert_eq!(scale.len(), n);
    if n <= ACTIVE_SET_LIMIT {
        if (0..n).any(|j| poly.lower[j] > poly.upper[j]) {
            return infeasible(n);
        }
        let r = project_active_set(target, scale, poly, opts.tol, 50 * (n + poly.row_lower.len()) + 100);
        if r.status != Status::IterLimit {
            return r;
        }
    }
    let mut p = Projector::new(poly);
    p.project(target, scale, opts)
}

/// Reusable projector that keeps the dual multipliers of the last call as a
/// warm start for the next.
#[derive(Clone, Debug)]
pub struct Projector<'a> {
    poly: &'a Polyhedron,
    /// One-sided constraints `sign · a_rowᵀ x ≤ rhs`.
    cons: Vec<OneSided>,
    mu: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
struct OneSided {
    row: usize,
    sign: f64,
    rhs: f64,
    free: bool,
}

const DENSE_LIMIT: usize = 400;

/// Largest dimension handled by the dense active-set method.
const ACTIVE_SET_LIMIT: usize = 300;

impl<'a> Projector<'a> {
    pub fn new(poly: &'a Polyhedron) -> Self {
        let mut cons = Vec::new();
        for i in 0..poly.row_lower.len() {
            let (lo, hi) = (poly.row_lower[i], poly.row_upper[i]);
            if lo == hi {
                cons.push(OneSided {
                    row: i,
                    sign: 1.0,
                    rhs: hi,
                    free: true,
                });
                continue;
            }
            if hi.is_finite() {
                cons.push(OneSided {
                    row: i,
                    sign: 1.0,
                    rhs: hi,
                    free: false,
                });
            }
            if lo.is_finite() {
                cons.push(OneSided {
                    row: i,
                    sign: -1.0,
                    rhs: -lo,
                    free: false,
                });
            }
        }
        let k = cons.len();
        Projector {
            poly,
            cons,
            mu: vec![0.0; k],
        }
    }

    pub fn project(&mut self, target: &[f64], scale: &[f64], opts: &ProjectionOptions) -> SolveResult {
        let poly = self.poly;
        let n = poly.dim();
        assert_eq!(target.len(), n);
        assert_eq!(scale.len(), n);
        if (0..n).any(|j| poly.lower[j] > poly.upper[j]) {
            return infeasible(n);
        }
        let mut x0 = target.to_vec();
        poly.clamp(&mut x0);
        let pv0 = poly.max_violation(&x0);
        if self.cons.is_empty() || pv0 <= opts.tol {
            return finished(Status::Optimal, x0, target, scale, 0, pv0, 0.0);
        }

        let st = DualState {
            poly,
            cons: &self.cons,
            target,
            scale,
        };
        let mut mu = self.mu.clone();
        let mut eval = st.evaluate(&mu);
        let mut iterations = 0;
        let mut stalled = false;
        while iterations < opts.max_iterations {
            let (viol, comp) = st.kkt(&mu, &eval.grad);
            if viol <= opts.tol && comp <= opts.tol * (1.0 + mu.iter().fold(0.0f64, |a, m| a.max(m.abs()))) {
                self.mu.clone_from(&mu);
                let x = eval.x;
                let pv = poly.max_violation(&x);
                return finished(Status::Optimal, x, target, scale, iterations, pv, comp);
            }
            if stalled || mu.iter().any(|m| m.abs() > 1e14) {
                break;
            }
            iterations += 1;
            match st.newton_step(&mu, &eval) {
                Some((new_mu, new_eval)) => {
                    mu = new_mu;
                    eval = new_eval;
                }
                None => stalled = true,
            }
        }
        // Either the polyhedron is empty or the iteration did not converge.
        let mut lp = LinearProgram::new();
        for j in 0..n {
            lp.add_var(0.0, poly.lower[j], poly.upper[j]);
        }
        for i in 0..poly.row_lower.len() {
            let (c, v) = poly.rows.row(i);
            lp.add_row(c.iter().copied().zip(v.iter().copied()), poly.row_lower[i], poly.row_upper[i]);
        }
        let feas = simplex::solve_lp(&lp);
        self.mu = vec![0.0; self.cons.len()];
        if feas.status == Status::Infeasible {
            let mut r = infeasible(n);
            r.iterations = iterations;
            r.certificate = feas.certificate;
            return r;
        }
        let x = eval.x;
        let pv = poly.max_violation(&x);
        if n <= ACTIVE_SET_LIMIT {
            let r = project_active_set(target, scale, poly, opts.tol, 50 * (n + self.cons.len()) + 100);
            if r.status == Status::Optimal {
                return r;
            }
        }
        let (_, comp) = st.kkt(&mu, &eval.grad);
        finished(Status::IterLimit, x, target, scale, iterations, pv, comp)
    }
}

fn objective(x: &[f64], target: &[f64], scale: &[f64]) -> f64 {
    x.iter()
        .zip(target)
        .zip(scale)
        .map(|((a, b), s)| (a - b) * (a - b) / s)
        .sum()
}

fn finished(status: Status, x: Vec<f64>, target: &[f64], scale: &[f64], iterations: usize, pr: f64, dr: f64) -> SolveResult {
    SolveResult {
        status,
        objective: objective(&x, target, scale),
        x,
        iterations,
        primal_residual: pr,
        dual_residual: dr,
        duals: Vec::new(),
        dual_objective: None,
        certificate: None,
    }
}

fn infeasible(n: usize) -> SolveResult {
    SolveResult {
        status: Status::Infeasible,
        x: vec![f64::NAN; n],
        objective: f64::NAN,
        iterations: 0,
        primal_residual: f64::INFINITY,
        dual_residual: 0.0,
        duals: Vec::new(),
        dual_objective: None,
        certificate: None,
    }
}

struct DualState<'p> {
    poly: &'p Polyhedron,
    cons: &'p [OneSided],
    target: &'p [f64],
    scale: &'p [f64],
}

struct DualEval {
    x: Vec<f64>,
    /// Coordinates of `x` strictly between their bounds.
    free: Vec<bool>,
    value: f64,
    grad: Vec<f64>,
}

impl DualState<'_> {
    fn evaluate(&self, mu: &[f64]) -> DualEval {
        let n = self.poly.dim();
        let mut g = vec![0.0; n];
        for (c, &m) in self.cons.iter().zip(mu) {
            if m != 0.0 {
                let (cols, vals) = self.poly.rows.row(c.row);
                for (&j, &a) in cols.iter().zip(vals) {
                    g[j] += c.sign * m * a;
                }
            }
        }
        let mut x = vec![0.0; n];
        let mut free = vec![false; n];
        for j in 0..n {
            let v = self.target[j] - self.scale[j] * g[j];
            if v <= self.poly.lower[j] {
                x[j] = self.poly.lower[j];
            } else if v >= self.poly.upper[j] {
                x[j] = self.poly.upper[j];
            } else {
                x[j] = v;
                free[j] = true;
            }
        }
        let mut value = 0.5 * objective(&x, self.target, self.scale);
        let mut grad = vec![0.0; self.cons.len()];
        for (k, c) in self.cons.iter().enumerate() {
            grad[k] = c.sign * self.poly.rows.row_dot(c.row, &x) - c.rhs;
            value += mu[k] * grad[k];
        }
        DualEval { x, free, value, grad }
    }

    /// Largest primal violation and largest complementarity product.
    fn kkt(&self, mu: &[f64], grad: &[f64]) -> (f64, f64) {
        let mut viol: f64 = 0.0;
        let mut comp: f64 = 0.0;
        for (k, c) in self.cons.iter().enumerate() {
            if c.free {
                viol = viol.max(grad[k].abs());
            } else {
                viol = viol.max(grad[k]);
                comp = comp.max((mu[k] * grad[k]).abs());
            }
        }
        (viol, comp)
    }

    fn newton_step(&self, mu: &[f64], ev: &DualEval) -> Option<(Vec<f64>, DualEval)> {
        let k = self.cons.len();
        // Multipliers held at zero: at the bound with an outward gradient.
        let pg_norm: f64 = (0..k)
            .map(|i| {
                let c = &self.cons[i];
                let step = if c.free { ev.grad[i] } else { (mu[i] + ev.grad[i]).max(0.0) - mu[i] };
                step.abs()
            })
            .fold(0.0, f64::max);
        let eps = pg_norm.min(1e-6);
        let inactive: Vec<usize> = (0..k)
            .filter(|&i| self.cons[i].free || !(mu[i] <= eps && ev.grad[i] < 0.0))
            .collect();
        if inactive.is_empty() {
            return None;
        }
        let rhs: Vec<f64> = inactive.iter().map(|&i| ev.grad[i]).collect();
        let d_in = self.solve_reduced(&inactive, &ev.free, &rhs);
        let mut d = vec![0.0; k];
        for (t, &i) in inactive.iter().enumerate() {
            d[i] = d_in[t];
        }

        let mut alpha = 1.0;
        for _ in 0..80 {
            let mut trial = mu.to_vec();
            for i in 0..k {
                trial[i] += alpha * d[i];
                if !self.cons[i].free && trial[i] < 0.0 {
                    trial[i] = 0.0;
                }
            }
            let te = self.evaluate(&trial);
            let predicted: f64 = (0..k).map(|i| ev.grad[i] * (trial[i] - mu[i])).sum();
            if te.value >= ev.value + 1e-4 * predicted && te.value > ev.value - 1e-14 * ev.value.abs().max(1.0) {
                if trial == mu {
                    return None;
                }
                return Some((trial, te));
            }
            alpha *= 0.5;
        }
        None
    }

    /// Solve `(A_I Λ_F A_Iᵀ + δ I) d = r` over the inactive constraints `I`
    /// and the unclamped coordinates `F`.
    fn solve_reduced(&self, inactive: &[usize], free: &[bool], r: &[f64]) -> Vec<f64> {
        let s = inactive.len();
        let rows: Vec<(Vec<usize>, Vec<f64>)> = inactive
            .iter()
            .map(|&i| {
                let c = &self.cons[i];
                let (cols, vals) = self.poly.rows.row(c.row);
                let mut jc = Vec::new();
                let mut jv = Vec::new();
                for (&j, &a) in cols.iter().zip(vals) {
                    if free[j] {
                        jc.push(j);
                        jv.push(c.sign * a * self.scale[j].sqrt());
                    }
                }
                (jc, jv)
            })
            .collect();
        let diag: Vec<f64> = rows.iter().map(|(_, v)| v.iter().map(|a| a * a).sum()).collect();
        let dmax = diag.iter().fold(0.0f64, |a, &b| a.max(b));
        let reg = 1e-10 * (1.0 + dmax);

        if s <= DENSE_LIMIT {
            let n = self.poly.dim();
            let mut dense = vec![0.0; n];
            let mut h = DMatrix::<f64>::zeros(s, s);
            for a in 0..s {
                for (&j, &v) in rows[a].0.iter().zip(&rows[a].1) {
                    dense[j] = v;
                }
                for b in a..s {
                    let dot: f64 = rows[b].0.iter().zip(&rows[b].1).map(|(&j, &v)| v * dense[j]).sum();
                    h[(a, b)] = dot;
                    h[(b, a)] = dot;
                }
                for &j in &rows[a].0 {
                    dense[j] = 0.0;
                }
                h[(a, a)] += reg;
            }
            if let Some(ch) = h.clone().cholesky() {
                return ch.solve(&DVector::from_column_slice(r)).as_slice().to_vec();
            }
        }
        // Jacobi-preconditioned conjugate gradients.
        let n = self.poly.dim();
        let apply = |v: &[f64]| -> Vec<f64> {
            let mut w = vec![0.0; n];
            for (t, (jc, jv)) in rows.iter().enumerate() {
                if v[t] != 0.0 {
                    for (&j, &a) in jc.iter().zip(jv) {
                        w[j] += a * v[t];
                    }
                }
            }
            rows.iter()
                .zip(v)
                .map(|((jc, jv), &vt)| jc.iter().zip(jv).map(|(&j, &a)| a * w[j]).sum::<f64>() + reg * vt)
                .collect()
        };
        let pre: Vec<f64> = diag.iter().map(|&d| 1.0 / (d + reg)).collect();
        let mut x = vec![0.0; s];
        let mut res = r.to_vec();
        let mut z: Vec<f64> = res.iter().zip(&pre).map(|(a, b)| a * b).collect();
        let mut p = z.clone();
        let mut rz: f64 = res.iter().zip(&z).map(|(a, b)| a * b).sum();
        let r0 = res.iter().map(|v| v * v).sum::<f64>().sqrt();
        for _ in 0..(4 * s + 50) {
            let ap = apply(&p);
            let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
            if pap <= 0.0 {
                break;
            }
            let a = rz / pap;
            for t in 0..s {
                x[t] += a * p[t];
                res[t] -= a * ap[t];
            }
            if res.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-13 * r0.max(1e-300) {
                break;
            }
            z = res.iter().zip(&pre).map(|(a, b)| a * b).collect();
            let rz_new: f64 = res.iter().zip(&z).map(|(a, b)| a * b).sum();
            let beta = rz_new / rz;
            rz = rz_new;
            for t in 0..s {
                p[t] = z[t] + beta * p[t];
            }
        }
        x
    }
}

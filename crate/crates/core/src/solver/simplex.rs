//! Bounded primal simplex method.
//!
//! The program is put in the computational form `A x − r = 0` with one
//! logical variable `r_i` per row carrying the row bounds, so every variable
//! simply has a lower and an upper bound. The starting basis is the logical
//! one. Phase 1 minimizes the sum of bound violations of basic variables and
//! hands over to phase 2 as soon as the basis is feasible. Bounds are relaxed
//! by small random amounts to break degeneracy and restored at the end.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lu::LuFactor;
use super::{CsrMatrix, LinearProgram, SolveResult, Status};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pricing {
    Dantzig,
    Devex,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimplexOptions {
    /// 0 selects a limit proportional to the program size.
    pub max_iterations: usize,
    pub primal_tol: f64,
    pub dual_tol: f64,
    pub pricing: Pricing,
    pub perturb: bool,
    pub refactor_interval: usize,
    pub seed: u64,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        SimplexOptions {
            max_iterations: 0,
            primal_tol: 1e-9,
            dual_tol: 1e-9,
            pricing: Pricing::Devex,
            perturb: true,
            refactor_interval: 100,
            seed: 0x5eed,
        }
    }
}

const NONE: usize = usize::MAX;
const PIVOT_TOL: f64 = 1e-9;
const PERTURB_BASE: f64 = 5e-7;
const STALL_LIMIT: usize = 500;
static NEG_ONE: [f64; 1] = [-1.0];

pub fn solve_lp(lp: &LinearProgram) -> SolveResult {
    solve_lp_with(lp, &SimplexOptions::default())
}

pub fn solve_lp_with(lp: &LinearProgram, opts: &SimplexOptions) -> SolveResult {
    lp.check_shape().expect("malformed linear program");
    let mut s = Simplex::new(lp, opts);
    s.run()
}

enum Step {
    Continue,
    Optimal,
    Infeasible(Vec<f64>),
    Unbounded(Vec<f64>),
}

struct Simplex<'a> {
    lp: &'a LinearProgram,
    opts: &'a SimplexOptions,
    m: usize,
    n: usize,
    cols: CsrMatrix,
    unit_rows: Vec<usize>,
    lb: Vec<f64>,
    ub: Vec<f64>,
    cost: Vec<f64>,
    x: Vec<f64>,
    head: Vec<usize>,
    pos_of: Vec<usize>,
    lu: LuFactor,
    weights: Vec<f64>,
    perturbed: bool,
    iterations: usize,
    degenerate_run: usize,
    bland: bool,
}

impl<'a> Simplex<'a> {
    fn new(lp: &'a LinearProgram, opts: &'a SimplexOptions) -> Self {
        let m = lp.num_rows();
        let n = lp.num_vars();
        let mut lb = lp.lower.clone();
        let mut ub = lp.upper.clone();
        lb.extend_from_slice(&lp.row_lower);
        ub.extend_from_slice(&lp.row_upper);
        let mut cost = lp.cost.clone();
        cost.resize(n + m, 0.0);
        let mut s = Simplex {
            lp,
            opts,
            m,
            n,
            cols: lp.rows.transpose(),
            unit_rows: (0..m).collect(),
            lb,
            ub,
            cost,
            x: vec![0.0; n + m],
            head: (n..n + m).collect(),
            pos_of: vec![NONE; n + m],
            lu: LuFactor::factor(0, &[]).expect("empty factorization"),
            weights: vec![1.0; n + m],
            perturbed: false,
            iterations: 0,
            degenerate_run: 0,
            bland: false,
        };
        for p in 0..m {
            s.pos_of[n + p] = p;
        }
        if opts.perturb {
            s.perturb_bounds();
        }
        for j in 0..n {
            s.x[j] = s.resting_value(j);
        }
        s.refactor();
        s
    }

    fn max_iterations(&self) -> usize {
        if self.opts.max_iterations > 0 {
            self.opts.max_iterations
        } else {
            100 * (self.m + self.n) + 10_000
        }
    }

    fn col(&self, j: usize) -> (&[usize], &[f64]) {
        if j < self.n {
            self.cols.row(j)
        } else {
            let i = j - self.n;
            (&self.unit_rows[i..i + 1], &NEG_ONE[..])
        }
    }

    fn perturb_bounds(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.opts.seed);
        for j in 0..self.n + self.m {
            if self.lb[j] == self.ub[j] {
                continue;
            }
            if self.lb[j].is_finite() {
                self.lb[j] -= PERTURB_BASE * (1.0 + self.lb[j].abs()) * rng.random_range(0.5..1.0);
            }
            if self.ub[j].is_finite() {
                self.ub[j] += PERTURB_BASE * (1.0 + self.ub[j].abs()) * rng.random_range(0.5..1.0);
            }
        }
        self.perturbed = true;
    }

    /// Value of a nonbasic variable: its lower bound, else its upper bound,
    /// else zero.
    fn resting_value(&self, j: usize) -> f64 {
        if self.lb[j].is_finite() {
            self.lb[j]
        } else if self.ub[j].is_finite() {
            self.ub[j]
        } else {
            0.0
        }
    }

    fn remove_perturbation(&mut self) {
        let n = self.n;
        for j in 0..n + self.m {
            let (olb, oub) = if j < n {
                (self.lp.lower[j], self.lp.upper[j])
            } else {
                (self.lp.row_lower[j - n], self.lp.row_upper[j - n])
            };
            if self.pos_of[j] == NONE {
                if self.x[j] == self.lb[j] {
                    self.x[j] = olb;
                } else if self.x[j] == self.ub[j] {
                    self.x[j] = oub;
                }
            }
            self.lb[j] = olb;
            self.ub[j] = oub;
        }
        self.perturbed = false;
        self.refactor();
    }

    fn refactor(&mut self) {
        loop {
            let cols: Vec<(&[usize], &[f64])> = self.head.iter().map(|&j| self.col(j)).collect();
            match LuFactor::factor(self.m, &cols) {
                Ok(lu) => {
                    self.lu = lu;
                    break;
                }
                Err(sing) => {
                    // Swap dependent columns for logicals of uncovered rows.
                    for (&p, &r) in sing.positions.iter().zip(&sing.rows) {
                        let out = self.head[p];
                        self.pos_of[out] = NONE;
                        self.x[out] = self.nearest_bound(out);
                        let inn = self.n + r;
                        self.head[p] = inn;
                        self.pos_of[inn] = p;
                    }
                }
            }
        }
        self.recompute_basic();
    }

    fn nearest_bound(&self, j: usize) -> f64 {
        let v = self.x[j];
        match (self.lb[j].is_finite(), self.ub[j].is_finite()) {
            (true, true) => {
                if (v - self.lb[j]).abs() <= (self.ub[j] - v).abs() {
                    self.lb[j]
                } else {
                    self.ub[j]
                }
            }
            (true, false) => self.lb[j],
            (false, true) => self.ub[j],
            (false, false) => 0.0,
        }
    }

    fn recompute_basic(&mut self) {
        let mut rhs = vec![0.0; self.m];
        for j in 0..self.n + self.m {
            if self.pos_of[j] == NONE && self.x[j] != 0.0 {
                let xj = self.x[j];
                let (r, v) = self.col(j);
                for (&i, &a) in r.iter().zip(v) {
                    rhs[i] -= a * xj;
                }
            }
        }
        let xb = self.lu.solve(&rhs);
        for (p, &j) in self.head.iter().enumerate() {
            self.x[j] = xb[p];
        }
    }

    fn infeasibility(&self, j: usize) -> f64 {
        let tol = self.opts.primal_tol;
        if self.x[j] < self.lb[j] - tol {
            -1.0
        } else if self.x[j] > self.ub[j] + tol {
            1.0
        } else {
            0.0
        }
    }

    fn dense_col(&self, j: usize) -> Vec<f64> {
        let mut a = vec![0.0; self.m];
        let (r, v) = self.col(j);
        for (&i, &val) in r.iter().zip(v) {
            a[i] += val;
        }
        a
    }

    fn reduced_costs(&self, y: &[f64], phase1: bool) -> Vec<f64> {
        let mut d = vec![0.0; self.n + self.m];
        for j in 0..self.n {
            if self.pos_of[j] != NONE {
                continue;
            }
            let (r, v) = self.cols.row(j);
            let ay: f64 = r.iter().zip(v).map(|(&i, &a)| a * y[i]).sum();
            d[j] = if phase1 { 0.0 } else { self.cost[j] } - ay;
        }
        for i in 0..self.m {
            let j = self.n + i;
            if self.pos_of[j] == NONE {
                d[j] = y[i];
            }
        }
        d
    }

    /// Direction in which nonbasic `j` may improve the objective, if any.
    fn improving_direction(&self, j: usize, dj: f64) -> Option<f64> {
        let tol = self.opts.dual_tol;
        if self.lb[j] == self.ub[j] {
            return None;
        }
        if dj < -tol && self.x[j] < self.ub[j] {
            Some(1.0)
        } else if dj > tol && self.x[j] > self.lb[j] {
            Some(-1.0)
        } else {
            None
        }
    }

    fn run(&mut self) -> SolveResult {
        let limit = self.max_iterations();
        loop {
            if self.iterations >= limit {
                return self.finish(Status::IterLimit, None);
            }
            match self.iterate() {
                Step::Continue => {}
                Step::Optimal => {
                    if self.perturbed {
                        self.remove_perturbation();
                        continue;
                    }
                    return self.finish(Status::Optimal, None);
                }
                Step::Infeasible(y) => {
                    if self.perturbed {
                        self.remove_perturbation();
                        continue;
                    }
                    return self.finish(Status::Infeasible, Some(y));
                }
                Step::Unbounded(ray) => {
                    if self.perturbed {
                        self.remove_perturbation();
                        continue;
                    }
                    return self.finish(Status::Unbounded, Some(ray));
                }
            }
        }
    }

    fn iterate(&mut self) -> Step {
        if self.lu.num_updates() >= self.opts.refactor_interval || self.lu.nnz() > 4 * self.lu.factor_nnz() + 10 * self.m {
            self.refactor();
        }
        let (m, n) = (self.m, self.n);
        let mut cb = vec![0.0; m];
        let mut phase1 = false;
        for (p, &j) in self.head.iter().enumerate() {
            let s = self.infeasibility(j);
            if s != 0.0 {
                phase1 = true;
            }
            cb[p] = s;
        }
        if !phase1 {
            for (p, &j) in self.head.iter().enumerate() {
                cb[p] = self.cost[j];
            }
        }
        let y = self.lu.solve_transpose(&cb);
        let d = self.reduced_costs(&y, phase1);

        // Pricing.
        let mut q = NONE;
        let mut dir = 0.0;
        let mut best = 0.0;
        for j in 0..n + m {
            if self.pos_of[j] != NONE {
                continue;
            }
            if let Some(s) = self.improving_direction(j, d[j]) {
                if self.bland {
                    q = j;
                    dir = s;
                    break;
                }
                let score = match self.opts.pricing {
                    Pricing::Dantzig => d[j].abs(),
                    Pricing::Devex => d[j] * d[j] / self.weights[j],
                };
                if score > best {
                    best = score;
                    q = j;
                    dir = s;
                }
            }
        }
        if q == NONE {
            if phase1 {
                return Step::Infeasible(y);
            }
            return Step::Optimal;
        }

        let alpha = self.lu.solve(&self.dense_col(q));
        let tol = self.opts.primal_tol;

        // Ratio test: basic j moves at rate -dir * alpha_p.
        let mut theta_max = f64::INFINITY;
        let mut fallback = (NONE, 0.0f64);
        let bound_for = |s: &Self, j: usize, rate: f64| -> Option<f64> {
            let inf = s.infeasibility(j);
            if inf < 0.0 {
                // Below its lower bound: only the upper bound can block.
                if rate > 0.0 && s.ub[j].is_finite() {
                    Some(s.ub[j])
                } else {
                    None
                }
            } else if inf > 0.0 {
                if rate < 0.0 && s.lb[j].is_finite() {
                    Some(s.lb[j])
                } else {
                    None
                }
            } else if rate < 0.0 {
                s.lb[j].is_finite().then_some(s.lb[j])
            } else {
                s.ub[j].is_finite().then_some(s.ub[j])
            }
        };
        for p in 0..m {
            let a = alpha[p];
            if a.abs() <= PIVOT_TOL {
                continue;
            }
            let j = self.head[p];
            let rate = -dir * a;
            if let Some(bd) = bound_for(self, j, rate) {
                let relaxed = if rate < 0.0 {
                    (self.x[j] - bd + tol) / -rate
                } else {
                    (bd + tol - self.x[j]) / rate
                };
                if self.bland {
                    let exact = ((bd - self.x[j]) / rate).max(0.0);
                    theta_max = theta_max.min(exact);
                } else {
                    theta_max = theta_max.min(relaxed);
                }
            } else if phase1 {
                // Infeasible basic moving toward feasibility with no far
                // bound: remember where it becomes feasible.
                let inf = self.infeasibility(j);
                if (inf < 0.0 && rate > 0.0) || (inf > 0.0 && rate < 0.0) {
                    let near = if inf < 0.0 { self.lb[j] } else { self.ub[j] };
                    let t = (near - self.x[j]) / rate;
                    if t > fallback.1 {
                        fallback = (p, t);
                    }
                }
            }
        }
        let range = self.ub[q] - self.lb[q];

        let mut leave = NONE;
        let mut theta;
        let mut leave_bound = 0.0;
        if theta_max.is_finite() {
            let mut best_a = 0.0;
            theta = 0.0;
            for p in 0..m {
                let a = alpha[p];
                if a.abs() <= PIVOT_TOL {
                    continue;
                }
                let j = self.head[p];
                let rate = -dir * a;
                if let Some(bd) = bound_for(self, j, rate) {
                    let exact = ((bd - self.x[j]) / rate).max(0.0);
                    if exact <= theta_max {
                        let better = if self.bland {
                            leave == NONE || j < self.head[leave]
                        } else {
                            a.abs() > best_a
                        };
                        if better {
                            best_a = a.abs();
                            leave = p;
                            theta = exact;
                            leave_bound = bd;
                        }
                    }
                }
            }
        } else if phase1 && fallback.0 != NONE {
            leave = fallback.0;
            theta = fallback.1;
            let j = self.head[leave];
            leave_bound = if self.infeasibility(j) < 0.0 { self.lb[j] } else { self.ub[j] };
        } else {
            theta = f64::INFINITY;
        }

        if range.is_finite() && (leave == NONE || range <= theta) {
            // Bound flip of the entering variable.
            self.x[q] = if dir > 0.0 { self.ub[q] } else { self.lb[q] };
            for p in 0..m {
                if alpha[p] != 0.0 {
                    let j = self.head[p];
                    self.x[j] -= dir * range * alpha[p];
                }
            }
            self.iterations += 1;
            self.note_progress(range * d[q].abs());
            return Step::Continue;
        }
        if leave == NONE {
            if phase1 {
                // Cannot happen for a bounded phase-1 objective; resynchronize.
                self.refactor();
                return Step::Continue;
            }
            let mut ray = vec![0.0; n];
            if q < n {
                ray[q] = dir;
            }
            for p in 0..m {
                let j = self.head[p];
                if j < n {
                    ray[j] = -dir * alpha[p];
                }
            }
            return Step::Unbounded(ray);
        }

        // Pivot.
        let ar = alpha[leave];
        if self.opts.pricing == Pricing::Devex && !self.bland {
            self.update_devex(q, leave, &alpha);
        }
        self.x[q] += dir * theta;
        for p in 0..m {
            if alpha[p] != 0.0 {
                let j = self.head[p];
                self.x[j] -= dir * theta * alpha[p];
            }
        }
        let out = self.head[leave];
        self.x[out] = leave_bound;
        self.pos_of[out] = NONE;
        self.head[leave] = q;
        self.pos_of[q] = leave;
        if ar.abs() < 1e-7 {
            // Unstable pivot: refactor right away.
            self.refactor();
        } else {
            self.lu.update(leave, &alpha);
        }
        self.iterations += 1;
        self.note_progress(theta * d[q].abs());
        Step::Continue
    }

    fn note_progress(&mut self, decrease: f64) {
        if decrease <= 1e-12 {
            self.degenerate_run += 1;
            if self.degenerate_run > STALL_LIMIT {
                self.bland = true;
            }
        } else {
            self.degenerate_run = 0;
            self.bland = false;
        }
    }

    /// Devex reference weights, updated from the pivot row.
    fn update_devex(&mut self, q: usize, leave: usize, alpha: &[f64]) {
        let mut e = vec![0.0; self.m];
        e[leave] = 1.0;
        let rho = self.lu.solve_transpose(&e);
        let ar = alpha[leave];
        let wq = self.weights[q];
        for j in 0..self.n + self.m {
            if self.pos_of[j] != NONE || j == q {
                continue;
            }
            let (r, v) = self.col(j);
            let arj: f64 = r.iter().zip(v).map(|(&i, &a)| a * rho[i]).sum();
            if arj != 0.0 {
                let ratio = arj / ar;
                let w = ratio * ratio * wq;
                if w > self.weights[j] {
                    self.weights[j] = w;
                }
            }
        }
        let out = self.head[leave];
        self.weights[out] = (wq / (ar * ar)).max(1.0);
        if self.weights.iter().any(|&w| w > 1e6) {
            self.weights.iter_mut().for_each(|w| *w = 1.0);
        }
    }

    fn finish(&mut self, status: Status, certificate: Option<Vec<f64>>) -> SolveResult {
        let (m, n) = (self.m, self.n);
        self.refactor();
        let x: Vec<f64> = self.x[..n].to_vec();
        let cb: Vec<f64> = self.head.iter().map(|&j| self.cost[j]).collect();
        let y = self.lu.solve_transpose(&cb);
        let aty = self.lp.rows.mul_transpose_vec(&y);
        let d: Vec<f64> = (0..n).map(|j| self.lp.cost[j] - aty[j]).collect();
        let primal_residual = self.lp.max_violation(&x);

        let tol = self.opts.dual_tol;
        let mut dual_residual: f64 = 0.0;
        let mut dual_obj = self.lp.constant;
        let mut dual_finite = true;
        let mut account = |val: f64, lo: f64, hi: f64, basic: bool, at_lower: bool, at_upper: bool| {
            let viol = if basic {
                val.abs()
            } else if lo == hi {
                0.0
            } else if at_lower && !at_upper {
                (-val).max(0.0)
            } else if at_upper && !at_lower {
                val.max(0.0)
            } else {
                val.abs()
            };
            dual_residual = dual_residual.max(viol);
            if val > tol {
                if lo.is_finite() {
                    dual_obj += val * lo;
                } else {
                    dual_finite = false;
                }
            } else if val < -tol {
                if hi.is_finite() {
                    dual_obj += val * hi;
                } else {
                    dual_finite = false;
                }
            }
        };
        for j in 0..n {
            let basic = self.pos_of[j] != NONE;
            account(
                d[j],
                self.lp.lower[j],
                self.lp.upper[j],
                basic,
                x[j] == self.lp.lower[j],
                x[j] == self.lp.upper[j],
            );
        }
        for i in 0..m {
            let j = n + i;
            let basic = self.pos_of[j] != NONE;
            account(
                y[i],
                self.lp.row_lower[i],
                self.lp.row_upper[i],
                basic,
                self.x[j] == self.lp.row_lower[i],
                self.x[j] == self.lp.row_upper[i],
            );
        }
        let objective = self.lp.objective(&x);
        let status = if status == Status::Optimal {
            let scale = 1.0 + self.lp.cost.iter().fold(0.0f64, |a, c| a.max(c.abs()));
            if primal_residual > 1e-7 || dual_residual > 1e-7 * scale {
                log::warn!(
                    "simplex finished with residuals primal {primal_residual:.2e} dual {dual_residual:.2e}"
                );
            }
            Status::Optimal
        } else {
            status
        };
        SolveResult {
            status,
            x,
            objective,
            iterations: self.iterations,
            primal_residual,
            dual_residual,
            duals: y,
            dual_objective: (status == Status::Optimal && dual_finite).then_some(dual_obj),
            certificate,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lp(cost: &[f64], lower: &[f64], upper: &[f64], rows: Vec<(Vec<(usize, f64)>, f64, f64)>) -> LinearProgram {
        let mut p = LinearProgram::new();
        for j in 0..cost.len() {
            p.add_var(cost[j], lower[j], upper[j]);
        }
        for (r, lo, hi) in rows {
            p.add_row(r, lo, hi);
        }
        p
    }

    const INF: f64 = f64::INFINITY;

    #[test]
    fn box_only() {
        let p = lp(&[1.0], &[0.0], &[1.0], vec![]);
        let r = solve_lp(&p);
        assert_eq!(r.status, Status::Optimal);
        assert_eq!(r.x, vec![0.0]);
        assert_eq!(r.objective, 0.0);
        let p = lp(&[-2.0, 3.0], &[0.0, -1.0], &[4.0, 5.0], vec![]);
        let r = solve_lp(&p);
        assert_eq!(r.x, vec![4.0, -1.0]);
    }

    #[test]
    fn small_textbook_program() {
        // max 3x + 5y st x ≤ 4, 2y ≤ 12, 3x + 2y ≤ 18 → (2, 6), value 36.
        let p = lp(
            &[-3.0, -5.0],
            &[0.0, 0.0],
            &[INF, INF],
            vec![
                (vec![(0, 1.0)], -INF, 4.0),
                (vec![(1, 2.0)], -INF, 12.0),
                (vec![(0, 3.0), (1, 2.0)], -INF, 18.0),
            ],
        );
        let r = solve_lp(&p);
        assert_eq!(r.status, Status::Optimal);
        assert!((r.objective + 36.0).abs() < 1e-9);
        assert!((r.x[0] - 2.0).abs() < 1e-9 && (r.x[1] - 6.0).abs() < 1e-9);
        assert!((r.dual_objective.unwrap() - r.objective).abs() < 1e-9);
    }

    #[test]
    fn needs_phase_one() {
        // min x + y st x + y ≥ 2, x − y = 0.5, x,y free in [−10, 10].
        let p = lp(
            &[1.0, 1.0],
            &[-10.0, -10.0],
            &[10.0, 10.0],
            vec![(vec![(0, 1.0), (1, 1.0)], 2.0, INF), (vec![(0, 1.0), (1, -1.0)], 0.5, 0.5)],
        );
        let r = solve_lp(&p);
        assert_eq!(r.status, Status::Optimal);
        assert!((r.objective - 2.0).abs() < 1e-9);
        assert!((r.x[0] - 1.25).abs() < 1e-9);
        assert!(r.primal_residual < 1e-9);
    }

    #[test]
    fn infeasible_with_certificate() {
        let p = lp(
            &[1.0],
            &[0.0],
            &[INF],
            vec![(vec![(0, 1.0)], -INF, -1.0)],
        );
        let r = solve_lp(&p);
        assert_eq!(r.status, Status::Infeasible);
        assert!(r.certificate.is_some());
    }

    #[test]
    fn unbounded_with_ray() {
        let p = lp(
            &[-1.0, 0.0],
            &[0.0, 0.0],
            &[INF, INF],
            vec![(vec![(0, 1.0), (1, -1.0)], -INF, 1.0)],
        );
        let r = solve_lp(&p);
        assert_eq!(r.status, Status::Unbounded);
        let ray = r.certificate.unwrap();
        assert!(ray[0] > 0.0);
        assert!(ray[0] - ray[1] <= 1e-12);
    }

    #[test]
    fn free_variables_and_equalities() {
        // min x st x = y − 3, y ∈ [1, 2], x free.
        let p = lp(
            &[1.0, 0.0],
            &[-INF, 1.0],
            &[INF, 2.0],
            vec![(vec![(0, 1.0), (1, -1.0)], -3.0, -3.0)],
        );
        let r = solve_lp(&p);
        assert_eq!(r.status, Status::Optimal);
        assert!((r.objective + 2.0).abs() < 1e-9);
    }
}

//! Dual active-set method for `min Σ (x_j − λ_j)² / Λ_j` over a polyhedron.
//!
//! Starts from the unconstrained minimizer `λ` and adds violated constraints
//! one at a time, dropping active ones whose multipliers would turn negative
//! (Goldfarb and Idnani). The diagonal Hessian makes the initial factor
//! `J = L⁻ᵀ` diagonal. The method is finite and exact up to rounding, which
//! the smooth dual iteration is not on degenerate problems.

use super::qp::Polyhedron;
use super::{SolveResult, Status};

/// Constraint `sign · aᵀx ≥ rhs`, with `a` a bound (unit vector) or a row.
#[derive(Clone, Copy, Debug)]
struct Con {
    kind: Source,
    sign: f64,
    rhs: f64,
    equality: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Source {
    Bound(usize),
    Row(usize),
}

struct Problem<'a> {
    poly: &'a Polyhedron,
    cons: Vec<Con>,
}

impl Problem<'_> {
    fn slack(&self, c: &Con, x: &[f64]) -> f64 {
        let ax = match c.kind {
            Source::Bound(j) => x[j],
            Source::Row(i) => self.poly.rows.row_dot(i, x),
        };
        c.sign * ax - c.rhs
    }

    fn norm(&self, c: &Con) -> f64 {
        match c.kind {
            Source::Bound(_) => 1.0,
            Source::Row(i) => self.poly.rows.row(i).1.iter().map(|a| a * a).sum::<f64>().sqrt(),
        }
    }

    /// `d = Jᵀ (sign · a)` for the row-major `n × n` matrix `j`.
    fn project_normal(&self, c: &Con, j: &[f64], n: usize) -> Vec<f64> {
        let mut d = vec![0.0; n];
        let mut add = |row: usize, coef: f64| {
            for (dk, jk) in d.iter_mut().zip(&j[row * n..(row + 1) * n]) {
                *dk += coef * jk;
            }
        };
        match c.kind {
            Source::Bound(r) => add(r, c.sign),
            Source::Row(i) => {
                let (cols, vals) = self.poly.rows.row(i);
                for (&r, &a) in cols.iter().zip(vals) {
                    add(r, c.sign * a);
                }
            }
        }
        d
    }

    fn dot_normal(&self, c: &Con, z: &[f64]) -> f64 {
        c.sign
            * match c.kind {
                Source::Bound(j) => z[j],
                Source::Row(i) => self.poly.rows.row_dot(i, z),
            }
    }
}

fn rotate_columns(j: &mut [f64], n: usize, a: usize, b: usize, c: f64, s: f64) {
    for row in j.chunks_exact_mut(n) {
        let (x, y) = (row[a], row[b]);
        row[a] = c * x + s * y;
        row[b] = -s * x + c * y;
    }
}

fn givens(a: f64, b: f64) -> (f64, f64, f64) {
    let h = a.hypot(b);
    if h == 0.0 {
        (1.0, 0.0, 0.0)
    } else {
        (a / h, b / h, h)
    }
}

/// Exact scaled projection. `tol` bounds the final constraint violation.
pub(crate) fn project_active_set(target: &[f64], scale: &[f64], poly: &Polyhedron, tol: f64, max_iterations: usize) -> SolveResult {
    let n = target.len();
    let mut cons = Vec::new();
    for j in 0..n {
        let (lo, hi) = (poly.lower[j], poly.upper[j]);
        if lo == hi {
            cons.push(Con { kind: Source::Bound(j), sign: 1.0, rhs: lo, equality: true });
            continue;
        }
        if lo.is_finite() {
            cons.push(Con { kind: Source::Bound(j), sign: 1.0, rhs: lo, equality: false });
        }
        if hi.is_finite() {
            cons.push(Con { kind: Source::Bound(j), sign: -1.0, rhs: -hi, equality: false });
        }
    }
    for i in 0..poly.row_lower.len() {
        let (lo, hi) = (poly.row_lower[i], poly.row_upper[i]);
        if lo == hi {
            cons.push(Con { kind: Source::Row(i), sign: 1.0, rhs: lo, equality: true });
            continue;
        }
        if lo.is_finite() {
            cons.push(Con { kind: Source::Row(i), sign: 1.0, rhs: lo, equality: false });
        }
        if hi.is_finite() {
            cons.push(Con { kind: Source::Row(i), sign: -1.0, rhs: -hi, equality: false });
        }
    }
    let prob = Problem { poly, cons };
    let norms: Vec<f64> = prob.cons.iter().map(|c| prob.norm(c)).collect();

    // J = L⁻ᵀ Q with G = diag(1/Λ); R is stored by columns.
    let mut jm = vec![0.0; n * n];
    for k in 0..n {
        jm[k * n + k] = scale[k].sqrt();
    }
    let mut r_cols: Vec<Vec<f64>> = Vec::new();
    let mut active: Vec<usize> = Vec::new();
    let mut active_cons: Vec<Con> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let mut x = target.to_vec();
    let mut iterations = 0;

    let status = 'outer: loop {
        // Most violated constraint, equalities first.
        let mut pick: Option<(usize, f64)> = None;
        for (k, c) in prob.cons.iter().enumerate() {
            if active.contains(&k) {
                continue;
            }
            let s = prob.slack(c, &x);
            let v = if c.equality { s.abs() } else { -s };
            let thresh = tol * norms[k].max(1.0);
            if v > thresh {
                let score = v / norms[k].max(1e-300) + if c.equality { 1e300 } else { 0.0 };
                if pick.is_none_or(|(_, best)| score > best) {
                    pick = Some((k, score));
                }
            }
        }
        let Some((p, _)) = pick else {
            break Status::Optimal;
        };
        let mut con = prob.cons[p];
        if con.equality && prob.slack(&con, &x) > 0.0 {
            con.sign = -con.sign;
            con.rhs = -con.rhs;
        }
        let mut up = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iterations {
                break 'outer Status::IterLimit;
            }
            let q = active.len();
            let d = prob.project_normal(&con, &jm, n);
            // Primal direction z = J₂ d₂ and dual direction r = R⁻¹ d₁.
            let mut z = vec![0.0; n];
            for (row, zr) in jm.chunks_exact(n).zip(z.iter_mut()) {
                *zr = row[q..].iter().zip(&d[q..]).map(|(a, b)| a * b).sum();
            }
            let mut r = vec![0.0; q];
            for i in (0..q).rev() {
                let s: f64 = (i + 1..q).map(|c| r_cols[c][i] * r[c]).sum();
                r[i] = (d[i] - s) / r_cols[i][i];
            }
            let dnorm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            let d2: f64 = d[q..].iter().map(|v| v * v).sum::<f64>();
            let full = if d2.sqrt() > 1e-12 * dnorm.max(1e-300) {
                let s = prob.slack(&con, &x);
                (-s / prob.dot_normal(&con, &z)).max(0.0)
            } else {
                f64::INFINITY
            };
            let mut partial = f64::INFINITY;
            let mut drop = None;
            for (t, &k) in active.iter().enumerate() {
                if !prob.cons[k].equality && r[t] > 0.0 {
                    let ratio = u[t] / r[t];
                    if ratio < partial {
                        partial = ratio;
                        drop = Some(t);
                    }
                }
            }
            let step = full.min(partial);
            if step.is_infinite() {
                break 'outer Status::Infeasible;
            }
            if full.is_finite() {
                for (xj, zj) in x.iter_mut().zip(&z) {
                    *xj += step * zj;
                }
            }
            for (ut, rt) in u.iter_mut().zip(&r) {
                *ut -= step * rt;
            }
            up += step;
            if step == full {
                // Add the constraint: rotate d₂ onto its first entry.
                let mut d = d;
                for k in (q + 1..n).rev() {
                    if d[k] != 0.0 {
                        let (c, s, h) = givens(d[k - 1], d[k]);
                        d[k - 1] = h;
                        d[k] = 0.0;
                        rotate_columns(&mut jm, n, k - 1, k, c, s);
                    }
                }
                r_cols.push(d[..=q].to_vec());
                active.push(p);
                active_cons.push(con);
                u.push(up);
                break;
            }
            // Drop an active constraint and retriangularize R.
            let t = drop.expect("partial step has a blocking constraint");
            active.remove(t);
            active_cons.remove(t);
            u.remove(t);
            r_cols.remove(t);
            let q = active.len();
            for i in t..q {
                let (c, s, h) = givens(r_cols[i][i], r_cols[i][i + 1]);
                r_cols[i][i] = h;
                r_cols[i].pop();
                for col in r_cols.iter_mut().skip(i + 1) {
                    let (a, b) = (col[i], col[i + 1]);
                    col[i] = c * a + s * b;
                    col[i + 1] = -s * a + c * b;
                }
                rotate_columns(&mut jm, n, i, i + 1, c, s);
            }
        }
    };

    if status == Status::Infeasible {
        return SolveResult {
            status,
            x: vec![f64::NAN; n],
            objective: f64::NAN,
            iterations,
            primal_residual: f64::INFINITY,
            dual_residual: 0.0,
            duals: Vec::new(),
            dual_objective: None,
            certificate: None,
        };
    }
    for j in 0..n {
        x[j] = x[j].max(poly.lower[j]).min(poly.upper[j]);
    }
    // Stationarity residual of (x − λ)/Λ + Σ u_k a_k = 0 (signs folded in).
    let mut grad: Vec<f64> = (0..n).map(|j| (x[j] - target[j]) / scale[j]).collect();
    for (c, &uk) in active_cons.iter().zip(&u) {
        let sgn = c.sign;
        match c.kind {
            Source::Bound(j) => grad[j] -= uk * sgn,
            Source::Row(i) => {
                let (cols, vals) = poly.rows.row(i);
                for (&j, &a) in cols.iter().zip(vals) {
                    grad[j] -= uk * sgn * a;
                }
            }
        }
    }
    let dual_residual = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
    SolveResult {
        status,
        objective: x.iter().zip(target).zip(scale).map(|((a, b), s)| (a - b) * (a - b) / s).sum(),
        primal_residual: poly.max_violation(&x),
        x,
        iterations,
        dual_residual,
        duals: u,
        dual_objective: None,
        certificate: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_simplex_corner() {
        let mut poly = Polyhedron::boxed(vec![0.0; 2], vec![f64::INFINITY; 2]);
        poly.add_row(vec![(0, 1.0), (1, 1.0)], f64::NEG_INFINITY, 1.0);
        let r = project_active_set(&[2.0, 0.0], &[1.0, 4.0], &poly, 1e-12, 1000);
        assert_eq!(r.status, Status::Optimal);
        assert!((r.x[0] - 1.0).abs() < 1e-12 && r.x[1].abs() < 1e-12, "{:?}", r.x);
    }

    #[test]
    fn interior_weighted_projection() {
        // min (x−3)² + (y−3)²/4 s.t. x + y ≤ 2: KKT gives μ = 1.6, x = 2.2, y = −0.2.
        let mut poly = Polyhedron::boxed(vec![f64::NEG_INFINITY; 2], vec![f64::INFINITY; 2]);
        poly.add_row(vec![(0, 1.0), (1, 1.0)], f64::NEG_INFINITY, 2.0);
        let r = project_active_set(&[3.0, 3.0], &[1.0, 4.0], &poly, 1e-12, 1000);
        assert!((r.x[0] - 2.2).abs() < 1e-12 && (r.x[1] + 0.2).abs() < 1e-12, "{:?}", r.x);
        assert!(r.dual_residual < 1e-12);
    }

    #[test]
    fn detects_empty_set() {
        let mut poly = Polyhedron::boxed(vec![0.0; 2], vec![1.0; 2]);
        poly.add_row(vec![(0, 1.0), (1, 1.0)], 3.0, f64::INFINITY);
        assert_eq!(project_active_set(&[0.0, 0.0], &[1.0, 1.0], &poly, 1e-12, 1000).status, Status::Infeasible);
    }

    #[test]
    fn equality_rows() {
        let mut poly = Polyhedron::boxed(vec![0.0; 3], vec![1.0; 3]);
        poly.add_row(vec![(0, 1.0), (1, 1.0), (2, 1.0)], 1.0, 1.0);
        let r = project_active_set(&[0.9, 0.9, -0.5], &[1.0; 3], &poly, 1e-12, 1000);
        assert!((r.x[0] - 0.5).abs() < 1e-12 && (r.x[1] - 0.5).abs() < 1e-12 && r.x[2].abs() < 1e-12, "{:?}", r.x);
    }
}

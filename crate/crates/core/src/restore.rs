//! Turning predicted decisions into feasible ones.
//!
//! The generic restorer solves the variance-scaled projection of the
//! prediction onto the stage feasible set. The assembly problem also has a
//! greedy restorer that builds products one at a time in a priority order
//! while components last.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::problems::{LocalStage, ProblemSpec, Scope};
use crate::rng;
use crate::solver::{project_scaled, Polyhedron, ProjectionOptions, Status};

/// Predictive variances are floored here before they scale the projection.
pub const VARIANCE_FLOOR: f64 = 1e-9;

/// Bound slack below which a stage is reported infeasible.
const BOUND_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Restorer {
    Projection,
    /// Greedy assembly restorer; `orders[k]` is the priority order of the
    /// product coordinates of the `k`-th intermediate stage.
    Heuristic { orders: Vec<Vec<usize>> },
}

/// Variance-scaled projection of `target` onto the feasible set of the level
/// `history.len() − 1` given the earlier decisions `past`.
pub fn restore_projection(
    problem: &ProblemSpec,
    history: &[f64],
    past: &[Vec<f64>],
    target: &[f64],
    variance: f64,
) -> Result<Vec<f64>> {
    let local = problem.stage(history, Scope::Stagewise).localize(past);
    project_local(&local, target, &vec![variance; target.len()])
}

/// Scaled projection onto an already localized stage feasible set.
pub fn project_local(local: &LocalStage, target: &[f64], variances: &[f64]) -> Result<Vec<f64>> {
    if target.len() != local.lower.len() || variances.len() != target.len() {
        return Err(Error::DimensionMismatch("prediction does not match the stage dimension".into()));
    }
    if let Some(j) = (0..local.lower.len()).find(|&j| local.lower[j] > local.upper[j] + BOUND_TOL) {
        return Err(Error::Infeasible(format!(
            "coordinate {j} has bounds [{}, {}]",
            local.lower[j], local.upper[j]
        )));
    }
    let clamp = |j: usize, v: f64| v.max(local.lower[j]).min(local.upper[j].max(local.lower[j]));
    if local.rows.is_empty() {
        // Separable box: the scaled projection is the clamp for any scaling.
        return Ok(target.iter().enumerate().map(|(j, &v)| clamp(j, v)).collect());
    }
    let mut poly = Polyhedron::boxed(
        local.lower.clone(),
        (0..local.upper.len()).map(|j| local.upper[j].max(local.lower[j])).collect(),
    );
    for (terms, lo, hi) in &local.rows {
        poly.add_row(terms.iter().copied(), *lo, *hi);
    }
    // The minimizer is invariant to a common factor in the scaling; dividing
    // by the largest variance keeps the dual well conditioned.
    let floored: Vec<f64> = variances.iter().map(|v| v.max(VARIANCE_FLOOR)).collect();
    let top = floored.iter().fold(VARIANCE_FLOOR, |a, &b| a.max(b));
    let scale: Vec<f64> = floored.iter().map(|v| v / top).collect();
    let r = project_scaled(target, &scale, &poly, &ProjectionOptions::default());
    match r.status {
        Status::Optimal => Ok(r.x),
        Status::Infeasible => Err(Error::Infeasible("stage feasible set is empty".into())),
        s => Err(Error::Solver(format!("projection ended with status {s:?}"))),
    }
}

/// Greedy production in priority `order`: product `j` is made up to the
/// prediction `target[j]` (floored at zero) or until one of its components
/// runs out. `a[i][j]` units of component `i` go into one unit of product `j`
/// and `available[i]` units of component `i` are on hand.
pub fn restore_heuristic(target: &[f64], available: &[f64], a: &[Vec<f64>], order: &[usize]) -> Vec<f64> {
    let mut stock = available.to_vec();
    let mut q = vec![0.0; target.len()];
    for &j in order {
        let cap = a
            .iter()
            .zip(&stock)
            .filter(|(ai, _)| ai[j] > 0.0)
            .map(|(ai, s)| s / ai[j])
            .fold(f64::INFINITY, f64::min);
        let qj = target[j].max(0.0).min(cap);
        q[j] = qj;
        if qj > 0.0 {
            for (ai, s) in a.iter().zip(stock.iter_mut()) {
                if ai[j] > 0.0 {
                    *s = (*s - ai[j] * qj).max(0.0);
                }
            }
        }
    }
    q
}

/// Full assembly decision `(q, Y)` from the greedy quantities, with
/// allocations in exact proportions `Y_ij = A_ij q_j`.
pub fn heuristic_assembly_decision(target: &[f64], available: &[f64], a: &[Vec<f64>], order: &[usize]) -> Vec<f64> {
    let nq = target.len().min(a.first().map_or(0, Vec::len));
    let q = restore_heuristic(&target[..nq], available, a, order);
    let mut x = q.clone();
    for ai in a {
        x.extend(ai.iter().zip(&q).map(|(aij, qj)| aij * qj));
    }
    x
}

/// `m` restorers with independent uniformly random priority orders over
/// `counts[k]` coordinates for every intermediate stage `k`.
pub fn sample_priority_orders(counts: &[usize], m: usize, seed: u64) -> Result<Vec<Restorer>> {
    if m == 0 {
        return Err(invalid("at least one priority order is required"));
    }
    Ok((0..m)
        .map(|r| {
            let mut rng = rng::stream(seed, r as u64);
            let orders = counts
                .iter()
                .map(|&n| {
                    let mut p: Vec<usize> = (0..n).collect();
                    p.shuffle(&mut rng);
                    p
                })
                .collect();
            Restorer::Heuristic { orders }
        })
        .collect())
}

//! Concrete multistage problems behind a common stagewise description.
//!
//! A problem is described level by level. Level 0 carries the decision taken
//! before any uncertainty is revealed; level `t` sees the noise history
//! `ξ_0..ξ_t`. Each level contributes a [`StageBlock`]: a linear cost, variable
//! bounds and linear rows whose terms may reference decisions of ancestor
//! levels through a lag (0 for the current level, 1 for the parent, ...).

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::process::ProcessModel;

/// Per-step variance of the log price used by the swing problem.
pub const SWING_SIGMA2: f64 = 0.0049;
pub const SWING_KAPPA: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Objective {
    RiskNeutral,
    /// `ρ⁻¹ log E exp(ρ · cost)`.
    Entropic { rho: f64 },
}

/// Which rows a stage emits. Rows implied by the rows of descendants are
/// omitted from tree programs; stagewise restoration needs every row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Node { leaf: bool },
    Stagewise,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Term {
    pub lag: usize,
    pub index: usize,
    pub coef: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub terms: Vec<Term>,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageBlock {
    pub cost: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub rows: Vec<Row>,
}

/// Feasible set of one stage once all earlier decisions are known. Rows that
/// touch a single current variable are folded into its bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalStage {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Rows over current variables only: `(index, coef)` terms and bounds.
    pub rows: Vec<(Vec<(usize, f64)>, f64, f64)>,
}

impl StageBlock {
    fn new(n: usize) -> Self {
        StageBlock {
            cost: vec![0.0; n],
            lower: vec![0.0; n],
            upper: vec![f64::INFINITY; n],
            rows: Vec::new(),
        }
    }

    /// Substitute the decisions of earlier levels. `past[l]` is the decision
    /// taken at level `l`; the block belongs to level `past.len()`.
    pub fn localize(&self, past: &[Vec<f64>]) -> LocalStage {
        let level = past.len();
        let mut lower = self.lower.clone();
        let mut upper = self.upper.clone();
        let mut rows = Vec::new();
        for row in &self.rows {
            let mut shift = 0.0;
            let mut cur = Vec::new();
            for t in &row.terms {
                if t.lag == 0 {
                    cur.push((t.index, t.coef));
                } else {
                    shift += t.coef * past[level - t.lag][t.index];
                }
            }
            let (lo, hi) = (row.lower - shift, row.upper - shift);
            if cur.len() == 1 {
                let (j, a) = cur[0];
                let (blo, bhi) = if a > 0.0 { (lo / a, hi / a) } else { (hi / a, lo / a) };
                lower[j] = lower[j].max(blo);
                upper[j] = upper[j].min(bhi);
            } else if !cur.is_empty() {
                rows.push((cur, lo, hi));
            }
        }
        LocalStage { lower, upper, rows }
    }
}

impl LocalStage {
    /// Largest bound or row violation at `x`.
    pub fn violation(&self, x: &[f64]) -> f64 {
        let mut v: f64 = 0.0;
        for (j, &xj) in x.iter().enumerate() {
            v = v.max(self.lower[j] - xj).max(xj - self.upper[j]);
        }
        for (terms, lo, hi) in &self.rows {
            let ax: f64 = terms.iter().map(|&(j, a)| a * x[j]).sum();
            v = v.max(lo - ax).max(ax - hi);
        }
        v
    }
}

/// Numerical data of the four-stage assembly problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssemblyData {
    pub c1: Vec<f64>,
    pub c2: Vec<f64>,
    pub c3: Vec<f64>,
    pub c4: Vec<f64>,
    /// Demand coefficients `b_i` applied to `(1, ξ_2, ξ_3, ξ_4)`.
    pub b: Vec<[f64; 4]>,
    pub a2: Vec<Vec<f64>>,
    pub a3: Vec<Vec<f64>>,
}

impl Default for AssemblyData {
    fn default() -> Self {
        AssemblyData {
            c1: vec![0.25, 1.363, 0.8093, 0.7284, 0.25, 0.535, 0.25, 0.25, 0.25, 0.4484, 0.25, 0.25],
            c2: vec![2.5, 2.5, 2.5, 2.5, 13.22, 2.5, 3.904, 2.5],
            c3: vec![3.255, 2.5, 2.5, 8.418, 2.5],
            c4: vec![-21.87, -98.16, -31.99, -10.0, -10.0],
            b: vec![
                [13.9, 9.708, 2.14, 4.12],
                [12.86, 9.901, 6.435, 7.446],
                [18.21, 7.889, 3.2, 2.679],
                [10.14, 4.387, 9.601, 4.399],
                [17.21, 4.983, 7.266, 9.334],
            ],
            a2: vec![
                vec![0.4572, 0.0, 4.048, 0.0, 0.0, 0.0, 0.8243, 11.37],
                vec![0.0, 0.0, 0.7674, 0.5473, 0.3776, 0.0, 0.0, 0.0],
                vec![0.4794, 0.0, 0.4861, 1.223, 0.0, 1.475, 0.0, 0.0],
                vec![0.0, 0.0, 0.0, 0.0, 0.5114, 0.3139, 0.0, 0.0],
                vec![0.0, 12.29, 1.378, 0.0, 0.3748, 0.4554, 0.0, 0.0],
                vec![0.7878, 0.0, 0.293, 1.721, 0.0, 0.0, 0.0, 0.0],
                vec![1.504, 0.4696, 0.248, 0.0, 0.1852, 0.0, 0.3486, 0.0],
                vec![0.0, 1.204, 0.0, 0.7598, 0.452, 0.0, 0.0, 0.0],
                vec![0.0, 0.0, 0.2515, 0.3753, 0.6249, 0.0, 1.248, 0.0],
                vec![1.545, 0.0, 0.0, 0.0, 0.0, 0.0, 0.2732, 0.0],
                vec![0.0, 0.0, 0.0, 0.6597, 0.0, 2.525, 0.0, 0.0],
                vec![0.0, 0.0, 1.595, 0.0, 0.0, 1.51, 1.041, 0.9847],
            ],
            a3: vec![
                vec![0.0, 1.223, 0.6367, 0.0, 0.0],
                vec![0.0, 0.0, 0.0, 1.111, 0.0],
                vec![0.0, 0.0, 0.4579, 0.0, 0.0],
                vec![0.0, 0.1693, 0.6589, 0.0, 0.0],
                vec![0.5085, 2.643, 0.0, 0.0, 0.0],
                vec![0.4017, 0.0, 0.0, 0.0, 0.0],
                vec![0.0, 0.7852, 85.48, 0.0, 0.0],
                vec![0.0, 0.0, 0.0, 0.806, 0.5825],
            ],
        }
    }
}

impl AssemblyData {
    pub fn validate(&self) -> Result<()> {
        let shape_ok = self.c1.len() == 12
            && self.c2.len() == 8
            && self.c3.len() == 5
            && self.c4.len() == 5
            && self.b.len() == 5
            && self.a2.len() == 12
            && self.a2.iter().all(|r| r.len() == 8)
            && self.a3.len() == 8
            && self.a3.iter().all(|r| r.len() == 5);
        if !shape_ok {
            return Err(invalid("assembly data has wrong dimensions"));
        }
        if self.a2.iter().chain(&self.a3).flatten().any(|&a| a < 0.0) {
            return Err(invalid("assembly matrices must be nonnegative"));
        }
        if self.c4.iter().any(|&c| c >= 0.0) {
            return Err(invalid("final-stage costs must be negative"));
        }
        Ok(())
    }

    /// Demand `η_i = max{0, ⟨b_i, ξ_[4]⟩}` for a full history `(1, ξ_2, ξ_3, ξ_4)`.
    pub fn demand(&self, history: &[f64]) -> Vec<f64> {
        self.b
            .iter()
            .map(|bi| bi.iter().zip(history).map(|(b, x)| b * x).sum::<f64>().max(0.0))
            .collect()
    }

    /// Number of intermediate products consumed at a stage (rows of its matrix).
    fn stage_matrix(&self, level: usize) -> &[Vec<f64>] {
        if level == 1 {
            &self.a2
        } else {
            &self.a3
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwingData {
    pub rho: f64,
    pub eta: f64,
    pub horizon: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "problem", rename_all = "snake_case")]
pub enum ProblemKind {
    Assembly(AssemblyData),
    Swing(SwingData),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub kind: ProblemKind,
    pub process: ProcessModel,
    pub objective: Objective,
}

pub fn assembly_problem() -> ProblemSpec {
    assembly_problem_with(AssemblyData::default()).expect("built-in data is valid")
}

pub fn assembly_problem_with(data: AssemblyData) -> Result<ProblemSpec> {
    data.validate()?;
    Ok(ProblemSpec {
        kind: ProblemKind::Assembly(data),
        process: ProcessModel::iid_std_normal(4)?,
        objective: Objective::RiskNeutral,
    })
}

/// Swing option with `T` exercise dates, risk aversion `ρ` (0 for the
/// expectation) and exercise budget `η`.
pub fn swing_problem(rho: f64, eta: f64, horizon: usize) -> Result<ProblemSpec> {
    swing_problem_with(rho, eta, horizon, SWING_SIGMA2)
}

pub fn swing_problem_with(rho: f64, eta: f64, horizon: usize, sigma2: f64) -> Result<ProblemSpec> {
    if !(rho >= 0.0 && rho.is_finite()) {
        return Err(invalid("rho must be finite and nonnegative"));
    }
    if !(eta > 0.0) {
        return Err(invalid("eta must be positive"));
    }
    if horizon == 0 {
        return Err(invalid("horizon must be at least 1"));
    }
    Ok(ProblemSpec {
        kind: ProblemKind::Swing(SwingData { rho, eta, horizon }),
        process: ProcessModel::geom_price(horizon, sigma2, SWING_KAPPA, SWING_KAPPA)?,
        objective: if rho == 0.0 {
            Objective::RiskNeutral
        } else {
            Objective::Entropic { rho }
        },
    })
}

/// Threshold rule for the swing problem: exercise at `t` when the payoff
/// `ξ_t` is positive and `t > T − η`.
pub fn bang_bang_decision(eta: f64, horizon: usize, t: usize, xi: f64) -> f64 {
    if xi > 0.0 && (t as f64) > horizon as f64 - eta {
        1.0
    } else {
        0.0
    }
}

impl ProblemSpec {
    pub fn name(&self) -> &'static str {
        match self.kind {
            ProblemKind::Assembly(_) => "assembly",
            ProblemKind::Swing(_) => "swing",
        }
    }

    /// Number of levels (decision stages including the initial one).
    pub fn levels(&self) -> usize {
        self.process.levels()
    }

    pub fn dim(&self, level: usize) -> usize {
        match &self.kind {
            ProblemKind::Assembly(d) => match level {
                0 => d.c1.len(),
                1 => d.c2.len() + d.a2.len() * d.c2.len(),
                2 => d.c3.len() + d.a3.len() * d.c3.len(),
                _ => d.c4.len(),
            },
            ProblemKind::Swing(_) => usize::from(level > 0),
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        (0..self.levels()).map(|l| self.dim(l)).collect()
    }

    /// Stage data for the decision at level `history.len() − 1`.
    pub fn stage(&self, history: &[f64], scope: Scope) -> StageBlock {
        let level = history.len() - 1;
        match &self.kind {
            ProblemKind::Assembly(d) => assembly_stage(d, level, history),
            ProblemKind::Swing(s) => swing_stage(s, level, history, scope),
        }
    }

    /// Stage cost vectors do not depend on which rows are emitted.
    pub fn cost(&self, history: &[f64]) -> Vec<f64> {
        self.stage(history, Scope::Node { leaf: false }).cost
    }

    /// Total linear cost of a trajectory along one path.
    pub fn trajectory_cost(&self, history: &[f64], decisions: &[Vec<f64>]) -> f64 {
        (0..decisions.len())
            .map(|l| {
                let c = self.cost(&history[..=l]);
                c.iter().zip(&decisions[l]).map(|(a, b)| a * b).sum::<f64>()
            })
            .sum()
    }

    /// Check a full trajectory against every stage constraint. Returns the
    /// first level whose violation exceeds `tol`, with the violation.
    pub fn check_trajectory(&self, history: &[f64], decisions: &[Vec<f64>], tol: f64) -> Option<(usize, f64)> {
        for l in 0..decisions.len() {
            if decisions[l].len() != self.dim(l) {
                return Some((l, f64::INFINITY));
            }
            let local = self.stage(&history[..=l], Scope::Stagewise).localize(&decisions[..l]);
            let v = local.violation(&decisions[l]);
            if !(v <= tol) {
                return Some((l, v));
            }
        }
        None
    }

    pub fn assembly_data(&self) -> Option<&AssemblyData> {
        match &self.kind {
            ProblemKind::Assembly(d) => Some(d),
            _ => None,
        }
    }

    pub fn swing_data(&self) -> Option<&SwingData> {
        match &self.kind {
            ProblemKind::Swing(s) => Some(s),
            _ => None,
        }
    }
}

fn assembly_stage(d: &AssemblyData, level: usize, history: &[f64]) -> StageBlock {
    match level {
        0 => {
            let mut blk = StageBlock::new(d.c1.len());
            blk.cost.clone_from(&d.c1);
            blk
        }
        1 | 2 => {
            let a = d.stage_matrix(level);
            let cost = if level == 1 { &d.c2 } else { &d.c3 };
            let nq = cost.len();
            let mut blk = StageBlock::new(nq + a.len() * nq);
            blk.cost[..nq].clone_from_slice(cost);
            for (i, ai) in a.iter().enumerate() {
                let mut budget = Vec::with_capacity(nq + 1);
                for (j, &aij) in ai.iter().enumerate() {
                    let y = nq + i * nq + j;
                    if aij > 0.0 {
                        blk.rows.push(Row {
                            terms: vec![
                                Term { lag: 0, index: j, coef: aij },
                                Term { lag: 0, index: y, coef: -1.0 },
                            ],
                            lower: f64::NEG_INFINITY,
                            upper: 0.0,
                        });
                    }
                    budget.push(Term { lag: 0, index: y, coef: 1.0 });
                }
                budget.push(Term { lag: 1, index: i, coef: -1.0 });
                blk.rows.push(Row {
                    terms: budget,
                    lower: f64::NEG_INFINITY,
                    upper: 0.0,
                });
            }
            blk
        }
        _ => {
            let mut blk = StageBlock::new(d.c4.len());
            blk.cost.clone_from(&d.c4);
            blk.upper = d.demand(history);
            for i in 0..d.c4.len() {
                blk.rows.push(Row {
                    terms: vec![
                        Term { lag: 0, index: i, coef: 1.0 },
                        Term { lag: 1, index: i, coef: -1.0 },
                    ],
                    lower: f64::NEG_INFINITY,
                    upper: 0.0,
                });
            }
            blk
        }
    }
}

fn swing_stage(s: &SwingData, level: usize, history: &[f64], scope: Scope) -> StageBlock {
    if level == 0 {
        return StageBlock::new(0);
    }
    let mut blk = StageBlock::new(1);
    blk.cost[0] = -history[level];
    blk.upper[0] = 1.0;
    let emit = match scope {
        Scope::Node { leaf } => leaf,
        Scope::Stagewise => true,
    };
    if emit {
        blk.rows.push(Row {
            terms: (0..level).map(|lag| Term { lag, index: 0, coef: 1.0 }).collect(),
            lower: f64::NEG_INFINITY,
            upper: s.eta,
        });
    }
    blk
}

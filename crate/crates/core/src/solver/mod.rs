//! Linear programming, scaled projection onto polyhedra, and minimization of
//! the entropic objective over polyhedra.

pub mod active_set;
pub mod entropic;
pub mod lu;
pub mod qp;
pub mod simplex;
pub mod sparse;

use serde::{Deserialize, Serialize};

pub use entropic::{solve_entropic, EntropicObjective, EntropicOptions};
pub use qp::{project_scaled, Polyhedron, ProjectionOptions};
pub use simplex::{solve_lp, solve_lp_with, Pricing, SimplexOptions};
pub use sparse::CsrMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Status {
    Optimal,
    Infeasible,
    Unbounded,
    IterLimit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub status: Status,
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// Row multipliers (`y_i > 0` when row `i` sits at its lower bound).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub duals: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dual_objective: Option<f64>,
    /// Farkas multipliers for an infeasible program, or a primal ray for an
    /// unbounded one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificate: Option<Vec<f64>>,
}

impl SolveResult {
    pub fn is_optimal(&self) -> bool {
        self.status == Status::Optimal
    }
}

/// `min cᵀx + constant` subject to `row_lower ≤ A x ≤ row_upper` and
/// `lower ≤ x ≤ upper`. Infinite bounds are allowed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LinearProgram {
    pub cost: Vec<f64>,
    pub constant: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub rows: CsrMatrix,
    pub row_lower: Vec<f64>,
    pub row_upper: Vec<f64>,
}

impl LinearProgram {
    pub fn new() -> Self {
        LinearProgram::default()
    }

    pub fn num_vars(&self) -> usize {
        self.cost.len()
    }

    pub fn num_rows(&self) -> usize {
        self.row_lower.len()
    }

    pub fn add_var(&mut self, cost: f64, lower: f64, upper: f64) -> usize {
        self.cost.push(cost);
        self.lower.push(lower);
        self.upper.push(upper);
        self.rows.ncols += 1;
        self.cost.len() - 1
    }

    pub fn add_row<I: IntoIterator<Item = (usize, f64)>>(&mut self, terms: I, lower: f64, upper: f64) {
        self.rows.push_row(terms);
        self.row_lower.push(lower);
        self.row_upper.push(upper);
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        self.constant + self.cost.iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
    }

    /// Largest bound or row violation at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut v: f64 = 0.0;
        for j in 0..self.num_vars() {
            v = v.max(self.lower[j] - x[j]).max(x[j] - self.upper[j]);
        }
        for i in 0..self.num_rows() {
            let ax = self.rows.row_dot(i, x);
            v = v.max(self.row_lower[i] - ax).max(ax - self.row_upper[i]);
        }
        v
    }

    pub(crate) fn check_shape(&self) -> crate::Result<()> {
        let n = self.num_vars();
        let m = self.num_rows();
        if self.lower.len() != n || self.upper.len() != n || self.rows.ncols != n || self.rows.nrows() != m || self.row_upper.len() != m {
            return Err(crate::Error::DimensionMismatch("linear program arrays disagree".into()));
        }
        Ok(())
    }
}

//! Deterministic-equivalent programs on scenario trees.
//!
//! One decision block is attached to every node, so decisions are shared by
//! all scenarios that pass through the node and nonanticipativity holds by
//! construction.

use std::io::Write;

use crate::error::{Error, Result};
use crate::problems::{Objective, ProblemSpec, Scope};
use crate::solver::{
    self, qp::Polyhedron, CsrMatrix, EntropicObjective, EntropicOptions, LinearProgram, SimplexOptions, SolveResult,
    Status,
};
use crate::tree::ScenarioTree;

/// A node of the program skeleton: its parent, level, probability mass and
/// the noise history it observes.
#[derive(Clone, Debug, PartialEq)]
pub struct ProgramNode {
    pub parent: Option<usize>,
    pub level: usize,
    pub mass: f64,
    pub history: Vec<f64>,
    pub leaf: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeProgram {
    /// Constraints, bounds and the expected linear cost.
    pub lp: LinearProgram,
    pub entropic: Option<EntropicObjective>,
    /// First variable of each node block.
    pub offsets: Vec<usize>,
    pub dims: Vec<usize>,
    pub levels: Vec<usize>,
}

impl TreeProgram {
    pub fn num_vars(&self) -> usize {
        self.lp.num_vars()
    }

    pub fn block<'a>(&self, x: &'a [f64], node: usize) -> &'a [f64] {
        &x[self.offsets[node]..self.offsets[node] + self.dims[node]]
    }

    /// Objective value of `x` in the program's own mode.
    pub fn objective(&self, x: &[f64]) -> f64 {
        match &self.entropic {
            Some(e) => e.value(x),
            None => self.lp.objective(x),
        }
    }

    pub fn feasible_set(&self) -> Polyhedron {
        Polyhedron {
            lower: self.lp.lower.clone(),
            upper: self.lp.upper.clone(),
            rows: self.lp.rows.clone(),
            row_lower: self.lp.row_lower.clone(),
            row_upper: self.lp.row_upper.clone(),
        }
    }

    /// Solve with the simplex method or, for the entropic objective, the
    /// projected-gradient method warm-started at the risk-neutral optimum.
    pub fn solve(&self) -> SolveResult {
        self.solve_with(&SimplexOptions::default(), &EntropicOptions::default())
    }

    pub fn solve_with(&self, lp_opts: &SimplexOptions, ent_opts: &EntropicOptions) -> SolveResult {
        let lin = solver::solve_lp_with(&self.lp, lp_opts);
        match &self.entropic {
            None => lin,
            Some(e) => {
                if lin.status != Status::Optimal {
                    return lin;
                }
                let poly = self.feasible_set();
                solver::solve_entropic(e, &poly, Some(&lin.x), ent_opts)
            }
        }
    }

    /// Write the linear part in CPLEX LP text format.
    pub fn write_lp_format<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let lp = &self.lp;
        let term = |c: f64, j: usize| -> String {
            if c < 0.0 {
                format!(" - {} x{}", -c, j)
            } else {
                format!(" + {} x{}", c, j)
            }
        };
        writeln!(w, "\\ constant term {}", lp.constant)?;
        writeln!(w, "Minimize")?;
        write!(w, " obj:")?;
        let mut any = false;
        for (j, &c) in lp.cost.iter().enumerate() {
            if c != 0.0 {
                write!(w, "{}", term(c, j))?;
                any = true;
            }
        }
        if !any {
            write!(w, " 0 x0")?;
        }
        writeln!(w)?;
        writeln!(w, "Subject To")?;
        for i in 0..lp.num_rows() {
            let (cols, vals) = lp.rows.row(i);
            let body: String = cols.iter().zip(vals).map(|(&j, &a)| term(a, j)).collect();
            let (lo, hi) = (lp.row_lower[i], lp.row_upper[i]);
            if lo == hi {
                writeln!(w, " r{i}:{body} = {hi}")?;
            } else {
                if hi.is_finite() {
                    writeln!(w, " r{i}u:{body} <= {hi}")?;
                }
                if lo.is_finite() {
                    writeln!(w, " r{i}l:{body} >= {lo}")?;
                }
            }
        }
        writeln!(w, "Bounds")?;
        for j in 0..lp.num_vars() {
            let (lo, hi) = (lp.lower[j], lp.upper[j]);
            match (lo.is_finite(), hi.is_finite()) {
                (true, true) if lo == hi => writeln!(w, " x{j} = {lo}")?,
                (true, true) => writeln!(w, " {lo} <= x{j} <= {hi}")?,
                (true, false) => writeln!(w, " x{j} >= {lo}")?,
                (false, true) => writeln!(w, " -inf <= x{j} <= {hi}")?,
                (false, false) => writeln!(w, " x{j} free")?,
            }
        }
        writeln!(w, "End")
    }
}

/// Deterministic equivalent of `problem` on `tree`.
pub fn build_tree_program(problem: &ProblemSpec, tree: &ScenarioTree) -> Result<TreeProgram> {
    if tree.levels() != problem.levels() {
        return Err(Error::DimensionMismatch(format!(
            "tree has {} levels but the problem has {}",
            tree.levels(),
            problem.levels()
        )));
    }
    let nodes: Vec<ProgramNode> = (0..tree.len())
        .map(|j| ProgramNode {
            parent: tree.node(j).parent,
            level: tree.node(j).level,
            mass: tree.mass(j),
            history: tree.history(j),
            leaf: tree.is_leaf(j),
        })
        .collect();
    build_program(problem, &nodes)
}

/// Deterministic equivalent over an explicit node skeleton. Parents must
/// precede their children and every leaf must sit on the last level.
pub fn build_program(problem: &ProblemSpec, nodes: &[ProgramNode]) -> Result<TreeProgram> {
    let last = problem.levels() - 1;
    let mut lp = LinearProgram::new();
    let mut offsets = Vec::with_capacity(nodes.len());
    let mut dims = Vec::with_capacity(nodes.len());
    let mut levels = Vec::with_capacity(nodes.len());
    let mut blocks = Vec::with_capacity(nodes.len());
    for (j, node) in nodes.iter().enumerate() {
        if let Some(p) = node.parent {
            if p >= j || nodes[p].level + 1 != node.level {
                return Err(Error::InvalidTree(format!("node {j} has an invalid parent")));
            }
        } else if node.level != 0 {
            return Err(Error::InvalidTree(format!("node {j} has no parent")));
        }
        if node.leaf && node.level != last {
            return Err(Error::DimensionMismatch(format!(
                "leaf {j} at level {} but the problem has {} levels",
                node.level,
                last + 1
            )));
        }
        if node.history.len() != node.level + 1 {
            return Err(Error::DimensionMismatch(format!("node {j} history length")));
        }
        let blk = problem.stage(&node.history, Scope::Node { leaf: node.leaf });
        offsets.push(lp.num_vars());
        dims.push(blk.cost.len());
        levels.push(node.level);
        for k in 0..blk.cost.len() {
            lp.add_var(node.mass * blk.cost[k], blk.lower[k], blk.upper[k]);
        }
        blocks.push(blk);
    }
    let ancestor = |mut j: usize, lag: usize| -> usize {
        for _ in 0..lag {
            j = nodes[j].parent.expect("lag exceeds depth");
        }
        j
    };
    for (j, blk) in blocks.iter().enumerate() {
        for row in &blk.rows {
            let terms: Vec<(usize, f64)> = row
                .terms
                .iter()
                .map(|t| (offsets[ancestor(j, t.lag)] + t.index, t.coef))
                .collect();
            lp.add_row(terms, row.lower, row.upper);
        }
    }

    let entropic = match problem.objective {
        Objective::RiskNeutral => None,
        Objective::Entropic { rho } => {
            let mut paths = CsrMatrix::new(lp.num_vars());
            let mut probs = Vec::new();
            for (j, node) in nodes.iter().enumerate() {
                if !node.leaf {
                    continue;
                }
                let mut terms = Vec::new();
                let mut cur = Some(j);
                while let Some(c) = cur {
                    for (k, &ck) in blocks[c].cost.iter().enumerate() {
                        if ck != 0.0 {
                            terms.push((offsets[c] + k, ck));
                        }
                    }
                    cur = nodes[c].parent;
                }
                paths.push_row(terms);
                probs.push(node.mass);
            }
            Some(EntropicObjective { rho, paths, probs })
        }
    };
    Ok(TreeProgram {
        lp,
        entropic,
        offsets,
        dims,
        levels,
    })
}

/// Decisions of every node at `level`, as `(node id, decision)` pairs.
pub fn extract_node_solution(program: &TreeProgram, result: &SolveResult, level: usize) -> Result<Vec<(usize, Vec<f64>)>> {
    if result.status != Status::Optimal && result.status != Status::IterLimit {
        return Err(Error::Solver(format!("no solution available (status {:?})", result.status)));
    }
    if result.x.len() != program.num_vars() {
        return Err(Error::DimensionMismatch("solution does not match the program".into()));
    }
    Ok((0..program.offsets.len())
        .filter(|&j| program.levels[j] == level)
        .map(|j| (j, program.block(&result.x, j).to_vec()))
        .collect())
}

/// Decisions of all nodes.
pub fn node_decisions(program: &TreeProgram, x: &[f64]) -> Vec<Vec<f64>> {
    (0..program.offsets.len()).map(|j| program.block(x, j).to_vec()).collect()
}

/// The two-stage counterpart of a multistage problem on a weighted sample of
/// full histories: decisions before the last level are taken once for all
/// scenarios, the last-level decision adapts to each scenario. Shared levels
/// observe the histories of the first scenario, which is only meaningful when
/// their costs and constraints do not depend on the noise.
pub fn build_two_stage_program(problem: &ProblemSpec, scenarios: &[(Vec<f64>, f64)]) -> Result<TreeProgram> {
    let levels = problem.levels();
    let Some(first) = scenarios.first() else {
        return Err(crate::error::invalid("empty scenario sample"));
    };
    let total: f64 = scenarios.iter().map(|s| s.1).sum();
    let mut nodes = Vec::new();
    for l in 0..levels - 1 {
        nodes.push(ProgramNode {
            parent: l.checked_sub(1),
            level: l,
            mass: 1.0,
            history: first.0[..=l].to_vec(),
            leaf: false,
        });
    }
    for (h, p) in scenarios {
        if h.len() != levels {
            return Err(Error::DimensionMismatch("scenario history length".into()));
        }
        nodes.push(ProgramNode {
            parent: levels.checked_sub(2),
            level: levels - 1,
            mass: p / total,
            history: h.clone(),
            leaf: true,
        });
    }
    build_program(problem, &nodes)
}

/// Two-stage assembly program on a weighted sample of `(1, ξ_2, ξ_3, ξ_4)`.
pub fn two_stage_assembly(problem: &ProblemSpec, scenarios: &[(Vec<f64>, f64)]) -> Result<TreeProgram> {
    if problem.assembly_data().is_none() {
        return Err(crate::error::invalid("two-stage assembly needs the assembly problem"));
    }
    build_two_stage_program(problem, scenarios)
}

//! The end-to-end learning pipeline: generate trees, solve them, fit a grid
//! of policies to every tree, rank all candidates on one validation sample
//! and re-estimate the winner on an independent test sample.
//!
//! Trees are processed in parallel and merged in tree order, so a run is a
//! pure function of its configuration.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::evaluate::{
    rank, simulate_policy_with, solve_tree, train_policy, EvaluationReport, LearnSpec, Policy,
    SeedClass, DEFAULT_ALPHA,
};
use crate::learn::{Kernel, KernelVariant, MeanFunction, DEFAULT_NOISE_VARIANCE, THETA_GRID};
use crate::problems::{assembly_problem, swing_problem, ProblemSpec};
use crate::process::{quantize_std_normal, DEFAULT_QUANTIZER_TOL};
use crate::restore::{sample_priority_orders, Restorer};
use crate::rng::derive_seed;
use crate::tree::{build_uniform_tree, instantiate_plan, random_branching_plan, ScenarioTree, DEFAULT_SCENARIO_CAP};

/// Which problem to work on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemConfig {
    Assembly,
    Swing { rho: f64, eta: f64, horizon: usize },
}

impl ProblemConfig {
    pub fn build(&self) -> Result<ProblemSpec> {
        match *self {
            ProblemConfig::Assembly => Ok(assembly_problem()),
            ProblemConfig::Swing { rho, eta, horizon } => swing_problem(rho, eta, horizon),
        }
    }
}

/// How the trees are generated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeGenerator {
    /// Quantized tree with `b` branches per node; every copy is identical.
    Uniform { b: usize },
    /// Randomly branching tree with about `n` scenarios.
    Random { n: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RestorerConfig {
    Projection,
    /// Greedy assembly restorer, one candidate per random priority order.
    Heuristic { orders: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    pub generator: TreeGenerator,
    /// Number of trees `M`.
    pub trees: usize,
    pub kernels: Vec<Kernel>,
    pub noise: f64,
    pub mean: MeanFunction,
    pub restorer: RestorerConfig,
    /// Use `min(q₃, η)` at the last assembly stage instead of a model.
    pub closed_form_last: bool,
    pub validation_n: usize,
    pub test_n: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl RunConfig {
    /// Defaults: one kernel variant over the bandwidth grid, projection
    /// restorer, 10000 validation and test scenarios.
    pub fn new(problem: ProblemConfig, generator: TreeGenerator, trees: usize, seed: u64) -> Self {
        RunConfig {
            problem,
            generator,
            trees,
            kernels: default_kernels(KernelVariant::RbfPhi),
            noise: DEFAULT_NOISE_VARIANCE,
            mean: MeanFunction::Zero,
            restorer: RestorerConfig::Projection,
            closed_form_last: true,
            validation_n: 10_000,
            test_n: 10_000,
            alpha: DEFAULT_ALPHA,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trees == 0 {
            return Err(Error::NoTrees);
        }
        if self.kernels.is_empty() {
            return Err(invalid("the kernel grid is empty"));
        }
        if !(self.noise > 0.0) {
            return Err(invalid("the noise variance must be positive"));
        }
        if self.validation_n < 2 || self.test_n < 2 {
            return Err(invalid("validation and test samples need at least two scenarios"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(invalid("alpha must lie in (0, 1)"));
        }
        match (&self.restorer, &self.problem) {
            (RestorerConfig::Heuristic { orders: 0 }, _) => Err(invalid("at least one priority order is required")),
            (RestorerConfig::Heuristic { .. }, ProblemConfig::Swing { .. }) => {
                Err(invalid("the heuristic restorer only applies to the assembly problem"))
            }
            _ => Ok(()),
        }
    }

    pub fn validation_seed(&self) -> u64 {
        derive_seed(self.seed, "validation", 0)
    }

    pub fn test_seed(&self) -> u64 {
        derive_seed(self.seed, "test", 0)
    }

    /// Seeds of tree `m`: branching structure and noise values.
    pub fn tree_seeds(&self, m: usize) -> (u64, u64) {
        (derive_seed(self.seed, "structure", m as u64), derive_seed(self.seed, "tree", m as u64))
    }
}

/// `variant` at every bandwidth of the default grid.
pub fn default_kernels(variant: KernelVariant) -> Vec<Kernel> {
    THETA_GRID.iter().map(|&theta| Kernel { variant, theta }).collect()
}

/// Build tree `m` of a run.
pub fn generate_tree(config: &RunConfig, problem: &ProblemSpec, m: usize) -> Result<ScenarioTree> {
    let (structure_seed, tree_seed) = config.tree_seeds(m);
    match config.generator {
        TreeGenerator::Uniform { b } => {
            let q = quantize_std_normal(b, DEFAULT_QUANTIZER_TOL)?;
            build_uniform_tree(&problem.process, &q, DEFAULT_SCENARIO_CAP)
        }
        TreeGenerator::Random { n } => {
            let plan = random_branching_plan(problem.levels() - 1, n, structure_seed)?;
            instantiate_plan(&plan, &problem.process, tree_seed)
        }
    }
}

/// The learning settings of every model fitted to one tree.
pub fn candidate_specs(config: &RunConfig, problem: &ProblemSpec, m: usize) -> Result<Vec<LearnSpec>> {
    let restorers = match config.restorer {
        RestorerConfig::Projection => vec![Restorer::Projection],
        RestorerConfig::Heuristic { orders } => {
            let data = problem
                .assembly_data()
                .ok_or_else(|| invalid("the heuristic restorer only applies to the assembly problem"))?;
            let counts = vec![data.a2.first().map_or(0, Vec::len), data.a3.first().map_or(0, Vec::len)];
            sample_priority_orders(&counts, orders, derive_seed(config.seed, "orders", m as u64))?
        }
    };
    let mut specs = Vec::with_capacity(config.kernels.len() * restorers.len());
    for kernel in &config.kernels {
        for restorer in &restorers {
            specs.push(LearnSpec {
                kernel: *kernel,
                noise: config.noise,
                mean: config.mean.clone(),
                restorer: restorer.clone(),
                closed_form_last: config.closed_form_last,
            });
        }
    }
    Ok(specs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeSummary {
    pub index: usize,
    pub structure_seed: u64,
    pub tree_seed: u64,
    pub scenarios: usize,
    pub nodes: usize,
    pub objective: f64,
    pub solve_seconds: f64,
    pub learn_seconds: f64,
}

/// Validation result of one (tree, model) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSummary {
    pub tree: usize,
    pub model: usize,
    pub kernel: Kernel,
    pub restorer: Restorer,
    /// `None` when training or simulation failed.
    pub validation: Option<ReportSummary>,
    pub error: Option<String>,
}

/// An evaluation report without the per-scenario values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub mean: f64,
    pub sigma_hat: f64,
    pub bound: f64,
    pub alpha: f64,
    pub expected_cost: f64,
    pub n: usize,
    pub seed: u64,
    pub seed_class: SeedClass,
    pub sample_hash: u64,
    pub seconds: f64,
}

impl From<&EvaluationReport> for ReportSummary {
    fn from(r: &EvaluationReport) -> Self {
        ReportSummary {
            mean: r.mean,
            sigma_hat: r.sigma_hat,
            bound: r.bound,
            alpha: r.alpha,
            expected_cost: r.expected_cost,
            n: r.values.len(),
            seed: r.seed,
            seed_class: r.seed_class,
            sample_hash: r.sample_hash,
            seconds: r.seconds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub config: RunConfig,
    pub validation_seed: u64,
    pub test_seed: u64,
    pub trees: Vec<TreeSummary>,
    pub candidates: Vec<CandidateSummary>,
    /// Indices into `candidates`, best first.
    pub ranking: Vec<usize>,
    pub winner: usize,
    pub failures: usize,
    pub test: ReportSummary,
    pub seconds: f64,
}

impl PipelineSummary {
    /// A copy with every wall-clock field zeroed, for reproducibility checks.
    pub fn without_timings(&self) -> Self {
        let mut s = self.clone();
        s.seconds = 0.0;
        s.test.seconds = 0.0;
        for t in &mut s.trees {
            t.solve_seconds = 0.0;
            t.learn_seconds = 0.0;
        }
        for c in &mut s.candidates {
            if let Some(v) = &mut c.validation {
                v.seconds = 0.0;
            }
        }
        s
    }
}

/// Everything produced for one tree.
pub struct TreeOutcome {
    pub summary: TreeSummary,
    pub tree: ScenarioTree,
    pub decisions: Vec<Vec<f64>>,
    pub candidates: Vec<CandidateSummary>,
    /// The tree's best model, if any succeeded.
    pub best: Option<Policy>,
}

pub struct PipelineRun {
    pub summary: PipelineSummary,
    pub winner: Policy,
    pub test_report: EvaluationReport,
}

/// Build, solve and fit every candidate of tree `m`, simulating each on the
/// validation sample.
pub fn process_tree(config: &RunConfig, problem: &ProblemSpec, m: usize) -> Result<TreeOutcome> {
    let (structure_seed, tree_seed) = config.tree_seeds(m);
    let tree = generate_tree(config, problem, m)?;
    let start = Instant::now();
    let (decisions, objective) = solve_tree(problem, &tree)?;
    let solve_seconds = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let specs = candidate_specs(config, problem, m)?;
    let mut candidates = Vec::with_capacity(specs.len());
    let mut best: Option<(f64, f64, Policy)> = None;
    for (i, spec) in specs.iter().enumerate() {
        let outcome = train_policy(problem, &tree, &decisions, spec).and_then(|p| {
            let r = simulate_policy_with(
                &p,
                problem,
                config.validation_n,
                config.validation_seed(),
                SeedClass::Validation,
                config.alpha,
            )?;
            Ok((p, r))
        });
        let mut c = CandidateSummary {
            tree: m,
            model: i,
            kernel: spec.kernel,
            restorer: spec.restorer.clone(),
            validation: None,
            error: None,
        };
        match outcome {
            Ok((p, r)) => {
                let better = best
                    .as_ref()
                    .is_none_or(|(mean, sd, _)| (r.mean, r.sigma_hat) < (*mean, *sd));
                if better {
                    best = Some((r.mean, r.sigma_hat, p));
                }
                c.validation = Some(ReportSummary::from(&r));
            }
            Err(e) => {
                log::warn!("tree {m} model {i} failed: {e}");
                c.error = Some(e.to_string());
            }
        }
        candidates.push(c);
    }
    Ok(TreeOutcome {
        summary: TreeSummary {
            index: m,
            structure_seed,
            tree_seed,
            scenarios: tree.num_scenarios(),
            nodes: tree.len(),
            objective,
            solve_seconds,
            learn_seconds: start.elapsed().as_secs_f64(),
        },
        tree,
        decisions,
        candidates,
        best: best.map(|(_, _, p)| p),
    })
}

/// Run the whole pipeline; `on_tree` sees every tree outcome in tree order
/// and may abort the run with its own error type.
pub fn run_pipeline<F, E>(config: &RunConfig, mut on_tree: F) -> std::result::Result<PipelineRun, E>
where
    F: FnMut(&TreeOutcome) -> std::result::Result<(), E>,
    E: From<Error>,
{
    run_inner(config, &mut on_tree)
}

fn run_inner<F, E>(config: &RunConfig, on_tree: &mut F) -> std::result::Result<PipelineRun, E>
where
    F: FnMut(&TreeOutcome) -> std::result::Result<(), E>,
    E: From<Error>,
{
    config.validate()?;
    let start = Instant::now();
    let problem = config.problem.build()?;
    let outcomes: Vec<Result<TreeOutcome>> = (0..config.trees)
        .into_par_iter()
        .map(|m| process_tree(config, &problem, m))
        .collect();
    let mut trees = Vec::with_capacity(config.trees);
    let mut candidates = Vec::new();
    let mut kept = Vec::with_capacity(config.trees);
    for (m, o) in outcomes.into_iter().enumerate() {
        let o = o.map_err(|e| Error::Solver(format!("tree {m}: {e}")))?;
        on_tree(&o)?;
        trees.push(o.summary.clone());
        candidates.extend(o.candidates.iter().cloned());
        kept.push((o.tree, o.decisions));
    }
    let failures = candidates.iter().filter(|c| c.validation.is_none()).count();
    let selection = rank_candidates(&candidates)?;
    let winner_idx = selection[0];
    let w = &candidates[winner_idx];
    let specs = candidate_specs(config, &problem, w.tree)?;
    let (tree, decisions) = &kept[w.tree];
    let winner = train_policy(&problem, tree, decisions, &specs[w.model])?;
    if config.test_seed() == config.validation_seed() {
        return Err(invalid("the test seed must differ from the validation seed").into());
    }
    let test_report = simulate_policy_with(&winner, &problem, config.test_n, config.test_seed(), SeedClass::Test, config.alpha)?;
    Ok(PipelineRun {
        summary: PipelineSummary {
            config: config.clone(),
            validation_seed: config.validation_seed(),
            test_seed: config.test_seed(),
            trees,
            ranking: selection,
            winner: winner_idx,
            failures,
            test: ReportSummary::from(&test_report),
            candidates,
            seconds: start.elapsed().as_secs_f64(),
        },
        winner,
        test_report,
    })
}

/// Rank candidate summaries by validation mean, then `σ̂`, then position.
pub fn rank_candidates(candidates: &[CandidateSummary]) -> Result<Vec<usize>> {
    // Reuse the report ranking so ties are broken identically everywhere.
    let reports: Vec<Option<EvaluationReport>> = candidates
        .iter()
        .map(|c| {
            c.validation.as_ref().map(|v| EvaluationReport {
                policy: String::new(),
                problem: String::new(),
                values: Vec::new(),
                mean: v.mean,
                sigma_hat: v.sigma_hat,
                bound: v.bound,
                alpha: v.alpha,
                z: 0.0,
                expected_cost: v.expected_cost,
                rho: None,
                seconds: v.seconds,
                seed: v.seed,
                seed_class: v.seed_class,
                sample_hash: v.sample_hash,
            })
        })
        .collect();
    let failures = reports.iter().filter(|r| r.is_none()).count();
    Ok(rank(reports, failures)?.ranking)
}

//! Out-of-sample simulation of policies, confidence bounds, model selection
//! and the shrinking-horizon benchmark.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detequiv::{build_tree_program, node_decisions};
use crate::error::{invalid, Error, Result};
use crate::learn::{extract_datasets, fit_gp, FeatureMap, GpStageModel, Kernel, MeanFunction};
use crate::normal;
use crate::problems::{bang_bang_decision, Objective, ProblemSpec, Scope};
use crate::process::{quantize_std_normal, Quantizer, DEFAULT_QUANTIZER_TOL};
use crate::restore::{heuristic_assembly_decision, project_local, Restorer};
use crate::rng;
use crate::solver::Status;
use crate::tree::{build_conditional_tree, build_uniform_tree, ScenarioTree, DEFAULT_SCENARIO_CAP};

/// Default confidence parameter of the reported bounds.
pub const DEFAULT_ALPHA: f64 = 0.05;

/// Feasibility tolerance applied to every simulated trajectory.
pub const TRAJECTORY_TOL: f64 = 1e-8;

/// A policy learned from the solution of one scenario tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnedPolicy {
    /// Optimal root decision of the training tree.
    pub first: Vec<f64>,
    pub features: FeatureMap,
    /// GP model of every level; `None` where no regression is used.
    pub stages: Vec<Option<GpStageModel>>,
    pub restorer: Restorer,
    /// Use `x_4 = min{q_3, η}` at the last assembly stage.
    pub closed_form_last: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShrinkingHorizon {
    pub quantizer: Quantizer,
    /// Root decision of the full uniform tree, computed once.
    pub first: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum Policy {
    Learned(Box<LearnedPolicy>),
    BangBang { eta: f64 },
    ShrinkingHorizon(Box<ShrinkingHorizon>),
    /// The same decision at every level regardless of the noise.
    Constant { plan: Vec<Vec<f64>> },
}

fn assembly_closed_form(problem: &ProblemSpec, history: &[f64], past: &[Vec<f64>]) -> Vec<f64> {
    let d = problem.assembly_data().expect("assembly problem");
    let eta = d.demand(history);
    let q3 = &past[past.len() - 1];
    eta.iter().zip(q3).map(|(e, q)| e.min(*q).max(0.0)).collect()
}

fn is_assembly_last(problem: &ProblemSpec, level: usize) -> bool {
    problem.assembly_data().is_some() && level + 1 == problem.levels()
}

impl Policy {
    /// Drop the stored Cholesky factors of a learned policy (they are
    /// rebuilt by [`Policy::refactor`]).
    pub fn strip_factors(&mut self) {
        if let Policy::Learned(p) = self {
            for g in p.stages.iter_mut().flatten() {
                g.factor = Vec::new();
            }
        }
    }

    pub fn refactor(&mut self) -> Result<()> {
        if let Policy::Learned(p) = self {
            for g in p.stages.iter_mut().flatten() {
                g.refactor()?;
            }
        }
        Ok(())
    }

    pub fn label(&self) -> &'static str {
        match self {
            Policy::Learned(_) => "learned",
            Policy::BangBang { .. } => "bang_bang",
            Policy::ShrinkingHorizon(_) => "shrinking_horizon",
            Policy::Constant { .. } => "constant",
        }
    }

    /// Decision at level `history.len() − 1` after the decisions `past`.
    pub fn decide(&self, problem: &ProblemSpec, history: &[f64], past: &[Vec<f64>]) -> Result<Vec<f64>> {
        let level = history.len() - 1;
        if problem.dim(level) == 0 {
            return Ok(Vec::new());
        }
        match self {
            Policy::Constant { plan } => plan
                .get(level)
                .cloned()
                .ok_or_else(|| invalid(format!("constant plan has no level {level}"))),
            Policy::BangBang { eta } => {
                let s = problem
                    .swing_data()
                    .ok_or_else(|| invalid("the bang-bang rule applies to the swing problem"))?;
                Ok(vec![bang_bang_decision(*eta, s.horizon, level, history[level])])
            }
            Policy::Learned(p) => p.decide(problem, history, past),
            Policy::ShrinkingHorizon(p) => p.decide(problem, history, past),
        }
    }
}

impl LearnedPolicy {
    fn decide(&self, problem: &ProblemSpec, history: &[f64], past: &[Vec<f64>]) -> Result<Vec<f64>> {
        let level = history.len() - 1;
        if level == 0 {
            return Ok(self.first.clone());
        }
        if self.closed_form_last && is_assembly_last(problem, level) {
            return Ok(assembly_closed_form(problem, history, past));
        }
        let model = self
            .stages
            .get(level)
            .and_then(Option::as_ref)
            .ok_or_else(|| invalid(format!("policy has no model for level {level}")))?;
        let u = self.features.features(history, past);
        if let (Restorer::Heuristic { orders }, Some(d)) = (&self.restorer, problem.assembly_data()) {
            if (1..=2).contains(&level) {
                let a = if level == 1 { &d.a2 } else { &d.a3 };
                let prev = &past[level - 1];
                let lambda = model.predict_mean(&u);
                return Ok(heuristic_assembly_decision(&lambda, &prev[..a.len()], a, &orders[level - 1]));
            }
        }
        let local = problem.stage(history, Scope::Stagewise).localize(past);
        if local.rows.is_empty() {
            let lambda = model.predict_mean(&u);
            project_local(&local, &lambda, &vec![1.0; lambda.len()])
        } else {
            let (lambda, var) = model.predict(&u);
            project_local(&local, &lambda, &vec![var; lambda.len()])
        }
    }
}

impl ShrinkingHorizon {
    fn decide(&self, problem: &ProblemSpec, history: &[f64], past: &[Vec<f64>]) -> Result<Vec<f64>> {
        let level = history.len() - 1;
        if level == 0 {
            return Ok(self.first.clone());
        }
        if is_assembly_last(problem, level) {
            return Ok(assembly_closed_form(problem, history, past));
        }
        let tree = build_conditional_tree(&problem.process, history, &self.quantizer, DEFAULT_SCENARIO_CAP)?;
        let mut prog = build_tree_program(problem, &tree)?;
        // The chain above the current node carries the decisions already taken.
        for (l, x) in past.iter().enumerate() {
            let off = prog.offsets[l];
            for (k, &v) in x.iter().enumerate() {
                prog.lp.lower[off + k] = v;
                prog.lp.upper[off + k] = v;
            }
        }
        let r = prog.solve();
        if r.status != Status::Optimal {
            return Err(Error::Solver(format!(
                "shrinking-horizon program at level {level} ended with status {:?}",
                r.status
            )));
        }
        Ok(prog.block(&r.x, level).to_vec())
    }
}

/// The shrinking-horizon benchmark with `b` branches per stage.
pub fn shrinking_horizon_policy(problem: &ProblemSpec, b: usize) -> Result<Policy> {
    let quantizer = quantize_std_normal(b, DEFAULT_QUANTIZER_TOL)?;
    let tree = build_uniform_tree(&problem.process, &quantizer, DEFAULT_SCENARIO_CAP)?;
    let prog = build_tree_program(problem, &tree)?;
    let r = prog.solve();
    if r.status != Status::Optimal {
        return Err(Error::Solver(format!("root program ended with status {:?}", r.status)));
    }
    Ok(Policy::ShrinkingHorizon(Box::new(ShrinkingHorizon {
        quantizer,
        first: prog.block(&r.x, 0).to_vec(),
    })))
}

/// Settings of one learned policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnSpec {
    pub kernel: Kernel,
    pub noise: f64,
    pub mean: MeanFunction,
    pub restorer: Restorer,
    pub closed_form_last: bool,
}

/// Fit a policy to the node decisions of a solved tree.
pub fn train_policy(problem: &ProblemSpec, tree: &ScenarioTree, decisions: &[Vec<f64>], spec: &LearnSpec) -> Result<Policy> {
    let map = FeatureMap::for_problem(problem);
    let sets = extract_datasets(problem, tree, decisions, &map)?;
    let mut stages = vec![None];
    for (level, set) in sets.iter().enumerate().skip(1) {
        let skip = problem.dim(level) == 0 || (spec.closed_form_last && is_assembly_last(problem, level));
        stages.push(if skip {
            None
        } else {
            let mean = match &spec.mean {
                MeanFunction::Plan(p) if p.len() != problem.dim(level) => MeanFunction::Zero,
                m => m.clone(),
            };
            Some(fit_gp(set, spec.kernel, spec.noise, mean)?)
        });
    }
    Ok(Policy::Learned(Box::new(LearnedPolicy {
        first: decisions[0].clone(),
        features: map,
        stages,
        restorer: spec.restorer.clone(),
        closed_form_last: spec.closed_form_last,
    })))
}

/// Which seed family a report was produced with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedClass {
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub policy: String,
    pub problem: String,
    /// Per-scenario total cost.
    pub values: Vec<f64>,
    /// Estimated objective: the sample mean, or the empirical certainty
    /// equivalent for an entropic objective.
    pub mean: f64,
    pub sigma_hat: f64,
    pub bound: f64,
    pub alpha: f64,
    pub z: f64,
    /// Plain sample mean of the costs.
    pub expected_cost: f64,
    pub rho: Option<f64>,
    pub seconds: f64,
    pub seed: u64,
    pub seed_class: SeedClass,
    /// Hash of all sampled noise paths, equal for equal scenario sets.
    pub sample_hash: u64,
}

/// Sample mean, `σ̂ = sqrt(Σ (v − mean)² / (N (N − 1)))` and the upper bound
/// `mean + z_{α/2} σ̂`.
pub fn confidence_bound(values: &[f64], alpha: f64) -> Result<(f64, f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(invalid("a confidence bound needs at least two values"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid("alpha must lie in (0, 1)"));
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    let sigma = (ss / (nf - 1.0) / nf).sqrt();
    Ok((mean, sigma, mean + normal::z_half_alpha(alpha) * sigma))
}

/// Certainty equivalent `ρ⁻¹ log mean exp(ρ v)` with a delta-method standard
/// error.
fn entropic_estimate(values: &[f64], rho: f64, alpha: f64) -> Result<(f64, f64)> {
    let m = values.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let w: Vec<f64> = values.iter().map(|v| (rho * (v - m)).exp()).collect();
    let (wm, ws, _) = confidence_bound(&w, alpha)?;
    Ok((m + wm.ln() / rho, ws / (rho * wm)))
}

fn path_hash(h: u64, path: &[f64]) -> u64 {
    path.iter().fold(h, |mut h, x| {
        for b in x.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    })
}

/// Roll one scenario forward. Returns the noise path and the decisions.
pub fn simulate_scenario(policy: &Policy, problem: &ProblemSpec, seed: u64, index: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let path = problem.process.sample_path_with(&mut rng::stream(seed, index as u64));
    let mut decisions: Vec<Vec<f64>> = Vec::with_capacity(path.len());
    for l in 0..path.len() {
        let x = policy
            .decide(problem, &path[..=l], &decisions)
            .map_err(|e| Error::Restoration {
                stage: l,
                scenario: index,
                reason: e.to_string(),
            })?;
        decisions.push(x);
    }
    if let Some((stage, violation)) = problem.check_trajectory(&path, &decisions, TRAJECTORY_TOL) {
        return Err(Error::InfeasibleTrajectory {
            stage,
            scenario: index,
            violation,
        });
    }
    Ok((path, decisions))
}

/// Simulate `policy` on `n` scenarios drawn from streams `0..n` of `seed`.
pub fn simulate_policy(policy: &Policy, problem: &ProblemSpec, n: usize, seed: u64, seed_class: SeedClass) -> Result<EvaluationReport> {
    simulate_policy_with(policy, problem, n, seed, seed_class, DEFAULT_ALPHA)
}

pub fn simulate_policy_with(
    policy: &Policy,
    problem: &ProblemSpec,
    n: usize,
    seed: u64,
    seed_class: SeedClass,
    alpha: f64,
) -> Result<EvaluationReport> {
    if n < 2 {
        return Err(invalid("simulation needs at least two scenarios"));
    }
    let start = Instant::now();
    let runs: Vec<Result<(f64, u64)>> = (0..n)
        .into_par_iter()
        .map(|k| {
            let (path, dec) = simulate_scenario(policy, problem, seed, k)?;
            Ok((problem.trajectory_cost(&path, &dec), path_hash(0xcbf2_9ce4_8422_2325, &path)))
        })
        .collect();
    let mut values = Vec::with_capacity(n);
    let mut sample_hash: u64 = 0;
    for r in runs {
        let (v, h) = r?;
        values.push(v);
        sample_hash = sample_hash.rotate_left(5) ^ h;
    }
    let (expected_cost, sigma, _) = confidence_bound(&values, alpha)?;
    let (mean, sigma_hat, rho) = match problem.objective {
        Objective::RiskNeutral => (expected_cost, sigma, None),
        Objective::Entropic { rho } => {
            let (ce, s) = entropic_estimate(&values, rho, alpha)?;
            (ce, s, Some(rho))
        }
    };
    let z = normal::z_half_alpha(alpha);
    Ok(EvaluationReport {
        policy: policy.label().into(),
        problem: problem.name().into(),
        values,
        mean,
        sigma_hat,
        bound: mean + z * sigma_hat,
        alpha,
        z,
        expected_cost,
        rho,
        seconds: start.elapsed().as_secs_f64(),
        seed,
        seed_class,
        sample_hash,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Candidate indices, best first; failed candidates are left out.
    pub ranking: Vec<usize>,
    pub winner: usize,
    pub reports: Vec<Option<EvaluationReport>>,
    pub failures: usize,
}

/// Rank candidates on a common validation sample: by estimated objective,
/// then by `σ̂`, then by index.
pub fn select_policy(candidates: &[Policy], problem: &ProblemSpec, n: usize, seed: u64) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(invalid("no candidate policies"));
    }
    let results: Vec<Result<EvaluationReport>> = candidates
        .par_iter()
        .map(|p| simulate_policy(p, problem, n, seed, SeedClass::Validation))
        .collect();
    let mut reports = Vec::with_capacity(results.len());
    let mut failures = 0;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(rep) => reports.push(Some(rep)),
            Err(e) => {
                log::warn!("candidate {i} failed: {e}");
                failures += 1;
                reports.push(None);
            }
        }
    }
    rank(reports, failures)
}

/// Rank already computed validation reports.
pub fn rank(reports: Vec<Option<EvaluationReport>>, failures: usize) -> Result<Selection> {
    let mut ranking: Vec<usize> = (0..reports.len()).filter(|&i| reports[i].is_some()).collect();
    if ranking.is_empty() {
        return Err(Error::AllCandidatesFailed(reports.len()));
    }
    let hash = reports[ranking[0]].as_ref().unwrap().sample_hash;
    if ranking.iter().any(|&i| reports[i].as_ref().unwrap().sample_hash != hash) {
        return Err(invalid("candidates were evaluated on different scenario sets"));
    }
    ranking.sort_by(|&a, &b| {
        let (ra, rb) = (reports[a].as_ref().unwrap(), reports[b].as_ref().unwrap());
        ra.mean
            .total_cmp(&rb.mean)
            .then(ra.sigma_hat.total_cmp(&rb.sigma_hat))
            .then(a.cmp(&b))
    });
    Ok(Selection {
        winner: ranking[0],
        ranking,
        reports,
        failures,
    })
}

/// Re-evaluate the selected policy on an independent test sample.
pub fn fresh_estimate(policy: &Policy, problem: &ProblemSpec, n: usize, seed: u64, validation_seed: u64) -> Result<EvaluationReport> {
    if seed == validation_seed {
        return Err(invalid("the test seed must differ from the validation seed"));
    }
    simulate_policy(policy, problem, n, seed, SeedClass::Test)
}

/// Number of independent trees needed to draw at least one good tree with
/// probability `delta` when each tree is good with probability `g`.
pub fn required_tree_count(g: f64, delta: f64) -> Result<u64> {
    if !(g > 0.0 && g < 1.0) || !(delta > 0.0 && delta < 1.0) {
        return Err(invalid("g and delta must lie in (0, 1)"));
    }
    Ok(((1.0 - delta).ln() / (1.0 - g).ln()).ceil() as u64)
}

/// Solve the deterministic equivalent of `problem` on `tree` and return the
/// node decisions with the optimal value.
pub fn solve_tree(problem: &ProblemSpec, tree: &ScenarioTree) -> Result<(Vec<Vec<f64>>, f64)> {
    let prog = build_tree_program(problem, tree)?;
    let r = prog.solve();
    if r.status != Status::Optimal {
        return Err(Error::Solver(format!("tree program ended with status {:?}", r.status)));
    }
    Ok((node_decisions(&prog, &r.x), r.objective))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learn::KernelVariant;
    use crate::problems::{assembly_problem, swing_problem};

    #[test]
    fn bound_formula() {
        let (m, s, b) = confidence_bound(&[0.0, 2.0], 0.05).unwrap();
        assert_eq!((m, s), (1.0, 1.0));
        assert!((b - 2.959964).abs() < 1e-5);
        assert_eq!(confidence_bound(&[3.0; 5], 0.1).unwrap(), (3.0, 0.0, 3.0));
        assert!(confidence_bound(&[1.0], 0.05).is_err());
        assert!((normal::z_half_alpha(0.05) - 1.959964).abs() < 1e-5);
    }

    #[test]
    fn tree_counts() {
        assert_eq!(required_tree_count(0.5, 0.5).unwrap(), 1);
        assert_eq!(required_tree_count(0.1, 0.99).unwrap(), 44);
        assert!(required_tree_count(0.0, 0.5).is_err());
        assert!(required_tree_count(0.5, 1.0).is_err());
    }

    #[test]
    fn zero_policy_on_assembly() {
        let p = assembly_problem();
        let plan = p.dims().iter().map(|&n| vec![0.0; n]).collect();
        let r = simulate_policy(&Policy::Constant { plan }, &p, 50, 3, SeedClass::Validation).unwrap();
        assert!(r.values.iter().all(|&v| v == 0.0));
        assert_eq!((r.mean, r.bound), (0.0, 0.0));
    }

    #[test]
    fn bang_bang_trace() {
        let p = swing_problem(0.0, 2.0, 52).unwrap();
        let mut h = vec![0.0; 53];
        h[51] = 0.1;
        h[52] = -0.2;
        h[30] = 0.5;
        let pol = Policy::BangBang { eta: 2.0 };
        let mut dec = Vec::new();
        for l in 0..53 {
            let x = pol.decide(&p, &h[..=l], &dec).unwrap();
            dec.push(x);
        }
        assert_eq!(dec[51], vec![1.0]);
        assert_eq!(dec[52], vec![0.0]);
        assert_eq!(dec[30], vec![0.0]);
        assert!((p.trajectory_cost(&h, &dec) + 0.1).abs() < 1e-15);
    }

    #[test]
    fn simulation_is_reproducible_and_validated() {
        let p = swing_problem(0.0, 2.0, 10).unwrap();
        let pol = Policy::BangBang { eta: 2.0 };
        let a = simulate_policy(&pol, &p, 200, 9, SeedClass::Validation).unwrap();
        let b = simulate_policy(&pol, &p, 200, 9, SeedClass::Validation).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.sample_hash, b.sample_hash);
        let bad = Policy::Constant { plan: vec![vec![1.0]; 11] };
        assert!(matches!(
            simulate_policy(&bad, &p, 5, 9, SeedClass::Validation),
            Err(Error::Restoration { .. } | Error::InfeasibleTrajectory { .. })
        ));
    }

    #[test]
    fn selection_prefers_dominating_policy() {
        let p = swing_problem(0.0, 3.0, 8).unwrap();
        let zero = Policy::Constant { plan: vec![vec![0.0]; 9] };
        let cands = vec![zero.clone(), Policy::BangBang { eta: 3.0 }];
        let s = select_policy(&cands, &p, 300, 1).unwrap();
        assert_eq!(s.ranking, vec![1, 0]);
        let one = select_policy(&cands[..1], &p, 10, 1).unwrap();
        assert_eq!(one.winner, 0);
        assert!(fresh_estimate(&zero, &p, 10, 1, 1).is_err());
        assert_eq!(fresh_estimate(&zero, &p, 10, 2, 1).unwrap().seed_class, SeedClass::Test);
    }

    #[test]
    fn entropic_report_is_certainty_equivalent() {
        let p = swing_problem(1.0, 3.0, 8).unwrap();
        let r = simulate_policy(&Policy::BangBang { eta: 3.0 }, &p, 400, 5, SeedClass::Validation).unwrap();
        let ce = (r.values.iter().map(|v| v.exp()).sum::<f64>() / 400.0).ln();
        assert!((r.mean - ce).abs() < 1e-12);
        assert!(r.mean >= r.expected_cost);
    }

    #[test]
    fn learned_policy_runs_on_small_swing_tree() {
        let p = swing_problem(0.0, 2.0, 6).unwrap();
        let q = quantize_std_normal(2, 1e-10).unwrap();
        let t = build_uniform_tree(&p.process, &q, DEFAULT_SCENARIO_CAP).unwrap();
        let (dec, _) = solve_tree(&p, &t).unwrap();
        let spec = LearnSpec {
            kernel: Kernel::new(KernelVariant::RbfIdentity, 1.0).unwrap(),
            noise: 1e-8,
            mean: MeanFunction::Zero,
            restorer: Restorer::Projection,
            closed_form_last: false,
        };
        let pol = train_policy(&p, &t, &dec, &spec).unwrap();
        let r = simulate_policy(&pol, &p, 100, 2, SeedClass::Validation).unwrap();
        assert!(r.mean.is_finite());
    }

    #[test]
    fn shrinking_horizon_on_assembly() {
        let p = assembly_problem();
        let pol = shrinking_horizon_policy(&p, 2).unwrap();
        let r = simulate_policy(&pol, &p, 20, 4, SeedClass::Validation).unwrap();
        assert!(r.mean < 0.0);
    }
}

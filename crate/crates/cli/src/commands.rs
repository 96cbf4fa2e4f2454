use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use stochtree::detequiv::{build_tree_program, node_decisions, two_stage_assembly};
use stochtree::evaluate::{
    rank, required_tree_count, shrinking_horizon_policy, simulate_policy_with, train_policy, EvaluationReport,
    LearnSpec, Policy, SeedClass,
};
use stochtree::learn::{Kernel, KernelVariant, MeanFunction, THETA_GRID};
use stochtree::pipeline::{
    candidate_specs, generate_tree, run_pipeline, CandidateSummary, ProblemConfig, ReportSummary, RestorerConfig,
    RunConfig, TreeGenerator,
};
use stochtree::problems::ProblemSpec;
use stochtree::process::quantize_std_normal;
use stochtree::solver::Status;
use stochtree::tree::{enumerate_scenarios, ScenarioTree};

use crate::artifact::{read_kind, write_one, Writer};
use crate::plot;
use crate::{Cli, Command, KernelArg, ModelArgs, PipelineArgs, ProblemArg, ProblemArgs, RestorerArg, SeedClassArg, TreeArgs};

/// A mistake in the command line or configuration (exit code 1).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    use stochtree::Error as E;
    for cause in e.chain() {
        if cause.is::<ConfigError>() {
            return 1;
        }
        if let Some(E::InvalidArgument(_) | E::NoTrees | E::DimensionMismatch(_)) = cause.downcast_ref::<E>() {
            return 1;
        }
    }
    2
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TreeData {
    pub problem: ProblemConfig,
    pub branching: Option<usize>,
    pub target_scenarios: Option<usize>,
    pub scenarios: usize,
    pub nodes: usize,
    pub level_counts: Vec<usize>,
    pub tree: ScenarioTree,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SolutionData {
    pub problem: ProblemConfig,
    pub two_stage: bool,
    pub branching: Option<usize>,
    pub target_scenarios: Option<usize>,
    pub scenarios: usize,
    pub objective: f64,
    pub status: Status,
    pub iterations: usize,
    pub seconds: f64,
    /// Decision of every program node; for a tree program node `k` is tree
    /// node `k`.
    pub decisions: Vec<Vec<f64>>,
    pub tree: Option<ScenarioTree>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PolicyData {
    pub problem: ProblemConfig,
    pub tree: Option<usize>,
    pub model: usize,
    pub spec: Option<LearnSpec>,
    pub policy: Policy,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReportData {
    /// Problem configuration; the flattened report carries the problem name.
    pub config: ProblemConfig,
    pub source: String,
    pub n: usize,
    #[serde(flatten)]
    pub report: EvaluationReport,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SelectionData {
    pub problem: ProblemConfig,
    pub candidates: Vec<SelectionEntry>,
    pub ranking: Vec<usize>,
    pub winner: usize,
    pub failures: usize,
    pub test: Option<ReportSummary>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SelectionEntry {
    pub file: String,
    pub record: usize,
    pub validation: Option<ReportSummary>,
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Quantize { b, tol } => quantize(cli, *b, *tol),
        Command::Tree { problem, tree } => tree_cmd(cli, problem, tree),
        Command::Solve {
            problem,
            tree,
            tree_file,
            lp,
        } => solve(cli, problem, tree, tree_file.as_deref(), lp.as_deref()),
        Command::Learn {
            solution,
            model,
            keep_factor,
            seed,
        } => learn(cli, solution, model, *keep_factor, *seed),
        Command::Simulate {
            problem,
            source,
            sample,
            class,
        } => simulate(cli, problem, source, sample, *class),
        Command::Select {
            policies,
            sample,
            test_n,
            test_seed,
        } => select(cli, policies, sample, *test_n, *test_seed),
        Command::Pipeline(args) => pipeline(cli, args),
        Command::Plot { files, x, y, name } => plot_cmd(cli, files, x, y, name),
        Command::PlanTrees { g, delta } => plan_trees(cli, *g, *delta),
    }
}

fn problem_config(args: &ProblemArgs) -> Result<ProblemConfig> {
    Ok(match args.problem {
        ProblemArg::Assembly | ProblemArg::Assembly2Stage => ProblemConfig::Assembly,
        ProblemArg::Swing => {
            if args.horizon == 0 {
                return Err(config_err("--horizon must be positive"));
            }
            ProblemConfig::Swing {
                rho: args.rho,
                eta: args.eta,
                horizon: args.horizon,
            }
        }
    })
}

fn generator(b: Option<usize>, random_n: Option<usize>) -> Result<TreeGenerator> {
    match (b, random_n) {
        (Some(b), None) => Ok(TreeGenerator::Uniform { b }),
        (None, Some(n)) => Ok(TreeGenerator::Random { n }),
        _ => Err(config_err("give exactly one of --b and --random-n")),
    }
}

fn build_tree(problem: &ProblemConfig, spec: &ProblemSpec, args: &TreeArgs) -> Result<ScenarioTree> {
    let cfg = RunConfig::new(problem.clone(), generator(args.b, args.random_n)?, args.index + 1, args.seed);
    Ok(generate_tree(&cfg, spec, args.index)?)
}

fn kernels(model: &ModelArgs) -> Result<Vec<Kernel>> {
    let variant = match model.kernel {
        KernelArg::Identity => KernelVariant::RbfIdentity,
        KernelArg::Phi => KernelVariant::RbfPhi,
    };
    let thetas = if model.theta.is_empty() {
        THETA_GRID.to_vec()
    } else {
        model.theta.clone()
    };
    thetas
        .into_iter()
        .map(|t| Kernel::new(variant, t).map_err(|e| config_err(e.to_string())))
        .collect()
}

fn restorer(model: &ModelArgs) -> RestorerConfig {
    match model.restorer {
        RestorerArg::Projection => RestorerConfig::Projection,
        RestorerArg::Heuristic => RestorerConfig::Heuristic { orders: model.orders },
    }
}

fn quantize(cli: &Cli, b: usize, tol: f64) -> Result<()> {
    let q = quantize_std_normal(b, tol)?;
    let path = write_one(&cli.out.join("quantizer.jsonl"), "quantize", None, "quantizer", &q)?;
    for (x, p) in q.points.iter().zip(&q.probs) {
        println!("{x:>12.6} {p:>10.6}");
    }
    println!("distortion {:.6e} -> {}", q.distortion, path.display());
    Ok(())
}

fn tree_cmd(cli: &Cli, problem: &ProblemArgs, args: &TreeArgs) -> Result<()> {
    let cfg = problem_config(problem)?;
    let spec = cfg.build()?;
    let tree = build_tree(&cfg, &spec, args)?;
    let data = TreeData {
        problem: cfg,
        branching: args.b,
        target_scenarios: args.random_n,
        scenarios: tree.num_scenarios(),
        nodes: tree.len(),
        level_counts: tree.level_counts(),
        tree,
    };
    let path = write_one(&cli.out.join("tree.jsonl"), "tree", Some(args.seed), "tree", &data)?;
    println!(
        "{} scenarios, {} nodes -> {}",
        data.scenarios,
        data.nodes,
        path.display()
    );
    Ok(())
}

fn solve(cli: &Cli, problem: &ProblemArgs, args: &TreeArgs, tree_file: Option<&Path>, lp: Option<&Path>) -> Result<()> {
    let cfg = problem_config(problem)?;
    let spec = cfg.build()?;
    let (tree, branching, target) = match tree_file {
        Some(f) => {
            let mut t: Vec<TreeData> = read_kind(f, "tree")?;
            let t = t.swap_remove(0);
            if t.problem != cfg {
                return Err(config_err("the tree file was built for another problem"));
            }
            (t.tree, t.branching, t.target_scenarios)
        }
        None => (build_tree(&cfg, &spec, args)?, args.b, args.random_n),
    };
    let two_stage = problem.problem == ProblemArg::Assembly2Stage;
    let prog = if two_stage {
        let sample: Vec<(Vec<f64>, f64)> = enumerate_scenarios(&tree).into_iter().map(|s| (s.xi, s.prob)).collect();
        two_stage_assembly(&spec, &sample)?
    } else {
        build_tree_program(&spec, &tree)?
    };
    if let Some(lp) = lp {
        let f = fs::File::create(lp).with_context(|| format!("creating {}", lp.display()))?;
        prog.write_lp_format(std::io::BufWriter::new(f))?;
    }
    let start = Instant::now();
    let r = prog.solve();
    let seconds = start.elapsed().as_secs_f64();
    if !matches!(r.status, Status::Optimal) {
        bail!("solver ended with status {:?}", r.status);
    }
    let data = SolutionData {
        problem: cfg,
        two_stage,
        branching,
        target_scenarios: target,
        scenarios: tree.num_scenarios(),
        objective: r.objective,
        status: r.status,
        iterations: r.iterations,
        seconds,
        decisions: node_decisions(&prog, &r.x),
        tree: (!two_stage).then_some(tree),
    };
    let path = write_one(&cli.out.join("solution.jsonl"), "solve", Some(args.seed), "solution", &data)?;
    println!(
        "objective {:.6} ({} variables, {} iterations, {:.2}s) -> {}",
        r.objective,
        prog.num_vars(),
        r.iterations,
        seconds,
        path.display()
    );
    Ok(())
}

fn learn(cli: &Cli, solution: &Path, model: &ModelArgs, keep_factor: bool, seed: u64) -> Result<()> {
    let mut sols: Vec<SolutionData> = read_kind(solution, "solution")?;
    let sol = sols.swap_remove(0);
    let Some(tree) = &sol.tree else {
        return Err(config_err("policies can only be learned from a tree solution"));
    };
    let problem = sol.problem.build()?;
    let mut cfg = RunConfig::new(sol.problem.clone(), TreeGenerator::Uniform { b: 1 }, 1, seed);
    cfg.kernels = kernels(model)?;
    cfg.noise = model.noise;
    cfg.restorer = restorer(model);
    cfg.closed_form_last = !model.learn_last;
    cfg.validate()?;
    let specs = candidate_specs(&cfg, &problem, 0)?;
    let mut w = Writer::create(&cli.out.join("policies.jsonl"), "learn", Some(seed))?;
    for (i, spec) in specs.iter().enumerate() {
        let mut policy = train_policy(&problem, tree, &sol.decisions, spec)?;
        if !keep_factor {
            policy.strip_factors();
        }
        w.write(
            "policy",
            &PolicyData {
                problem: sol.problem.clone(),
                tree: None,
                model: i,
                spec: Some(spec.clone()),
                policy,
            },
        )?;
    }
    let path = w.finish()?;
    println!("{} policies -> {}", specs.len(), path.display());
    Ok(())
}

fn load_policies(path: &Path) -> Result<Vec<PolicyData>> {
    let mut ps: Vec<PolicyData> = read_kind(path, "policy")?;
    for p in &mut ps {
        p.policy.refactor()?;
    }
    Ok(ps)
}

fn seed_class(c: SeedClassArg) -> SeedClass {
    match c {
        SeedClassArg::Validation => SeedClass::Validation,
        SeedClassArg::Test => SeedClass::Test,
    }
}

fn simulate(
    cli: &Cli,
    problem: &ProblemArgs,
    source: &crate::PolicySource,
    sample: &crate::SampleArgs,
    class: SeedClassArg,
) -> Result<()> {
    let mut jobs: Vec<(ProblemConfig, String, Policy)> = Vec::new();
    if let Some(f) = &source.policy {
        for (i, p) in load_policies(f)?.into_iter().enumerate() {
            jobs.push((p.problem, format!("{}#{i}", f.display()), p.policy));
        }
    } else {
        if problem.problem == ProblemArg::Assembly2Stage {
            return Err(config_err("simulation needs --problem assembly or swing"));
        }
        let cfg = problem_config(problem)?;
        let spec = cfg.build()?;
        if source.bang_bang {
            let ProblemConfig::Swing { eta, .. } = cfg else {
                return Err(config_err("--bang-bang applies to the swing problem"));
            };
            jobs.push((cfg, "bang_bang".into(), Policy::BangBang { eta }));
        } else if let Some(b) = source.shrinking_horizon {
            let p = shrinking_horizon_policy(&spec, b)?;
            jobs.push((cfg, format!("shrinking_horizon_b{b}"), p));
        }
    }
    let mut w = Writer::create(&cli.out.join("reports.jsonl"), "simulate", Some(sample.sample_seed))?;
    for (cfg, source, policy) in jobs {
        let spec = cfg.build()?;
        let report = simulate_policy_with(&policy, &spec, sample.n, sample.sample_seed, seed_class(class), sample.alpha)?;
        println!(
            "{source}: mean {:.6} sigma {:.6} bound {:.6} ({:.2}s)",
            report.mean, report.sigma_hat, report.bound, report.seconds
        );
        w.write(
            "report",
            &ReportData {
                config: cfg,
                source,
                n: sample.n,
                report,
            },
        )?;
    }
    let path = w.finish()?;
    println!("-> {}", path.display());
    Ok(())
}

fn select(
    cli: &Cli,
    files: &[PathBuf],
    sample: &crate::SampleArgs,
    test_n: Option<usize>,
    test_seed: Option<u64>,
) -> Result<()> {
    let mut cands = Vec::new();
    for f in files {
        for (i, p) in load_policies(f)?.into_iter().enumerate() {
            cands.push((f.display().to_string(), i, p));
        }
    }
    let problem = cands[0].2.problem.clone();
    if cands.iter().any(|c| c.2.problem != problem) {
        return Err(config_err("candidates were learned for different problems"));
    }
    let spec = problem.build()?;
    let reports: Vec<Option<EvaluationReport>> = cands
        .iter()
        .map(|(f, i, p)| {
            match simulate_policy_with(
                &p.policy,
                &spec,
                sample.n,
                sample.sample_seed,
                SeedClass::Validation,
                sample.alpha,
            ) {
                Ok(r) => Some(r),
                Err(e) => {
                    log::warn!("{f}#{i} failed: {e}");
                    None
                }
            }
        })
        .collect();
    let failures = reports.iter().filter(|r| r.is_none()).count();
    let sel = rank(reports, failures)?;
    let test = match test_n {
        Some(n) => {
            let seed = test_seed.unwrap_or(sample.sample_seed.wrapping_add(1));
            let r = stochtree::evaluate::fresh_estimate(&cands[sel.winner].2.policy, &spec, n, seed, sample.sample_seed)?;
            Some(ReportSummary::from(&r))
        }
        None => None,
    };
    for (pos, &k) in sel.ranking.iter().enumerate() {
        let r = sel.reports[k].as_ref().unwrap();
        println!("{pos:>3}. {}#{} mean {:.6} sigma {:.6}", cands[k].0, cands[k].1, r.mean, r.sigma_hat);
    }
    if let Some(t) = &test {
        println!("winner on fresh sample: mean {:.6} sigma {:.6}", t.mean, t.sigma_hat);
    }
    let data = SelectionData {
        problem,
        candidates: cands
            .iter()
            .zip(&sel.reports)
            .map(|((f, i, _), r)| SelectionEntry {
                file: f.clone(),
                record: *i,
                validation: r.as_ref().map(ReportSummary::from),
            })
            .collect(),
        ranking: sel.ranking,
        winner: sel.winner,
        failures,
        test,
    };
    let path = write_one(
        &cli.out.join("selection.jsonl"),
        "select",
        Some(sample.sample_seed),
        "selection",
        &data,
    )?;
    println!("-> {}", path.display());
    Ok(())
}

fn run_config(args: &PipelineArgs) -> Result<RunConfig> {
    if let Some(f) = &args.config {
        let text = fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
        return serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", f.display())));
    }
    if args.problem.problem == ProblemArg::Assembly2Stage {
        return Err(config_err("the pipeline needs --problem assembly or swing"));
    }
    let mut cfg = RunConfig::new(
        problem_config(&args.problem)?,
        generator(args.b, args.random_n)?,
        args.trees,
        args.seed,
    );
    cfg.kernels = kernels(&args.model)?;
    cfg.noise = args.model.noise;
    cfg.mean = MeanFunction::Zero;
    cfg.restorer = restorer(&args.model);
    cfg.closed_form_last = !args.model.learn_last;
    cfg.validation_n = args.validation_n;
    cfg.test_n = args.test_n;
    cfg.alpha = args.alpha;
    Ok(cfg)
}

fn pipeline(cli: &Cli, args: &PipelineArgs) -> Result<()> {
    let cfg = run_config(args)?;
    cfg.validate()?;
    let dir = args
        .run_dir
        .clone()
        .unwrap_or_else(|| cli.out.join(format!("run-{}", cfg.seed)));
    for sub in ["trees", "policies", "reports"] {
        fs::create_dir_all(dir.join(sub)).with_context(|| format!("creating {}", dir.join(sub).display()))?;
    }
    let seed = Some(cfg.seed);
    write_one(&dir.join("config.jsonl"), "pipeline", seed, "config", &cfg)?;
    let mut validation = Writer::create(&dir.join("reports/validation.jsonl"), "pipeline", seed)?;
    let problem_cfg = cfg.problem.clone();
    let run = run_pipeline::<_, anyhow::Error>(&cfg, |o| {
        let m = o.summary.index;
        let mut w = Writer::create(&dir.join(format!("trees/tree-{m:03}.jsonl")), "pipeline", seed)?;
        w.write(
            "tree",
            &TreeData {
                problem: problem_cfg.clone(),
                branching: match cfg.generator {
                    TreeGenerator::Uniform { b } => Some(b),
                    TreeGenerator::Random { .. } => None,
                },
                target_scenarios: match cfg.generator {
                    TreeGenerator::Random { n } => Some(n),
                    TreeGenerator::Uniform { .. } => None,
                },
                scenarios: o.tree.num_scenarios(),
                nodes: o.tree.len(),
                level_counts: o.tree.level_counts(),
                tree: o.tree.clone(),
            },
        )
?;
        w.write("tree_summary", &o.summary)?;
        w.finish()?;
        if let Some(best) = &o.best {
            let mut p = best.clone();
            p.strip_factors();
            let model = best_model(&o.candidates);
            write_one(
                &dir.join(format!("policies/tree-{m:03}.jsonl")),
                "pipeline",
                seed,
                "policy",
                &PolicyData {
                    problem: problem_cfg.clone(),
                    tree: Some(m),
                    model,
                    spec: None,
                    policy: p,
                },
            )?;
        }
        for c in &o.candidates {
            validation.write("candidate", c)?;
        }
        log::info!("tree {m}: objective {:.6}", o.summary.objective);
        Ok(())
    })?;
    validation.finish()?;
    let s = &run.summary;
    let w = &s.candidates[s.winner];
    let mut winner = run.winner.clone();
    winner.strip_factors();
    write_one(
        &dir.join("policies/winner.jsonl"),
        "pipeline",
        seed,
        "policy",
        &PolicyData {
            problem: cfg.problem.clone(),
            tree: Some(w.tree),
            model: w.model,
            spec: None,
            policy: winner,
        },
    )?;
    write_one(
        &dir.join("reports/test.jsonl"),
        "pipeline",
        seed,
        "report",
        &ReportData {
            config: cfg.problem.clone(),
            source: format!("tree {} model {}", w.tree, w.model),
            n: cfg.test_n,
            report: run.test_report.clone(),
        },
    )?;
    write_one(&dir.join("summary.jsonl"), "pipeline", seed, "summary", s)?;
    for t in &s.trees {
        println!(
            "tree {:>3}: {} scenarios, objective {:.6}, solve {:.2}s",
            t.index, t.scenarios, t.objective, t.solve_seconds
        );
    }
    let v = w.validation.as_ref().expect("winner has a report");
    println!(
        "winner: tree {} model {} (theta {}), validation mean {:.6}, test mean {:.6} +- {:.6}",
        w.tree, w.model, w.kernel.theta, v.mean, s.test.mean, s.test.sigma_hat
    );
    println!("-> {}", dir.display());
    Ok(())
}

fn best_model(cands: &[CandidateSummary]) -> usize {
    let mut best: Option<(f64, f64, usize)> = None;
    for c in cands {
        if let Some(v) = &c.validation {
            if best.is_none_or(|(m, s, _)| (v.mean, v.sigma_hat) < (m, s)) {
                best = Some((v.mean, v.sigma_hat, c.model));
            }
        }
    }
    best.map_or(0, |b| b.2)
}

fn plot_cmd(cli: &Cli, files: &[PathBuf], x: &str, y: &str, name: &str) -> Result<()> {
    let mut points = Vec::new();
    for f in files {
        points.extend(plot::load_points(f, x, y)?);
    }
    if points.is_empty() {
        bail!("nothing to plot: the series are empty");
    }
    plot::sort_points(&mut points);
    fs::create_dir_all(&cli.out)?;
    let csv = cli.out.join(format!("{name}.csv"));
    let svg = cli.out.join(format!("{name}.svg"));
    plot::write_csv(&csv, &points)?;
    plot::write_svg(&svg, &points, x, y)?;
    println!("{} points -> {}, {}", points.len(), csv.display(), svg.display());
    Ok(())
}

fn plan_trees(cli: &Cli, g: f64, delta: f64) -> Result<()> {
    let m = required_tree_count(g, delta)?;
    #[derive(Serialize)]
    struct Plan {
        g: f64,
        delta: f64,
        trees: u64,
    }
    write_one(
        &cli.out.join("plan.jsonl"),
        "plan-trees",
        None,
        "plan",
        &Plan { g, delta, trees: m },
    )?;
    println!("{m}");
    Ok(())
}

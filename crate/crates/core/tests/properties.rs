use proptest::prelude::*;

use stochtree::detequiv::{build_tree_program, two_stage_assembly};
use stochtree::evaluate::confidence_bound;
use stochtree::learn::{fit_gp, Kernel, KernelVariant, MeanFunction, StageDataset};
use stochtree::normal;
use stochtree::problems::{assembly_problem, swing_problem};
use stochtree::process::{cell_masses_and_distortion, quantize_std_normal, ProcessModel, DEFAULT_QUANTIZER_TOL};
use stochtree::restore::{heuristic_assembly_decision, restore_heuristic, restore_projection};
use stochtree::solver::{project_scaled, solve_lp, LinearProgram, Polyhedron, ProjectionOptions, Status};
use stochtree::tree::{build_uniform_tree, enumerate_scenarios, instantiate_plan, random_branching_plan, DEFAULT_SCENARIO_CAP};

fn dataset(points: &[(f64, f64, f64)]) -> StageDataset {
    let mut d = StageDataset {
        level: 1,
        features: vec![],
        targets: vec![],
    };
    let mut counts = Vec::new();
    for &(a, b, y) in points {
        d.push(vec![a, b], vec![y], &mut counts);
    }
    d
}

/// Brute-force LP oracle in two variables: the optimum of a bounded feasible
/// program sits on a vertex, the intersection of two active constraint lines.
fn vertex_enumeration(lines: &[(f64, f64, f64)], c: (f64, f64)) -> Option<f64> {
    let feasible = |x: f64, y: f64| lines.iter().all(|&(a, b, r)| a * x + b * y <= r + 1e-9);
    let mut best: Option<f64> = None;
    for i in 0..lines.len() {
        for j in i + 1..lines.len() {
            let (a1, b1, r1) = lines[i];
            let (a2, b2, r2) = lines[j];
            let det = a1 * b2 - a2 * b1;
            if det.abs() < 1e-12 {
                continue;
            }
            let x = (r1 * b2 - r2 * b1) / det;
            let y = (a1 * r2 - a2 * r1) / det;
            if feasible(x, y) {
                let v = c.0 * x + c.1 * y;
                best = Some(best.map_or(v, |b: f64| b.min(v)));
            }
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quantizer_is_a_symmetric_lloyd_fixed_point(b in 1usize..16) {
        let q = quantize_std_normal(b, DEFAULT_QUANTIZER_TOL).unwrap();
        prop_assert!((q.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(q.points.windows(2).all(|w| w[0] < w[1]));
        for k in 0..b {
            prop_assert!((q.points[k] + q.points[b - 1 - k]).abs() < 1e-8);
        }
        // Centroid condition: every point is the conditional mean of its cell.
        let mut edges = vec![f64::NEG_INFINITY];
        edges.extend(q.points.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        edges.push(f64::INFINITY);
        for k in 0..b {
            let mass = normal::cdf(edges[k + 1]) - normal::cdf(edges[k]);
            let centroid = (normal::pdf(edges[k]) - normal::pdf(edges[k + 1])) / mass;
            prop_assert!((centroid - q.points[k]).abs() < 1e-6, "b={} k={}", b, k);
        }
        let (masses, d) = cell_masses_and_distortion(&q.points);
        prop_assert!((d - q.distortion).abs() < 1e-10);
        prop_assert!(masses.iter().zip(&q.probs).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn random_trees_are_consistent(depth in 1usize..12, n in 1usize..60, seed in 0u64..1000) {
        let plan = random_branching_plan(depth, n, seed).unwrap();
        let model = ProcessModel::geom_price(depth, 0.0049, 1.0, 1.0).unwrap();
        let t = instantiate_plan(&plan, &model, seed + 1).unwrap();
        t.validate().unwrap();
        prop_assert_eq!(t.num_scenarios(), plan.num_leaves());
        prop_assert_eq!(t.level_counts(), plan.level_counts());
        for id in 0..t.len() {
            let kids = t.children(id);
            if !kids.is_empty() {
                let s: f64 = kids.iter().map(|&c| t.mass(c)).sum();
                prop_assert!((s - t.mass(id)).abs() < 1e-12);
            }
        }
        let total: f64 = enumerate_scenarios(&t).iter().map(|s| s.prob).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gp_ignores_training_order(
        pts in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0, -5.0f64..5.0), 2..12),
        shift in 1usize..11,
        probe in (-3.0f64..3.0, -3.0f64..3.0),
    ) {
        let k = Kernel::new(KernelVariant::RbfPhi, 1.0).unwrap();
        let a = fit_gp(&dataset(&pts), k.clone(), 1e-2, MeanFunction::Zero).unwrap();
        let mut rot = pts.clone();
        rot.rotate_left(shift % pts.len());
        let b = fit_gp(&dataset(&rot), k, 1e-2, MeanFunction::Zero).unwrap();
        let (ma, va) = a.predict(&[probe.0, probe.1]);
        let (mb, vb) = b.predict(&[probe.0, probe.1]);
        prop_assert!((ma[0] - mb[0]).abs() < 1e-8 * (1.0 + ma[0].abs()));
        prop_assert!((va - vb).abs() < 1e-8);
    }

    #[test]
    fn gp_outputs_are_fitted_independently(
        pts in prop::collection::vec((-3.0f64..3.0, -5.0f64..5.0, -5.0f64..5.0), 2..10),
        probe in -3.0f64..3.0,
    ) {
        // A two-output model predicts each coordinate as the one-output model would.
        let k = Kernel::new(KernelVariant::RbfIdentity, 0.3).unwrap();
        let mut joint = StageDataset { level: 1, features: vec![], targets: vec![] };
        let mut c = Vec::new();
        for &(x, y0, y1) in &pts {
            joint.push(vec![x], vec![y0, y1], &mut c);
        }
        let mj = fit_gp(&joint, k.clone(), 1e-3, MeanFunction::Zero).unwrap();
        for out in 0..2 {
            let mut single = StageDataset { level: 1, features: vec![], targets: vec![] };
            let mut c = Vec::new();
            for &(x, y0, y1) in &pts {
                single.push(vec![x], vec![if out == 0 { y0 } else { y1 }], &mut c);
            }
            let ms = fit_gp(&single, k.clone(), 1e-3, MeanFunction::Zero).unwrap();
            let a = mj.predict_mean(&[probe])[out];
            let b = ms.predict_mean(&[probe])[0];
            prop_assert!((a - b).abs() < 1e-8 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn heuristic_is_feasible(
        target in prop::collection::vec(-2.0f64..6.0, 3),
        available in prop::collection::vec(0.0f64..10.0, 4),
        a in prop::collection::vec(prop::collection::vec(prop_oneof![Just(0.0), 0.5f64..3.0], 3), 4),
        order in Just(vec![0usize, 1, 2]).prop_shuffle(),
    ) {
        let q = restore_heuristic(&target, &available, &a, &order);
        for j in 0..3 {
            prop_assert!(q[j] >= 0.0 && q[j] <= target[j].max(0.0) + 1e-12);
        }
        for i in 0..4 {
            let used: f64 = (0..3).map(|j| a[i][j] * q[j]).sum();
            prop_assert!(used <= available[i] + 1e-9);
        }
        let x = heuristic_assembly_decision(&target, &available, &a, &order);
        prop_assert_eq!(x.len(), 3 + 12);
    }

    #[test]
    fn swing_restoration_is_monotone_in_budget(
        eta in 1.0f64..5.0,
        extra in 0.0f64..3.0,
        used in prop::collection::vec(0.0f64..1.0, 3),
        target in -1.0f64..2.0,
    ) {
        // Decisions are taken at level 4 after three earlier exercises.
        let history = vec![0.0, 0.1, -0.05, 0.2, 0.15];
        let mut past = vec![vec![]];
        past.extend(used.iter().map(|&u| vec![u]));
        let spent: f64 = used.iter().sum();
        prop_assume!(spent <= eta);
        let small = swing_problem(0.0, eta, 8).unwrap();
        let large = swing_problem(0.0, eta + extra, 8).unwrap();
        let a = restore_projection(&small, &history, &past, &[target], 1.0).unwrap();
        let b = restore_projection(&large, &history, &past, &[target], 1.0).unwrap();
        prop_assert!(a[0] <= b[0] + 1e-9);
        prop_assert!(a[0] >= -1e-9 && a[0] <= 1.0 + 1e-9 && a[0] <= eta - spent + 1e-9);
    }

    #[test]
    fn projection_is_idempotent(
        n in 2usize..8,
        seed in prop::collection::vec(-2.0f64..4.0, 8),
        scale in prop::collection::vec(0.1f64..3.0, 8),
        cap in 0.5f64..4.0,
    ) {
        let mut poly = Polyhedron::boxed(vec![0.0; n], vec![2.0; n]);
        poly.add_row((0..n).map(|j| (j, 1.0)), f64::NEG_INFINITY, cap);
        let r = project_scaled(&seed[..n], &scale[..n], &poly, &ProjectionOptions::default());
        prop_assert_eq!(r.status, Status::Optimal);
        let again = project_scaled(&r.x, &scale[..n], &poly, &ProjectionOptions::default());
        for j in 0..n {
            prop_assert!((r.x[j] - again.x[j]).abs() < 1e-9);
        }
        prop_assert!(r.x.iter().sum::<f64>() <= cap + 1e-9);
    }

    #[test]
    fn bound_is_monotone_in_alpha(
        values in prop::collection::vec(-10.0f64..10.0, 2..50),
        a in 0.001f64..0.5,
        b in 0.001f64..0.5,
    ) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let (m1, s1, u1) = confidence_bound(&values, lo).unwrap();
        let (m2, s2, u2) = confidence_bound(&values, hi).unwrap();
        prop_assert_eq!(m1, m2);
        prop_assert_eq!(s1, s2);
        prop_assert!(u1 >= u2 - 1e-12);
        prop_assert!(u2 >= m2 - 1e-12);
    }

    #[test]
    fn simplex_matches_vertex_enumeration(
        c in (-3.0f64..3.0, -3.0f64..3.0),
        rows in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0, 0.5f64..4.0), 0..5),
    ) {
        let mut lp = LinearProgram::new();
        lp.add_var(c.0, -5.0, 5.0);
        lp.add_var(c.1, -5.0, 5.0);
        let mut lines = vec![(1.0, 0.0, 5.0), (-1.0, 0.0, 5.0), (0.0, 1.0, 5.0), (0.0, -1.0, 5.0)];
        for &(a, b, r) in &rows {
            lp.add_row([(0, a), (1, b)], f64::NEG_INFINITY, r);
            lines.push((a, b, r));
        }
        // The origin is always feasible, so the box keeps the program bounded.
        let oracle = vertex_enumeration(&lines, c).unwrap();
        let r = solve_lp(&lp);
        prop_assert_eq!(r.status, Status::Optimal);
        prop_assert!((r.objective - oracle).abs() < 1e-7, "simplex {} vs vertices {}", r.objective, oracle);
        prop_assert!(lp.max_violation(&r.x) < 1e-9);
    }
}

#[test]
fn two_stage_is_no_better_than_the_tree() {
    let p = assembly_problem();
    for b in [2, 3, 4] {
        let q = quantize_std_normal(b, DEFAULT_QUANTIZER_TOL).unwrap();
        let t = build_uniform_tree(&p.process, &q, DEFAULT_SCENARIO_CAP).unwrap();
        let multi = build_tree_program(&p, &t).unwrap().solve();
        let sample: Vec<(Vec<f64>, f64)> = enumerate_scenarios(&t).into_iter().map(|s| (s.xi, s.prob)).collect();
        let two = two_stage_assembly(&p, &sample).unwrap().solve();
        assert!(two.objective >= multi.objective - 1e-6, "b={b}: {} < {}", two.objective, multi.objective);
    }
}

#[test]
fn duplicated_scenarios_leave_the_value_unchanged() {
    let p = assembly_problem();
    let q = quantize_std_normal(3, DEFAULT_QUANTIZER_TOL).unwrap();
    let t = build_uniform_tree(&p.process, &q, DEFAULT_SCENARIO_CAP).unwrap();
    let sample: Vec<(Vec<f64>, f64)> = enumerate_scenarios(&t).into_iter().map(|s| (s.xi, s.prob)).collect();
    let doubled: Vec<(Vec<f64>, f64)> = sample.iter().flat_map(|(x, w)| [(x.clone(), 0.5 * w), (x.clone(), 0.5 * w)]).collect();
    let a = two_stage_assembly(&p, &sample).unwrap().solve();
    let b = two_stage_assembly(&p, &doubled).unwrap().solve();
    assert!((a.objective - b.objective).abs() < 1e-6 * a.objective.abs());
}

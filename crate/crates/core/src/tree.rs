//! Scenario trees: uniform trees from quantizers, random branching
//! structures, and scenario enumeration.
//!
//! Nodes are stored in breadth-first order, so node ids increase with depth
//! and every parent id is smaller than its children's.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::process::{conditional_model, ProcessModel, Quantizer};
use crate::rng;

pub const DEFAULT_SCENARIO_CAP: u64 = 10_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    pub parent: Option<usize>,
    /// Zero-based level (root is level 0).
    pub level: usize,
    /// Noise value observed at this node.
    pub xi: f64,
    /// Transition probability from the parent (1 at the root).
    pub prob: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TreeMeta {
    pub generator: String,
    pub seed: Option<u64>,
    pub branching: Option<usize>,
    pub target_scenarios: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioTree {
    levels: usize,
    nodes: Vec<Node>,
    children: Vec<Vec<usize>>,
    /// Unconditional probability of reaching each node.
    mass: Vec<f64>,
    pub meta: TreeMeta,
}

/// One root-to-leaf path.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub xi: Vec<f64>,
    pub prob: f64,
    pub nodes: Vec<usize>,
}

impl ScenarioTree {
    /// Build from a node list in breadth-first order.
    pub fn from_nodes(levels: usize, nodes: Vec<Node>, meta: TreeMeta) -> Result<Self> {
        let mut children = vec![Vec::new(); nodes.len()];
        let mut mass = vec![0.0; nodes.len()];
        for (i, n) in nodes.iter().enumerate() {
            if n.id != i {
                return Err(Error::InvalidTree(format!("node {i} carries id {}", n.id)));
            }
            match n.parent {
                None => {
                    if i != 0 {
                        return Err(Error::InvalidTree(format!("node {i} has no parent")));
                    }
                    mass[i] = n.prob;
                }
                Some(p) => {
                    if p >= i {
                        return Err(Error::InvalidTree(format!(
                            "node {i} has parent {p} that is not earlier in breadth-first order"
                        )));
                    }
                    children[p].push(i);
                    mass[i] = mass[p] * n.prob;
                }
            }
        }
        let tree = ScenarioTree {
            levels,
            nodes,
            children,
            mass,
            meta,
        };
        tree.validate()?;
        Ok(tree)
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &Node {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn children(&self, id: usize) -> &[usize] {
        &self.children[id]
    }

    pub fn is_leaf(&self, id: usize) -> bool {
        self.children[id].is_empty()
    }

    /// Probability of the set of scenarios passing through `id`.
    pub fn mass(&self, id: usize) -> f64 {
        self.mass[id]
    }

    pub fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(move |&i| self.children[i].is_empty())
    }

    pub fn num_scenarios(&self) -> usize {
        self.leaves().count()
    }

    /// Node counts per level.
    pub fn level_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.levels];
        for n in &self.nodes {
            counts[n.level] += 1;
        }
        counts
    }

    /// Node ids from the root down to `id`.
    pub fn path_to(&self, id: usize) -> Vec<usize> {
        let mut path = vec![id];
        let mut cur = id;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Noise history `ξ_[t]` observed at node `id`.
    pub fn history(&self, id: usize) -> Vec<f64> {
        self.path_to(id).iter().map(|&n| self.nodes[n].xi).collect()
    }

    /// Check the structural invariants.
    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidTree("empty tree".into()));
        }
        let root = &self.nodes[0];
        if root.parent.is_some() || root.level != 0 {
            return Err(Error::InvalidTree("node 0 must be the level-0 root".into()));
        }
        for n in &self.nodes[1..] {
            let p = n.parent.ok_or_else(|| Error::InvalidTree(format!("second root {}", n.id)))?;
            if self.nodes[p].level + 1 != n.level {
                return Err(Error::InvalidTree(format!(
                    "node {} at level {} has parent at level {}",
                    n.id, n.level, self.nodes[p].level
                )));
            }
            if !(n.prob >= 0.0 && n.prob <= 1.0) {
                return Err(Error::InvalidTree(format!("node {} has probability {}", n.id, n.prob)));
            }
        }
        for (i, ch) in self.children.iter().enumerate() {
            if ch.is_empty() {
                if self.nodes[i].level + 1 != self.levels {
                    return Err(Error::InvalidTree(format!(
                        "leaf {i} at level {} but the tree has {} levels",
                        self.nodes[i].level, self.levels
                    )));
                }
            } else {
                let s: f64 = ch.iter().map(|&c| self.nodes[c].prob).sum();
                if (s - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidTree(format!(
                        "children of node {i} have total probability {s}"
                    )));
                }
            }
        }
        let total: f64 = self.leaves().map(|l| self.mass[l]).sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidTree(format!("scenario probabilities sum to {total}")));
        }
        Ok(())
    }

    /// Prepend a deterministic chain so that the tree starts from an earlier
    /// known history. `prefix` lists the noise values of the new ancestors,
    /// root first; the current root keeps its own value.
    pub fn with_prefix(&self, prefix: &[f64]) -> ScenarioTree {
        let k = prefix.len();
        let mut nodes = Vec::with_capacity(self.nodes.len() + k);
        for (i, &xi) in prefix.iter().enumerate() {
            nodes.push(Node {
                id: i,
                parent: i.checked_sub(1),
                level: i,
                xi,
                prob: 1.0,
            });
        }
        for n in &self.nodes {
            nodes.push(Node {
                id: n.id + k,
                parent: match n.parent {
                    Some(p) => Some(p + k),
                    None => k.checked_sub(1),
                },
                level: n.level + k,
                xi: n.xi,
                prob: n.prob,
            });
        }
        ScenarioTree::from_nodes(self.levels + k, nodes, self.meta.clone())
            .expect("prefixing preserves tree invariants")
    }
}

/// Uniform tree with `b` children per internal node; children values and
/// probabilities come from the `b`-point quantizer of the innovations.
pub fn build_uniform_tree(model: &ProcessModel, quantizer: &Quantizer, cap: u64) -> Result<ScenarioTree> {
    let b = quantizer.b;
    if b == 0 || quantizer.points.len() != b {
        return Err(invalid("quantizer must have b >= 1 points"));
    }
    let k = (b as u128).checked_pow(model.steps as u32).unwrap_or(u128::MAX);
    if k > cap as u128 {
        return Err(Error::TreeTooLarge { requested: k, cap });
    }
    let mut nodes = vec![Node {
        id: 0,
        parent: None,
        level: 0,
        xi: model.root,
        prob: 1.0,
    }];
    let mut frontier = vec![0usize];
    for level in 1..model.levels() {
        let mut next = Vec::with_capacity(frontier.len() * b);
        for &p in &frontier {
            let parent_xi = nodes[p].xi;
            for (z, pz) in quantizer.points.iter().zip(&quantizer.probs) {
                let id = nodes.len();
                nodes.push(Node {
                    id,
                    parent: Some(p),
                    level,
                    xi: model.advance(parent_xi, *z),
                    prob: *pz,
                });
                next.push(id);
            }
        }
        frontier = next;
    }
    ScenarioTree::from_nodes(
        model.levels(),
        nodes,
        TreeMeta {
            generator: "uniform".into(),
            seed: None,
            branching: Some(b),
            target_scenarios: None,
        },
    )
}

/// Uniform tree over the stages that remain after an observed history, with
/// the history kept as a deterministic chain above the branching part.
pub fn build_conditional_tree(
    model: &ProcessModel,
    history: &[f64],
    quantizer: &Quantizer,
    cap: u64,
) -> Result<ScenarioTree> {
    if history.len() == model.levels() {
        // Nothing left to branch on: the history itself is the only scenario.
        let nodes = history
            .iter()
            .enumerate()
            .map(|(i, &xi)| Node {
                id: i,
                parent: i.checked_sub(1),
                level: i,
                xi,
                prob: 1.0,
            })
            .collect();
        return ScenarioTree::from_nodes(model.levels(), nodes, TreeMeta::default());
    }
    let rest = conditional_model(model, history)?;
    let sub = build_uniform_tree(&rest, quantizer, cap)?;
    Ok(sub.with_prefix(&history[..history.len() - 1]))
}

/// Pure branching structure: for each depth, the child count of every node at
/// that depth in breadth-first order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchingPlan {
    pub child_counts: Vec<Vec<u32>>,
}

impl BranchingPlan {
    /// Number of transitions (tree levels minus one).
    pub fn depth(&self) -> usize {
        self.child_counts.len()
    }

    pub fn uniform(depth: usize, b: u32) -> Self {
        let mut child_counts = Vec::with_capacity(depth);
        let mut width = 1usize;
        for _ in 0..depth {
            child_counts.push(vec![b; width]);
            width *= b as usize;
        }
        BranchingPlan { child_counts }
    }

    pub fn num_leaves(&self) -> usize {
        match self.child_counts.last() {
            None => 1,
            Some(last) => last.iter().map(|&c| c as usize).sum(),
        }
    }

    pub fn level_counts(&self) -> Vec<usize> {
        let mut counts = vec![1usize];
        for level in &self.child_counts {
            counts.push(level.iter().map(|&c| c as usize).sum());
        }
        counts
    }
}

/// Random branching structure with about `n` leaves after `depth`
/// transitions: at each depth every node independently gets two children
/// with probability `r_t = (n − 1) / (depth · ν_t)`, where `ν_t` is the
/// realized node count at that depth, and one child otherwise.
pub fn random_branching_plan(depth: usize, n: usize, seed: u64) -> Result<BranchingPlan> {
    if n == 0 {
        return Err(invalid("target scenario count must be at least 1"));
    }
    if depth == 0 {
        return Err(invalid("depth must be at least 1"));
    }
    let mut rng = rng::stream(seed, 0);
    let mut width = 1usize;
    let mut child_counts = Vec::with_capacity(depth);
    for _ in 0..depth {
        let r = (n - 1) as f64 / (depth as f64 * width as f64);
        let counts: Vec<u32> = (0..width)
            .map(|_| {
                let z: f64 = rng.random();
                if z <= r {
                    2
                } else {
                    1
                }
            })
            .collect();
        width = counts.iter().map(|&c| c as usize).sum();
        child_counts.push(counts);
    }
    Ok(BranchingPlan { child_counts })
}

/// Attach Monte Carlo noise values to a branching structure. Children are
/// sampled i.i.d. from the conditional law given their parent and receive
/// equal arc probabilities.
pub fn instantiate_plan(plan: &BranchingPlan, model: &ProcessModel, seed: u64) -> Result<ScenarioTree> {
    if plan.depth() + 1 != model.levels() {
        return Err(Error::DimensionMismatch(format!(
            "plan has {} transitions but the process has {} levels",
            plan.depth(),
            model.levels()
        )));
    }
    let mut rng = rng::stream(seed, 0);
    let mut nodes = vec![Node {
        id: 0,
        parent: None,
        level: 0,
        xi: model.root,
        prob: 1.0,
    }];
    let mut frontier = vec![0usize];
    for (level, counts) in plan.child_counts.iter().enumerate() {
        if counts.len() != frontier.len() {
            return Err(invalid(format!(
                "plan depth {level} lists {} nodes but the tree has {}",
                counts.len(),
                frontier.len()
            )));
        }
        let mut next = Vec::new();
        for (&p, &c) in frontier.iter().zip(counts) {
            if c == 0 {
                return Err(invalid("every node needs at least one child"));
            }
            let parent_xi = nodes[p].xi;
            for _ in 0..c {
                let eps: f64 = rng.sample(StandardNormal);
                let id = nodes.len();
                nodes.push(Node {
                    id,
                    parent: Some(p),
                    level: level + 1,
                    xi: model.advance(parent_xi, eps),
                    prob: 1.0 / c as f64,
                });
                next.push(id);
            }
        }
        frontier = next;
    }
    ScenarioTree::from_nodes(
        model.levels(),
        nodes,
        TreeMeta {
            generator: "random".into(),
            seed: Some(seed),
            branching: None,
            target_scenarios: None,
        },
    )
}

/// All root-to-leaf scenarios with their probabilities.
pub fn enumerate_scenarios(tree: &ScenarioTree) -> Vec<Scenario> {
    tree.leaves()
        .map(|leaf| {
            let nodes = tree.path_to(leaf);
            Scenario {
                xi: nodes.iter().map(|&n| tree.node(n).xi).collect(),
                prob: tree.mass(leaf),
                nodes,
            }
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct TreeJsonNode {
    id: usize,
    parent: Option<usize>,
    stage: usize,
    xi: f64,
    prob: f64,
}

#[derive(Serialize, Deserialize)]
struct TreeJson {
    #[serde(rename = "T")]
    levels: usize,
    nodes: Vec<TreeJsonNode>,
    meta: TreeMeta,
}

impl Serialize for ScenarioTree {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        TreeJson {
            levels: self.levels,
            nodes: self
                .nodes
                .iter()
                .map(|n| TreeJsonNode {
                    id: n.id,
                    parent: n.parent,
                    stage: n.level + 1,
                    xi: n.xi,
                    prob: n.prob,
                })
                .collect(),
            meta: self.meta.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ScenarioTree {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let j = TreeJson::deserialize(d)?;
        let nodes = j
            .nodes
            .into_iter()
            .map(|n| Node {
                id: n.id,
                parent: n.parent,
                level: n.stage.saturating_sub(1),
                xi: n.xi,
                prob: n.prob,
            })
            .collect();
        ScenarioTree::from_nodes(j.levels, nodes, j.meta).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::quantize_std_normal;

    fn iid(t: usize) -> ProcessModel {
        ProcessModel::iid_std_normal(t).unwrap()
    }

    #[test]
    fn uniform_tree_sizes() {
        let q10 = quantize_std_normal(10, 1e-10).unwrap();
        let t = build_uniform_tree(&iid(4), &q10, DEFAULT_SCENARIO_CAP).unwrap();
        assert_eq!(t.num_scenarios(), 1000);
        assert_eq!(t.level_counts(), vec![1, 10, 100, 1000]);

        let q1 = quantize_std_normal(1, 1e-10).unwrap();
        let chain = build_uniform_tree(&iid(5), &q1, DEFAULT_SCENARIO_CAP).unwrap();
        let sc = enumerate_scenarios(&chain);
        assert_eq!(sc.len(), 1);
        assert!((sc[0].prob - 1.0).abs() < 1e-15);
    }

    #[test]
    fn binary_iid_tree_scenarios() {
        let q2 = quantize_std_normal(2, 1e-10).unwrap();
        let t = build_uniform_tree(&iid(3), &q2, DEFAULT_SCENARIO_CAP).unwrap();
        let sc = enumerate_scenarios(&t);
        assert_eq!(sc.len(), 4);
        let c = (2.0 / std::f64::consts::PI).sqrt();
        for s in &sc {
            assert!((s.prob - 0.25).abs() < 1e-15);
            assert_eq!(s.xi[0], 1.0);
            for v in &s.xi[1..] {
                assert!((v.abs() - c).abs() < 1e-9);
            }
        }
        let total: f64 = sc.iter().map(|s| s.prob).sum();
        assert!((total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn scenario_cap_is_enforced() {
        let q10 = quantize_std_normal(10, 1e-10).unwrap();
        let err = build_uniform_tree(&iid(9), &q10, DEFAULT_SCENARIO_CAP).unwrap_err();
        assert!(matches!(err, Error::TreeTooLarge { .. }));
    }

    #[test]
    fn conditional_tree_keeps_history() {
        let q3 = quantize_std_normal(3, 1e-10).unwrap();
        let t = build_conditional_tree(&iid(4), &[1.0, 0.4], &q3, DEFAULT_SCENARIO_CAP).unwrap();
        assert_eq!(t.level_counts(), vec![1, 1, 3, 9]);
        assert_eq!(t.node(1).xi, 0.4);
        let full = build_conditional_tree(&iid(4), &[1.0, 0.4, 0.1, -0.2], &q3, DEFAULT_SCENARIO_CAP).unwrap();
        assert_eq!(full.num_scenarios(), 1);
    }

    #[test]
    fn plan_with_one_scenario_is_a_chain() {
        for depth in [1, 5, 52] {
            let p = random_branching_plan(depth, 1, 3).unwrap();
            assert_eq!(p.num_leaves(), 1);
        }
    }

    #[test]
    fn plan_two_levels_three_scenarios() {
        // Root always branches (r_0 = 1), then each of the two nodes branches
        // with probability 1/2: leaves in {2, 3, 4} with mean 3.
        let mut total = 0usize;
        let draws = 20_000;
        for s in 0..draws {
            let p = random_branching_plan(2, 3, s).unwrap();
            assert_eq!(p.child_counts[0], vec![2]);
            let l = p.num_leaves();
            assert!((2..=4).contains(&l));
            total += l;
        }
        let mean = total as f64 / draws as f64;
        // sd of the leaf count is 1/sqrt(2)
        assert!((mean - 3.0).abs() < 4.0 * (0.5f64 / draws as f64).sqrt(), "{mean}");
    }

    #[test]
    fn plan_mean_leaf_count_tracks_target() {
        for &(depth, n) in &[(10usize, 10usize), (52, 52), (52, 260)] {
            let draws = 10_000;
            let total: usize = (0..draws)
                .map(|s| random_branching_plan(depth, n, 1000 + s).unwrap().num_leaves())
                .sum();
            let mean = total as f64 / draws as f64;
            assert!((mean - n as f64).abs() <= 0.1 * n as f64, "T={depth} N={n} mean={mean}");
            if (depth, n) == (52, 52) {
                assert!((48.0..=56.0).contains(&mean), "mean={mean}");
            }
        }
    }

    #[test]
    fn instantiated_trees_are_valid_and_reproducible() {
        let model = ProcessModel::geom_price(52, 0.0049, 1.0, 1.0).unwrap();
        for seed in 0..20 {
            let plan = random_branching_plan(52, 260, seed).unwrap();
            let t = instantiate_plan(&plan, &model, seed + 99).unwrap();
            t.validate().unwrap();
            assert_eq!(t.num_scenarios(), plan.num_leaves());
            let total: f64 = t.leaves().map(|l| t.mass(l)).sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert_eq!(t, instantiate_plan(&plan, &model, seed + 99).unwrap());
        }
        let chain = instantiate_plan(&random_branching_plan(52, 1, 0).unwrap(), &model, 1).unwrap();
        assert_eq!(enumerate_scenarios(&chain)[0].prob, 1.0);
    }

    #[test]
    fn plan_depth_must_match_process() {
        let model = ProcessModel::geom_price(52, 0.0049, 1.0, 1.0).unwrap();
        let plan = random_branching_plan(10, 5, 0).unwrap();
        assert!(instantiate_plan(&plan, &model, 0).is_err());
    }

    #[test]
    fn json_round_trip() {
        let q2 = quantize_std_normal(2, 1e-10).unwrap();
        let t = build_uniform_tree(&iid(3), &q2, DEFAULT_SCENARIO_CAP).unwrap();
        let s = serde_json::to_string(&t).unwrap();
        let back: ScenarioTree = serde_json::from_str(&s).unwrap();
        assert_eq!(t, back);
    }
}

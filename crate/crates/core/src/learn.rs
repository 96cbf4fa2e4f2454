//! State-decision datasets extracted from tree solutions and Gaussian-process
//! regression of stage decisions.
//!
//! Every decision coordinate is regressed independently with the same kernel,
//! so one Cholesky factor of the Gram matrix serves all coordinates of a stage.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::normal;
use crate::problems::ProblemSpec;
use crate::process::ProcessKind;
use crate::tree::ScenarioTree;

/// Default observation-noise variance of the GP models.
pub const DEFAULT_NOISE_VARIANCE: f64 = 1e-8;

/// Bandwidths tried during model selection.
pub const THETA_GRID: [f64; 5] = [0.1, 0.3, 1.0, 3.0, 10.0];

/// Map from an information state to regression inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "map", rename_all = "snake_case")]
pub enum FeatureMap {
    /// The observed noise after the root, `(ξ_1, …, ξ_t)`.
    History,
    /// Compact swing state `(z_t, slack_t, t/T)`. `z_t = log(s_t/κ)/(σ√t)` is
    /// the standardized log-price with `s_t = ξ_t + κ`, and
    /// `slack_t = (remaining budget − remaining dates)/η` where the budget
    /// counts the policy's own past decisions.
    SwingState { eta: f64, horizon: usize, kappa: f64, sigma: f64 },
}

impl FeatureMap {
    /// The natural feature map of a problem.
    pub fn for_problem(problem: &ProblemSpec) -> FeatureMap {
        match (problem.swing_data(), &problem.process.kind) {
            (Some(s), ProcessKind::GeomPrice { sigma2, kappa }) => FeatureMap::SwingState {
                eta: s.eta,
                horizon: s.horizon,
                kappa: *kappa,
                sigma: sigma2.sqrt(),
            },
            _ => FeatureMap::History,
        }
    }

    /// Features of the state at level `history.len() − 1`; `past` holds the
    /// decisions of the earlier levels.
    pub fn features(&self, history: &[f64], past: &[Vec<f64>]) -> Vec<f64> {
        let level = history.len() - 1;
        match self {
            FeatureMap::History => history[1..].to_vec(),
            FeatureMap::SwingState { eta, horizon, kappa, sigma } => {
                let used: f64 = past.iter().flatten().sum();
                let t = level.max(1) as f64;
                let z = ((history[level] + kappa) / kappa).ln() / (sigma * t.sqrt());
                let slack = (eta - used - (*horizon as f64 - t + 1.0)) / eta;
                vec![z, slack, t / *horizon as f64]
            }
        }
    }
}

/// Deduplicated state-decision pairs of one level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageDataset {
    pub level: usize,
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl StageDataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Add a pair; a pair whose features coincide with an existing row within
    /// `1e-12` is merged into it by averaging the targets.
    pub fn push(&mut self, features: Vec<f64>, target: Vec<f64>, counts: &mut Vec<usize>) {
        let dup = self
            .features
            .iter()
            .position(|f| f.iter().zip(&features).all(|(a, b)| (a - b).abs() <= 1e-12));
        match dup {
            Some(k) => {
                counts[k] += 1;
                let w = 1.0 / counts[k] as f64;
                for (t, v) in self.targets[k].iter_mut().zip(&target) {
                    *t += w * (v - *t);
                }
            }
            None => {
                self.features.push(features);
                self.targets.push(target);
                counts.push(1);
            }
        }
    }
}

/// One dataset per level from the node decisions of a solved tree program.
/// Node identity already removes the duplicates of shared tree nodes.
pub fn extract_datasets(
    problem: &ProblemSpec,
    tree: &ScenarioTree,
    decisions: &[Vec<f64>],
    map: &FeatureMap,
) -> Result<Vec<StageDataset>> {
    if decisions.len() != tree.len() || tree.levels() != problem.levels() {
        return Err(Error::DimensionMismatch("decisions do not match the tree".into()));
    }
    let mut sets: Vec<StageDataset> = (0..tree.levels())
        .map(|level| StageDataset {
            level,
            features: Vec::new(),
            targets: Vec::new(),
        })
        .collect();
    let mut counts = vec![Vec::new(); tree.levels()];
    for j in 0..tree.len() {
        let path = tree.path_to(j);
        let level = path.len() - 1;
        let history = tree.history(j);
        let past: Vec<Vec<f64>> = path[..level].iter().map(|&a| decisions[a].clone()).collect();
        let f = map.features(&history, &past);
        sets[level].push(f, decisions[j].clone(), &mut counts[level]);
    }
    Ok(sets)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelVariant {
    /// Squared-exponential kernel on the raw features.
    RbfIdentity,
    /// Squared-exponential kernel on `Φ` applied to each feature.
    RbfPhi,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub variant: KernelVariant,
    pub theta: f64,
}

impl Kernel {
    pub fn new(variant: KernelVariant, theta: f64) -> Result<Self> {
        if !(theta > 0.0 && theta.is_finite()) {
            return Err(invalid("kernel bandwidth must be positive"));
        }
        Ok(Kernel { variant, theta })
    }

    /// The coordinatewise input transform `g`.
    pub fn transform(&self, u: &[f64]) -> Vec<f64> {
        match self.variant {
            KernelVariant::RbfIdentity => u.to_vec(),
            KernelVariant::RbfPhi => u.iter().map(|&x| normal::cdf(x)).collect(),
        }
    }

    /// Kernel value on already transformed inputs.
    fn eval_transformed(&self, u: &[f64], v: &[f64]) -> f64 {
        let d2: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        (-d2 / (2.0 * self.theta * self.theta)).exp()
    }

    pub fn eval(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        if u.len() != v.len() {
            return Err(Error::DimensionMismatch(format!(
                "kernel inputs of length {} and {}",
                u.len(),
                v.len()
            )));
        }
        Ok(self.eval_transformed(&self.transform(u), &self.transform(v)))
    }

    /// Gram matrix of a set of inputs.
    pub fn gram(&self, inputs: &[Vec<f64>]) -> DMatrix<f64> {
        let g: Vec<Vec<f64>> = inputs.iter().map(|u| self.transform(u)).collect();
        let n = g.len();
        DMatrix::from_fn(n, n, |i, j| self.eval_transformed(&g[i], &g[j]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mean", content = "values", rename_all = "snake_case")]
pub enum MeanFunction {
    Zero,
    /// A fixed decision, typically the stage decision of a deterministic plan.
    Plan(Vec<f64>),
}

impl MeanFunction {
    fn value(&self, i: usize) -> f64 {
        match self {
            MeanFunction::Zero => 0.0,
            MeanFunction::Plan(v) => v[i],
        }
    }
}

/// GP model of the decision of one level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpStageModel {
    pub level: usize,
    pub kernel: Kernel,
    pub noise: f64,
    pub mean: MeanFunction,
    /// Training inputs after the kernel transform, one row each.
    pub inputs: Vec<Vec<f64>>,
    /// Lower Cholesky factor of `C + σ_w² I`, row-major. May be dropped for
    /// storage and rebuilt with [`GpStageModel::refactor`].
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub factor: Vec<f64>,
    /// Weights: row `k` holds the weights of training point `k` for every
    /// decision coordinate.
    pub alpha: Vec<f64>,
    pub dim: usize,
}

pub fn fit_gp(data: &StageDataset, kernel: Kernel, noise: f64, mean: MeanFunction) -> Result<GpStageModel> {
    if data.is_empty() {
        return Err(invalid("cannot fit a model to an empty dataset"));
    }
    if !(noise > 0.0) {
        return Err(invalid("noise variance must be positive"));
    }
    let n = data.len();
    let dim = data.targets[0].len();
    if let MeanFunction::Plan(p) = &mean {
        if p.len() != dim {
            return Err(Error::DimensionMismatch("mean plan length".into()));
        }
    }
    let inputs: Vec<Vec<f64>> = data.features.iter().map(|u| kernel.transform(u)).collect();
    let chol = factorize(&kernel, &inputs, noise)?;
    let rhs = DMatrix::from_fn(n, dim, |k, i| data.targets[k][i] - mean.value(i));
    let alpha = chol.solve(&rhs);
    let l = chol.l();
    Ok(GpStageModel {
        level: data.level,
        kernel,
        noise,
        mean,
        inputs,
        factor: (0..n * n).map(|k| l[(k / n, k % n)]).collect(),
        alpha: (0..n * dim).map(|k| alpha[(k / dim, k % dim)]).collect(),
        dim,
    })
}

fn factorize(kernel: &Kernel, inputs: &[Vec<f64>], noise: f64) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let n = inputs.len();
    let c = DMatrix::from_fn(n, n, |i, j| {
        kernel.eval_transformed(&inputs[i], &inputs[j]) + if i == j { noise } else { 0.0 }
    });
    nalgebra::Cholesky::new(c).ok_or_else(|| {
        Error::Factorization(format!("Gram matrix of {n} points is not positive definite at noise {noise:e}"))
    })
}

impl GpStageModel {
    /// Rebuild a dropped Cholesky factor from the stored inputs.
    pub fn refactor(&mut self) -> Result<()> {
        let n = self.len();
        if self.factor.len() != n * n {
            let l = factorize(&self.kernel, &self.inputs, self.noise)?.l();
            self.factor = (0..n * n).map(|k| l[(k / n, k % n)]).collect();
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn cross(&self, u: &[f64]) -> Vec<f64> {
        let g = self.kernel.transform(u);
        self.inputs.iter().map(|v| self.kernel.eval_transformed(&g, v)).collect()
    }

    fn mean_from_cross(&self, k: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = (0..self.dim).map(|i| self.mean.value(i)).collect();
        for (kk, row) in k.iter().zip(self.alpha.chunks_exact(self.dim.max(1))) {
            if *kk != 0.0 {
                for (o, a) in out.iter_mut().zip(row) {
                    *o += kk * a;
                }
            }
        }
        out
    }

    /// Predictive mean only.
    pub fn predict_mean(&self, u: &[f64]) -> Vec<f64> {
        self.mean_from_cross(&self.cross(u))
    }

    /// Predictive mean and the predictive variance shared by all coordinates,
    /// floored at zero. Needs the factor (see [`GpStageModel::refactor`]).
    pub fn predict(&self, u: &[f64]) -> (Vec<f64>, f64) {
        let k = self.cross(u);
        let mean = self.mean_from_cross(&k);
        let n = self.len();
        assert_eq!(self.factor.len(), n * n, "factor dropped; call refactor first");
        // Forward substitution L v = k.
        let mut v = k;
        for i in 0..n {
            let row = &self.factor[i * n..i * n + i];
            let s: f64 = row.iter().zip(&v[..i]).map(|(a, b)| a * b).sum();
            v[i] = (v[i] - s) / self.factor[i * n + i];
        }
        let var = 1.0 - v.iter().map(|x| x * x).sum::<f64>();
        (mean, var.max(0.0))
    }

    /// Lower factor as a matrix.
    pub fn factor_matrix(&self) -> DMatrix<f64> {
        let n = self.len();
        DMatrix::from_row_slice(n, n, &self.factor)
    }

    /// Weights of coordinate `i`.
    pub fn weights(&self, i: usize) -> DVector<f64> {
        DVector::from_iterator(self.len(), (0..self.len()).map(|k| self.alpha[k * self.dim + i]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data(xs: &[f64], ys: &[f64]) -> StageDataset {
        StageDataset {
            level: 1,
            features: xs.iter().map(|&x| vec![x]).collect(),
            targets: ys.iter().map(|&y| vec![y]).collect(),
        }
    }

    fn rbf(theta: f64) -> Kernel {
        Kernel::new(KernelVariant::RbfIdentity, theta).unwrap()
    }

    #[test]
    fn dropped_factor_is_rebuilt() {
        let mut d = StageDataset { level: 1, features: vec![], targets: vec![] };
        let mut c = Vec::new();
        for k in 0..6 {
            d.push(vec![k as f64 * 0.3, (k as f64).sin()], vec![k as f64], &mut c);
        }
        let m = fit_gp(&d, Kernel::new(KernelVariant::RbfPhi, 0.5).unwrap(), 1e-6, MeanFunction::Zero).unwrap();
        let json = serde_json::to_string(&GpStageModel { factor: vec![], ..m.clone() }).unwrap();
        assert!(!json.contains("factor"));
        let mut back: GpStageModel = serde_json::from_str(&json).unwrap();
        back.refactor().unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn kernel_values() {
        let k = rbf(1.0);
        assert_eq!(k.eval(&[0.3, 2.0], &[0.3, 2.0]).unwrap(), 1.0);
        assert!((k.eval(&[0.0, 0.0], &[1.0, 1.0]).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        let p = Kernel::new(KernelVariant::RbfPhi, 0.5).unwrap();
        let d = 0.5 - normal::cdf(10.0);
        assert!((p.eval(&[0.0], &[10.0]).unwrap() - (-d * d / 0.5).exp()).abs() < 1e-15);
        assert!(k.eval(&[0.0], &[0.0, 1.0]).is_err());
        assert!(Kernel::new(KernelVariant::RbfIdentity, 0.0).is_err());
    }

    #[test]
    fn single_pair_shrinks_by_noise() {
        let m = fit_gp(&data(&[0.4], &[2.0]), rbf(1.0), 0.25, MeanFunction::Zero).unwrap();
        let (mu, _) = m.predict(&[0.4]);
        assert!((mu[0] - 2.0 / 1.25).abs() < 1e-14);
    }

    #[test]
    fn near_interpolation() {
        let d = data(&[-1.0, 0.0, 0.7, 2.0], &[1.0, -0.5, 0.3, 4.0]);
        let m = fit_gp(&d, rbf(1.0), 1e-12, MeanFunction::Zero).unwrap();
        for (x, y) in d.features.iter().zip(&d.targets) {
            let (mu, var) = m.predict(x);
            assert!((mu[0] - y[0]).abs() < 1e-6);
            assert!(var <= 1e-6);
        }
    }

    #[test]
    fn plan_mean_with_zero_residual() {
        let d = data(&[-1.0, 0.5], &[3.0, 3.0]);
        let m = fit_gp(&d, rbf(0.3), 1e-8, MeanFunction::Plan(vec![3.0])).unwrap();
        assert!(m.alpha.iter().all(|a| *a == 0.0));
        assert_eq!(m.predict_mean(&[7.0])[0], 3.0);
    }

    #[test]
    fn prior_recovered_far_away() {
        let m = fit_gp(&data(&[0.0, 1.0], &[1.0, 2.0]), rbf(0.3), 1e-8, MeanFunction::Zero).unwrap();
        let (mu, var) = m.predict(&[100.0]);
        assert!(mu[0].abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_targets_cancel_at_midpoint() {
        let m = fit_gp(&data(&[-1.0, 1.0], &[0.8, -0.8]), rbf(1.0), 1e-8, MeanFunction::Zero).unwrap();
        assert!(m.predict_mean(&[0.0])[0].abs() < 1e-12);
    }

    #[test]
    fn duplicates_are_merged() {
        let mut d = data(&[], &[]);
        let mut c = Vec::new();
        d.push(vec![1.0], vec![2.0], &mut c);
        d.push(vec![1.0], vec![4.0], &mut c);
        d.push(vec![2.0], vec![0.0], &mut c);
        assert_eq!(d.len(), 2);
        assert_eq!(d.targets[0], vec![3.0]);
    }

    #[test]
    fn swing_features() {
        let map = FeatureMap::SwingState {
            eta: 2.0,
            horizon: 4,
            kappa: 1.0,
            sigma: 0.1,
        };
        // Level 2 with price 0.8 and 0.5 of the budget used, 3 dates left.
        let f = map.features(&[0.0, 0.1, -0.2], &[vec![], vec![0.5]]);
        assert!((f[0] - (-1.5778632)).abs() < 1e-6, "{}", f[0]);
        assert!((f[1] - (-0.75)).abs() < 1e-15 && f[2] == 0.5);
        let p = crate::problems::swing_problem(0.0, 6.0, 52).unwrap();
        let FeatureMap::SwingState { eta, horizon, sigma, .. } = FeatureMap::for_problem(&p) else {
            panic!("swing problems use the swing state");
        };
        assert_eq!((eta, horizon), (6.0, 52));
        assert!((sigma - 0.07).abs() < 1e-15);
        assert_eq!(FeatureMap::History.features(&[1.0, 0.3, 0.4], &[]), vec![0.3, 0.4]);
    }

    #[test]
    fn tree_datasets_follow_node_counts() {
        use crate::detequiv::{build_tree_program, node_decisions};
        use crate::problems::assembly_problem;
        use crate::process::quantize_std_normal;
        use crate::tree::{build_uniform_tree, DEFAULT_SCENARIO_CAP};
        let p = assembly_problem();
        let q = quantize_std_normal(3, 1e-10).unwrap();
        let t = build_uniform_tree(&p.process, &q, DEFAULT_SCENARIO_CAP).unwrap();
        let prog = build_tree_program(&p, &t).unwrap();
        let r = prog.solve();
        let nd = node_decisions(&prog, &r.x);
        let sets = extract_datasets(&p, &t, &nd, &FeatureMap::History).unwrap();
        let sizes: Vec<usize> = sets.iter().map(|s| s.len()).collect();
        assert_eq!(sizes, vec![1, 3, 9, 27]);
        assert_eq!(sets[0].targets[0], nd[0]);
    }
}

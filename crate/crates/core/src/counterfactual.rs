//! Learned SCM ensembles and their counterfactual and interventional
//! samplers.
//!
//! Every non-root node carries either an OLS model with Gaussian residuals
//! or a (warped) GP. Roots carry their empirical training values. Sampling
//! goes through the [`Sampler`] trait so that learned ensembles and the
//! ground-truth SCM can be evaluated by the same code.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowWorkspace, DEFAULT_BINS};
use crate::gp::{self, GaussianPosterior};
use crate::linalg::SpdFactor;
use crate::rng;
use crate::scm::{CausalGraph, ClosedFormScm, Factum, Intervention};
use crate::vi::{self, BwgpModel, BwgpModelJson, Scaling, TrainConfig};

pub const DEFAULT_PHI_POOL: usize = 100;

fn normal(r: &mut impl Rng) -> f64 {
    StandardNormal.sample(r)
}

/// Ordinary least squares with an intercept and Gaussian residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearNode {
    pub bias: f64,
    pub weights: Vec<f64>,
    pub noise_sd: f64,
}

impl LinearNode {
    pub fn fit(inputs: &[Vec<f64>], targets: &[f64]) -> Result<Self> {
        let n = inputs.len();
        let p = inputs.first().map_or(0, Vec::len);
        if n != targets.len() || n < p + 2 {
            return Err(Error::invalid(format!("OLS needs more than {} rows, got {n}", p + 1)));
        }
        let design = nalgebra::DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { inputs[i][j - 1] });
        let y = nalgebra::DVector::from_column_slice(targets);
        let beta = SpdFactor::new(design.transpose() * &design)?.solve_vec(&(design.transpose() * &y));
        let resid = &y - &design * &beta;
        let noise_sd = (resid.norm_squared() / (n - p - 1) as f64).sqrt();
        Ok(Self {
            bias: beta[0],
            weights: beta.iter().skip(1).copied().collect(),
            noise_sd,
        })
    }

    pub fn predict(&self, pa: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(pa).map(|(w, x)| w * x).sum::<f64>()
    }
}

/// Model of one node.
#[derive(Debug, Clone)]
pub enum NodeModel {
    /// Root: empirical distribution of its training values.
    Root(Vec<f64>),
    Linear(LinearNode),
    /// Plain GP when the model has no flow.
    Bwgp(Box<BwgpModel>),
}

/// How node models are fitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Linear,
    Gp {
        train: TrainConfig,
    },
    Bwgp {
        #[serde(default = "default_bins")]
        bins: usize,
        bound: f64,
        hidden_dims: usize,
        train: TrainConfig,
        /// Shrink the spline box per node to the standardized range of its
        /// training targets when that is narrower than `bound`.
        #[serde(default)]
        cover_data: bool,
    },
}

fn default_bins() -> usize {
    DEFAULT_BINS
}

/// Largest standardized |target|: the smallest box holding every training point.
fn data_cover(inputs: &[Vec<f64>], target: &[f64]) -> f64 {
    let scaling = Scaling::fit(inputs, target);
    target.iter().map(|&y| scaling.target(y).abs()).fold(1.0, f64::max)
}

/// Standardized-space φ draws and the warped training targets they induce.
#[derive(Debug, Clone)]
struct PhiPool {
    draws: Vec<Vec<f64>>,
    warped: Vec<Vec<f64>>,
}

impl PhiPool {
    fn build(model: &BwgpModel, size: usize, seed: u64) -> Result<Self> {
        let draws = if model.flow().is_some() {
            model.sample_phi(size.max(1), seed)
        } else {
            vec![vec![]]
        };
        let mut ws = None;
        let warped = draws
            .iter()
            .map(|phi| model.warped_targets(phi, &mut ws))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { draws, warped })
    }
}

/// Learned SCM: a graph and one model per node.
#[derive(Debug, Clone)]
pub struct ScmEnsemble {
    graph: CausalGraph,
    nodes: Vec<NodeModel>,
    pools: Vec<Option<PhiPool>>,
    pool_size: usize,
    pool_seed: u64,
}

impl ScmEnsemble {
    /// Builds an ensemble, drawing a pool of `pool_size` φ samples per warped
    /// node from `q` with streams derived from `pool_seed`.
    pub fn new(graph: CausalGraph, nodes: Vec<NodeModel>, pool_size: usize, pool_seed: u64) -> Result<Self> {
        if nodes.len() != graph.len() {
            return Err(Error::Structure(format!(
                "{} node models for a {}-node graph",
                nodes.len(),
                graph.len()
            )));
        }
        for (r, m) in nodes.iter().enumerate() {
            let k = graph.parents(r).len();
            let ok = match m {
                NodeModel::Root(v) => k == 0 && !v.is_empty(),
                NodeModel::Linear(l) => k > 0 && l.weights.len() == k,
                NodeModel::Bwgp(b) => k > 0 && b.input_dim() == k,
            };
            if !ok {
                return Err(Error::Structure(format!(
                    "model of node {} does not match its {k} parents",
                    graph.names()[r]
                )));
            }
        }
        let pools = nodes
            .par_iter()
            .enumerate()
            .map(|(r, m)| match m {
                NodeModel::Bwgp(b) => PhiPool::build(b, pool_size, rng::derive_seed(pool_seed, r as u64)).map(Some),
                _ => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            graph,
            nodes,
            pools,
            pool_size,
            pool_seed,
        })
    }

    /// Fits every node on `rows` (one full observation per row). Nodes are
    /// trained independently with seeds derived from `seed`.
    pub fn fit(graph: &CausalGraph, rows: &[Vec<f64>], spec: &ModelSpec, seed: u64) -> Result<Self> {
        let d = graph.len();
        if rows.len() < 2 || rows.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("ensemble fit needs at least two full rows"));
        }
        let nodes = (0..d)
            .into_par_iter()
            .map(|r| {
                let target: Vec<f64> = rows.iter().map(|x| x[r]).collect();
                let ps = graph.parents(r);
                if ps.is_empty() {
                    return Ok(NodeModel::Root(target));
                }
                let inputs: Vec<Vec<f64>> = rows.iter().map(|x| ps.iter().map(|&p| x[p]).collect()).collect();
                let node_seed = rng::derive_seed(seed, r as u64);
                match spec {
                    ModelSpec::Linear => LinearNode::fit(&inputs, &target).map(NodeModel::Linear),
                    ModelSpec::Gp { train } => {
                        let cfg = TrainConfig {
                            seed: node_seed,
                            ..train.clone()
                        };
                        vi::train(&inputs, &target, None, &cfg).map(|m| NodeModel::Bwgp(Box::new(m)))
                    }
                    ModelSpec::Bwgp {
                        bins,
                        bound,
                        hidden_dims,
                        train,
                        cover_data,
                    } => {
                        let bound = if *cover_data {
                            bound.min(data_cover(&inputs, &target))
                        } else {
                            *bound
                        };
                        let flow = FlowConfig::new(ps.len(), *bins, bound, *hidden_dims)?;
                        let cfg = TrainConfig {
                            seed: node_seed,
                            ..train.clone()
                        };
                        vi::train(&inputs, &target, Some(flow), &cfg).map(|m| NodeModel::Bwgp(Box::new(m)))
                    }
                }
                .map_err(|e| match e {
                    Error::Training { step, reason } => Error::Training {
                        step,
                        reason: format!("node {}: {reason}", graph.names()[r]),
                    },
                    e => e,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(graph.clone(), nodes, DEFAULT_PHI_POOL, rng::derive_tagged(seed, "phi-pool"))
    }

    pub fn graph(&self) -> &CausalGraph {
        &self.graph
    }

    pub fn nodes(&self) -> &[NodeModel] {
        &self.nodes
    }

    pub fn dim(&self) -> usize {
        self.graph.len()
    }

    /// Sampler for counterfactuals of `factum`.
    pub fn counterfactual_sampler(&self, factum: &Factum, seed: u64) -> Result<EnsembleSampler<'_>> {
        self.sampler(Some(factum), seed)
    }

    /// Sampler from the interventional (noise-prior) model.
    pub fn interventional_sampler(&self, seed: u64) -> Result<EnsembleSampler<'_>> {
        self.sampler(None, seed)
    }

    fn sampler(&self, factum: Option<&Factum>, seed: u64) -> Result<EnsembleSampler<'_>> {
        if let Some(f) = factum {
            if f.x.len() != self.dim() || f.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("factum must hold one finite value per node"));
            }
        }
        let states = (0..self.dim())
            .into_par_iter()
            .map(|r| {
                let pa = |x: &[f64]| -> Vec<f64> { self.graph.parents(r).iter().map(|&p| x[p]).collect() };
                Ok(match (&self.nodes[r], factum) {
                    (NodeModel::Root(v), _) => NodeState::Root(v.clone()),
                    (NodeModel::Linear(l), Some(f)) => NodeState::Linear {
                        shift: f.x[r] - l.predict(&pa(&f.x)),
                        sd: 0.0,
                    },
                    (NodeModel::Linear(l), None) => NodeState::Linear {
                        shift: 0.0,
                        sd: l.noise_sd,
                    },
                    (NodeModel::Bwgp(m), f) => {
                        let pool = self.pools[r].as_ref().expect("warped nodes have a pool");
                        NodeState::Gp(GpState::new(m, pool, f.map(|f| (pa(&f.x), f.x[r])))?)
                    }
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EnsembleSampler {
            ens: self,
            states,
            seed,
        })
    }

    pub fn to_json(&self) -> EnsembleJson {
        EnsembleJson {
            nodes: self.graph.names().to_vec(),
            parents: (0..self.dim()).map(|r| self.graph.parents(r).to_vec()).collect(),
            models: self
                .nodes
                .iter()
                .map(|m| match m {
                    NodeModel::Root(v) => NodeModelJson::Root { values: v.clone() },
                    NodeModel::Linear(l) => NodeModelJson::Linear(l.clone()),
                    NodeModel::Bwgp(b) => NodeModelJson::Bwgp(Box::new(b.to_json())),
                })
                .collect(),
            pool_size: self.pool_size,
            pool_seed: self.pool_seed,
        }
    }

    pub fn from_json(j: &EnsembleJson) -> Result<Self> {
        let graph = CausalGraph::new(j.nodes.clone(), j.parents.clone())?;
        let nodes = j
            .models
            .iter()
            .map(|m| {
                Ok(match m {
                    NodeModelJson::Root { values } => NodeModel::Root(values.clone()),
                    NodeModelJson::Linear(l) => NodeModel::Linear(l.clone()),
                    NodeModelJson::Bwgp(b) => NodeModel::Bwgp(Box::new(BwgpModel::from_json(b)?)),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(graph, nodes, j.pool_size, j.pool_seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeModelJson {
    Root { values: Vec<f64> },
    Linear(LinearNode),
    Bwgp(Box<BwgpModelJson>),
}

/// Serialized [`ScmEnsemble`]; parents are node indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleJson {
    pub nodes: Vec<String>,
    pub parents: Vec<Vec<usize>>,
    pub models: Vec<NodeModelJson>,
    pub pool_size: usize,
    pub pool_seed: u64,
}

/// Factor and noise-posterior variance over the training inputs with the
/// factum row appended, shared by every φ draw.
#[derive(Debug, Clone)]
pub struct FactumCache {
    key: Vec<u64>,
    parents_std: Vec<f64>,
    target_std: f64,
    factor: SpdFactor,
    variance: f64,
}

/// Precomputes the extended factor for `(factum_parents, factum_value)`.
pub fn precompute_factum_cache(model: &BwgpModel, factum_parents: &[f64], factum_value: f64) -> Result<FactumCache> {
    if factum_parents.len() != model.input_dim() {
        return Err(Error::invalid("factum parents have the wrong dimension"));
    }
    let parents_std = model.scaling().inputs(factum_parents);
    let kernel = model.kernel();
    let col = gp::cross_kernel(model.inputs(), &parents_std, kernel);
    let factor = model
        .factor()
        .extended(&col, kernel.signal_variance() + kernel.noise_variance())?;
    let variance = gp::noise_posterior_variance(&factor, kernel.noise_variance());
    Ok(FactumCache {
        key: cache_key(factum_parents, factum_value),
        parents_std,
        target_std: model.scaling().target(factum_value),
        factor,
        variance,
    })
}

fn cache_key(parents: &[f64], value: f64) -> Vec<u64> {
    parents.iter().chain([&value]).map(|v| v.to_bits()).collect()
}

impl FactumCache {
    pub fn matches(&self, factum_parents: &[f64], factum_value: f64) -> bool {
        self.key == cache_key(factum_parents, factum_value)
    }

    /// Shared posterior variance `s_r`, the same for every φ.
    pub fn variance(&self) -> f64 {
        self.variance
    }

    fn alpha(&self, model: &BwgpModel, warped_train: &[f64], phi: &[f64], ws: &mut Option<FlowWorkspace>) -> Result<Vec<f64>> {
        let (z_f, _) = model.warp_std(self.target_std, &self.parents_std, phi, ws)?;
        let mut z = Vec::with_capacity(warped_train.len() + 1);
        z.extend_from_slice(warped_train);
        z.push(z_f);
        Ok(self.factor.solve(&z))
    }

    /// Noise posterior at one φ, in the model's standardized units.
    pub fn noise_posterior(&self, model: &BwgpModel, phi: &[f64]) -> Result<GaussianPosterior> {
        let mut ws = None;
        let warped = model.warped_targets(phi, &mut ws)?;
        let alpha = self.alpha(model, &warped, phi, &mut ws)?;
        Ok(GaussianPosterior {
            mean: gp::effective_noise(&self.factor, model.noise_variance()) * alpha[alpha.len() - 1],
            variance: self.variance,
        })
    }
}

/// Posterior of the standardized noise `U_r` given the factum, for fixed φ.
pub fn bwgp_noise_posterior(
    model: &BwgpModel,
    factum_parents: &[f64],
    factum_value: f64,
    phi: &[f64],
) -> Result<GaussianPosterior> {
    precompute_factum_cache(model, factum_parents, factum_value)?.noise_posterior(model, phi)
}

/// Factum row of a counterfactual GP state. The counterfactual mean
/// `k*ᵀα + σ²α_F` is evaluated as `z_F + (k* − k_F)ᵀα`: the two agree
/// exactly, but with a small noise variance `α` is huge and the first form
/// loses the factual value to cancellation.
#[derive(Debug, Clone)]
struct FactumAnchor {
    parents: Vec<f64>,
    /// Noise-free kernel column of the factum row.
    column: Vec<f64>,
    /// Warped factual target per pool entry.
    warped: Vec<f64>,
}

#[derive(Debug, Clone)]
struct GpState {
    anchor: Option<FactumAnchor>,
    factor: Option<SpdFactor>,
    alphas: Vec<Vec<f64>>,
    noise_sd: f64,
}

impl GpState {
    fn new(model: &BwgpModel, pool: &PhiPool, factum: Option<(Vec<f64>, f64)>) -> Result<Self> {
        match factum {
            None => Ok(Self {
                anchor: None,
                factor: None,
                alphas: pool.warped.iter().map(|z| model.factor().solve(z)).collect(),
                noise_sd: model.noise_variance().sqrt(),
            }),
            Some((pa, y)) => {
                let cache = precompute_factum_cache(model, &pa, y)?;
                let mut ws = None;
                let alphas = pool
                    .draws
                    .iter()
                    .zip(&pool.warped)
                    .map(|(phi, z)| cache.alpha(model, z, phi, &mut ws))
                    .collect::<Result<Vec<_>>>()?;
                let warped = pool
                    .draws
                    .iter()
                    .map(|phi| model.warp_std(cache.target_std, &cache.parents_std, phi, &mut ws).map(|r| r.0))
                    .collect::<Result<Vec<_>>>()?;
                let kernel = model.kernel();
                let mut column = gp::cross_kernel(model.inputs(), &cache.parents_std, kernel);
                column.push(kernel.signal_variance());
                Ok(Self {
                    alphas,
                    noise_sd: cache.variance.sqrt(),
                    anchor: Some(FactumAnchor {
                        parents: cache.parents_std,
                        column,
                        warped,
                    }),
                    factor: Some(cache.factor),
                })
            }
        }
    }
}

#[derive(Debug, Clone)]
enum NodeState {
    Root(Vec<f64>),
    Linear { shift: f64, sd: f64 },
    Gp(GpState),
}

/// One joint draw.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub x: Vec<f64>,
    /// Pool index of the φ used by the first resampled warped node.
    pub phi_index: Option<usize>,
}

/// Joint sampler over all nodes.
///
/// In `draw`, intervened nodes take their values, nodes with `keep[r]` copy
/// `base[r]`, and the rest are sampled in topological order. Each
/// `(index, node)` pair has its own random stream, so draws with the same
/// index share random numbers across interventions.
pub trait Sampler: Sync {
    fn dim(&self) -> usize;
    fn draw(&self, iv: &Intervention, base: &[f64], keep: &[bool], index: u64) -> Result<Draw>;
}

fn check_draw_args(d: usize, iv: &Intervention, base: &[f64], keep: &[bool]) -> Result<()> {
    iv.validate(d)?;
    if base.len() != d || keep.len() != d {
        return Err(Error::invalid("base row and keep mask need one entry per node"));
    }
    Ok(())
}

/// Sampler over a learned ensemble, prepared for one factum (counterfactual
/// mode) or for none (interventional mode).
pub struct EnsembleSampler<'a> {
    ens: &'a ScmEnsemble,
    states: Vec<NodeState>,
    seed: u64,
}

impl EnsembleSampler<'_> {
    /// Shared posterior variance per node (standardized units), if warped.
    pub fn noise_posterior_sd(&self, node: usize) -> Option<f64> {
        match &self.states[node] {
            NodeState::Gp(g) => Some(g.noise_sd),
            _ => None,
        }
    }

    fn sample_gp(
        &self,
        model: &BwgpModel,
        pool: &PhiPool,
        st: &GpState,
        parents: &[f64],
        r: &mut impl Rng,
        ws: &mut Option<FlowWorkspace>,
    ) -> Result<(f64, usize)> {
        let k = r.random_range(0..pool.draws.len());
        let (e_f, e_u) = (normal(r), normal(r));
        let pa = model.scaling().inputs(parents);
        let kernel = model.kernel();
        let mut kstar = gp::cross_kernel(model.inputs(), &pa, kernel);
        let alpha = &st.alphas[k];
        let mean = match &st.anchor {
            None => kstar.iter().zip(alpha).map(|(a, b)| a * b).sum::<f64>(),
            Some(f) => {
                kstar.push(gp::se_kernel(&f.parents, &pa, kernel)?);
                let shift: f64 = kstar.iter().zip(&f.column).zip(alpha).map(|((a, c), w)| (a - c) * w).sum();
                f.warped[k] + shift
            }
        };
        st.factor.as_ref().unwrap_or(model.factor()).forward_solve(&mut kstar);
        let s2 = kernel.signal_variance();
        let var = (s2 - kstar.iter().map(|v| v * v).sum::<f64>()).clamp(0.0, s2);
        let z = mean + var.sqrt() * e_f + st.noise_sd * e_u;
        let y = model.unwarp_std(z, &pa, &pool.draws[k], ws)?;
        Ok((model.scaling().untarget(y), k))
    }
}

impl Sampler for EnsembleSampler<'_> {
    fn dim(&self) -> usize {
        self.ens.dim()
    }

    fn draw(&self, iv: &Intervention, base: &[f64], keep: &[bool], index: u64) -> Result<Draw> {
        let d = self.dim();
        check_draw_args(d, iv, base, keep)?;
        let fixed = iv.as_dense(d);
        let graph = &self.ens.graph;
        let mut x = vec![0.0; d];
        let mut phi_index = None;
        let mut ws = None;
        let mut parents = Vec::new();
        for &r in graph.order() {
            if let Some(v) = fixed[r] {
                x[r] = v;
                continue;
            }
            if keep[r] {
                x[r] = base[r];
                continue;
            }
            let mut rr = rng::stream(rng::derive_path(self.seed, &[index, r as u64]));
            parents.clear();
            parents.extend(graph.parents(r).iter().map(|&p| x[p]));
            x[r] = match &self.states[r] {
                NodeState::Root(v) => v[rr.random_range(0..v.len())],
                NodeState::Linear { shift, sd } => {
                    let NodeModel::Linear(l) = &self.ens.nodes[r] else {
                        unreachable!("state mirrors node model")
                    };
                    l.predict(&parents) + shift + sd * normal(&mut rr)
                }
                NodeState::Gp(st) => {
                    let NodeModel::Bwgp(m) = &self.ens.nodes[r] else {
                        unreachable!("state mirrors node model")
                    };
                    let pool = self.ens.pools[r].as_ref().expect("warped nodes have a pool");
                    let (v, k) = self.sample_gp(m, pool, st, &parents, &mut rr, &mut ws)?;
                    if m.flow().is_some() && phi_index.is_none() {
                        phi_index = Some(k);
                    }
                    v
                }
            };
            if !x[r].is_finite() {
                return Err(Error::Parameter(format!("non-finite sample at node {}", graph.names()[r])));
            }
        }
        Ok(Draw { x, phi_index })
    }
}

/// The ground-truth SCM as a sampler: counterfactual mode replays the
/// factum's recorded noise, interventional mode draws fresh noise.
pub struct OracleSampler<'a> {
    scm: &'a ClosedFormScm,
    noise: Option<Vec<f64>>,
    seed: u64,
}

impl<'a> OracleSampler<'a> {
    pub fn counterfactual(scm: &'a ClosedFormScm, factum: &Factum) -> Result<Self> {
        let u = factum.u.clone().ok_or(Error::MissingNoise)?;
        if u.len() != scm.dim() {
            return Err(Error::invalid("noise record has wrong dimension"));
        }
        Ok(Self {
            scm,
            noise: Some(u),
            seed: 0,
        })
    }

    pub fn interventional(scm: &'a ClosedFormScm, seed: u64) -> Self {
        Self { scm, noise: None, seed }
    }
}

impl Sampler for OracleSampler<'_> {
    fn dim(&self) -> usize {
        self.scm.dim()
    }

    fn draw(&self, iv: &Intervention, base: &[f64], keep: &[bool], index: u64) -> Result<Draw> {
        let d = self.dim();
        check_draw_args(d, iv, base, keep)?;
        let fixed = iv.as_dense(d);
        let mut x = vec![0.0; d];
        for &r in self.scm.graph().order() {
            x[r] = if let Some(v) = fixed[r] {
                v
            } else if keep[r] {
                base[r]
            } else {
                let u = match &self.noise {
                    Some(u) => u[r],
                    None => {
                        let mut rr = rng::stream(rng::derive_path(self.seed, &[index, r as u64]));
                        self.scm.noise()[r].sample(&mut rr)
                    }
                };
                self.scm.evaluate_node(r, &x, u)
            };
        }
        Ok(Draw { x, phi_index: None })
    }
}

/// Whether each node is a root of `graph`.
pub fn root_mask(graph: &CausalGraph) -> Vec<bool> {
    (0..graph.len()).map(|r| graph.is_root(r)).collect()
}

/// Sampling mode tag used in sample files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Cf,
    Cate,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Cf => "cf",
            Mode::Cate => "cate",
        }
    }
}

/// A draw annotated with its sampling mode.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualSample {
    pub x: Vec<f64>,
    pub phi_index: Option<usize>,
    pub mode: Mode,
}

fn draw_many(
    s: &dyn Sampler,
    iv: &Intervention,
    n: usize,
    mode: Mode,
    base: impl Fn(usize) -> Vec<f64> + Sync,
    keep: &[bool],
) -> Result<Vec<CounterfactualSample>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let d = s.draw(iv, &base(i), keep, i as u64)?;
            Ok(CounterfactualSample {
                x: d.x,
                phi_index: d.phi_index,
                mode,
            })
        })
        .collect()
}

/// `n` counterfactual draws for `factum` under `iv`. Roots that are not
/// intervened keep their factual values.
pub fn counterfactual_sample(
    ens: &ScmEnsemble,
    factum: &Factum,
    iv: &Intervention,
    n: usize,
    seed: u64,
) -> Result<Vec<CounterfactualSample>> {
    let s = ens.counterfactual_sampler(factum, seed)?;
    draw_many(&s, iv, n, Mode::Cf, |_| factum.x.clone(), &root_mask(ens.graph()))
}

/// Where root values come from in interventional sampling.
#[derive(Debug, Clone, PartialEq)]
pub enum RootSource {
    /// Resample the training values.
    Empirical,
    /// Copy roots from row `i mod len` of these full rows.
    Rows(Vec<Vec<f64>>),
}

/// `n` draws from the interventional model: noise prior, GP conditioned on
/// training data only.
pub fn interventional_sample(
    ens: &ScmEnsemble,
    iv: &Intervention,
    n: usize,
    seed: u64,
    roots: &RootSource,
) -> Result<Vec<CounterfactualSample>> {
    let s = ens.interventional_sampler(seed)?;
    let d = ens.dim();
    match roots {
        RootSource::Empirical => draw_many(&s, iv, n, Mode::Cate, |_| vec![0.0; d], &vec![false; d]),
        RootSource::Rows(rows) => {
            if rows.is_empty() || rows.iter().any(|r| r.len() != d) {
                return Err(Error::invalid("root rows must be non-empty full rows"));
            }
            draw_many(&s, iv, n, Mode::Cate, |i| rows[i % rows.len()].clone(), &root_mask(ens.graph()))
        }
    }
}

/// Writes samples with one column per node plus `phi_index` and `mode`.
pub fn write_samples_csv<W: Write>(w: W, names: &[String], samples: &[CounterfactualSample]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<&str> = names.iter().map(String::as_str).collect();
    header.extend(["phi_index", "mode"]);
    out.write_record(&header)?;
    for s in samples {
        let mut rec: Vec<String> = s.x.iter().map(|v| v.to_string()).collect();
        rec.push(s.phi_index.map_or_else(String::new, |k| k.to_string()));
        rec.push(s.mode.as_str().into());
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

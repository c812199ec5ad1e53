//! Classifiers and the minimum-cost recourse search.
//!
//! An action `do(X_I = θ)` is feasible when at least `1 − δ` of the
//! sampled post-action individuals are classified positive. Nodes that are
//! not descendants of the intervened set keep their factual values; the
//! rest are drawn from the supplied [`Sampler`], which decides whether the
//! draw is counterfactual or interventional.

use std::cmp::Ordering;
use std::io::Write;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::counterfactual::Sampler;
use crate::error::{Error, Result};
use crate::rng;
use crate::scm::{CausalGraph, Intervention};

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    LinearLogistic,
    NonlinearLogistic,
    RandomForest,
}

impl ClassifierKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassifierKind::LinearLogistic => "linear_logistic",
            ClassifierKind::NonlinearLogistic => "nonlinear_logistic",
            ClassifierKind::RandomForest => "random_forest",
        }
    }
}

/// Logistic model on standardized (optionally degree-2 expanded) features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Logistic {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub quadratic: bool,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl Logistic {
    fn features(&self, x: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = x
            .iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect();
        if !self.quadratic {
            return z;
        }
        let d = z.len();
        let mut f = z.clone();
        for i in 0..d {
            for j in i..d {
                f.push(z[i] * z[j]);
            }
        }
        f
    }

    fn prob(&self, x: &[f64]) -> f64 {
        let f = self.features(x);
        sigmoid(self.bias + f.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum TreeNode {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    nodes: Vec<TreeNode>,
}

impl DecisionTree {
    fn prob(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf(p) => return *p,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }
}

/// Bagged CART trees with Gini splits on random feature subsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    pub trees: Vec<DecisionTree>,
}

/// Forest settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub trees: usize,
    pub max_depth: usize,
    /// Features tried per split; `None` means `ceil(sqrt(d))`.
    pub max_features: Option<usize>,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            trees: 50,
            max_depth: 6,
            max_features: None,
        }
    }
}

struct TreeBuilder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [bool],
    max_depth: usize,
    max_features: usize,
    nodes: Vec<TreeNode>,
}

fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

impl TreeBuilder<'_> {
    fn build(&mut self, idx: &mut [usize], depth: usize, r: &mut impl Rng) -> usize {
        let n = idx.len();
        let pos = idx.iter().filter(|&&i| self.y[i]).count();
        let id = self.nodes.len();
        self.nodes.push(TreeNode::Leaf(pos as f64 / n as f64));
        if depth >= self.max_depth || pos == 0 || pos == n {
            return id;
        }
        let d = self.x[0].len();
        let features = sample_indices(r, d, self.max_features.min(d)).into_vec();
        let parent = gini(pos, n);
        let mut best: Option<(f64, usize, f64)> = None;
        let mut order: Vec<usize> = idx.to_vec();
        for &f in &features {
            order.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]));
            let mut left_pos = 0;
            for k in 1..n {
                if self.y[order[k - 1]] {
                    left_pos += 1;
                }
                let (a, b) = (self.x[order[k - 1]][f], self.x[order[k]][f]);
                if a == b {
                    continue;
                }
                let w = k as f64 / n as f64;
                let impurity = w * gini(left_pos, k) + (1.0 - w) * gini(pos - left_pos, n - k);
                let gain = parent - impurity;
                if gain > 1e-12 && best.is_none_or(|(g, _, _)| gain > g) {
                    best = Some((gain, f, 0.5 * (a + b)));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            return id;
        };
        let split = partition(idx, |&i| self.x[i][feature] <= threshold);
        let (l, rr) = idx.split_at_mut(split);
        let left = self.build(l, depth + 1, r);
        let right = self.build(rr, depth + 1, r);
        self.nodes[id] = TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }
}

/// Stable in-place partition; returns the number of elements satisfying `pred`.
fn partition<T: Copy>(v: &mut [T], pred: impl Fn(&T) -> bool) -> usize {
    let (a, b): (Vec<T>, Vec<T>) = v.iter().partition(|x| pred(x));
    let k = a.len();
    for (slot, x) in v.iter_mut().zip(a.into_iter().chain(b)) {
        *slot = x;
    }
    k
}

impl RandomForest {
    pub fn fit(x: &[Vec<f64>], y: &[bool], cfg: &ForestConfig, seed: u64) -> Result<Self> {
        check_xy(x, y)?;
        let n = x.len();
        let d = x[0].len();
        let max_features = cfg
            .max_features
            .unwrap_or_else(|| (d as f64).sqrt().ceil() as usize)
            .clamp(1, d.max(1));
        let trees = (0..cfg.trees)
            .map(|t| {
                let mut r = rng::stream(rng::derive_seed(seed, t as u64));
                let mut idx: Vec<usize> = (0..n).map(|_| r.random_range(0..n)).collect();
                let mut b = TreeBuilder {
                    x,
                    y,
                    max_depth: cfg.max_depth,
                    max_features,
                    nodes: vec![],
                };
                b.build(&mut idx, 0, &mut r);
                DecisionTree { nodes: b.nodes }
            })
            .collect();
        Ok(Self { trees })
    }

    pub fn prob(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.prob(x)).sum::<f64>() / self.trees.len() as f64
    }
}

/// A probabilistic binary classifier `h: X → [0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Classifier {
    Logistic(Logistic),
    Forest(RandomForest),
    Constant { dim: usize, prob: f64 },
}

impl Classifier {
    /// Linear logistic model on raw features.
    pub fn logistic(weights: Vec<f64>, bias: f64) -> Self {
        let d = weights.len();
        Classifier::Logistic(Logistic {
            mean: vec![0.0; d],
            scale: vec![1.0; d],
            quadratic: false,
            weights,
            bias,
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            Classifier::Logistic(l) => l.mean.len(),
            Classifier::Forest(f) => f
                .trees
                .iter()
                .flat_map(|t| &t.nodes)
                .filter_map(|n| match n {
                    TreeNode::Split { feature, .. } => Some(feature + 1),
                    TreeNode::Leaf(_) => None,
                })
                .max()
                .unwrap_or(0),
            Classifier::Constant { dim, .. } => *dim,
        }
    }

    fn expected_dim(&self) -> Option<usize> {
        match self {
            Classifier::Logistic(l) => Some(l.mean.len()),
            Classifier::Constant { dim, .. } => Some(*dim),
            Classifier::Forest(_) => None,
        }
    }

    /// Probability of the positive class.
    pub fn classify_prob(&self, x: &[f64]) -> Result<f64> {
        let ok = match self.expected_dim() {
            Some(d) => x.len() == d,
            None => x.len() >= self.dim(),
        };
        if !ok {
            return Err(Error::invalid(format!("classifier input has dimension {}", x.len())));
        }
        Ok(match self {
            Classifier::Logistic(l) => l.prob(x),
            Classifier::Forest(f) => f.prob(x),
            Classifier::Constant { prob, .. } => *prob,
        })
    }

    pub fn is_positive(&self, x: &[f64]) -> Result<bool> {
        Ok(self.classify_prob(x)? >= 0.5)
    }
}

fn check_xy(x: &[Vec<f64>], y: &[bool]) -> Result<()> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::invalid("classifier needs matching, non-empty data and labels"));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) || x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("classifier data must be finite rows of equal length"));
    }
    Ok(())
}

fn fit_logistic(x: &[Vec<f64>], y: &[bool], quadratic: bool) -> Logistic {
    let d = x[0].len();
    let n = x.len() as f64;
    let (mean, scale): (Vec<f64>, Vec<f64>) = (0..d)
        .map(|j| {
            let m = x.iter().map(|r| r[j]).sum::<f64>() / n;
            let v = x.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n;
            (m, if v > 1e-24 { v.sqrt() } else { 1.0 })
        })
        .unzip();
    let mut model = Logistic {
        mean,
        scale,
        quadratic,
        weights: vec![],
        bias: 0.0,
    };
    let feats: Vec<Vec<f64>> = x.iter().map(|r| model.features(r)).collect();
    let p = feats[0].len();
    let mut w = vec![0.0; p];
    let mut b = 0.0;
    let (lr, l2) = (0.5, 1e-4);
    for _ in 0..3000 {
        let mut gw = vec![0.0; p];
        let mut gb = 0.0;
        for (f, &label) in feats.iter().zip(y) {
            let err = sigmoid(b + f.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>()) - if label { 1.0 } else { 0.0 };
            gb += err;
            for (g, v) in gw.iter_mut().zip(f) {
                *g += err * v;
            }
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= lr * (g / n + l2 * *wi);
        }
        b -= lr * gb / n;
    }
    model.weights = w;
    model.bias = b;
    model
}

/// Trains a classifier of the given kind.
pub fn train_classifier(x: &[Vec<f64>], y: &[bool], kind: ClassifierKind, seed: u64) -> Result<Classifier> {
    check_xy(x, y)?;
    if y.iter().all(|&v| v) || y.iter().all(|&v| !v) {
        return Err(Error::invalid("classifier training data has a single class"));
    }
    Ok(match kind {
        ClassifierKind::LinearLogistic => Classifier::Logistic(fit_logistic(x, y, false)),
        ClassifierKind::NonlinearLogistic => Classifier::Logistic(fit_logistic(x, y, true)),
        ClassifierKind::RandomForest => Classifier::Forest(RandomForest::fit(x, y, &ForestConfig::default(), seed)?),
    })
}

/// `sqrt(Σ_j ((θ_j − x_j^F)/range_j)²)` over the action's targets.
pub fn cost(action: &Intervention, factum: &[f64], ranges: &[f64]) -> Result<f64> {
    let mut s = 0.0;
    for (&t, &v) in action.targets.iter().zip(&action.values) {
        let r = *ranges
            .get(t)
            .ok_or_else(|| Error::invalid(format!("no range for node {t}")))?;
        if !(r > 0.0) {
            return Err(Error::invalid(format!("range of node {t} is not positive")));
        }
        let d = (v - factum[t]) / r;
        s += d * d;
    }
    Ok(s.sqrt())
}

/// Non-intervened nodes that the action cannot affect.
pub fn unaffected_mask(graph: &CausalGraph, action: &Intervention) -> Vec<bool> {
    let desc = graph.descendants(&action.targets);
    (0..graph.len())
        .map(|r| !desc[r] && action.value_of(r).is_none())
        .collect()
}

/// Fraction of `n` post-action draws classified positive. Draw `i` uses
/// stream `i`, so different actions share random numbers.
pub fn success_probability(
    sampler: &dyn Sampler,
    graph: &CausalGraph,
    factum: &[f64],
    action: &Intervention,
    h: &Classifier,
    n: usize,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("success_probability needs n >= 1"));
    }
    let keep = unaffected_mask(graph, action);
    let mut pos = 0;
    for i in 0..n {
        if h.is_positive(&sampler.draw(action, factum, &keep, i as u64)?.x)? {
            pos += 1;
        }
    }
    Ok(pos as f64 / n as f64)
}

/// Whether at least `required` of `n` draws are positive, stopping as soon
/// as the answer is known.
fn meets(
    sampler: &dyn Sampler,
    graph: &CausalGraph,
    factum: &[f64],
    action: &Intervention,
    h: &Classifier,
    n: usize,
    required: usize,
) -> Result<bool> {
    let keep = unaffected_mask(graph, action);
    let (mut pos, mut neg) = (0, 0);
    for i in 0..n {
        if h.is_positive(&sampler.draw(action, factum, &keep, i as u64)?.x)? {
            pos += 1;
            if pos >= required {
                return Ok(true);
            }
        } else {
            neg += 1;
            if neg > n - required {
                return Ok(false);
            }
        }
    }
    Ok(pos >= required)
}

/// Search settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecourseConfig {
    /// Accepted residual risk `δ`.
    pub delta: f64,
    pub actionable: Vec<usize>,
    /// Candidate intervention sets; all non-empty subsets of `actionable`
    /// when absent.
    #[serde(default)]
    pub candidate_sets: Option<Vec<Vec<usize>>>,
    /// Training range per node, `(min, max)`.
    pub ranges: Vec<(f64, f64)>,
    pub grid_points: usize,
    pub refine_factor: usize,
    pub mc_samples: usize,
    /// Upper bound on enumerated (set, grid point) candidates.
    pub max_candidates: usize,
}

impl RecourseConfig {
    pub fn new(actionable: Vec<usize>, ranges: Vec<(f64, f64)>) -> Self {
        Self {
            delta: 0.05,
            actionable,
            candidate_sets: None,
            ranges,
            grid_points: 10,
            refine_factor: 10,
            mc_samples: 100,
            max_candidates: 2_000_000,
        }
    }

    /// Training ranges from data rows.
    pub fn ranges_from(rows: &[Vec<f64>]) -> Vec<(f64, f64)> {
        let d = rows.first().map_or(0, Vec::len);
        (0..d)
            .map(|j| {
                rows.iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r[j]), hi.max(r[j])))
            })
            .collect()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.ranges.iter().map(|(lo, hi)| hi - lo).collect()
    }

    fn validate(&self, d: usize) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::invalid("δ must lie in (0, 1)"));
        }
        if self.actionable.is_empty() {
            return Err(Error::invalid("no actionable nodes"));
        }
        if self.ranges.len() != d || self.actionable.iter().any(|&a| a >= d) {
            return Err(Error::invalid("ranges or actionable nodes do not match the graph"));
        }
        if self.grid_points < 2 || self.refine_factor < 1 || self.mc_samples < 1 {
            return Err(Error::invalid("grid needs >= 2 points, refine factor and samples >= 1"));
        }
        for &a in &self.actionable {
            let (lo, hi) = self.ranges[a];
            if !(hi > lo) {
                return Err(Error::invalid(format!("node {a} has an empty training range")));
            }
        }
        Ok(())
    }

    fn sets(&self) -> Vec<Vec<usize>> {
        if let Some(s) = &self.candidate_sets {
            return s.clone();
        }
        let k = self.actionable.len();
        let mut sets: Vec<Vec<usize>> = (1u64..(1 << k))
            .map(|mask| (0..k).filter(|i| mask >> i & 1 == 1).map(|i| self.actionable[i]).collect())
            .collect();
        sets.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
        sets
    }

    fn grid(&self, node: usize) -> (f64, f64, f64) {
        let (lo, hi) = self.ranges[node];
        let pad = 0.2 * (hi - lo);
        let (a, b) = (lo - pad, hi + pad);
        (a, b, (b - a) / (self.grid_points - 1) as f64)
    }

    fn required(&self) -> usize {
        ((1.0 - self.delta) * self.mc_samples as f64 - 1e-9).ceil() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecourseResult {
    pub action: Intervention,
    pub cost: f64,
    pub success_prob: f64,
    pub feasible: bool,
    /// Constraint checks performed.
    pub evaluations: usize,
}

/// Minimum-cost feasible action for `factum` under `sampler`.
///
/// All (set, coarse-grid point) candidates are visited in increasing cost
/// until one satisfies the constraint; that point is then moved toward the
/// factum one coordinate at a time on a grid `refine_factor` times finer,
/// accepting only feasible moves.
pub fn find_recourse(
    sampler: &dyn Sampler,
    graph: &CausalGraph,
    factum: &[f64],
    h: &Classifier,
    cfg: &RecourseConfig,
) -> Result<RecourseResult> {
    let d = graph.len();
    cfg.validate(d)?;
    if factum.len() != d {
        return Err(Error::invalid("factum has the wrong dimension"));
    }
    if h.is_positive(factum)? {
        return Ok(RecourseResult {
            action: Intervention::empty(),
            cost: 0.0,
            success_prob: 1.0,
            feasible: true,
            evaluations: 0,
        });
    }
    let widths = cfg.widths();
    let sets = cfg.sets();
    let mut total = 0usize;
    for s in &sets {
        let count = (cfg.grid_points as u64).checked_pow(s.len() as u32).unwrap_or(u64::MAX);
        total = total.saturating_add(count as usize);
    }
    if total > cfg.max_candidates {
        return Err(Error::invalid(format!(
            "{total} recourse candidates exceed the limit of {}",
            cfg.max_candidates
        )));
    }
    // (cost, set index, grid indices)
    let mut cands: Vec<(f64, usize, Vec<u16>)> = Vec::with_capacity(total);
    for (si, s) in sets.iter().enumerate() {
        let grids: Vec<(f64, f64, f64)> = s.iter().map(|&n| cfg.grid(n)).collect();
        let mut idx = vec![0u16; s.len()];
        loop {
            let mut c = 0.0;
            for (k, &node) in s.iter().enumerate() {
                let v = grids[k].0 + idx[k] as f64 * grids[k].2;
                let t = (v - factum[node]) / widths[node];
                c += t * t;
            }
            cands.push((c.sqrt(), si, idx.clone()));
            let mut k = 0;
            while k < s.len() {
                idx[k] += 1;
                if (idx[k] as usize) < cfg.grid_points {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == s.len() {
                break;
            }
        }
    }
    cands.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1.cmp(&b.1))
            .then_with(|| a.2.cmp(&b.2))
    });
    let n = cfg.mc_samples;
    let required = cfg.required();
    let mut evaluations = 0;
    let make = |si: usize, vals: Vec<f64>| Intervention {
        targets: sets[si].clone(),
        values: vals,
    };
    let mut found = None;
    for (_, si, idx) in &cands {
        let vals: Vec<f64> = sets[*si]
            .iter()
            .zip(idx)
            .map(|(&node, &i)| {
                let g = cfg.grid(node);
                g.0 + i as f64 * g.2
            })
            .collect();
        let action = make(*si, vals);
        evaluations += 1;
        if meets(sampler, graph, factum, &action, h, n, required)? {
            found = Some(action);
            break;
        }
    }
    let Some(mut action) = found else {
        return Ok(RecourseResult {
            action: Intervention::empty(),
            cost: f64::NAN,
            success_prob: 0.0,
            feasible: false,
            evaluations,
        });
    };
    // coordinate refinement toward the factum
    loop {
        let mut moved = false;
        for k in 0..action.targets.len() {
            let node = action.targets[k];
            let (lo, hi, step) = cfg.grid(node);
            let fine = step / cfg.refine_factor as f64;
            for _ in 0..cfg.refine_factor {
                let cur = action.values[k];
                let gap = factum[node] - cur;
                if gap.abs() < 1e-12 {
                    break;
                }
                let next = if gap.abs() <= fine { factum[node] } else { cur + fine * gap.signum() };
                if next < lo - 1e-12 || next > hi + 1e-12 {
                    break;
                }
                let mut trial = action.clone();
                trial.values[k] = next;
                evaluations += 1;
                if meets(sampler, graph, factum, &trial, h, n, required)? {
                    action = trial;
                    moved = true;
                } else {
                    break;
                }
            }
        }
        if !moved {
            break;
        }
    }
    let success_prob = success_probability(sampler, graph, factum, &action, h, n)?;
    Ok(RecourseResult {
        cost: cost(&action, factum, &widths)?,
        action,
        success_prob,
        feasible: true,
        evaluations,
    })
}

/// One `recourse.csv` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecourseRow {
    pub factum_id: usize,
    pub mode: String,
    pub model: String,
    pub intervention_set: String,
    pub values: String,
    pub cost: f64,
    pub success_estimate: f64,
    pub feasible: bool,
}

impl RecourseRow {
    pub fn new(factum_id: usize, mode: &str, model: &str, names: &[String], r: &RecourseResult) -> Self {
        Self {
            factum_id,
            mode: mode.into(),
            model: model.into(),
            intervention_set: r
                .action
                .targets
                .iter()
                .map(|&t| names[t].as_str())
                .collect::<Vec<_>>()
                .join("+"),
            values: r.action.values.iter().map(f64::to_string).collect::<Vec<_>>().join(";"),
            cost: r.cost,
            success_estimate: r.success_prob,
            feasible: r.feasible,
        }
    }
}

pub fn write_recourse_csv<W: Write>(w: W, rows: &[RecourseRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// Orders recourse results by (factum id, model, mode) for stable output.
pub fn sort_rows(rows: &mut [RecourseRow]) {
    rows.sort_by(|a, b| {
        a.factum_id
            .cmp(&b.factum_id)
            .then_with(|| a.model.cmp(&b.model))
            .then_with(|| a.mode.cmp(&b.mode))
            .then(Ordering::Equal)
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counterfactual::OracleSampler;
    use crate::scm::{ClosedFormScm, Equation, Factum, NoiseDist};
    use rand_distr::{Distribution, StandardNormal};

    fn blobs(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut r = rng::stream(seed);
        let mut x = vec![];
        let mut y = vec![];
        for i in 0..n {
            let c = if i % 2 == 0 { 2.0 } else { -2.0 };
            let a: f64 = StandardNormal.sample(&mut r);
            let b: f64 = StandardNormal.sample(&mut r);
            x.push(vec![c + 0.5 * a, c + 0.5 * b]);
            y.push(i % 2 == 0);
        }
        (x, y)
    }

    fn accuracy(h: &Classifier, x: &[Vec<f64>], y: &[bool]) -> f64 {
        x.iter().zip(y).filter(|(r, &l)| h.is_positive(r).unwrap() == l).count() as f64 / x.len() as f64
    }

    fn xor(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut r = rng::stream(seed);
        let x: Vec<Vec<f64>> = (0..n).map(|_| vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect();
        let y = x.iter().map(|v| v[0] * v[1] > 0.0).collect();
        (x, y)
    }

    #[test]
    fn classifiers_on_constructed_data() {
        let (x, y) = blobs(200, 1);
        for kind in [ClassifierKind::LinearLogistic, ClassifierKind::NonlinearLogistic, ClassifierKind::RandomForest] {
            let h = train_classifier(&x, &y, kind, 0).unwrap();
            assert!(accuracy(&h, &x, &y) >= 0.99, "{kind:?}");
        }
        let (x, y) = xor(400, 2);
        let lin = train_classifier(&x, &y, ClassifierKind::LinearLogistic, 0).unwrap();
        let quad = train_classifier(&x, &y, ClassifierKind::NonlinearLogistic, 0).unwrap();
        assert!((accuracy(&lin, &x, &y) - 0.5).abs() < 0.1);
        assert!(accuracy(&quad, &x, &y) >= 0.9);
        assert!(train_classifier(&x, &vec![true; 400], ClassifierKind::LinearLogistic, 0).is_err());
    }

    #[test]
    fn forest_on_constant_labels_returns_frequency() {
        let (x, _) = blobs(50, 3);
        let f = RandomForest::fit(&x, &vec![true; 50], &ForestConfig::default(), 0).unwrap();
        assert_eq!(f.prob(&[0.3, 0.1]), 1.0);
        let f = RandomForest::fit(&x, &vec![false; 50], &ForestConfig::default(), 0).unwrap();
        assert_eq!(f.prob(&[9.0, -1.0]), 0.0);
    }

    #[test]
    fn logistic_basics() {
        let h = Classifier::logistic(vec![0.0, 0.0], 0.0);
        assert_eq!(h.classify_prob(&[3.0, -7.0]).unwrap(), 0.5);
        let h = Classifier::logistic(vec![1.5, -0.5], 0.2);
        let mut prev = 0.0;
        for i in 0..20 {
            let p = h.classify_prob(&[i as f64 * 0.3 - 3.0, 1.0]).unwrap();
            assert!(p > prev && (0.0..=1.0).contains(&p));
            prev = p;
        }
        assert!(h.classify_prob(&[1.0]).is_err());
    }

    #[test]
    fn cost_examples() {
        let iv = Intervention::new(vec![0, 1], vec![1.0, 2.0]).unwrap();
        assert_eq!(cost(&iv, &[1.0, 2.0], &[1.0, 1.0]).unwrap(), 0.0);
        let iv = Intervention::single(0, 1.0);
        assert_eq!(cost(&iv, &[0.0], &[2.0]).unwrap(), 0.5);
        let iv = Intervention::new(vec![0, 1], vec![0.3, 0.4]).unwrap();
        assert!((cost(&iv, &[0.0, 0.0], &[1.0, 1.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(cost(&iv, &[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    fn one_node() -> ClosedFormScm {
        ClosedFormScm::new(CausalGraph::chain(1), vec![Equation::Exogenous], vec![NoiseDist::Uniform { low: 0.0, high: 1.0 }]).unwrap()
    }

    #[test]
    fn toy_recourse_hits_threshold() {
        let scm = one_node();
        let f = Factum::with_noise(vec![0.0], vec![0.0]);
        let s = OracleSampler::counterfactual(&scm, &f).unwrap();
        let h = Classifier::logistic(vec![1e3], -1e3);
        let cfg = RecourseConfig::new(vec![0], vec![(0.0, 1.0)]);
        let r = find_recourse(&s, scm.graph(), &f.x, &h, &cfg).unwrap();
        assert!(r.feasible);
        let step = 1.4 / 9.0;
        assert!(r.action.values[0] >= 1.0 && r.action.values[0] <= 1.0 + step / 10.0 + 1e-12);
        assert!((r.cost - 1.0).abs() <= step);
        assert_eq!(r.success_prob, 1.0);
        // refinement never increases cost over the coarse incumbent
        let coarse = RecourseConfig {
            refine_factor: 1,
            ..cfg.clone()
        };
        let c = find_recourse(&s, scm.graph(), &f.x, &h, &coarse).unwrap();
        assert!(r.cost <= c.cost);
    }

    #[test]
    fn positive_factum_and_infeasible_cases() {
        let scm = one_node();
        let f = Factum::with_noise(vec![0.0], vec![0.0]);
        let s = OracleSampler::counterfactual(&scm, &f).unwrap();
        let cfg = RecourseConfig::new(vec![0], vec![(0.0, 1.0)]);
        let pos = Classifier::Constant { dim: 1, prob: 1.0 };
        let r = find_recourse(&s, scm.graph(), &f.x, &pos, &cfg).unwrap();
        assert!(r.feasible && r.cost == 0.0 && r.action.is_empty());
        let neg = Classifier::Constant { dim: 1, prob: 0.0 };
        let r = find_recourse(&s, scm.graph(), &f.x, &neg, &cfg).unwrap();
        assert!(!r.feasible);
        let iv = Intervention::single(0, 0.5);
        assert_eq!(success_probability(&s, scm.graph(), &f.x, &iv, &pos, 10).unwrap(), 1.0);
        assert_eq!(success_probability(&s, scm.graph(), &f.x, &iv, &neg, 10).unwrap(), 0.0);
    }

    #[test]
    fn deterministic_scm_gives_same_result_in_both_modes() {
        let scm = ClosedFormScm::new(
            CausalGraph::chain(2),
            vec![Equation::Exogenous, Equation::Linear { bias: 0.0, weights: vec![1.0] }],
            vec![NoiseDist::PointMass(0.0), NoiseDist::PointMass(0.0)],
        )
        .unwrap();
        let f = Factum::with_noise(vec![0.0, 0.0], vec![0.0, 0.0]);
        let h = Classifier::logistic(vec![0.0, 1e3], -1e3);
        let cfg = RecourseConfig::new(vec![0, 1], vec![(-1.0, 1.0), (-1.0, 1.0)]);
        let cf = OracleSampler::counterfactual(&scm, &f).unwrap();
        let cate = OracleSampler::interventional(&scm, 4);
        let a = find_recourse(&cf, scm.graph(), &f.x, &h, &cfg).unwrap();
        let b = find_recourse(&cate, scm.graph(), &f.x, &h, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.feasible);
    }
}

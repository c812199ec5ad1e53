//! Causal graphs, closed-form structural causal models, interventions and
//! ground-truth counterfactuals.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Directed acyclic graph over named nodes; parents are stored by index.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalGraph {
    names: Vec<String>,
    parents: Vec<Vec<usize>>,
    order: Vec<usize>,
}

impl CausalGraph {
    pub fn new(names: Vec<String>, parents: Vec<Vec<usize>>) -> Result<Self> {
        if names.len() != parents.len() {
            return Err(Error::Structure(format!(
                "{} nodes but {} parent lists",
                names.len(),
                parents.len()
            )));
        }
        let d = names.len();
        for (r, ps) in parents.iter().enumerate() {
            for (i, &p) in ps.iter().enumerate() {
                if p >= d {
                    return Err(Error::Structure(format!(
                        "node {} lists unknown parent index {p}",
                        names[r]
                    )));
                }
                if ps[..i].contains(&p) {
                    return Err(Error::Structure(format!(
                        "node {} lists parent {} twice",
                        names[r], names[p]
                    )));
                }
            }
        }
        let order = topological_order(&names, &parents)?;
        Ok(Self { names, parents, order })
    }

    /// Builds a graph from parent *names*.
    pub fn from_names(names: Vec<String>, parents: Vec<Vec<String>>) -> Result<Self> {
        let index: HashMap<&str, usize> =
            names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let mut idx = Vec::with_capacity(parents.len());
        for (r, ps) in parents.iter().enumerate() {
            let mut row = Vec::with_capacity(ps.len());
            for p in ps {
                let &i = index.get(p.as_str()).ok_or_else(|| {
                    Error::Structure(format!(
                        "node {} lists unknown parent {p}",
                        names.get(r).map(String::as_str).unwrap_or("?")
                    ))
                })?;
                row.push(i);
            }
            idx.push(row);
        }
        Self::new(names, idx)
    }

    /// A chain `x1 → x2 → … → xd`.
    pub fn chain(d: usize) -> Self {
        let names = (1..=d).map(|i| format!("x{i}")).collect();
        let parents = (0..d).map(|i| if i == 0 { vec![] } else { vec![i - 1] }).collect();
        Self::new(names, parents).expect("chain is acyclic")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn parents(&self, node: usize) -> &[usize] {
        &self.parents[node]
    }

    pub fn is_root(&self, node: usize) -> bool {
        self.parents[node].is_empty()
    }

    pub fn roots(&self) -> Vec<usize> {
        (0..self.len()).filter(|&r| self.is_root(r)).collect()
    }

    /// Nodes in an order where every node follows its parents.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// All strict descendants of any node in `sources`.
    pub fn descendants(&self, sources: &[usize]) -> Vec<bool> {
        let mut desc = vec![false; self.len()];
        for &r in &self.order {
            if self.parents[r].iter().any(|&p| desc[p] || sources.contains(&p)) {
                desc[r] = true;
            }
        }
        desc
    }

    /// All strict ancestors of `node`.
    pub fn ancestors(&self, node: usize) -> Vec<usize> {
        let mut seen = vec![false; self.len()];
        let mut stack = self.parents[node].clone();
        while let Some(p) = stack.pop() {
            if !seen[p] {
                seen[p] = true;
                stack.extend_from_slice(&self.parents[p]);
            }
        }
        (0..self.len()).filter(|&i| seen[i]).collect()
    }
}

/// Kahn's algorithm; ties are broken by node index so the order is stable.
pub fn topological_order(names: &[String], parents: &[Vec<usize>]) -> Result<Vec<usize>> {
    let d = parents.len();
    let mut indegree: Vec<usize> = parents.iter().map(Vec::len).collect();
    let mut children = vec![Vec::new(); d];
    for (r, ps) in parents.iter().enumerate() {
        for &p in ps {
            children[p].push(r);
        }
    }
    let mut ready: std::collections::BTreeSet<usize> =
        (0..d).filter(|&r| indegree[r] == 0).collect();
    let mut order = Vec::with_capacity(d);
    while let Some(&r) = ready.iter().next() {
        ready.remove(&r);
        order.push(r);
        for &c in &children[r] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.insert(c);
            }
        }
    }
    if order.len() < d {
        // any remaining node with a remaining parent sits on or behind a cycle;
        // walk parents until a node repeats to name an edge on the cycle.
        let placed: Vec<bool> = {
            let mut v = vec![false; d];
            order.iter().for_each(|&r| v[r] = true);
            v
        };
        let mut cur = (0..d).find(|&r| !placed[r]).unwrap();
        let mut visited = vec![false; d];
        loop {
            visited[cur] = true;
            let p = *parents[cur].iter().find(|&&p| !placed[p]).unwrap();
            if visited[p] {
                return Err(Error::Structure(format!(
                    "cycle detected through edge {} -> {}",
                    names[p], names[cur]
                )));
            }
            cur = p;
        }
    }
    Ok(order)
}

/// ζ_φ: shifts `u` by `phi` on the unit circle `[0, 1)`.
pub fn zeta_phi(u: f64, phi: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&u) || !(0.0..1.0).contains(&phi) {
        return Err(Error::invalid(format!(
            "zeta_phi needs u in [0,1] and phi in [0,1), got u={u}, phi={phi}"
        )));
    }
    Ok(zeta_unchecked(u, phi))
}

fn zeta_unchecked(u: f64, phi: f64) -> f64 {
    if u + phi >= 1.0 {
        u + phi - 1.0
    } else {
        u + phi
    }
}

/// Inverse of [`zeta_phi`] on `[0, 1)`.
pub fn zeta_phi_inverse(v: f64, phi: f64) -> f64 {
    if v < phi {
        v + 1.0 - phi
    } else {
        v - phi
    }
}

/// Structural equation `x_r = f_r(parents, u_r)`.
///
/// Parent values are passed in the order of the graph's parent list.
#[derive(Debug, Clone, PartialEq)]
pub enum Equation {
    /// `x = u`
    Exogenous,
    /// `x = value`, produced by an intervention.
    Constant(f64),
    /// `x = bias + w·pa + u`
    Linear { bias: f64, weights: Vec<f64> },
    /// `x = bias + lin·pa + scale·tanh(offset + w·pa) + u`
    Saturating {
        bias: f64,
        scale: f64,
        offset: f64,
        linear: Vec<f64>,
        inner: Vec<f64>,
    },
    /// `x = bias + lin·pa + quad·pa² + u`
    Quadratic { bias: f64, linear: Vec<f64>, quad: Vec<f64> },
    /// `x = lin·pa + (c0 + c·pa²)·(sgn(u) + slope·u)`: a two-branch
    /// conditional whose spread grows with the parents.
    Bimodal {
        slope: f64,
        c0: f64,
        linear: Vec<f64>,
        spread: Vec<f64>,
    },
    /// `x = bias + lin·pa + (s0 + s·|pa|)·u`
    Heteroscedastic {
        bias: f64,
        s0: f64,
        linear: Vec<f64>,
        spread: Vec<f64>,
    },
    /// `x2 = 1{x1<0.5}·u·x1 + 1{x1≥0.5}·ζ_φ(u)` with a single parent `x1`.
    Illustrative { phi: f64 },
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Equation {
    /// Number of parents this equation expects, if fixed by its coefficients.
    fn arity(&self) -> Option<usize> {
        match self {
            Equation::Exogenous => Some(0),
            Equation::Constant(_) => None,
            Equation::Linear { weights, .. } => Some(weights.len()),
            Equation::Saturating { linear, .. } => Some(linear.len()),
            Equation::Quadratic { linear, .. } => Some(linear.len()),
            Equation::Bimodal { linear, .. } => Some(linear.len()),
            Equation::Heteroscedastic { linear, .. } => Some(linear.len()),
            Equation::Illustrative { .. } => Some(1),
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Structure(m.to_string()));
        match self {
            Equation::Saturating { linear, inner, .. } if linear.len() != inner.len() => {
                bad("saturating: linear and inner weights differ in length")
            }
            Equation::Quadratic { linear, quad, .. } if linear.len() != quad.len() => {
                bad("quadratic: linear and quad weights differ in length")
            }
            Equation::Bimodal { linear, spread, .. } if linear.len() != spread.len() => {
                bad("bimodal: linear and spread weights differ in length")
            }
            Equation::Heteroscedastic { linear, spread, .. } if linear.len() != spread.len() => {
                bad("heteroscedastic: linear and spread weights differ in length")
            }
            Equation::Illustrative { phi } if !(0.0..1.0).contains(phi) => {
                bad("illustrative: phi must lie in [0,1)")
            }
            _ => Ok(()),
        }
    }

    pub fn evaluate(&self, pa: &[f64], u: f64) -> f64 {
        match self {
            Equation::Exogenous => u,
            Equation::Constant(v) => *v,
            Equation::Linear { bias, weights } => bias + dot(weights, pa) + u,
            Equation::Saturating {
                bias,
                scale,
                offset,
                linear,
                inner,
            } => bias + dot(linear, pa) + scale * (offset + dot(inner, pa)).tanh() + u,
            Equation::Quadratic { bias, linear, quad } => {
                bias + dot(linear, pa) + quad.iter().zip(pa).map(|(q, p)| q * p * p).sum::<f64>() + u
            }
            Equation::Bimodal {
                slope,
                c0,
                linear,
                spread,
            } => {
                let s = c0 + spread.iter().zip(pa).map(|(c, p)| c * p * p).sum::<f64>();
                let sign = if u >= 0.0 { 1.0 } else { -1.0 };
                dot(linear, pa) + s * (sign + slope * u)
            }
            Equation::Heteroscedastic {
                bias,
                s0,
                linear,
                spread,
            } => {
                let s = s0 + spread.iter().zip(pa).map(|(c, p)| c * p.abs()).sum::<f64>();
                bias + dot(linear, pa) + s * u
            }
            Equation::Illustrative { phi } => {
                let x1 = pa[0];
                if x1 < 0.5 {
                    u * x1
                } else {
                    zeta_unchecked(u.clamp(0.0, 1.0), *phi)
                }
            }
        }
    }

    /// Serializable `(id, coefficients)` form.
    pub fn to_spec(&self) -> EquationSpec {
        let (id, coefficients): (&str, Vec<f64>) = match self {
            Equation::Exogenous => ("exogenous", vec![]),
            Equation::Constant(v) => ("constant", vec![*v]),
            Equation::Linear { bias, weights } => {
                ("linear", std::iter::once(*bias).chain(weights.iter().copied()).collect())
            }
            Equation::Saturating {
                bias,
                scale,
                offset,
                linear,
                inner,
            } => (
                "saturating",
                [*bias, *scale, *offset]
                    .into_iter()
                    .chain(linear.iter().copied())
                    .chain(inner.iter().copied())
                    .collect(),
            ),
            Equation::Quadratic { bias, linear, quad } => (
                "quadratic",
                std::iter::once(*bias)
                    .chain(linear.iter().copied())
                    .chain(quad.iter().copied())
                    .collect(),
            ),
            Equation::Bimodal {
                slope,
                c0,
                linear,
                spread,
            } => (
                "bimodal",
                [*slope, *c0]
                    .into_iter()
                    .chain(linear.iter().copied())
                    .chain(spread.iter().copied())
                    .collect(),
            ),
            Equation::Heteroscedastic {
                bias,
                s0,
                linear,
                spread,
            } => (
                "heteroscedastic",
                [*bias, *s0]
                    .into_iter()
                    .chain(linear.iter().copied())
                    .chain(spread.iter().copied())
                    .collect(),
            ),
            Equation::Illustrative { phi } => ("illustrative", vec![*phi]),
        };
        EquationSpec {
            id: id.to_string(),
            coefficients,
        }
    }

    /// Parses an `(id, coefficients)` pair for a node with `arity` parents.
    pub fn from_spec(spec: &EquationSpec, arity: usize) -> Result<Self> {
        let c = &spec.coefficients;
        let need = |n: usize| -> Result<()> {
            if c.len() != n {
                Err(Error::Structure(format!(
                    "equation '{}' with {arity} parents needs {n} coefficients, got {}",
                    spec.id,
                    c.len()
                )))
            } else {
                Ok(())
            }
        };
        let k = arity;
        let eq = match spec.id.as_str() {
            "exogenous" => {
                need(0)?;
                Equation::Exogenous
            }
            "constant" => {
                need(1)?;
                Equation::Constant(c[0])
            }
            "linear" => {
                need(1 + k)?;
                Equation::Linear {
                    bias: c[0],
                    weights: c[1..].to_vec(),
                }
            }
            "saturating" => {
                need(3 + 2 * k)?;
                Equation::Saturating {
                    bias: c[0],
                    scale: c[1],
                    offset: c[2],
                    linear: c[3..3 + k].to_vec(),
                    inner: c[3 + k..].to_vec(),
                }
            }
            "quadratic" => {
                need(1 + 2 * k)?;
                Equation::Quadratic {
                    bias: c[0],
                    linear: c[1..1 + k].to_vec(),
                    quad: c[1 + k..].to_vec(),
                }
            }
            "bimodal" => {
                need(2 + 2 * k)?;
                Equation::Bimodal {
                    slope: c[0],
                    c0: c[1],
                    linear: c[2..2 + k].to_vec(),
                    spread: c[2 + k..].to_vec(),
                }
            }
            "heteroscedastic" => {
                need(2 + 2 * k)?;
                Equation::Heteroscedastic {
                    bias: c[0],
                    s0: c[1],
                    linear: c[2..2 + k].to_vec(),
                    spread: c[2 + k..].to_vec(),
                }
            }
            "illustrative" => {
                need(1)?;
                if k != 1 {
                    return Err(Error::Structure("illustrative equation needs one parent".into()));
                }
                Equation::Illustrative { phi: c[0] }
            }
            other => return Err(Error::Structure(format!("unknown equation id '{other}'"))),
        };
        eq.validate()?;
        Ok(eq)
    }
}

/// Exogenous noise law `P_{U_r}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseDist {
    Normal { mean: f64, std: f64 },
    Uniform { low: f64, high: f64 },
    PointMass(f64),
}

impl NoiseDist {
    pub fn standard_normal() -> Self {
        NoiseDist::Normal { mean: 0.0, std: 1.0 }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            NoiseDist::Normal { mean, std } => {
                mean + std * Normal::new(0.0, 1.0).expect("unit normal").sample(rng)
            }
            NoiseDist::Uniform { low, high } => {
                Uniform::new(low, high).expect("validated bounds").sample(rng)
            }
            NoiseDist::PointMass(v) => v,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            NoiseDist::Normal { mean, std } if mean.is_finite() && std.is_finite() && std >= 0.0 => {
                Ok(())
            }
            NoiseDist::Uniform { low, high } if low.is_finite() && high.is_finite() && low < high => {
                Ok(())
            }
            NoiseDist::PointMass(v) if v.is_finite() => Ok(()),
            other => Err(Error::Structure(format!("invalid noise distribution {other:?}"))),
        }
    }

    pub fn to_spec(&self) -> NoiseSpec {
        let (family, params) = match *self {
            NoiseDist::Normal { mean, std } => ("normal", vec![mean, std]),
            NoiseDist::Uniform { low, high } => ("uniform", vec![low, high]),
            NoiseDist::PointMass(v) => ("point_mass", vec![v]),
        };
        NoiseSpec {
            family: family.into(),
            params,
        }
    }

    pub fn from_spec(spec: &NoiseSpec) -> Result<Self> {
        let p = &spec.params;
        let d = match (spec.family.as_str(), p.len()) {
            ("normal", 2) => NoiseDist::Normal { mean: p[0], std: p[1] },
            ("uniform", 2) => NoiseDist::Uniform { low: p[0], high: p[1] },
            ("point_mass", 1) => NoiseDist::PointMass(p[0]),
            (f, n) => {
                return Err(Error::Structure(format!(
                    "unknown noise family '{f}' with {n} parameters"
                )))
            }
        };
        d.validate()?;
        Ok(d)
    }
}

/// `do(X_targets = values)`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Intervention {
    pub targets: Vec<usize>,
    pub values: Vec<f64>,
}

impl Intervention {
    pub fn new(targets: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let iv = Self { targets, values };
        iv.check_shape()?;
        Ok(iv)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn single(target: usize, value: f64) -> Self {
        Self {
            targets: vec![target],
            values: vec![value],
        }
    }

    fn check_shape(&self) -> Result<()> {
        if self.targets.len() != self.values.len() {
            return Err(Error::invalid("intervention targets and values differ in length"));
        }
        for (i, t) in self.targets.iter().enumerate() {
            if self.targets[..i].contains(t) {
                return Err(Error::invalid(format!("intervention target {t} repeated")));
            }
        }
        if let Some(v) = self.values.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("intervention value {v} is not finite")));
        }
        Ok(())
    }

    /// Checks shape and that every target exists in a `d`-node graph.
    pub fn validate(&self, d: usize) -> Result<()> {
        self.check_shape()?;
        if let Some(t) = self.targets.iter().find(|&&t| t >= d) {
            return Err(Error::invalid(format!("unknown intervention target node {t}")));
        }
        Ok(())
    }

    pub fn value_of(&self, node: usize) -> Option<f64> {
        self.targets.iter().position(|&t| t == node).map(|i| self.values[i])
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Per-node lookup table.
    pub fn as_dense(&self, d: usize) -> Vec<Option<f64>> {
        let mut v = vec![None; d];
        for (&t, &x) in self.targets.iter().zip(&self.values) {
            v[t] = Some(x);
        }
        v
    }

    /// `self` followed by `other`; targets of `other` override.
    pub fn merged(&self, other: &Intervention) -> Intervention {
        let mut out = other.clone();
        for (&t, &v) in self.targets.iter().zip(&self.values) {
            if !out.targets.contains(&t) {
                out.targets.push(t);
                out.values.push(v);
            }
        }
        out
    }
}

/// One observed individual `X^F`.
#[derive(Debug, Clone, PartialEq)]
pub struct Factum {
    pub x: Vec<f64>,
    pub u: Option<Vec<f64>>,
    pub label: Option<bool>,
}

impl Factum {
    pub fn new(x: Vec<f64>) -> Self {
        Self { x, u: None, label: None }
    }

    pub fn with_noise(x: Vec<f64>, u: Vec<f64>) -> Self {
        Self {
            x,
            u: Some(u),
            label: None,
        }
    }
}

/// Rows drawn by ancestral sampling together with the noise that made them.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub x: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn factum(&self, i: usize) -> Factum {
        Factum::with_noise(self.x[i].clone(), self.u[i].clone())
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.x.iter().map(|r| r[j]).collect()
    }
}

/// A fully specified SCM with closed-form structural equations.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedFormScm {
    graph: CausalGraph,
    equations: Vec<Equation>,
    noise: Vec<NoiseDist>,
}

impl ClosedFormScm {
    pub fn new(graph: CausalGraph, equations: Vec<Equation>, noise: Vec<NoiseDist>) -> Result<Self> {
        let d = graph.len();
        if equations.len() != d || noise.len() != d {
            return Err(Error::Structure(format!(
                "{d} nodes need {d} equations and noise laws, got {} and {}",
                equations.len(),
                noise.len()
            )));
        }
        for (r, eq) in equations.iter().enumerate() {
            eq.validate()?;
            if let Some(k) = eq.arity() {
                if k != graph.parents(r).len() {
                    return Err(Error::Structure(format!(
                        "equation of node {} expects {k} parents, graph declares {}",
                        graph.names()[r],
                        graph.parents(r).len()
                    )));
                }
            }
        }
        for n in &noise {
            n.validate()?;
        }
        Ok(Self {
            graph,
            equations,
            noise,
        })
    }

    pub fn graph(&self) -> &CausalGraph {
        &self.graph
    }

    pub fn equations(&self) -> &[Equation] {
        &self.equations
    }

    pub fn noise(&self) -> &[NoiseDist] {
        &self.noise
    }

    pub fn dim(&self) -> usize {
        self.graph.len()
    }

    /// `f_r(x_pa(r), u_r)` reading parent values out of a full row.
    pub fn evaluate_node(&self, node: usize, x: &[f64], u: f64) -> f64 {
        let ps = self.graph.parents(node);
        let mut buf = [0.0f64; 16];
        if ps.len() <= buf.len() {
            for (b, &p) in buf.iter_mut().zip(ps) {
                *b = x[p];
            }
            self.equations[node].evaluate(&buf[..ps.len()], u)
        } else {
            let pa: Vec<f64> = ps.iter().map(|&p| x[p]).collect();
            self.equations[node].evaluate(&pa, u)
        }
    }

    /// Evaluates all equations in topological order for noise `u`.
    pub fn propagate(&self, u: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        for &r in self.graph.order() {
            x[r] = self.evaluate_node(r, &x, u[r]);
        }
        x
    }

    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.noise.iter().map(|n| n.sample(rng)).collect()
    }

    /// Draws `n` rows by ancestral sampling; the noise used for each row is
    /// recorded alongside it.
    pub fn ancestral_sample(&self, n: usize, seed: u64) -> Result<SampleSet> {
        if n == 0 {
            return Err(Error::invalid("ancestral_sample needs n >= 1"));
        }
        let mut rng = rng::stream(seed);
        let mut x = Vec::with_capacity(n);
        let mut us = Vec::with_capacity(n);
        for _ in 0..n {
            let u = self.sample_noise(&mut rng);
            x.push(self.propagate(&u));
            us.push(u);
        }
        Ok(SampleSet { x, u: us })
    }

    /// Replaces the equations of intervened nodes by constants.
    pub fn apply_intervention(&self, iv: &Intervention) -> Result<Self> {
        iv.validate(self.dim())?;
        let mut out = self.clone();
        for (&t, &v) in iv.targets.iter().zip(&iv.values) {
            out.equations[t] = Equation::Constant(v);
        }
        Ok(out)
    }

    /// Evaluates the intervened equations at the factum's recorded noise.
    pub fn ground_truth_counterfactual(&self, factum: &Factum, iv: &Intervention) -> Result<Vec<f64>> {
        let u = factum.u.as_ref().ok_or(Error::MissingNoise)?;
        if u.len() != self.dim() {
            return Err(Error::invalid("noise record has wrong dimension"));
        }
        iv.validate(self.dim())?;
        let fixed = iv.as_dense(self.dim());
        let mut x = vec![0.0; self.dim()];
        for &r in self.graph.order() {
            x[r] = match fixed[r] {
                Some(v) => v,
                None => self.evaluate_node(r, &x, u[r]),
            };
        }
        Ok(x)
    }

    /// One draw from the interventional distribution with fresh noise;
    /// nodes listed in `iv` are fixed.
    pub fn interventional_draw<R: Rng + ?Sized>(&self, iv: &Intervention, rng: &mut R) -> Vec<f64> {
        let fixed = iv.as_dense(self.dim());
        let u = self.sample_noise(rng);
        let mut x = vec![0.0; self.dim()];
        for &r in self.graph.order() {
            x[r] = match fixed[r] {
                Some(v) => v,
                None => self.evaluate_node(r, &x, u[r]),
            };
        }
        x
    }

    /// Whether replaying `u` reproduces `x` to `tol`.
    pub fn replays(&self, x: &[f64], u: &[f64], tol: f64) -> bool {
        self.propagate(u).iter().zip(x).all(|(a, b)| (a - b).abs() <= tol)
    }

    pub fn to_config(&self) -> ScmConfig {
        let names = self.graph.names().to_vec();
        ScmConfig {
            parents: (0..self.dim())
                .map(|r| self.graph.parents(r).iter().map(|&p| names[p].clone()).collect())
                .collect(),
            nodes: names,
            equations: self.equations.iter().map(Equation::to_spec).collect(),
            noise: self.noise.iter().map(NoiseDist::to_spec).collect(),
        }
    }

    pub fn from_config(cfg: &ScmConfig) -> Result<Self> {
        let graph = CausalGraph::from_names(cfg.nodes.clone(), cfg.parents.clone())?;
        if cfg.equations.len() != graph.len() {
            return Err(Error::Structure("one equation per node required".into()));
        }
        let equations = cfg
            .equations
            .iter()
            .enumerate()
            .map(|(r, e)| Equation::from_spec(e, graph.parents(r).len()))
            .collect::<Result<Vec<_>>>()?;
        let noise = cfg.noise.iter().map(NoiseDist::from_spec).collect::<Result<Vec<_>>>()?;
        Self::new(graph, equations, noise)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquationSpec {
    pub id: String,
    #[serde(default)]
    pub coefficients: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub family: String,
    pub params: Vec<f64>,
}

/// JSON form of a [`ClosedFormScm`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmConfig {
    pub nodes: Vec<String>,
    pub parents: Vec<Vec<String>>,
    pub equations: Vec<EquationSpec>,
    pub noise: Vec<NoiseSpec>,
}

/// The two-node family whose members share observational and
/// interventional laws but differ in their counterfactuals.
pub fn illustrative_scm(phi: f64) -> Result<ClosedFormScm> {
    if !(0.0..1.0).contains(&phi) {
        return Err(Error::invalid(format!("phi must lie in [0,1), got {phi}")));
    }
    let graph = CausalGraph::new(vec!["x1".into(), "x2".into()], vec![vec![], vec![0]])?;
    ClosedFormScm::new(
        graph,
        vec![Equation::Exogenous, Equation::Illustrative { phi }],
        vec![
            NoiseDist::Uniform { low: 0.0, high: 1.0 },
            NoiseDist::Uniform { low: 0.0, high: 1.0 },
        ],
    )
}

/// Ground-truth score whose median threshold defines the binary label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreFunction {
    pub weights: Vec<f64>,
    #[serde(default)]
    pub quadratic: Vec<f64>,
    #[serde(default)]
    pub bias: f64,
}

impl ScoreFunction {
    pub fn score(&self, x: &[f64]) -> f64 {
        self.bias
            + dot(&self.weights, x)
            + self.quadratic.iter().zip(x).map(|(q, v)| q * v * v).sum::<f64>()
    }

    /// Median of scores over `rows`, the positive-label threshold.
    pub fn median_threshold(&self, rows: &[Vec<f64>]) -> f64 {
        let mut s: Vec<f64> = rows.iter().map(|r| self.score(r)).collect();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        if n % 2 == 1 {
            s[n / 2]
        } else {
            0.5 * (s[n / 2 - 1] + s[n / 2])
        }
    }
}

/// A benchmark: ground-truth SCM, label score and actionable nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub name: String,
    pub scm: ClosedFormScm,
    pub score: ScoreFunction,
    pub actionable: Vec<usize>,
}

/// JSON form of a [`Benchmark`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub name: String,
    pub scm: ScmConfig,
    pub score: ScoreFunction,
    /// Actionable node names; all nodes when absent.
    #[serde(default)]
    pub actionable: Option<Vec<String>>,
}

impl Benchmark {
    pub fn to_config(&self) -> BenchmarkConfig {
        let names = self.scm.graph().names();
        BenchmarkConfig {
            name: self.name.clone(),
            scm: self.scm.to_config(),
            score: self.score.clone(),
            actionable: Some(self.actionable.iter().map(|&i| names[i].clone()).collect()),
        }
    }

    pub fn from_config(cfg: &BenchmarkConfig) -> Result<Self> {
        let scm = ClosedFormScm::from_config(&cfg.scm)?;
        if cfg.score.weights.len() != scm.dim()
            || !(cfg.score.quadratic.is_empty() || cfg.score.quadratic.len() == scm.dim())
        {
            return Err(Error::Structure("score weights must have one entry per node".into()));
        }
        let actionable = match &cfg.actionable {
            None => (0..scm.dim()).collect(),
            Some(names) => names
                .iter()
                .map(|n| {
                    scm.graph()
                        .index_of(n)
                        .ok_or_else(|| Error::Structure(format!("unknown actionable node {n}")))
                })
                .collect::<Result<Vec<_>>>()?,
        };
        Ok(Self {
            name: cfg.name.clone(),
            scm,
            score: cfg.score.clone(),
            actionable,
        })
    }
}

pub const BENCHMARK_NAMES: [&str; 4] = ["linear3", "nonlinear3", "nonadditive3", "semisynth7"];

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn normal(std: f64) -> NoiseDist {
    NoiseDist::Normal { mean: 0.0, std }
}

/// Ground-truth SCM of a named benchmark.
pub fn benchmark_scm(name: &str) -> Result<ClosedFormScm> {
    Ok(benchmark(name)?.scm)
}

/// Built-in benchmark definitions.
pub fn benchmark(name: &str) -> Result<Benchmark> {
    let chain3 = || CausalGraph::new(names(&["x1", "x2", "x3"]), vec![vec![], vec![0], vec![0, 1]]);
    let b = match name {
        "linear3" => Benchmark {
            name: name.into(),
            scm: ClosedFormScm::new(
                chain3()?,
                vec![
                    Equation::Exogenous,
                    Equation::Linear { bias: 0.0, weights: vec![-1.0] },
                    Equation::Linear { bias: 0.0, weights: vec![0.5, 0.5] },
                ],
                vec![normal(1.0); 3],
            )?,
            score: ScoreFunction {
                weights: vec![1.5, 1.0, 1.0],
                quadratic: vec![],
                bias: 0.0,
            },
            actionable: vec![0, 1, 2],
        },
        "nonlinear3" => Benchmark {
            name: name.into(),
            scm: ClosedFormScm::new(
                chain3()?,
                vec![
                    Equation::Exogenous,
                    // -1 + 3/(1+exp(-2 x1)) written through tanh
                    Equation::Saturating {
                        bias: 0.5,
                        scale: 1.5,
                        offset: 0.0,
                        linear: vec![0.0],
                        inner: vec![1.0],
                    },
                    Equation::Saturating {
                        bias: 0.0,
                        scale: 2.0,
                        offset: -0.3,
                        linear: vec![0.0, 0.0],
                        inner: vec![0.3, 0.6],
                    },
                ],
                vec![normal(1.0), normal(0.5), normal(0.5)],
            )?,
            score: ScoreFunction {
                weights: vec![1.0, 1.0, 1.0],
                quadratic: vec![],
                bias: 0.0,
            },
            actionable: vec![0, 1, 2],
        },
        "nonadditive3" => Benchmark {
            name: name.into(),
            scm: ClosedFormScm::new(
                chain3()?,
                vec![
                    Equation::Exogenous,
                    Equation::Bimodal {
                        slope: 0.5,
                        c0: 0.5,
                        linear: vec![0.5],
                        spread: vec![0.25],
                    },
                    Equation::Heteroscedastic {
                        bias: 0.0,
                        s0: 0.3,
                        linear: vec![0.5, 0.5],
                        spread: vec![0.0, 0.3],
                    },
                ],
                vec![normal(1.0); 3],
            )?,
            score: ScoreFunction {
                weights: vec![1.0, 1.0, 1.0],
                quadratic: vec![],
                bias: 0.0,
            },
            actionable: vec![0, 1, 2],
        },
        "semisynth7" => {
            // gender, age, education, loan amount, duration, income, savings
            let g = CausalGraph::new(
                names(&["gender", "age", "education", "loan", "duration", "income", "savings"]),
                vec![
                    vec![],
                    vec![],
                    vec![0, 1],
                    vec![0, 1],
                    vec![1, 3],
                    vec![0, 1, 2],
                    vec![5],
                ],
            )?;
            let scm = ClosedFormScm::new(
                g,
                vec![
                    Equation::Exogenous,
                    Equation::Exogenous,
                    Equation::Saturating {
                        bias: 0.0,
                        scale: 1.0,
                        offset: 0.0,
                        linear: vec![0.3, 0.0],
                        inner: vec![0.0, 1.0],
                    },
                    Equation::Linear { bias: 1.0, weights: vec![0.3, 0.5] },
                    Equation::Heteroscedastic {
                        bias: 0.0,
                        s0: 0.4,
                        linear: vec![0.25, 0.5],
                        spread: vec![0.0, 0.2],
                    },
                    Equation::Quadratic {
                        bias: 0.2,
                        linear: vec![0.2, 0.4, 0.5],
                        quad: vec![0.0, -0.2, 0.0],
                    },
                    Equation::Quadratic {
                        bias: 0.0,
                        linear: vec![0.8],
                        quad: vec![0.15],
                    },
                ],
                vec![
                    normal(1.0),
                    normal(1.0),
                    normal(0.5),
                    normal(0.5),
                    normal(1.0),
                    normal(0.5),
                    normal(0.5),
                ],
            )?;
            Benchmark {
                name: name.into(),
                scm,
                score: ScoreFunction {
                    weights: vec![0.0, 0.0, 0.3, -0.8, -0.5, 0.8, 0.8],
                    quadratic: vec![],
                    bias: 0.0,
                },
                actionable: vec![2, 3, 4, 5, 6],
            }
        }
        other => {
            return Err(Error::invalid(format!(
                "unknown benchmark '{other}', expected one of {BENCHMARK_NAMES:?}"
            )))
        }
    };
    Ok(b)
}

/// Writes rows as CSV with header `node_0,…` and optional `u_0,…` columns.
pub fn write_dataset_csv<W: Write>(w: W, x: &[Vec<f64>], u: Option<&[Vec<f64>]>) -> Result<()> {
    let d = x.first().map_or(0, Vec::len);
    let mut wr = csv::Writer::from_writer(w);
    let mut header: Vec<String> = (0..d).map(|i| format!("node_{i}")).collect();
    if u.is_some() {
        header.extend((0..d).map(|i| format!("u_{i}")));
    }
    wr.write_record(&header)?;
    for (i, row) in x.iter().enumerate() {
        let mut rec: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        if let Some(us) = u {
            rec.extend(us[i].iter().map(|v| format!("{v:?}")));
        }
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

/// Reads a dataset CSV; returns rows and, when present, noise columns.
pub fn read_dataset_csv<R: Read>(r: R) -> Result<(Vec<Vec<f64>>, Option<Vec<Vec<f64>>>)> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers()?.clone();
    let x_cols: Vec<usize> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("node_"))
        .map(|(i, _)| i)
        .collect();
    let u_cols: Vec<usize> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("u_"))
        .map(|(i, _)| i)
        .collect();
    let mut xs = Vec::new();
    let mut us = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            rec[i]
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::invalid(format!("bad number '{}': {e}", &rec[i])))
        };
        xs.push(x_cols.iter().map(|&i| parse(i)).collect::<Result<Vec<_>>>()?);
        if !u_cols.is_empty() {
            us.push(u_cols.iter().map(|&i| parse(i)).collect::<Result<Vec<_>>>()?);
        }
    }
    Ok((xs, if u_cols.is_empty() { None } else { Some(us) }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ks_uniform(mut v: Vec<f64>) -> f64 {
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        v.iter()
            .enumerate()
            .map(|(i, &x)| {
                let c = x.clamp(0.0, 1.0);
                (c - i as f64 / n).abs().max(((i + 1) as f64 / n - c).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn topological_order_examples() {
        let g = CausalGraph::chain(3);
        assert_eq!(g.order(), &[0, 1, 2]);
        let single = CausalGraph::new(vec!["x1".into()], vec![vec![]]).unwrap();
        assert_eq!(single.order(), &[0]);
        let err = CausalGraph::new(vec!["x1".into(), "x2".into()], vec![vec![1], vec![0]]).unwrap_err();
        assert!(matches!(err, Error::Structure(ref m) if m.contains("cycle")), "{err}");
    }

    #[test]
    fn order_respects_parents_in_semisynth() {
        let scm = benchmark_scm("semisynth7").unwrap();
        let g = scm.graph();
        let pos: Vec<usize> = {
            let mut p = vec![0; g.len()];
            g.order().iter().enumerate().for_each(|(i, &r)| p[r] = i);
            p
        };
        for r in 0..g.len() {
            for &p in g.parents(r) {
                assert!(pos[p] < pos[r]);
            }
        }
    }

    #[test]
    fn unknown_parent_name_is_structural_error() {
        let e = CausalGraph::from_names(vec!["a".into()], vec![vec!["b".into()]]).unwrap_err();
        assert!(matches!(e, Error::Structure(_)));
    }

    #[test]
    fn zeta_examples() {
        assert!((zeta_phi(0.8, 0.3).unwrap() - 0.1).abs() < 1e-15);
        assert!((zeta_phi(0.2, 0.3).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(zeta_phi(0.37, 0.0).unwrap(), 0.37);
        assert!(zeta_phi(1.2, 0.1).is_err());
        assert!(zeta_phi(0.2, 1.0).is_err());
    }

    #[test]
    fn zeta_is_a_measure_preserving_bijection() {
        for &phi in &[0.0, 0.13, 0.5, 0.77] {
            let n = 1000;
            let grid: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
            let mut image: Vec<f64> = grid.iter().map(|&u| zeta_phi(u, phi).unwrap()).collect();
            for (&u, &v) in grid.iter().zip(&image) {
                assert!((zeta_phi_inverse(v, phi) - u).abs() < 1e-12);
            }
            image.sort_by(f64::total_cmp);
            for (i, v) in image.iter().enumerate() {
                assert!((v - i as f64 / n as f64).abs() < 1e-12, "phi={phi} i={i} v={v}");
            }
        }
    }

    #[test]
    fn point_mass_root_samples() {
        let g = CausalGraph::chain(1);
        let scm = ClosedFormScm::new(g, vec![Equation::Exogenous], vec![NoiseDist::PointMass(0.5)]).unwrap();
        let s = scm.ancestral_sample(3, 1).unwrap();
        assert_eq!(s.x, vec![vec![0.5]; 3]);
        assert!(scm.ancestral_sample(0, 1).is_err());
    }

    #[test]
    fn illustrative_conditional_is_uniform_for_every_phi() {
        for (k, &phi) in [0.0, 0.25, 0.5, 0.9].iter().enumerate() {
            let scm = illustrative_scm(phi).unwrap();
            // 10^4 draws from the conditional
            let s = scm.ancestral_sample(24_000, 100 + k as u64).unwrap();
            let upper: Vec<f64> = s.x.iter().filter(|r| r[0] >= 0.5).map(|r| r[1]).take(10_000).collect();
            assert_eq!(upper.len(), 10_000);
            let ks = ks_uniform(upper);
            assert!(ks < 0.02, "phi={phi} ks={ks}");
            let x1: Vec<f64> = s.column(0);
            assert!(ks_uniform(x1) < 0.02);
        }
    }

    #[test]
    fn replay_reproduces_rows() {
        for name in BENCHMARK_NAMES {
            let scm = benchmark_scm(name).unwrap();
            let s = scm.ancestral_sample(500, 3).unwrap();
            for (x, u) in s.x.iter().zip(&s.u) {
                assert!(scm.replays(x, u, 1e-12));
            }
        }
    }

    #[test]
    fn intervention_fixes_targets_and_keeps_others() {
        let scm = illustrative_scm(0.3).unwrap();
        let ivd = scm.apply_intervention(&Intervention::single(0, 0.7)).unwrap();
        let s = ivd.ancestral_sample(200, 9).unwrap();
        assert!(s.x.iter().all(|r| r[0] == 0.7));
        assert_eq!(scm.apply_intervention(&Intervention::empty()).unwrap(), scm);
        let ivd2 = scm.apply_intervention(&Intervention::single(1, 0.42)).unwrap();
        let a = ivd2.ancestral_sample(200, 5).unwrap();
        let b = scm.ancestral_sample(200, 5).unwrap();
        assert!(a.x.iter().all(|r| r[1] == 0.42));
        assert_eq!(a.column(0), b.column(0));
        assert!(scm.apply_intervention(&Intervention::single(5, 1.0)).is_err());
    }

    #[test]
    fn ground_truth_counterfactual_examples() {
        let f = Factum::with_noise(vec![0.25, 0.05], vec![0.25, 0.2]);
        let scm0 = illustrative_scm(0.0).unwrap();
        assert!(scm0.replays(&f.x, f.u.as_ref().unwrap(), 1e-12));
        let cf = scm0.ground_truth_counterfactual(&f, &Intervention::single(0, 0.8)).unwrap();
        assert!((cf[1] - 0.2).abs() < 1e-12);
        let scm5 = illustrative_scm(0.5).unwrap();
        let cf = scm5.ground_truth_counterfactual(&f, &Intervention::single(0, 0.8)).unwrap();
        assert!((cf[1] - 0.7).abs() < 1e-12);
        let err = scm5
            .ground_truth_counterfactual(&Factum::new(vec![0.1, 0.1]), &Intervention::empty())
            .unwrap_err();
        assert!(matches!(err, Error::MissingNoise));
    }

    #[test]
    fn factual_intervention_returns_factum() {
        let scm = benchmark_scm("nonlinear3").unwrap();
        let s = scm.ancestral_sample(50, 4).unwrap();
        for i in 0..s.len() {
            let f = s.factum(i);
            let iv = Intervention::new(vec![0, 1], vec![f.x[0], f.x[1]]).unwrap();
            assert_eq!(scm.ground_truth_counterfactual(&f, &iv).unwrap(), f.x);
        }
    }

    #[test]
    fn abduction_below_half_is_phi_independent() {
        // u2 = x2 / x1 when x1 < 0.5 regardless of phi
        let (x1, x2) = (0.22, 0.08);
        let u2 = x2 / x1;
        for &phi in &[0.0, 0.3, 0.8] {
            let scm = illustrative_scm(phi).unwrap();
            let x = scm.propagate(&[x1, u2]);
            assert!((x[1] - x2).abs() < 1e-15);
        }
    }

    #[test]
    fn linear3_without_noise_is_linear() {
        let mut cfg = benchmark_scm("linear3").unwrap().to_config();
        for n in cfg.noise.iter_mut().skip(1) {
            n.params = vec![0.0, 0.0];
        }
        let scm = ClosedFormScm::from_config(&cfg).unwrap();
        let s = scm.ancestral_sample(20, 2).unwrap();
        for r in &s.x {
            assert!((r[1] + r[0]).abs() < 1e-15);
            assert!((r[2] - 0.5 * (r[0] + r[1])).abs() < 1e-15);
        }
    }

    #[test]
    fn nonadditive3_has_parent_dependent_spread() {
        let scm = benchmark_scm("nonadditive3").unwrap();
        let s = scm.ancestral_sample(10_000, 11).unwrap();
        let mut rows = s.x.clone();
        rows.sort_by(|a, b| a[0].total_cmp(&b[0]));
        let vars: Vec<f64> = rows
            .chunks(1000)
            .map(|c| {
                let m = c.iter().map(|r| r[1]).sum::<f64>() / c.len() as f64;
                c.iter().map(|r| (r[1] - m).powi(2)).sum::<f64>() / (c.len() - 1) as f64
            })
            .collect();
        let max = vars.iter().cloned().fold(0.0, f64::max);
        let min = vars.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(max / min > 2.0, "variance ratio {}", max / min);
    }

    #[test]
    fn semisynth7_label_balance() {
        let b = benchmark("semisynth7").unwrap();
        assert_eq!(b.scm.dim(), 7);
        let train = b.scm.ancestral_sample(250, 1).unwrap();
        let thr = b.score.median_threshold(&train.x);
        let s = b.scm.ancestral_sample(10_000, 2).unwrap();
        let frac = s.x.iter().filter(|r| b.score.score(r) >= thr).count() as f64 / 1e4;
        assert!((0.2..=0.8).contains(&frac), "{frac}");
    }

    #[test]
    fn config_round_trip_and_unknown_name() {
        for name in BENCHMARK_NAMES {
            let b = benchmark(name).unwrap();
            let json = serde_json::to_string(&b.to_config()).unwrap();
            let back = Benchmark::from_config(&serde_json::from_str(&json).unwrap()).unwrap();
            assert_eq!(back, b);
        }
        assert!(benchmark("linear4").is_err());
    }

    #[test]
    fn dataset_csv_round_trip() {
        let scm = benchmark_scm("linear3").unwrap();
        let s = scm.ancestral_sample(5, 1).unwrap();
        let mut buf = Vec::new();
        write_dataset_csv(&mut buf, &s.x, Some(&s.u)).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("node_0,node_1,node_2,u_0,u_1,u_2\n"));
        let (x, u) = read_dataset_csv(&buf[..]).unwrap();
        assert_eq!(x, s.x);
        assert_eq!(u.unwrap(), s.u);
    }
}

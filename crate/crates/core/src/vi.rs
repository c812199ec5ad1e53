//! Bayesian warped GP for one node, trained by mean-field variational
//! inference over the flow weights.
//!
//! The node value is modelled as `x = g_φ⁻¹(f(pa) + u, pa)` with
//! `f ~ GP(0, k_θ)`, `u ~ N(0, σ²)` and `φ ~ q = N(m, diag(s²))`. Kernel
//! parameters are point estimates; only `φ` is variational. Inputs and
//! targets are standardized before fitting and the statistics are kept
//! with the model.
//!
//! A model without a flow (`flow = None`) is a plain GP with an empty `φ`.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{self, FlowConfig, FlowLayout, FlowWorkspace};
use crate::gp::{self, GpModelJson, KernelParams, LN_2PI};
use crate::linalg::SpdFactor;
use crate::optim::Adam;
use crate::rng;

const LOG_S_MIN: f64 = -20.0;
const LOG_S_MAX: f64 = 3.0;

/// `q(φ) = N(m, diag(exp(log_s)²))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalPosterior {
    pub m: Vec<f64>,
    pub log_s: Vec<f64>,
}

impl VariationalPosterior {
    pub fn new(m: Vec<f64>, log_s: Vec<f64>) -> Result<Self> {
        let q = Self { m, log_s };
        q.validate()?;
        Ok(q)
    }

    /// Empty posterior for a model without a flow.
    pub fn empty() -> Self {
        Self {
            m: vec![],
            log_s: vec![],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m.len() != self.log_s.len() {
            return Err(Error::Parameter("q mean and log-scale lengths differ".into()));
        }
        if self.m.iter().chain(&self.log_s).any(|v| !v.is_finite()) {
            return Err(Error::Parameter("q has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    /// `φ = m + s ⊙ ε`.
    pub fn reparameterize(&self, eps: &[f64]) -> Vec<f64> {
        self.m
            .iter()
            .zip(&self.log_s)
            .zip(eps)
            .map(|((m, ls), e)| m + ls.exp() * e)
            .collect()
    }
}

/// `KL(q ‖ N(0, prior_var·I))`.
pub fn kl_mean_field(q: &VariationalPosterior, prior_var: f64) -> f64 {
    q.m.iter()
        .zip(&q.log_s)
        .map(|(m, ls)| {
            let s2 = (2.0 * ls).exp();
            0.5 * ((s2 + m * m) / prior_var - 1.0 - (2.0 * ls - prior_var.ln()))
        })
        .sum()
}

fn standard_normals(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v
        })
        .collect()
}

/// `n` reparameterized draws from `q`.
pub fn sample_phi(q: &VariationalPosterior, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed);
    (0..n).map(|_| q.reparameterize(&standard_normals(q.dim(), &mut r))).collect()
}

/// `S` standard-normal vectors of length `dim`, the ε of one ELBO estimate.
pub fn draw_eps(dim: usize, mc_samples: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed);
    (0..mc_samples).map(|_| standard_normals(dim, &mut r)).collect()
}

/// Warped-GP negative log-likelihood for an arbitrary monotone transform
/// returning `(z, log dz/dx)`.
pub fn warped_nll_with<F>(inputs: &[Vec<f64>], targets: &[f64], kernel: &KernelParams, transform: F) -> Result<f64>
where
    F: Fn(f64, &[f64]) -> Result<(f64, f64)>,
{
    if inputs.len() != targets.len() || inputs.is_empty() {
        return Err(Error::invalid("warped_nll needs matching, non-empty inputs and targets"));
    }
    kernel.validate()?;
    let factor = gp::factor_with_noise(inputs, kernel)?;
    let mut z = Vec::with_capacity(targets.len());
    let mut log_jac = 0.0;
    for (x, &y) in inputs.iter().zip(targets) {
        let (zi, ld) = transform(y, x)?;
        z.push(zi);
        log_jac += ld;
    }
    Ok(nll_from_factor(&factor, &z, log_jac))
}

fn nll_from_factor(factor: &SpdFactor, z: &[f64], log_jac: f64) -> f64 {
    let alpha = factor.solve(z);
    let quad: f64 = z.iter().zip(&alpha).map(|(a, b)| a * b).sum();
    0.5 * factor.log_det() + 0.5 * quad - log_jac + 0.5 * z.len() as f64 * LN_2PI
}

/// Warped-GP negative log-likelihood at a fixed `φ`. `flow = None` is the
/// identity warp.
pub fn warped_nll(
    inputs: &[Vec<f64>],
    targets: &[f64],
    phi: &[f64],
    kernel: &KernelParams,
    flow: Option<&FlowConfig>,
) -> Result<f64> {
    match flow {
        None => warped_nll_with(inputs, targets, kernel, |y, _| Ok((y, 0.0))),
        Some(cfg) => {
            let mut ws = FlowWorkspace::new(cfg);
            let ws = std::cell::RefCell::new(&mut ws);
            warped_nll_with(inputs, targets, kernel, |y, pa| {
                flow::forward_ws(y, pa, phi, cfg, &mut ws.borrow_mut())
            })
        }
    }
}

/// One ELBO estimate with its parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboValue {
    pub elbo: f64,
    pub kl: f64,
    pub nll_mean: f64,
}

/// ELBO gradients, split by parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboGradients {
    pub m: Vec<f64>,
    pub log_s: Vec<f64>,
    /// Flat kernel layout `[log ℓ.., log s², log σ²]`.
    pub kernel: Vec<f64>,
}

impl ElboGradients {
    fn from_flat(flat: &[f64], p: usize) -> Self {
        Self {
            m: flat[..p].to_vec(),
            log_s: flat[p..2 * p].to_vec(),
            kernel: flat[2 * p..].to_vec(),
        }
    }
}

/// The ELBO as a function of `(q, θ)` for fixed (standardized) data.
#[derive(Debug, Clone, Copy)]
pub struct ElboObjective<'a> {
    pub inputs: &'a [Vec<f64>],
    pub targets: &'a [f64],
    pub flow: Option<&'a FlowConfig>,
    pub prior_var: f64,
}

struct SampleTerms {
    nll: f64,
    alpha: Vec<f64>,
    grad_phi: Vec<f64>,
}

impl ElboObjective<'_> {
    fn check(&self, q: &VariationalPosterior, eps: &[Vec<f64>]) -> Result<()> {
        let p = self.flow.map_or(0, FlowConfig::param_count);
        if q.dim() != p {
            return Err(Error::invalid(format!("q has {} coordinates, flow needs {p}", q.dim())));
        }
        if self.flow.is_some() && (eps.is_empty() || eps.iter().any(|e| e.len() != p)) {
            return Err(Error::invalid("ε must hold S ≥ 1 vectors of the flow dimension"));
        }
        if !(self.prior_var > 0.0) {
            return Err(Error::invalid("prior variance must be positive"));
        }
        Ok(())
    }

    fn sample_terms(
        &self,
        cfg: &FlowConfig,
        factor: &SpdFactor,
        phi: &[f64],
        want_grad: bool,
    ) -> Result<SampleTerms> {
        let mut ws = FlowWorkspace::new(cfg);
        let n = self.targets.len();
        let mut z = Vec::with_capacity(n);
        let mut log_jac = 0.0;
        for (x, &y) in self.inputs.iter().zip(self.targets) {
            let (zi, ld) = flow::forward_ws(y, x, phi, cfg, &mut ws)?;
            z.push(zi);
            log_jac += ld;
        }
        let alpha = factor.solve(&z);
        let quad: f64 = z.iter().zip(&alpha).map(|(a, b)| a * b).sum();
        let nll = 0.5 * factor.log_det() + 0.5 * quad - log_jac + 0.5 * n as f64 * LN_2PI;
        let mut grad_phi = vec![];
        if want_grad {
            grad_phi = vec![0.0; phi.len()];
            for (i, (x, &y)) in self.inputs.iter().zip(self.targets).enumerate() {
                // ∂ log-lik / ∂z_i = −α_i, ∂ log-lik / ∂ log g'_i = 1
                flow::accumulate_gradients(y, x, phi, cfg, (-alpha[i], 1.0), &mut grad_phi, &mut ws)?;
            }
        }
        Ok(SampleTerms { nll, alpha, grad_phi })
    }

    /// ELBO value and, if requested, its gradient in the flat layout
    /// `[m, log_s, kernel]`, for the given ε draws.
    pub fn evaluate(
        &self,
        q: &VariationalPosterior,
        kernel: &KernelParams,
        eps: &[Vec<f64>],
        want_grad: bool,
    ) -> Result<(ElboValue, Option<Vec<f64>>)> {
        self.check(q, eps)?;
        kernel.validate()?;
        let factor = gp::factor_with_noise(self.inputs, kernel)?;
        let n = self.targets.len();
        let p = q.dim();
        let terms: Vec<SampleTerms> = match self.flow {
            None => {
                let alpha = factor.solve(self.targets);
                vec![SampleTerms {
                    nll: nll_from_factor(&factor, self.targets, 0.0),
                    alpha,
                    grad_phi: vec![],
                }]
            }
            Some(cfg) => eps
                .par_iter()
                .map(|e| self.sample_terms(cfg, &factor, &q.reparameterize(e), want_grad))
                .collect::<Result<Vec<_>>>()?,
        };
        let s_count = terms.len() as f64;
        let nll_mean = terms.iter().map(|t| t.nll).sum::<f64>() / s_count;
        let kl = kl_mean_field(q, self.prior_var);
        let value = ElboValue {
            elbo: -nll_mean - kl,
            kl,
            nll_mean,
        };
        if !want_grad {
            return Ok((value, None));
        }
        let mut grad = vec![0.0; 2 * p];
        for (t, e) in terms.iter().zip(eps) {
            for j in 0..p {
                grad[j] += t.grad_phi[j];
                grad[p + j] += t.grad_phi[j] * e[j] * q.log_s[j].exp();
            }
        }
        for j in 0..p {
            grad[j] = grad[j] / s_count - q.m[j] / self.prior_var;
            grad[p + j] = grad[p + j] / s_count - ((2.0 * q.log_s[j]).exp() / self.prior_var - 1.0);
        }
        // W = mean_s α_s α_sᵀ − (K+σ²I)⁻¹
        let a = DMatrix::from_fn(n, terms.len(), |i, s| terms[s].alpha[i]);
        let mut w = factor.inverse();
        w.gemm(1.0 / s_count, &a, &a.transpose(), -1.0);
        grad.extend(gp::half_trace_kernel_gradients(self.inputs, kernel, &w));
        Ok((value, Some(grad)))
    }
}

/// Training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    /// Monte-Carlo samples `S` per ELBO estimate.
    pub mc_samples: usize,
    /// Variance of the isotropic Gaussian prior on `φ`.
    pub prior_var: f64,
    pub seed: u64,
    /// Keep the observation-noise variance at its initial value.
    pub freeze_noise: bool,
    pub init_noise_variance: f64,
    pub init_log_s: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            steps: 1000,
            mc_samples: 10,
            prior_var: 0.1,
            seed: 0,
            freeze_noise: false,
            init_noise_variance: 0.1,
            init_log_s: 0.1f64.ln(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.steps >= 1
            && self.mc_samples >= 1
            && self.prior_var > 0.0
            && self.init_noise_variance > 0.0
            && self.init_log_s.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid training config {self:?}")))
        }
    }
}

/// Affine standardization of parents and target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub target_mean: f64,
    pub target_scale: f64,
}

fn mean_sd(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    let var = v.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    (mean, if sd > 1e-12 { sd } else { 1.0 })
}

impl Scaling {
    pub fn fit(inputs: &[Vec<f64>], targets: &[f64]) -> Self {
        let d = inputs.first().map_or(0, Vec::len);
        let (input_mean, input_scale) = (0..d).map(|j| mean_sd(inputs.iter().map(move |r| r[j]))).unzip();
        let (target_mean, target_scale) = mean_sd(targets.iter().copied());
        Self {
            input_mean,
            input_scale,
            target_mean,
            target_scale,
        }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            input_mean: vec![0.0; d],
            input_scale: vec![1.0; d],
            target_mean: 0.0,
            target_scale: 1.0,
        }
    }

    pub fn inputs(&self, pa: &[f64]) -> Vec<f64> {
        pa.iter()
            .zip(self.input_mean.iter().zip(&self.input_scale))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    pub fn target(&self, y: f64) -> f64 {
        (y - self.target_mean) / self.target_scale
    }

    pub fn untarget(&self, y: f64) -> f64 {
        self.target_mean + self.target_scale * y
    }
}

/// Per-step training record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub elbo: f64,
    pub kl: f64,
    pub nll_mean: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
    /// Kernel log-parameters after each step.
    pub kernel_path: Vec<Vec<f64>>,
    /// Step at which a non-finite ELBO or gradient stopped training.
    pub diverged_at: Option<usize>,
}

impl TrainTrace {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// A trained Bayesian warped GP for one node.
#[derive(Debug, Clone)]
pub struct BwgpModel {
    flow: Option<FlowConfig>,
    q: VariationalPosterior,
    kernel: KernelParams,
    scaling: Scaling,
    /// Standardized parents and targets.
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
    factor: SpdFactor,
    trace: TrainTrace,
}

/// Hidden-layer weights get `N(0, 1/fan_in)`, everything else zero, so the
/// mean flow starts as the identity.
fn initial_mean(cfg: &FlowConfig, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed);
    let shapes = cfg.layer_shapes();
    let mut m = Vec::with_capacity(cfg.param_count());
    for (li, s) in shapes.iter().enumerate() {
        let sd = if li < 2 && s.cols > 0 {
            1.0 / (s.cols as f64).sqrt()
        } else {
            0.0
        };
        for _ in 0..s.rows * s.cols {
            let e: f64 = StandardNormal.sample(&mut r);
            m.push(sd * e);
        }
        m.extend(std::iter::repeat_n(0.0, s.rows));
    }
    m
}

fn check_data(inputs: &[Vec<f64>], targets: &[f64]) -> Result<usize> {
    if inputs.len() != targets.len() {
        return Err(Error::invalid("inputs and targets differ in length"));
    }
    if inputs.len() < 2 {
        return Err(Error::invalid("training needs at least two rows"));
    }
    let d = inputs[0].len();
    if inputs.iter().any(|r| r.len() != d) {
        return Err(Error::invalid("ragged input rows"));
    }
    if inputs.iter().flatten().chain(targets).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite training data"));
    }
    Ok(d)
}

/// Fits a node model by Adam ascent on the ELBO with fresh ε each step.
///
/// `flow = None` trains a plain GP by marginal likelihood. If the ELBO or
/// its gradient becomes non-finite, training stops and the model keeps the
/// last parameters whose ELBO was finite; the step is recorded in
/// [`TrainTrace::diverged_at`].
pub fn train(
    inputs: &[Vec<f64>],
    targets: &[f64],
    flow: Option<FlowConfig>,
    cfg: &TrainConfig,
) -> Result<BwgpModel> {
    cfg.validate()?;
    let d = check_data(inputs, targets)?;
    if let Some(f) = &flow {
        f.validate()?;
        if f.input_dim != d {
            return Err(Error::invalid(format!("flow expects {} parents, data has {d}", f.input_dim)));
        }
    }
    let scaling = Scaling::fit(inputs, targets);
    let xs: Vec<Vec<f64>> = inputs.iter().map(|r| scaling.inputs(r)).collect();
    let ys: Vec<f64> = targets.iter().map(|&y| scaling.target(y)).collect();

    let p = flow.as_ref().map_or(0, FlowConfig::param_count);
    let m0 = flow
        .as_ref()
        .map_or_else(Vec::new, |f| initial_mean(f, rng::derive_tagged(cfg.seed, "init")));
    let kernel0 = KernelParams::isotropic(d, cfg.init_noise_variance);
    let mut params = m0;
    params.extend(std::iter::repeat_n(cfg.init_log_s, p));
    params.extend(kernel0.to_vec());

    let objective = ElboObjective {
        inputs: &xs,
        targets: &ys,
        flow: flow.as_ref(),
        prior_var: cfg.prior_var,
    };
    let mut opt = Adam::new(params.len(), cfg.lr);
    let eps_seed = rng::derive_tagged(cfg.seed, "eps");
    let mut trace = TrainTrace::default();
    let split = |v: &[f64]| {
        (
            VariationalPosterior {
                m: v[..p].to_vec(),
                log_s: v[p..2 * p].to_vec(),
            },
            KernelParams::from_slice(&v[2 * p..]),
        )
    };
    for step in 0..cfg.steps {
        let (q, kernel) = split(&params);
        let eps = draw_eps(p, cfg.mc_samples, rng::derive_seed(eps_seed, step as u64));
        let outcome = objective.evaluate(&q, &kernel, &eps, true);
        let (value, grad) = match outcome {
            Ok((v, Some(g))) if v.elbo.is_finite() && g.iter().all(|x| x.is_finite()) => (v, g),
            Ok(_) | Err(Error::Factorization(_)) | Err(Error::Parameter(_)) => {
                if step == 0 {
                    return Err(Error::Training {
                        step,
                        reason: "non-finite ELBO at initialization".into(),
                    });
                }
                trace.diverged_at = Some(step);
                break;
            }
            Err(e) => return Err(e),
        };
        let mut grad = grad;
        if cfg.freeze_noise {
            *grad.last_mut().expect("kernel block is non-empty") = 0.0;
        }
        trace.rows.push(TraceRow {
            step,
            elbo: value.elbo,
            kl: value.kl,
            nll_mean: value.nll_mean,
        });
        let last_good = params.clone();
        opt.ascend(&mut params, &grad);
        for v in &mut params[p..2 * p] {
            *v = v.clamp(LOG_S_MIN, LOG_S_MAX);
        }
        KernelParams::clamp_in_place(&mut params[2 * p..]);
        if params.iter().any(|v| !v.is_finite()) {
            params = last_good;
            trace.diverged_at = Some(step + 1);
            break;
        }
        trace.kernel_path.push(params[2 * p..].to_vec());
    }
    let (q, kernel) = split(&params);
    let factor = gp::factor_with_noise(&xs, &kernel)?;
    Ok(BwgpModel {
        flow,
        q,
        kernel,
        scaling,
        inputs: xs,
        targets: ys,
        factor,
        trace,
    })
}

/// Serialized [`BwgpModel`]. `gp` holds the standardized training data and
/// the kernel; the flow layout and `q` sit alongside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BwgpModelJson {
    pub flow: Option<FlowLayout>,
    pub q_m: Vec<f64>,
    pub q_log_s: Vec<f64>,
    pub scaling: Scaling,
    pub gp: GpModelJson,
    pub diverged_at: Option<usize>,
}

impl BwgpModel {
    /// Assembles a model from explicit parts, on data already in the
    /// standardized space described by `scaling`.
    pub fn from_parts(
        inputs: Vec<Vec<f64>>,
        targets: Vec<f64>,
        flow: Option<FlowConfig>,
        q: VariationalPosterior,
        kernel: KernelParams,
        scaling: Scaling,
    ) -> Result<Self> {
        let d = check_data(&inputs, &targets)?;
        q.validate()?;
        kernel.validate()?;
        if kernel.dim() != d || scaling.input_mean.len() != d {
            return Err(Error::invalid("kernel or scaling dimension mismatch"));
        }
        if q.dim() != flow.as_ref().map_or(0, FlowConfig::param_count) {
            return Err(Error::invalid("q dimension does not match the flow"));
        }
        let factor = gp::factor_with_noise(&inputs, &kernel)?;
        Ok(Self {
            flow,
            q,
            kernel,
            scaling,
            inputs,
            targets,
            factor,
            trace: TrainTrace::default(),
        })
    }

    pub fn flow(&self) -> Option<&FlowConfig> {
        self.flow.as_ref()
    }

    pub fn q(&self) -> &VariationalPosterior {
        &self.q
    }

    pub fn kernel(&self) -> &KernelParams {
        &self.kernel
    }

    pub fn scaling(&self) -> &Scaling {
        &self.scaling
    }

    pub fn trace(&self) -> &TrainTrace {
        &self.trace
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub(crate) fn factor(&self) -> &SpdFactor {
        &self.factor
    }

    pub fn input_dim(&self) -> usize {
        self.kernel.dim()
    }

    pub fn noise_variance(&self) -> f64 {
        self.kernel.noise_variance()
    }

    pub fn objective(&self, prior_var: f64) -> ElboObjective<'_> {
        ElboObjective {
            inputs: &self.inputs,
            targets: &self.targets,
            flow: self.flow.as_ref(),
            prior_var,
        }
    }

    pub fn sample_phi(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        sample_phi(&self.q, n, seed)
    }

    /// Standardized-space warp `g_φ(ỹ | p̃a)` and its log-derivative.
    pub(crate) fn warp_std(&self, y: f64, pa_std: &[f64], phi: &[f64], ws: &mut Option<FlowWorkspace>) -> Result<(f64, f64)> {
        match &self.flow {
            None => Ok((y, 0.0)),
            Some(cfg) => flow::forward_ws(y, pa_std, phi, cfg, ws.get_or_insert_with(|| FlowWorkspace::new(cfg))),
        }
    }

    pub(crate) fn unwarp_std(&self, z: f64, pa_std: &[f64], phi: &[f64], ws: &mut Option<FlowWorkspace>) -> Result<f64> {
        match &self.flow {
            None => Ok(z),
            Some(cfg) => flow::inverse_ws(z, pa_std, phi, cfg, ws.get_or_insert_with(|| FlowWorkspace::new(cfg))),
        }
    }

    /// Transformed training targets `g_φ(ỹ_i | p̃a_i)`.
    pub(crate) fn warped_targets(&self, phi: &[f64], ws: &mut Option<FlowWorkspace>) -> Result<Vec<f64>> {
        self.inputs
            .iter()
            .zip(&self.targets)
            .map(|(x, &y)| self.warp_std(y, x, phi, ws).map(|r| r.0))
            .collect()
    }

    /// Raw-scale warp of a node value given raw parents.
    pub fn warp(&self, y: f64, parents: &[f64], phi: &[f64]) -> Result<f64> {
        let pa = self.scaling.inputs(parents);
        Ok(self.warp_std(self.scaling.target(y), &pa, phi, &mut None)?.0)
    }

    /// Inverse of [`Self::warp`].
    pub fn unwarp(&self, z: f64, parents: &[f64], phi: &[f64]) -> Result<f64> {
        let pa = self.scaling.inputs(parents);
        Ok(self.scaling.untarget(self.unwarp_std(z, &pa, phi, &mut None)?))
    }

    /// `log p(y | pa, data)` estimated with `n_phi` draws from `q`.
    pub fn predictive_log_density(&self, parents: &[f64], y: f64, n_phi: usize, seed: u64) -> Result<f64> {
        let pa = self.scaling.inputs(parents);
        let k_star = gp::cross_kernel(&self.inputs, &pa, &self.kernel);
        let mut v = k_star.clone();
        self.factor.forward_solve(&mut v);
        let s2 = self.kernel.signal_variance();
        let var = (s2 - v.iter().map(|a| a * a).sum::<f64>()).clamp(0.0, s2) + self.noise_variance();
        let draws = if self.flow.is_some() {
            self.sample_phi(n_phi.max(1), seed)
        } else {
            vec![vec![]]
        };
        let mut ws = None;
        let mut logs = Vec::with_capacity(draws.len());
        for phi in &draws {
            let alpha = self.factor.solve(&self.warped_targets(phi, &mut ws)?);
            let mean: f64 = k_star.iter().zip(&alpha).map(|(a, b)| a * b).sum();
            let (z, ld) = self.warp_std(self.scaling.target(y), &pa, phi, &mut ws)?;
            logs.push(-0.5 * (LN_2PI + var.ln() + (z - mean).powi(2) / var) + ld);
        }
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lme = max + (logs.iter().map(|l| (l - max).exp()).sum::<f64>() / logs.len() as f64).ln();
        Ok(lme - self.scaling.target_scale.ln())
    }

    /// Monte-Carlo predictive mean of the node value: `n` joint draws of
    /// `(φ, f + u)`.
    pub fn predictive_mean(&self, parents: &[f64], n: usize, seed: u64) -> Result<f64> {
        let pa = self.scaling.inputs(parents);
        let k_star = gp::cross_kernel(&self.inputs, &pa, &self.kernel);
        let mut v = k_star.clone();
        self.factor.forward_solve(&mut v);
        let s2 = self.kernel.signal_variance();
        let sd = ((s2 - v.iter().map(|a| a * a).sum::<f64>()).clamp(0.0, s2) + self.noise_variance()).sqrt();
        let mut r = rng::stream(seed);
        let mut ws = None;
        let mut total = 0.0;
        for _ in 0..n {
            let phi = self.q.reparameterize(&standard_normals(self.q.dim(), &mut r));
            let alpha = self.factor.solve(&self.warped_targets(&phi, &mut ws)?);
            let mean: f64 = k_star.iter().zip(&alpha).map(|(a, b)| a * b).sum();
            let e: f64 = StandardNormal.sample(&mut r);
            total += self.scaling.untarget(self.unwarp_std(mean + sd * e, &pa, &phi, &mut ws)?);
        }
        Ok(total / n as f64)
    }

    pub fn to_json(&self) -> BwgpModelJson {
        let n = self.targets.len();
        let l = self.factor.l();
        BwgpModelJson {
            flow: self.flow.as_ref().map(FlowLayout::from),
            q_m: self.q.m.clone(),
            q_log_s: self.q.log_s.clone(),
            scaling: self.scaling.clone(),
            gp: GpModelJson {
                n,
                d: self.kernel.dim(),
                inputs: self.inputs.iter().flatten().copied().collect(),
                targets: self.targets.clone(),
                params: self.kernel.clone(),
                jitter: self.factor.jitter,
                chol_lower: (0..n).flat_map(|i| (0..=i).map(move |j| l[(i, j)])).collect(),
            },
            diverged_at: self.trace.diverged_at,
        }
    }

    pub fn from_json(j: &BwgpModelJson) -> Result<Self> {
        let g = &j.gp;
        if g.inputs.len() != g.n * g.d {
            return Err(Error::invalid("inputs array does not match n·d"));
        }
        let inputs = if g.d == 0 {
            vec![vec![]; g.n]
        } else {
            g.inputs.chunks(g.d).map(<[f64]>::to_vec).collect()
        };
        if let Some(layout) = &j.flow {
            if layout.param_count != layout.config.param_count() {
                return Err(Error::invalid("flow layout parameter count is inconsistent"));
            }
        }
        let mut m = Self::from_parts(
            inputs,
            g.targets.clone(),
            j.flow.as_ref().map(|l| l.config),
            VariationalPosterior::new(j.q_m.clone(), j.q_log_s.clone())?,
            g.params.clone(),
            j.scaling.clone(),
        )?;
        m.trace.diverged_at = j.diverged_at;
        Ok(m)
    }
}

/// `(1/S) Σ −nll(φ_s) − KL` with `φ_s = m + s ⊙ ε_s`, ε drawn from `seed`.
pub fn elbo_estimate(model: &BwgpModel, mc_samples: usize, prior_var: f64, seed: u64) -> Result<ElboValue> {
    let eps = draw_eps(model.q.dim(), mc_samples, seed);
    Ok(model.objective(prior_var).evaluate(&model.q, &model.kernel, &eps, false)?.0)
}

/// Pathwise gradients of [`elbo_estimate`] with the same ε draws.
pub fn elbo_gradients(model: &BwgpModel, mc_samples: usize, prior_var: f64, seed: u64) -> Result<ElboGradients> {
    let eps = draw_eps(model.q.dim(), mc_samples, seed);
    let (_, g) = model.objective(prior_var).evaluate(&model.q, &model.kernel, &eps, true)?;
    let g = g.expect("gradient requested");
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Training {
            step: 0,
            reason: "non-finite ELBO gradient".into(),
        });
    }
    Ok(ElboGradients::from_flat(&g, model.q.dim()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::SplineKnots;

    fn toy_data(n: usize, d: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut r = rng::stream(seed);
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| r.random_range(-1.5..1.5)).collect()).collect();
        let y = x
            .iter()
            .map(|row| row.iter().map(|v| v.sin()).sum::<f64>() + 0.3 * r.random_range(-1.0..1.0))
            .collect();
        (x, y)
    }

    fn random_model(n: usize, bins: usize, seed: u64, log_s: f64) -> BwgpModel {
        let (x, y) = toy_data(n, 1, seed);
        let cfg = FlowConfig::new(1, bins, 2.0, 3).unwrap();
        let mut r = rng::stream(seed + 1000);
        let m: Vec<f64> = (0..cfg.param_count()).map(|_| 0.5 * r.random_range(-1.0..1.0)).collect();
        let q = VariationalPosterior::new(m, vec![log_s; cfg.param_count()]).unwrap();
        let kernel = KernelParams::new(&[r.random_range(0.5..1.5)], r.random_range(0.5..1.5), r.random_range(0.05..0.3));
        BwgpModel::from_parts(x, y, Some(cfg), q, kernel, Scaling::identity(1)).unwrap()
    }

    #[test]
    fn kl_examples() {
        let q = VariationalPosterior::new(vec![0.0, 0.0], vec![0.5 * 0.3f64.ln(); 2]).unwrap();
        assert!(kl_mean_field(&q, 0.3).abs() < 1e-15);
        let q = VariationalPosterior::new(vec![1.0], vec![0.0]).unwrap();
        assert!((kl_mean_field(&q, 1.0) - 0.5).abs() < 1e-15);
        let q = VariationalPosterior::new(vec![0.0], vec![0.5 * 2f64.ln()]).unwrap();
        assert!((kl_mean_field(&q, 1.0) - 0.153_426_409_720_027_3).abs() < 1e-12);
    }

    #[test]
    fn identity_flow_nll_is_gp_nll() {
        let (x, y) = toy_data(12, 2, 1);
        let k = KernelParams::new(&[0.7, 1.3], 1.2, 0.2);
        let gp_nll = -gp::gp_fit(x.clone(), y.clone(), k.clone()).unwrap().log_marginal();
        assert_eq!(warped_nll(&x, &y, &[], &k, None).unwrap(), gp_nll);
        let cfg = FlowConfig::new(2, 4, 3.0, 5).unwrap();
        let zero = vec![0.0; cfg.param_count()];
        let nll = warped_nll(&x, &y, &zero, &k, Some(&cfg)).unwrap();
        assert!((nll - gp_nll).abs() < 1e-12);
    }

    #[test]
    fn affine_warp_shifts_nll_by_log_jacobian() {
        // three bins on [-3, 3]; the middle one has slope 2 and holds all data
        let knots = SplineKnots::new(3.0, vec![2.5, 1.0, 2.5], vec![2.0, 2.0, 2.0], vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        let mut r = rng::stream(2);
        let x: Vec<Vec<f64>> = (0..10).map(|_| vec![r.random_range(-1.0..1.0)]).collect();
        let y: Vec<f64> = (0..10).map(|_| r.random_range(-0.49..0.49)).collect();
        let k = KernelParams::new(&[0.8], 1.1, 0.3);
        for &v in &y {
            let (z, ld) = knots.forward(v);
            assert!((z - 2.0 * v).abs() < 1e-12 && (ld - 2f64.ln()).abs() < 1e-12);
        }
        let nll = warped_nll_with(&x, &y, &k, |v, _| Ok(knots.forward(v))).unwrap();
        let y2: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
        let plain = -gp::gp_fit(x, y2, k).unwrap().log_marginal();
        assert!((nll - (plain - 10.0 * 2f64.ln())).abs() < 1e-10);
    }

    #[test]
    fn warped_nll_matches_dense_oracle() {
        for seed in 0..5 {
            let model = random_model(15, 4, seed, -2.0);
            let cfg = *model.flow().unwrap();
            let phi = model.sample_phi(1, seed).pop().unwrap();
            let nll = warped_nll(model.inputs(), model.targets(), &phi, model.kernel(), Some(&cfg)).unwrap();
            // dense oracle
            let n = model.targets().len();
            let mut kmat = gp::kernel_matrix(model.inputs(), model.kernel());
            for i in 0..n {
                kmat[(i, i)] += model.noise_variance();
            }
            let mut z = nalgebra::DVector::zeros(n);
            let mut lj = 0.0;
            for i in 0..n {
                let (zi, ld) = flow::g_forward(model.targets()[i], &model.inputs()[i], &phi, &cfg).unwrap();
                z[i] = zi;
                lj += ld;
            }
            let inv = kmat.clone().try_inverse().unwrap();
            let oracle = 0.5 * kmat.determinant().ln() + 0.5 * (z.transpose() * inv * &z)[(0, 0)] - lj
                + 0.5 * n as f64 * LN_2PI;
            assert!((nll - oracle).abs() / oracle.abs() < 1e-9, "{nll} vs {oracle}");
        }
    }

    #[test]
    fn point_mass_elbo_has_no_mc_variance() {
        let model = random_model(10, 3, 4, -300.0);
        let cfg = model.flow().unwrap();
        let values: Vec<f64> = (0..5).map(|s| elbo_estimate(&model, 3, 0.1, s).unwrap().elbo).collect();
        let nll = warped_nll(model.inputs(), model.targets(), &model.q().m, model.kernel(), Some(cfg)).unwrap();
        let kl = kl_mean_field(model.q(), 0.1);
        for v in values {
            assert!((v - (-nll - kl)).abs() <= 1e-12 * kl.abs());
        }
    }

    #[test]
    fn plain_gp_elbo_is_log_marginal() {
        let (x, y) = toy_data(9, 1, 5);
        let k = KernelParams::new(&[1.0], 1.0, 0.1);
        let m = BwgpModel::from_parts(x.clone(), y.clone(), None, VariationalPosterior::empty(), k.clone(), Scaling::identity(1)).unwrap();
        let v = elbo_estimate(&m, 4, 0.1, 0).unwrap();
        let lm = gp::gp_fit(x, y, k).unwrap().log_marginal();
        assert!((v.elbo - lm).abs() < 1e-9);
        assert_eq!(v.kl, 0.0);
    }

    #[test]
    fn elbo_gradients_match_finite_differences() {
        for seed in 0..20 {
            let model = random_model(8, 2, seed, -1.5);
            let p = model.q().dim();
            let eps = draw_eps(p, 3, seed);
            let obj = model.objective(0.2);
            let (_, g) = obj.evaluate(model.q(), model.kernel(), &eps, true).unwrap();
            let g = g.unwrap();
            let mut flat = model.q().m.clone();
            flat.extend(&model.q().log_s);
            flat.extend(model.kernel().to_vec());
            let f = |v: &[f64]| {
                let q = VariationalPosterior::new(v[..p].to_vec(), v[p..2 * p].to_vec()).unwrap();
                obj.evaluate(&q, &KernelParams::from_slice(&v[2 * p..]), &eps, false).unwrap().0.elbo
            };
            let h = 1e-5;
            for j in 0..flat.len() {
                let mut a = flat.clone();
                a[j] += h;
                let mut b = flat.clone();
                b[j] -= h;
                let fd = (f(&a) - f(&b)) / (2.0 * h);
                let err = (g[j] - fd).abs() / fd.abs().max(g[j].abs()).max(1e-3);
                assert!(err < 1e-3, "seed {seed} coord {j}: {} vs {fd}", g[j]);
            }
        }
    }

    #[test]
    fn dead_unit_weights_get_kl_only_gradient() {
        let mut model = random_model(10, 3, 6, -30.0);
        let cfg = *model.flow().unwrap();
        let h = cfg.hidden_dims;
        // kill hidden unit 0 of the first layer
        let b1 = h * cfg.input_dim;
        model.q.m[b1] = -1e3;
        let g = elbo_gradients(&model, 2, 0.2, 1).unwrap();
        let w2 = b1 + h;
        for i in 0..h {
            let j = w2 + i * h;
            let expected = -model.q.m[j] / 0.2;
            assert!((g.m[j] - expected).abs() < 1e-12, "{} vs {expected}", g.m[j]);
        }
    }

    #[test]
    fn identity_flow_kernel_gradients_match_gp() {
        let (x, y) = toy_data(10, 2, 8);
        let k = KernelParams::new(&[0.6, 1.4], 0.9, 0.15);
        let cfg = FlowConfig::new(2, 3, 2.0, 4).unwrap();
        let q = VariationalPosterior::new(vec![0.0; cfg.param_count()], vec![-300.0; cfg.param_count()]).unwrap();
        let m = BwgpModel::from_parts(x.clone(), y.clone(), Some(cfg), q, k.clone(), Scaling::identity(2)).unwrap();
        let g = elbo_gradients(&m, 3, 0.1, 0).unwrap();
        let gp_g = gp::gp_fit(x, y, k).unwrap().log_marginal_gradient();
        for (a, b) in g.kernel.iter().zip(&gp_g) {
            assert!((a - b).abs() / b.abs().max(1e-12) < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn sample_phi_properties() {
        let q = VariationalPosterior::new(vec![1.0, -2.0], vec![-1000.0; 2]).unwrap();
        assert!(sample_phi(&q, 5, 1).iter().all(|p| p == &vec![1.0, -2.0]));
        let q = VariationalPosterior::new(vec![0.5, -1.0, 2.0], vec![0.0, -1.0, 0.5]).unwrap();
        let n = 100_000;
        let draws = sample_phi(&q, n, 3);
        for j in 0..3 {
            let mean = draws.iter().map(|d| d[j]).sum::<f64>() / n as f64;
            let se = q.log_s[j].exp() / (n as f64).sqrt();
            assert!((mean - q.m[j]).abs() < 4.0 * se);
        }
        assert_ne!(sample_phi(&q, 1, 1), sample_phi(&q, 1, 2));
    }

    #[test]
    fn plain_gp_training_follows_gp_gradient_ascent() {
        let (x, y) = toy_data(20, 1, 9);
        let cfg = TrainConfig {
            steps: 50,
            lr: 0.05,
            ..TrainConfig::default()
        };
        let model = train(&x, &y, None, &cfg).unwrap();
        let gp_cfg = gp::GpTrainConfig { lr: 0.05, steps: 50 };
        let init = KernelParams::isotropic(1, cfg.init_noise_variance);
        let (_, path) =
            gp::fit_hyperparameters(model.inputs().to_vec(), model.targets().to_vec(), init, &gp_cfg).unwrap();
        assert_eq!(path.len(), model.trace().kernel_path.len());
        for (a, b) in path.iter().zip(&model.trace().kernel_path) {
            for (u, v) in a.iter().zip(b) {
                assert!((u - v).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_round_trips() {
        let (x, y) = toy_data(15, 1, 10);
        let flow = FlowConfig::new(1, 4, 3.0, 4).unwrap();
        let cfg = TrainConfig {
            steps: 30,
            mc_samples: 3,
            ..TrainConfig::default()
        };
        let a = train(&x, &y, Some(flow), &cfg).unwrap();
        let b = train(&x, &y, Some(flow), &cfg).unwrap();
        assert_eq!(a.q(), b.q());
        assert_eq!(a.kernel(), b.kernel());
        assert_eq!(a.trace().rows.len(), 30);
        let j = serde_json::to_string(&a.to_json()).unwrap();
        let back = BwgpModel::from_json(&serde_json::from_str(&j).unwrap()).unwrap();
        assert_eq!(back.to_json(), a.to_json());
        let mut buf = Vec::new();
        a.trace().write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,elbo,kl,nll_mean\n"));
        assert_eq!(text.lines().count(), 31);
    }

    #[test]
    fn warp_round_trips_in_raw_units() {
        let (x, y) = toy_data(15, 1, 11);
        let flow = FlowConfig::new(1, 4, 3.0, 4).unwrap();
        let cfg = TrainConfig {
            steps: 20,
            mc_samples: 2,
            ..TrainConfig::default()
        };
        let m = train(&x, &y, Some(flow), &cfg).unwrap();
        let phi = m.sample_phi(1, 0).pop().unwrap();
        for &v in &[-2.0, -0.3, 0.0, 0.8, 5.0] {
            let z = m.warp(v, &[0.4], &phi).unwrap();
            assert!((m.unwarp(z, &[0.4], &phi).unwrap() - v).abs() < 1e-9);
        }
    }
}

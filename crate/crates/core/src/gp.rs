//! Exact Gaussian-process regression with a squared-exponential kernel.
//!
//! The mean function is zero; callers standardize or warp targets first.
//! All variances are parametrized on the log scale.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SpdFactor;
use crate::optim::Adam;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Bounds applied to every log-parameter after an optimizer step.
const LOG_PARAM_MIN: f64 = -13.8; // ~1e-6
const LOG_PARAM_MAX: f64 = 9.2; // ~1e4

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub log_lengthscales: Vec<f64>,
    pub log_signal_variance: f64,
    /// log σ², the observation-noise variance.
    pub log_noise_variance: f64,
}

impl KernelParams {
    pub fn new(lengthscales: &[f64], signal_variance: f64, noise_variance: f64) -> Self {
        Self {
            log_lengthscales: lengthscales.iter().map(|l| l.ln()).collect(),
            log_signal_variance: signal_variance.ln(),
            log_noise_variance: noise_variance.ln(),
        }
    }

    /// Unit lengthscales and signal variance with the given noise variance.
    pub fn isotropic(dim: usize, noise_variance: f64) -> Self {
        Self::new(&vec![1.0; dim], 1.0, noise_variance)
    }

    pub fn dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    pub fn signal_variance(&self) -> f64 {
        self.log_signal_variance.exp()
    }

    pub fn noise_variance(&self) -> f64 {
        self.log_noise_variance.exp()
    }

    pub fn validate(&self) -> Result<()> {
        let all = self
            .log_lengthscales
            .iter()
            .chain([&self.log_signal_variance, &self.log_noise_variance]);
        for v in all {
            if !v.is_finite() {
                return Err(Error::Parameter(format!("kernel log-parameter {v} is not finite")));
            }
        }
        Ok(())
    }

    /// Flat layout: `[log ℓ_1..ℓ_D, log s², log σ²]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.log_lengthscales.clone();
        v.push(self.log_signal_variance);
        v.push(self.log_noise_variance);
        v
    }

    pub fn from_slice(v: &[f64]) -> Self {
        let d = v.len() - 2;
        Self {
            log_lengthscales: v[..d].to_vec(),
            log_signal_variance: v[d],
            log_noise_variance: v[d + 1],
        }
    }

    pub(crate) fn clamp_in_place(v: &mut [f64]) {
        for x in v {
            *x = x.clamp(LOG_PARAM_MIN, LOG_PARAM_MAX);
        }
    }

    fn inv_sq_lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|l| (-2.0 * l).exp()).collect()
    }
}

/// `N(mean, variance)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPosterior {
    pub mean: f64,
    pub variance: f64,
}

/// `s²·exp(−½ Σ_d ((x_d − y_d)/ℓ_d)²)`.
pub fn se_kernel(x: &[f64], y: &[f64], params: &KernelParams) -> Result<f64> {
    if x.len() != y.len() || x.len() != params.dim() {
        return Err(Error::invalid(format!(
            "kernel dimension mismatch: {} vs {} (params {})",
            x.len(),
            y.len(),
            params.dim()
        )));
    }
    Ok(se_unchecked(x, y, params.signal_variance(), &params.inv_sq_lengthscales()))
}

#[inline]
fn se_unchecked(x: &[f64], y: &[f64], s2: f64, inv_l2: &[f64]) -> f64 {
    let mut r2 = 0.0;
    for d in 0..x.len() {
        let t = x[d] - y[d];
        r2 += t * t * inv_l2[d];
    }
    s2 * (-0.5 * r2).exp()
}

/// Noise-free kernel matrix `k(X, X)`.
pub fn kernel_matrix(inputs: &[Vec<f64>], params: &KernelParams) -> DMatrix<f64> {
    let n = inputs.len();
    let s2 = params.signal_variance();
    let il = params.inv_sq_lengthscales();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = s2;
        for j in 0..i {
            let v = se_unchecked(&inputs[i], &inputs[j], s2, &il);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// `k(X, x*)`.
pub fn cross_kernel(inputs: &[Vec<f64>], x_star: &[f64], params: &KernelParams) -> Vec<f64> {
    let s2 = params.signal_variance();
    let il = params.inv_sq_lengthscales();
    inputs.iter().map(|x| se_unchecked(x, x_star, s2, &il)).collect()
}

/// Factor of `k(X,X) + σ²I` under the jitter policy.
pub fn factor_with_noise(inputs: &[Vec<f64>], params: &KernelParams) -> Result<SpdFactor> {
    let mut k = kernel_matrix(inputs, params);
    let s = params.noise_variance();
    for i in 0..k.nrows() {
        k[(i, i)] += s;
    }
    SpdFactor::new(k)
}

fn check_inputs(inputs: &[Vec<f64>], targets: &[f64], params: &KernelParams) -> Result<()> {
    params.validate()?;
    if inputs.len() != targets.len() {
        return Err(Error::invalid(format!(
            "{} inputs but {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    if let Some(row) = inputs.iter().find(|r| r.len() != params.dim()) {
        return Err(Error::invalid(format!(
            "input row has dimension {} but kernel expects {}",
            row.len(),
            params.dim()
        )));
    }
    if inputs.iter().flatten().chain(targets).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite training data"));
    }
    Ok(())
}

/// A fitted GP: factor of `K + σ²I` and `α = (K + σ²I)⁻¹ y`.
#[derive(Debug, Clone)]
pub struct GpModel {
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
    params: KernelParams,
    factor: SpdFactor,
    alpha: Vec<f64>,
}

pub fn gp_fit(inputs: Vec<Vec<f64>>, targets: Vec<f64>, params: KernelParams) -> Result<GpModel> {
    if inputs.is_empty() {
        return Err(Error::invalid("gp_fit needs at least one training point"));
    }
    check_inputs(&inputs, &targets, &params)?;
    let factor = factor_with_noise(&inputs, &params)?;
    let alpha = factor.solve(&targets);
    Ok(GpModel {
        inputs,
        targets,
        params,
        factor,
        alpha,
    })
}

impl GpModel {
    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn factor(&self) -> &SpdFactor {
        &self.factor
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// `log p(y | X, θ)`.
    pub fn log_marginal(&self) -> f64 {
        let quad: f64 = self.targets.iter().zip(&self.alpha).map(|(y, a)| y * a).sum();
        -0.5 * quad - 0.5 * self.factor.log_det() - 0.5 * self.len() as f64 * LN_2PI
    }

    /// Gradient of [`Self::log_marginal`] in the flat log-parameter layout.
    pub fn log_marginal_gradient(&self) -> Vec<f64> {
        let n = self.len();
        let mut w = self.factor.inverse();
        for i in 0..n {
            for j in 0..n {
                w[(i, j)] = self.alpha[i] * self.alpha[j] - w[(i, j)];
            }
        }
        half_trace_kernel_gradients(&self.inputs, &self.params, &w)
    }

    /// Posterior over the latent `f(x*)`.
    pub fn predict(&self, x_star: &[f64]) -> Result<GaussianPosterior> {
        if x_star.len() != self.params.dim() {
            return Err(Error::invalid("test point dimension mismatch"));
        }
        let mut k = cross_kernel(&self.inputs, x_star, &self.params);
        let mean: f64 = k.iter().zip(&self.alpha).map(|(a, b)| a * b).sum();
        self.factor.forward_solve(&mut k);
        let s2 = self.params.signal_variance();
        let var = s2 - k.iter().map(|v| v * v).sum::<f64>();
        Ok(GaussianPosterior {
            mean,
            variance: var.clamp(0.0, s2),
        })
    }

    pub fn to_json(&self) -> GpModelJson {
        let n = self.len();
        let l = self.factor.l();
        GpModelJson {
            n,
            d: self.params.dim(),
            inputs: self.inputs.iter().flatten().copied().collect(),
            targets: self.targets.clone(),
            params: self.params.clone(),
            jitter: self.factor.jitter,
            chol_lower: (0..n).flat_map(|i| (0..=i).map(move |j| l[(i, j)])).collect(),
        }
    }

    /// Rebuilds the model from JSON, refactoring from the stored data.
    pub fn from_json(j: &GpModelJson) -> Result<Self> {
        if j.inputs.len() != j.n * j.d {
            return Err(Error::invalid("inputs array does not match n·d"));
        }
        let inputs = if j.d == 0 {
            vec![vec![]; j.n]
        } else {
            j.inputs.chunks(j.d).map(<[f64]>::to_vec).collect()
        };
        gp_fit(inputs, j.targets.clone(), j.params.clone())
    }
}

/// Serialized GP: flat row-major inputs and the packed lower Cholesky factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpModelJson {
    pub n: usize,
    pub d: usize,
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    pub params: KernelParams,
    pub jitter: f64,
    pub chol_lower: Vec<f64>,
}

/// `½ tr(W ∂(K+σ²I)/∂p)` for every log-parameter `p`, `W` symmetric.
pub(crate) fn half_trace_kernel_gradients(
    inputs: &[Vec<f64>],
    params: &KernelParams,
    w: &DMatrix<f64>,
) -> Vec<f64> {
    let n = inputs.len();
    let dim = params.dim();
    let s2 = params.signal_variance();
    let il = params.inv_sq_lengthscales();
    let mut g = vec![0.0; dim + 2];
    let mut diag_w = 0.0;
    for i in 0..n {
        let wii = w[(i, i)];
        diag_w += wii;
        // k(x,x) = s²; no lengthscale contribution on the diagonal.
        g[dim] += 0.5 * wii * s2;
        for j in 0..i {
            let wij = w[(i, j)];
            let (xi, xj) = (&inputs[i], &inputs[j]);
            let mut r2 = 0.0;
            for d in 0..dim {
                let t = xi[d] - xj[d];
                r2 += t * t * il[d];
            }
            let k = s2 * (-0.5 * r2).exp();
            // symmetric pair counted twice, times ½
            let c = wij * k;
            g[dim] += c;
            for d in 0..dim {
                let t = xi[d] - xj[d];
                g[d] += c * t * t * il[d];
            }
        }
    }
    g[dim + 1] = 0.5 * diag_w * params.noise_variance();
    g
}

/// Gaussian posterior of `U_r` given the factum appended as the last row.
///
/// `μ = σ²((K+σ²I)⁻¹ y)_last`, `Σ = σ²(1 − σ²((K+σ²I)⁻¹)_last,last)`.
pub fn gp_noise_posterior(
    train_inputs: &[Vec<f64>],
    train_targets: &[f64],
    factum_parents: &[f64],
    factum_target: f64,
    params: &KernelParams,
) -> Result<GaussianPosterior> {
    let mut inputs = train_inputs.to_vec();
    inputs.push(factum_parents.to_vec());
    let mut targets = train_targets.to_vec();
    targets.push(factum_target);
    check_inputs(&inputs, &targets, params)?;
    let factor = factor_with_noise(&inputs, params)?;
    Ok(noise_posterior_from_factor(&factor, &factor.solve(&targets), params.noise_variance()))
}

/// Same as [`gp_noise_posterior`] given a factor over the concatenated
/// inputs and the solved vector for the concatenated targets.
pub(crate) fn noise_posterior_from_factor(factor: &SpdFactor, alpha: &[f64], sigma2: f64) -> GaussianPosterior {
    let last = factor.dim() - 1;
    let s2 = effective_noise(factor, sigma2);
    GaussianPosterior {
        mean: s2 * alpha[last],
        variance: noise_posterior_variance(factor, sigma2),
    }
}

/// Noise variance the factor actually encodes: jitter added to the diagonal
/// acts as extra observation noise, and counting it keeps `f + u` at the
/// factual value.
pub(crate) fn effective_noise(factor: &SpdFactor, sigma2: f64) -> f64 {
    sigma2 + factor.jitter
}

/// `σ²(1 − σ²/L_nn²)`: the last diagonal entry of `(K+σ²I)⁻¹` is `1/L_nn²`.
pub(crate) fn noise_posterior_variance(factor: &SpdFactor, sigma2: f64) -> f64 {
    let last = factor.dim() - 1;
    let lnn = factor.l()[(last, last)];
    let s2 = effective_noise(factor, sigma2);
    (s2 * (1.0 - s2 / (lnn * lnn))).clamp(0.0, s2)
}

/// Settings for type-II maximum likelihood of the kernel parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpTrainConfig {
    pub lr: f64,
    pub steps: usize,
}

impl Default for GpTrainConfig {
    fn default() -> Self {
        Self { lr: 0.05, steps: 300 }
    }
}

/// Maximizes the log marginal likelihood with Adam. Returns the fitted
/// model and the parameter trajectory (one entry per step, after the step).
pub fn fit_hyperparameters(
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
    init: KernelParams,
    cfg: &GpTrainConfig,
) -> Result<(GpModel, Vec<Vec<f64>>)> {
    let mut p = init.to_vec();
    let mut opt = Adam::new(p.len(), cfg.lr);
    let mut trajectory = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let model = gp_fit(inputs.clone(), targets.clone(), KernelParams::from_slice(&p))?;
        let g = model.log_marginal_gradient();
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training {
                step,
                reason: "non-finite marginal-likelihood gradient".into(),
            });
        }
        opt.ascend(&mut p, &g);
        KernelParams::clamp_in_place(&mut p);
        trajectory.push(p.clone());
    }
    let model = gp_fit(inputs, targets, KernelParams::from_slice(&p))?;
    Ok((model, trajectory))
}

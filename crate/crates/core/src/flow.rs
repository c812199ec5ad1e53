//! Conditional monotone rational-quadratic spline `g_φ(x | parents)`.
//!
//! Knots come from a three-layer ReLU conditioner network evaluated on the
//! parent values. Inside `[-B, B]` the transform is a rational-quadratic
//! spline; outside it is the identity, and both boundary derivatives are
//! pinned to 1 so the map is a C¹ bijection of the real line.
//!
//! At `φ = 0` the network outputs zeros, which map to uniform bins and unit
//! derivatives, i.e. the identity spline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest bin width or height, as a fraction of the uniform `2B/K`.
pub const MIN_BIN_FRACTION: f64 = 1e-3;
/// Smallest interior knot derivative.
pub const MIN_DERIVATIVE: f64 = 1e-3;
pub const DEFAULT_BINS: usize = 8;

/// `softplus(DERIV_OFFSET) = 1 − MIN_DERIVATIVE`, so a zero raw output gives
/// a unit derivative.
fn deriv_offset() -> f64 {
    ((1.0 - MIN_DERIVATIVE).exp() - 1.0).ln()
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_into(raw: &[f64], out: &mut [f64]) {
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &r) in out.iter_mut().zip(raw) {
        *o = (r - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Number of spline segments `K`.
    pub bins: usize,
    /// Half-width `B` of the spline box.
    pub bound: f64,
    pub hidden_dims: usize,
    /// Number of conditioning (parent) inputs.
    pub input_dim: usize,
}

/// Weight matrix `rows × cols` (row-major) followed by a bias of length `rows`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub rows: usize,
    pub cols: usize,
}

impl FlowConfig {
    pub fn new(input_dim: usize, bins: usize, bound: f64, hidden_dims: usize) -> Result<Self> {
        let c = Self {
            bins,
            bound,
            hidden_dims,
            input_dim,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins < 1 || self.hidden_dims < 1 || !(self.bound > 0.0 && self.bound.is_finite()) {
            return Err(Error::Parameter(format!(
                "flow config needs bins >= 1, hidden_dims >= 1, bound > 0; got {self:?}"
            )));
        }
        Ok(())
    }

    /// Raw conditioner outputs: K widths, K heights, K−1 interior derivatives.
    pub fn output_dim(&self) -> usize {
        3 * self.bins - 1
    }

    pub fn layer_shapes(&self) -> [LayerShape; 3] {
        let h = self.hidden_dims;
        [
            LayerShape { rows: h, cols: self.input_dim },
            LayerShape { rows: h, cols: h },
            LayerShape {
                rows: self.output_dim(),
                cols: h,
            },
        ]
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|s| s.rows * (s.cols + 1)).sum()
    }

    fn offsets(&self) -> Offsets {
        let (d, h, o) = (self.input_dim, self.hidden_dims, self.output_dim());
        let w1 = 0;
        let b1 = w1 + h * d;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + o * h;
        Offsets { w1, b1, w2, b2, w3, b3 }
    }

    fn check(&self, parents: &[f64], phi: &[f64]) -> Result<()> {
        if parents.len() != self.input_dim {
            return Err(Error::invalid(format!(
                "flow expects {} parent values, got {}",
                self.input_dim,
                parents.len()
            )));
        }
        if phi.len() != self.param_count() {
            return Err(Error::invalid(format!(
                "flow expects {} parameters, got {}",
                self.param_count(),
                phi.len()
            )));
        }
        Ok(())
    }

    fn in_box(&self, x: f64) -> bool {
        x > -self.bound && x < self.bound
    }
}

#[derive(Debug, Clone, Copy)]
struct Offsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
}

/// Knot parameters of one spline on `[-B, B]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineKnots {
    bound: f64,
    widths: Vec<f64>,
    heights: Vec<f64>,
    derivatives: Vec<f64>,
    xs: Vec<f64>,
    ys: Vec<f64>,
}

fn cumulative_edges(bound: f64, sizes: &[f64], edges: &mut Vec<f64>) {
    edges.clear();
    edges.push(-bound);
    let mut acc = -bound;
    for &s in &sizes[..sizes.len() - 1] {
        acc += s;
        edges.push(acc);
    }
    edges.push(bound);
}

/// Index of the segment containing `v`, for `v` inside the box.
fn bin_index(edges: &[f64], v: f64) -> usize {
    let k = edges.len() - 1;
    // partition_point gives the first edge > v
    edges[1..k].partition_point(|&e| e <= v)
}

impl SplineKnots {
    /// Builds knots from explicit widths, heights and the `K+1` knot
    /// derivatives (boundary ones included).
    pub fn new(bound: f64, widths: Vec<f64>, heights: Vec<f64>, derivatives: Vec<f64>) -> Result<Self> {
        let k = widths.len();
        if k == 0 || heights.len() != k || derivatives.len() != k + 1 {
            return Err(Error::Parameter("spline needs K widths, K heights, K+1 derivatives".into()));
        }
        let tol = 1e-9 * 2.0 * bound;
        for (name, v) in [("widths", &widths), ("heights", &heights)] {
            if v.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
                return Err(Error::Parameter(format!("spline {name} must be positive")));
            }
            if (v.iter().sum::<f64>() - 2.0 * bound).abs() > tol {
                return Err(Error::Parameter(format!("spline {name} must sum to 2B")));
            }
        }
        if derivatives.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(Error::Parameter("spline derivatives must be positive".into()));
        }
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        cumulative_edges(bound, &widths, &mut xs);
        cumulative_edges(bound, &heights, &mut ys);
        Ok(Self {
            bound,
            widths,
            heights,
            derivatives,
            xs,
            ys,
        })
    }

    pub fn identity(bins: usize, bound: f64) -> Self {
        let w = 2.0 * bound / bins as f64;
        Self::new(bound, vec![w; bins], vec![w; bins], vec![1.0; bins + 1]).expect("valid identity knots")
    }

    pub fn bins(&self) -> usize {
        self.widths.len()
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }

    pub fn heights(&self) -> &[f64] {
        &self.heights
    }

    pub fn derivatives(&self) -> &[f64] {
        &self.derivatives
    }

    fn segment(&self, k: usize) -> Segment {
        Segment {
            xk: self.xs[k],
            w: self.widths[k],
            yk: self.ys[k],
            h: self.heights[k],
            d0: self.derivatives[k],
            d1: self.derivatives[k + 1],
        }
    }

    /// `(g(x), log g'(x))`; identity outside the box.
    pub fn forward(&self, x: f64) -> (f64, f64) {
        if !(x > -self.bound && x < self.bound) {
            return (x, 0.0);
        }
        self.segment(bin_index(&self.xs, x)).forward(x)
    }

    pub fn inverse(&self, y: f64) -> f64 {
        if !(y > -self.bound && y < self.bound) {
            return y;
        }
        self.segment(bin_index(&self.ys, y)).inverse(y)
    }
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    xk: f64,
    w: f64,
    yk: f64,
    h: f64,
    d0: f64,
    d1: f64,
}

/// Partials of `y` and `log dy/dx` w.r.t. `(x_k, w, y_k, h, d0, d1)`.
#[derive(Debug, Clone, Copy, Default)]
struct SegmentPartials {
    dy: [f64; 6],
    dl: [f64; 6],
}

impl Segment {
    fn forward(&self, x: f64) -> (f64, f64) {
        let Segment { xk, w, yk, h, d0, d1 } = *self;
        let xi = ((x - xk) / w).clamp(0.0, 1.0);
        let s = h / w;
        let t = xi * (1.0 - xi);
        let den = s + (d0 + d1 - 2.0 * s) * t;
        let y = yk + h * (s * xi * xi + d0 * t) / den;
        let m = d1 * xi * xi + 2.0 * s * t + d0 * (1.0 - xi) * (1.0 - xi);
        let logdet = 2.0 * s.ln() + m.ln() - 2.0 * den.ln();
        (y, logdet)
    }

    fn forward_with_partials(&self, x: f64) -> (f64, f64, SegmentPartials) {
        let Segment { xk, w, yk, h, d0, d1 } = *self;
        let xi = ((x - xk) / w).clamp(0.0, 1.0);
        let s = h / w;
        let t = xi * (1.0 - xi);
        let tp = 1.0 - 2.0 * xi;
        let c = d0 + d1 - 2.0 * s;
        let den = s + c * t;
        let den2 = den * den;
        let n1 = s * xi * xi + d0 * t;
        let y = yk + h * n1 / den;
        let m = d1 * xi * xi + 2.0 * s * t + d0 * (1.0 - xi) * (1.0 - xi);
        let logdet = 2.0 * s.ln() + m.ln() - 2.0 * den.ln();

        let y_xi = h * ((2.0 * s * xi + d0 * tp) * den - n1 * c * tp) / den2;
        let y_s = h * (xi * xi * den - n1 * (1.0 - 2.0 * t)) / den2;
        let y_d0 = h * (t * den - n1 * t) / den2;
        let y_d1 = -h * n1 * t / den2;
        let y_h = n1 / den;

        let l_xi = (2.0 * d1 * xi + 2.0 * s * tp - 2.0 * d0 * (1.0 - xi)) / m - 2.0 * c * tp / den;
        let l_s = 2.0 / s + 2.0 * t / m - 2.0 * (1.0 - 2.0 * t) / den;
        let l_d0 = (1.0 - xi) * (1.0 - xi) / m - 2.0 * t / den;
        let l_d1 = xi * xi / m - 2.0 * t / den;

        let inv_w = 1.0 / w;
        let p = SegmentPartials {
            dy: [
                -y_xi * inv_w,
                -(y_xi * xi + y_s * s) * inv_w,
                1.0,
                y_h + y_s * inv_w,
                y_d0,
                y_d1,
            ],
            dl: [
                -l_xi * inv_w,
                -(l_xi * xi + l_s * s) * inv_w,
                0.0,
                l_s * inv_w,
                l_d0,
                l_d1,
            ],
        };
        (y, logdet, p)
    }

    fn inverse(&self, y: f64) -> f64 {
        let Segment { xk, w, yk, h, d0, d1 } = *self;
        let s = h / w;
        let c = d0 + d1 - 2.0 * s;
        let dy = y - yk;
        let a = h * (s - d0) + dy * c;
        let b = h * d0 - dy * c;
        let cc = -s * dy;
        let disc = (b * b - 4.0 * a * cc).max(0.0);
        let xi = (2.0 * cc / (-b - disc.sqrt())).clamp(0.0, 1.0);
        xk + xi * w
    }
}

/// Scratch buffers for conditioner evaluation and backpropagation.
#[derive(Debug, Clone)]
pub struct FlowWorkspace {
    pre1: Vec<f64>,
    h1: Vec<f64>,
    pre2: Vec<f64>,
    h2: Vec<f64>,
    out: Vec<f64>,
    pw: Vec<f64>,
    ph: Vec<f64>,
    widths: Vec<f64>,
    heights: Vec<f64>,
    derivs: Vec<f64>,
    xs: Vec<f64>,
    ys: Vec<f64>,
    g_out: Vec<f64>,
    g_h2: Vec<f64>,
    g_h1: Vec<f64>,
    gw: Vec<f64>,
    gh: Vec<f64>,
    gd: Vec<f64>,
}

impl FlowWorkspace {
    pub fn new(cfg: &FlowConfig) -> Self {
        let (h, o, k) = (cfg.hidden_dims, cfg.output_dim(), cfg.bins);
        Self {
            pre1: vec![0.0; h],
            h1: vec![0.0; h],
            pre2: vec![0.0; h],
            h2: vec![0.0; h],
            out: vec![0.0; o],
            pw: vec![0.0; k],
            ph: vec![0.0; k],
            widths: vec![0.0; k],
            heights: vec![0.0; k],
            derivs: vec![0.0; k + 1],
            xs: Vec::with_capacity(k + 1),
            ys: Vec::with_capacity(k + 1),
            g_out: vec![0.0; o],
            g_h2: vec![0.0; h],
            g_h1: vec![0.0; h],
            gw: vec![0.0; k],
            gh: vec![0.0; k],
            gd: vec![0.0; k + 1],
        }
    }

    /// Runs the conditioner and fills the knot buffers.
    fn condition(&mut self, cfg: &FlowConfig, parents: &[f64], phi: &[f64]) -> Result<()> {
        let off = cfg.offsets();
        let (d, h, o, k) = (cfg.input_dim, cfg.hidden_dims, cfg.output_dim(), cfg.bins);
        for i in 0..h {
            let row = &phi[off.w1 + i * d..off.w1 + (i + 1) * d];
            let mut a = phi[off.b1 + i];
            for j in 0..d {
                a += row[j] * parents[j];
            }
            self.pre1[i] = a;
            self.h1[i] = a.max(0.0);
        }
        for i in 0..h {
            let row = &phi[off.w2 + i * h..off.w2 + (i + 1) * h];
            let mut a = phi[off.b2 + i];
            for j in 0..h {
                a += row[j] * self.h1[j];
            }
            self.pre2[i] = a;
            self.h2[i] = a.max(0.0);
        }
        for i in 0..o {
            let row = &phi[off.w3 + i * h..off.w3 + (i + 1) * h];
            let mut a = phi[off.b3 + i];
            for j in 0..h {
                a += row[j] * self.h2[j];
            }
            self.out[i] = a;
        }
        if self.out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("conditioner produced non-finite activations".into()));
        }
        let two_b = 2.0 * cfg.bound;
        let min_size = MIN_BIN_FRACTION * two_b / k as f64;
        let scale = two_b - k as f64 * min_size;
        softmax_into(&self.out[..k], &mut self.pw);
        softmax_into(&self.out[k..2 * k], &mut self.ph);
        for i in 0..k {
            self.widths[i] = min_size + scale * self.pw[i];
            self.heights[i] = min_size + scale * self.ph[i];
        }
        let doff = deriv_offset();
        self.derivs[0] = 1.0;
        self.derivs[k] = 1.0;
        for i in 1..k {
            self.derivs[i] = MIN_DERIVATIVE + softplus(self.out[2 * k + i - 1] + doff);
        }
        cumulative_edges(cfg.bound, &self.widths, &mut self.xs);
        cumulative_edges(cfg.bound, &self.heights, &mut self.ys);
        Ok(())
    }

    fn segment(&self, k: usize) -> Segment {
        Segment {
            xk: self.xs[k],
            w: self.widths[k],
            yk: self.ys[k],
            h: self.heights[k],
            d0: self.derivs[k],
            d1: self.derivs[k + 1],
        }
    }

    fn knots(&self, bound: f64) -> SplineKnots {
        SplineKnots {
            bound,
            widths: self.widths.clone(),
            heights: self.heights.clone(),
            derivatives: self.derivs.clone(),
            xs: self.xs.clone(),
            ys: self.ys.clone(),
        }
    }
}

/// Knots produced by the conditioner for the given parents.
pub fn conditioner(parents: &[f64], phi: &[f64], cfg: &FlowConfig) -> Result<SplineKnots> {
    cfg.check(parents, phi)?;
    let mut ws = FlowWorkspace::new(cfg);
    ws.condition(cfg, parents, phi)?;
    Ok(ws.knots(cfg.bound))
}

/// `(g_φ(x | parents), log |∂g/∂x|)`.
pub fn g_forward(x: f64, parents: &[f64], phi: &[f64], cfg: &FlowConfig) -> Result<(f64, f64)> {
    cfg.check(parents, phi)?;
    let mut ws = FlowWorkspace::new(cfg);
    forward_ws(x, parents, phi, cfg, &mut ws)
}

/// [`g_forward`] with caller-provided scratch space.
pub fn forward_ws(
    x: f64,
    parents: &[f64],
    phi: &[f64],
    cfg: &FlowConfig,
    ws: &mut FlowWorkspace,
) -> Result<(f64, f64)> {
    if !x.is_finite() {
        return Err(Error::invalid("flow input is not finite"));
    }
    if !cfg.in_box(x) {
        return Ok((x, 0.0));
    }
    ws.condition(cfg, parents, phi)?;
    let (z, ld) = ws.segment(bin_index(&ws.xs, x)).forward(x);
    if !(z.is_finite() && ld.is_finite()) {
        return Err(Error::Parameter("flow output is not finite".into()));
    }
    Ok((z, ld))
}

/// `g_φ⁻¹(z | parents)`.
pub fn g_inverse(z: f64, parents: &[f64], phi: &[f64], cfg: &FlowConfig) -> Result<f64> {
    cfg.check(parents, phi)?;
    let mut ws = FlowWorkspace::new(cfg);
    inverse_ws(z, parents, phi, cfg, &mut ws)
}

pub fn inverse_ws(
    z: f64,
    parents: &[f64],
    phi: &[f64],
    cfg: &FlowConfig,
    ws: &mut FlowWorkspace,
) -> Result<f64> {
    if !z.is_finite() {
        return Err(Error::invalid("flow inverse input is not finite"));
    }
    if !cfg.in_box(z) {
        return Ok(z);
    }
    ws.condition(cfg, parents, phi)?;
    Ok(ws.segment(bin_index(&ws.ys, z)).inverse(z))
}

/// `∂L/∂φ` given upstream sensitivities `(∂L/∂z, ∂L/∂log|g'|)` at one point.
pub fn flow_param_gradients(
    x: f64,
    parents: &[f64],
    phi: &[f64],
    cfg: &FlowConfig,
    upstream: (f64, f64),
) -> Result<Vec<f64>> {
    cfg.check(parents, phi)?;
    let mut grad = vec![0.0; cfg.param_count()];
    let mut ws = FlowWorkspace::new(cfg);
    accumulate_gradients(x, parents, phi, cfg, upstream, &mut grad, &mut ws)?;
    Ok(grad)
}

/// Forward pass plus reverse accumulation of `∂L/∂φ` into `grad`.
/// Returns `(z, log|g'|)`.
pub fn accumulate_gradients(
    x: f64,
    parents: &[f64],
    phi: &[f64],
    cfg: &FlowConfig,
    upstream: (f64, f64),
    grad: &mut [f64],
    ws: &mut FlowWorkspace,
) -> Result<(f64, f64)> {
    if !x.is_finite() {
        return Err(Error::invalid("flow input is not finite"));
    }
    if !cfg.in_box(x) {
        return Ok((x, 0.0));
    }
    ws.condition(cfg, parents, phi)?;
    let k_bin = bin_index(&ws.xs, x);
    let (z, ld, p) = ws.segment(k_bin).forward_with_partials(x);
    let (gz, gl) = upstream;
    if gz == 0.0 && gl == 0.0 {
        return Ok((z, ld));
    }
    // local knot sensitivities
    let g: [f64; 6] = std::array::from_fn(|i| gz * p.dy[i] + gl * p.dl[i]);
    let (d, h, o, k) = (cfg.input_dim, cfg.hidden_dims, cfg.output_dim(), cfg.bins);
    ws.gw.iter_mut().for_each(|v| *v = 0.0);
    ws.gh.iter_mut().for_each(|v| *v = 0.0);
    ws.gd.iter_mut().for_each(|v| *v = 0.0);
    // x_k = −B + Σ_{j<k} w_j, likewise y_k
    for j in 0..k_bin {
        ws.gw[j] += g[0];
        ws.gh[j] += g[2];
    }
    ws.gw[k_bin] += g[1];
    ws.gh[k_bin] += g[3];
    ws.gd[k_bin] += g[4];
    ws.gd[k_bin + 1] += g[5];

    let two_b = 2.0 * cfg.bound;
    let min_size = MIN_BIN_FRACTION * two_b / k as f64;
    let scale = two_b - k as f64 * min_size;
    let dot_w: f64 = ws.gw.iter().zip(&ws.pw).map(|(a, b)| a * b).sum();
    let dot_h: f64 = ws.gh.iter().zip(&ws.ph).map(|(a, b)| a * b).sum();
    for i in 0..k {
        ws.g_out[i] = scale * ws.pw[i] * (ws.gw[i] - dot_w);
        ws.g_out[k + i] = scale * ws.ph[i] * (ws.gh[i] - dot_h);
    }
    let doff = deriv_offset();
    for i in 1..k {
        ws.g_out[2 * k + i - 1] = ws.gd[i] * sigmoid(ws.out[2 * k + i - 1] + doff);
    }

    let off = cfg.offsets();
    // layer 3
    ws.g_h2.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..o {
        let go = ws.g_out[i];
        if go == 0.0 {
            continue;
        }
        grad[off.b3 + i] += go;
        let base = off.w3 + i * h;
        for j in 0..h {
            grad[base + j] += go * ws.h2[j];
            ws.g_h2[j] += go * phi[base + j];
        }
    }
    // layer 2
    ws.g_h1.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..h {
        if ws.pre2[i] <= 0.0 {
            continue;
        }
        let gp = ws.g_h2[i];
        grad[off.b2 + i] += gp;
        let base = off.w2 + i * h;
        for j in 0..h {
            grad[base + j] += gp * ws.h1[j];
            ws.g_h1[j] += gp * phi[base + j];
        }
    }
    // layer 1
    for i in 0..h {
        if ws.pre1[i] <= 0.0 {
            continue;
        }
        let gp = ws.g_h1[i];
        grad[off.b1 + i] += gp;
        let base = off.w1 + i * d;
        for j in 0..d {
            grad[base + j] += gp * parents[j];
        }
    }
    Ok((z, ld))
}

/// Per-layer shapes plus the flat parameter vector, for model JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowLayout {
    pub config: FlowConfig,
    pub layers: Vec<LayerShape>,
    pub param_count: usize,
}

impl From<&FlowConfig> for FlowLayout {
    fn from(c: &FlowConfig) -> Self {
        Self {
            config: *c,
            layers: c.layer_shapes().to_vec(),
            param_count: c.param_count(),
        }
    }
}

//! Metrics and experiment pipelines.
//!
//! Distribution fit is scored by a kernel two-sample statistic with a
//! squared-exponential kernel whose bandwidth is the median pairwise
//! distance of ground-truth samples. Recourse is scored by validity (the
//! found action replayed through the true SCM with the factum's recorded
//! noise) and normalized cost.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::counterfactual::{self, CounterfactualSample, Mode, ModelSpec, OracleSampler, RootSource, Sampler, ScmEnsemble};
use crate::error::{Error, Result};
use crate::recourse::{self, Classifier, ClassifierKind, RecourseConfig, RecourseResult, RecourseRow};
use crate::rng;
use crate::scm::{self, Benchmark, BenchmarkConfig, ClosedFormScm, Factum, Intervention};
use crate::vi::TrainConfig;

/// Points above this count are subsampled by the multivariate median
/// heuristic.
pub const MEDIAN_EXACT_LIMIT: usize = 2000;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `k`-th smallest (0-based) pairwise gap `|x_j − x_i|` of sorted data,
/// found by bisection on the value and a final two-pointer scan.
fn kth_gap_1d(sorted: &[f64], k: u64) -> f64 {
    let n = sorted.len();
    // pairs with gap <= t
    let count = |t: f64| -> u64 {
        let mut c = 0u64;
        let mut j = 0;
        for i in 0..n {
            if j < i {
                j = i;
            }
            while j + 1 < n && sorted[j + 1] - sorted[i] <= t {
                j += 1;
            }
            c += (j - i) as u64;
        }
        c
    };
    let (mut lo, mut hi) = (0.0f64, sorted[n - 1] - sorted[0]);
    if count(lo) > k {
        return 0.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if count(mid) > k {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    // the answer is the smallest gap > lo; it is <= hi
    let mut best = f64::INFINITY;
    let mut j = 0;
    for i in 0..n {
        if j <= i {
            j = i + 1;
        }
        while j < n && sorted[j] - sorted[i] <= lo {
            j += 1;
        }
        if j < n {
            best = best.min(sorted[j] - sorted[i]);
        }
    }
    best
}

/// Median pairwise Euclidean distance. Exact for one-dimensional data and
/// for at most [`MEDIAN_EXACT_LIMIT`] points; larger multivariate sets use a
/// fixed-seed subsample of that size.
pub fn median_heuristic(points: &[Vec<f64>]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::invalid("median heuristic needs at least two points"));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::invalid("points differ in dimension"));
    }
    let median = if d == 1 {
        let mut v: Vec<f64> = points.iter().map(|p| p[0]).collect();
        v.sort_by(f64::total_cmp);
        let n = v.len() as u64;
        let m = n * (n - 1) / 2;
        if m % 2 == 1 {
            kth_gap_1d(&v, m / 2)
        } else {
            0.5 * (kth_gap_1d(&v, m / 2 - 1) + kth_gap_1d(&v, m / 2))
        }
    } else {
        let pts: Vec<&Vec<f64>> = if points.len() <= MEDIAN_EXACT_LIMIT {
            points.iter().collect()
        } else {
            let mut r = rng::stream(0);
            rand::seq::index::sample(&mut r, points.len(), MEDIAN_EXACT_LIMIT)
                .into_iter()
                .map(|i| &points[i])
                .collect()
        };
        let mut dists = Vec::with_capacity(pts.len() * (pts.len() - 1) / 2);
        for i in 0..pts.len() {
            for j in 0..i {
                dists.push(sq_dist(pts[i], pts[j]).sqrt());
            }
        }
        let m = dists.len();
        let mut kth = |k: usize| *dists.select_nth_unstable_by(k, f64::total_cmp).1;
        if m % 2 == 1 {
            kth(m / 2)
        } else {
            let a = kth(m / 2 - 1);
            let b = kth(m / 2);
            0.5 * (a + b)
        }
    };
    if !(median > 0.0) {
        return Err(Error::invalid("median pairwise distance is zero"));
    }
    Ok(median)
}

fn mean_kernel(a: &[Vec<f64>], b: &[Vec<f64>], gamma: f64) -> f64 {
    let rows: Vec<f64> = a
        .par_iter()
        .map(|x| b.iter().map(|y| (-gamma * sq_dist(x, y)).exp()).sum::<f64>())
        .collect();
    rows.iter().sum::<f64>() / (a.len() as f64 * b.len() as f64)
}

/// Biased (V-statistic) squared MMD with kernel `exp(−‖x−y‖²/(2h²))`.
pub fn mmd2(x: &[Vec<f64>], y: &[Vec<f64>], bandwidth: f64) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::invalid("MMD needs non-empty sample sets"));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::invalid("bandwidth must be positive"));
    }
    let gamma = 0.5 / (bandwidth * bandwidth);
    let v = mean_kernel(x, x, gamma) + mean_kernel(y, y, gamma) - 2.0 * mean_kernel(x, y, gamma);
    Ok(v.max(0.0))
}

/// Unbiased (U-statistic) squared MMD; can be slightly negative.
pub fn mmd2_unbiased(x: &[Vec<f64>], y: &[Vec<f64>], bandwidth: f64) -> Result<f64> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::invalid("unbiased MMD needs at least two points per set"));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::invalid("bandwidth must be positive"));
    }
    let gamma = 0.5 / (bandwidth * bandwidth);
    // the diagonal contributes exactly one per point
    let within = |a: &[Vec<f64>]| {
        let n = a.len() as f64;
        (mean_kernel(a, a, gamma) * n * n - n) / (n * (n - 1.0))
    };
    Ok(within(x) + within(y) - 2.0 * mean_kernel(x, y, gamma))
}

/// `sqrt(mmd2)`, the reported MMD.
pub fn mmd(x: &[Vec<f64>], y: &[Vec<f64>], bandwidth: f64) -> Result<f64> {
    Ok(mmd2(x, y, bandwidth)?.sqrt())
}

/// Standard deviation of the MMD (or its square) over `reps` bootstrap
/// resamples of `x`.
pub fn mmd_bootstrap_se(x: &[Vec<f64>], y: &[Vec<f64>], bandwidth: f64, squared: bool, reps: usize, seed: u64) -> Result<f64> {
    if reps < 2 {
        return Ok(0.0);
    }
    let vals = (0..reps)
        .map(|b| {
            let mut r = rng::stream(rng::derive_seed(seed, b as u64));
            let xs: Vec<Vec<f64>> = (0..x.len()).map(|_| x[r.random_range(0..x.len())].clone()).collect();
            if squared {
                mmd2(&xs, y, bandwidth)
            } else {
                mmd(&xs, y, bandwidth)
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(sample_variance(&vals).sqrt())
}

fn sample_variance(v: &[f64]) -> f64 {
    let n = v.len();
    if n < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / n as f64;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

/// Per-coordinate sample variance summed over `coords`.
fn summed_variance(samples: &[Vec<f64>], coords: &[usize]) -> f64 {
    coords
        .iter()
        .map(|&c| sample_variance(&samples.iter().map(|s| s[c]).collect::<Vec<_>>()))
        .sum()
}

/// Mean over facta of the within-factum sample variance, summed over
/// `coords`. Each inner set holds the draws for one factum.
pub fn cf_variance(per_factum: &[Vec<Vec<f64>>], coords: &[usize]) -> Result<f64> {
    if per_factum.is_empty() || per_factum.iter().any(|s| s.len() < 2) {
        return Err(Error::invalid("cf_variance needs at least two samples per factum"));
    }
    Ok(per_factum.iter().map(|s| summed_variance(s, coords)).sum::<f64>() / per_factum.len() as f64)
}

/// Percentage of facta whose action, replayed through the true SCM with
/// the recorded noise, is classified positive. Infeasible results count as
/// failures.
pub fn validity(results: &[RecourseResult], facta: &[Factum], scm: &ClosedFormScm, h: &Classifier) -> Result<f64> {
    if results.len() != facta.len() || results.is_empty() {
        return Err(Error::invalid("validity needs one result per factum"));
    }
    let mut ok = 0;
    for (r, f) in results.iter().zip(facta) {
        if r.feasible && h.is_positive(&scm.ground_truth_counterfactual(f, &r.action)?)? {
            ok += 1;
        }
    }
    Ok(100.0 * ok as f64 / results.len() as f64)
}

/// Compared model families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "ORACLE")]
    Oracle,
    #[serde(rename = "LIN")]
    Lin,
    #[serde(rename = "GP")]
    Gp,
    #[serde(rename = "BW-GP")]
    Bwgp,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Oracle => "ORACLE",
            ModelKind::Lin => "LIN",
            ModelKind::Gp => "GP",
            ModelKind::Bwgp => "BW-GP",
        }
    }
}

/// Flow and training hyperparameters of the warped model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BwgpHyper {
    pub bins: usize,
    pub bound: f64,
    pub hidden_dims: usize,
    pub lr: f64,
    pub steps: usize,
    pub mc_samples: usize,
    pub prior_var: f64,
    /// Treat `bound` as an upper limit and fit the box to each node's data.
    #[serde(default)]
    pub cover_data: bool,
}

impl BwgpHyper {
    pub fn spec(&self) -> ModelSpec {
        ModelSpec::Bwgp {
            bins: self.bins,
            bound: self.bound,
            hidden_dims: self.hidden_dims,
            train: TrainConfig {
                lr: self.lr,
                steps: self.steps,
                mc_samples: self.mc_samples,
                prior_var: self.prior_var,
                ..TrainConfig::default()
            },
            cover_data: self.cover_data,
        }
    }
}

/// Tuned values per benchmark; the seven-variable system has one column per
/// classifier.
pub fn table_hyperparameters(benchmark: &str, classifier: ClassifierKind) -> BwgpHyper {
    let h = |bound, hidden_dims, lr, steps, mc_samples, prior_var| BwgpHyper {
        bins: crate::flow::DEFAULT_BINS,
        bound,
        hidden_dims,
        lr,
        steps,
        mc_samples,
        prior_var,
        cover_data: true,
    };
    match (benchmark, classifier) {
        ("linear3", _) => h(6.0, 10, 0.03, 5719, 15, 0.1),
        ("nonlinear3", _) => h(1.0, 13, 0.03, 5719, 21, 0.1),
        ("nonadditive3", _) => h(10.0, 40, 0.01, 4501, 20, 0.05),
        (_, ClassifierKind::LinearLogistic) => h(27.0, 2, 0.04, 6982, 31, 0.03),
        (_, ClassifierKind::NonlinearLogistic) => h(3.0, 6, 0.008, 6198, 24, 0.01),
        (_, ClassifierKind::RandomForest) => h(21.0, 27, 0.05, 4956, 21, 0.02),
    }
}

/// Recourse search settings inside an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecourseSettings {
    pub delta: f64,
    pub grid_points: usize,
    pub refine_factor: usize,
    pub mc_samples: usize,
}

impl Default for RecourseSettings {
    fn default() -> Self {
        Self {
            delta: 0.05,
            grid_points: 10,
            refine_factor: 10,
            mc_samples: 100,
        }
    }
}

/// A benchmark run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Built-in benchmark name, used when `custom` is absent.
    pub benchmark: String,
    pub custom: Option<BenchmarkConfig>,
    pub models: Vec<ModelKind>,
    pub classifier: ClassifierKind,
    pub n_train: usize,
    pub n_facta: usize,
    pub seed: u64,
    pub modes: Vec<Mode>,
    /// Warped-model hyperparameters; the tuned table when absent.
    pub bwgp: Option<BwgpHyper>,
    pub gp_train: TrainConfig,
    pub recourse: RecourseSettings,
    /// Draws per factum for the counterfactual variance.
    pub variance_samples: usize,
    pub bootstrap: usize,
    /// Report the squared statistic instead of its root.
    pub mmd_squared: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            benchmark: "linear3".into(),
            custom: None,
            models: vec![ModelKind::Oracle, ModelKind::Lin, ModelKind::Gp, ModelKind::Bwgp],
            classifier: ClassifierKind::LinearLogistic,
            n_train: 250,
            n_facta: 100,
            seed: 0,
            modes: vec![Mode::Cf, Mode::Cate],
            bwgp: None,
            gp_train: TrainConfig {
                lr: 0.05,
                steps: 500,
                mc_samples: 1,
                ..TrainConfig::default()
            },
            recourse: RecourseSettings::default(),
            variance_samples: 100,
            bootstrap: 20,
            mmd_squared: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train < 2 || self.n_facta < 1 || self.models.is_empty() || self.modes.is_empty() || self.variance_samples < 2 {
            return Err(Error::invalid("experiment needs n_train >= 2, n_facta >= 1, models, modes and variance_samples >= 2"));
        }
        Ok(())
    }

    pub fn load_benchmark(&self) -> Result<Benchmark> {
        match &self.custom {
            Some(c) => Benchmark::from_config(c),
            None => scm::benchmark(&self.benchmark),
        }
    }

    pub fn bwgp_hyper(&self) -> BwgpHyper {
        self.bwgp
            .clone()
            .unwrap_or_else(|| table_hyperparameters(&self.benchmark, self.classifier))
    }

    pub fn model_spec(&self, kind: ModelKind) -> Option<ModelSpec> {
        match kind {
            ModelKind::Oracle => None,
            ModelKind::Lin => Some(ModelSpec::Linear),
            ModelKind::Gp => Some(ModelSpec::Gp {
                train: self.gp_train.clone(),
            }),
            ModelKind::Bwgp => Some(self.bwgp_hyper().spec()),
        }
    }
}

/// One `metrics.csv` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub model: String,
    pub mode: String,
    pub validity: f64,
    /// Mean normalized cost over feasible facta, in percent.
    pub cost_mean: f64,
    pub cost_sd: f64,
    pub mmd: Option<f64>,
    pub mmd_se: Option<f64>,
    /// Mean within-factum variance, summed over non-root nodes.
    pub cf_variance: f64,
    /// Variance of the one-draw-per-factum set, summed over non-root nodes.
    pub pooled_variance: f64,
    pub n_facta: usize,
    pub n_feasible: usize,
}

/// Everything a benchmark run produces.
#[derive(Debug, Clone)]
pub struct BenchmarkReport {
    pub metrics: Vec<MetricsRow>,
    pub recourse: Vec<RecourseRow>,
    pub samples: Vec<(String, Mode, Vec<CounterfactualSample>)>,
}

/// Fixed data shared by all models of one run.
pub struct BenchmarkSetup {
    pub bench: Benchmark,
    pub train: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
    pub classifier: Classifier,
    pub facta: Vec<Factum>,
    /// Ground-truth root draws for the soft interventions, two independent
    /// sets (the second only feeds the kernel bandwidth).
    pub root_draws: [Vec<Vec<f64>>; 2],
}

/// Samples training data, labels, classifier and negatively classified
/// facta.
pub fn prepare(cfg: &ExperimentConfig) -> Result<BenchmarkSetup> {
    cfg.validate()?;
    let bench = cfg.load_benchmark().map_err(|e| e.at_stage("setup"))?;
    let scm = &bench.scm;
    let train = scm.ancestral_sample(cfg.n_train, rng::derive_tagged(cfg.seed, "train"))?;
    let threshold = bench.score.median_threshold(&train.x);
    let labels: Vec<bool> = train.x.iter().map(|x| bench.score.score(x) >= threshold).collect();
    let classifier = recourse::train_classifier(&train.x, &labels, cfg.classifier, rng::derive_tagged(cfg.seed, "classifier"))
        .map_err(|e| e.at_stage("classifier"))?;
    let mut facta = Vec::with_capacity(cfg.n_facta);
    let mut round = 0u64;
    while facta.len() < cfg.n_facta {
        if round >= 50 {
            return Err(Error::invalid("could not find enough negatively classified facta").at_stage("facta"));
        }
        let pool = scm.ancestral_sample(10 * cfg.n_facta, rng::derive_path(rng::derive_tagged(cfg.seed, "facta"), &[round]))?;
        for i in 0..pool.len() {
            if facta.len() == cfg.n_facta {
                break;
            }
            if !classifier.is_positive(&pool.x[i])? {
                let mut f = pool.factum(i);
                f.label = Some(false);
                facta.push(f);
            }
        }
        round += 1;
    }
    let roots = |tag: &str| -> Result<Vec<Vec<f64>>> {
        Ok(scm.ancestral_sample(cfg.n_facta, rng::derive_tagged(cfg.seed, tag))?.x)
    };
    let root_draws = [roots("mmd-roots-a")?, roots("mmd-roots-b")?];
    Ok(BenchmarkSetup {
        bench,
        train: train.x,
        labels,
        classifier,
        facta,
        root_draws,
    })
}

fn root_intervention(scm: &ClosedFormScm, row: &[f64]) -> Intervention {
    let roots = scm.graph().roots();
    let values = roots.iter().map(|&r| row[r]).collect();
    Intervention { targets: roots, values }
}

fn non_roots(scm: &ClosedFormScm) -> Vec<usize> {
    (0..scm.dim()).filter(|&r| !scm.graph().is_root(r)).collect()
}

/// Samplers of one model in one mode, one per factum.
enum Samplers<'a> {
    Oracle(&'a ClosedFormScm, u64),
    Ensemble(&'a ScmEnsemble, u64),
}

impl Samplers<'_> {
    fn for_factum(&self, mode: Mode, f: &Factum, id: usize) -> Result<Box<dyn Sampler + '_>> {
        Ok(match (self, mode) {
            (Samplers::Oracle(scm, _), Mode::Cf) => Box::new(OracleSampler::counterfactual(scm, f)?),
            (Samplers::Oracle(scm, seed), Mode::Cate) => Box::new(OracleSampler::interventional(scm, *seed)),
            (Samplers::Ensemble(e, seed), Mode::Cf) => Box::new(e.counterfactual_sampler(f, rng::derive_seed(*seed, id as u64))?),
            (Samplers::Ensemble(e, seed), Mode::Cate) => Box::new(e.interventional_sampler(*seed)?),
        })
    }
}

struct FactumOutcome {
    result: RecourseResult,
    mmd_draw: Vec<f64>,
    truth_draw: [Vec<f64>; 2],
    variance: f64,
}

/// Runs recourse and sampling metrics for one model in one mode.
fn evaluate_mode(
    cfg: &ExperimentConfig,
    setup: &BenchmarkSetup,
    samplers: &Samplers<'_>,
    kind: ModelKind,
    mode: Mode,
) -> Result<(MetricsRow, Vec<RecourseRow>, Vec<CounterfactualSample>)> {
    let scm = &setup.bench.scm;
    let graph = scm.graph();
    let d = scm.dim();
    let mut rcfg = RecourseConfig::new(setup.bench.actionable.clone(), RecourseConfig::ranges_from(&setup.train));
    rcfg.delta = cfg.recourse.delta;
    rcfg.grid_points = cfg.recourse.grid_points;
    rcfg.refine_factor = cfg.recourse.refine_factor;
    rcfg.mc_samples = cfg.recourse.mc_samples;
    let coords = non_roots(scm);
    let truth_seed = rng::derive_tagged(cfg.seed, "truth-cate");
    let outcomes = setup
        .facta
        .par_iter()
        .enumerate()
        .map(|(i, f)| -> Result<FactumOutcome> {
            let s = samplers.for_factum(mode, f, i)?;
            let result = recourse::find_recourse(s.as_ref(), graph, &f.x, &setup.classifier, &rcfg).map_err(|e| e.at_stage("recourse"))?;
            let none = vec![false; d];
            let truth = |k: usize| -> Result<Vec<f64>> {
                let iv = root_intervention(scm, &setup.root_draws[k][i]);
                match mode {
                    Mode::Cf => scm.ground_truth_counterfactual(f, &iv),
                    Mode::Cate => Ok(OracleSampler::interventional(scm, rng::derive_seed(truth_seed, k as u64))
                        .draw(&iv, &f.x, &none, i as u64)?
                        .x),
                }
            };
            let iv = root_intervention(scm, &setup.root_draws[0][i]);
            // draw indices above the recourse range keep the streams apart
            let offset = 1u64 << 32;
            let mmd_draw = s.draw(&iv, &f.x, &none, offset)?.x;
            let draws = (0..cfg.variance_samples)
                .map(|j| Ok(s.draw(&iv, &f.x, &none, offset + 1 + j as u64)?.x))
                .collect::<Result<Vec<_>>>()?;
            Ok(FactumOutcome {
                result,
                mmd_draw,
                truth_draw: [truth(0)?, truth(1)?],
                variance: summed_variance(&draws, &coords),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let results: Vec<RecourseResult> = outcomes.iter().map(|o| o.result.clone()).collect();
    let validity = validity(&results, &setup.facta, scm, &setup.classifier)?;
    let costs: Vec<f64> = results.iter().filter(|r| r.feasible).map(|r| 100.0 * r.cost).collect();
    let cost_mean = if costs.is_empty() {
        f64::NAN
    } else {
        costs.iter().sum::<f64>() / costs.len() as f64
    };
    let model_set: Vec<Vec<f64>> = outcomes.iter().map(|o| o.mmd_draw.clone()).collect();
    let (mmd_v, mmd_se) = if kind == ModelKind::Oracle {
        (None, None)
    } else {
        let truth: Vec<Vec<f64>> = outcomes.iter().map(|o| o.truth_draw[0].clone()).collect();
        let mut pooled = truth.clone();
        pooled.extend(outcomes.iter().map(|o| o.truth_draw[1].clone()));
        let h = median_heuristic(&pooled)?;
        let se_seed = rng::derive_tagged(cfg.seed, &format!("bootstrap-{}-{}", kind.as_str(), mode.as_str()));
        (
            Some(if cfg.mmd_squared { mmd2(&model_set, &truth, h)? } else { mmd(&model_set, &truth, h)? }),
            Some(mmd_bootstrap_se(&model_set, &truth, h, cfg.mmd_squared, cfg.bootstrap, se_seed)?),
        )
    };
    let row = MetricsRow {
        model: kind.as_str().into(),
        mode: mode.as_str().into(),
        validity,
        cost_mean,
        cost_sd: sample_variance(&costs).sqrt(),
        mmd: mmd_v,
        mmd_se,
        cf_variance: outcomes.iter().map(|o| o.variance).sum::<f64>() / outcomes.len() as f64,
        pooled_variance: summed_variance(&model_set, &coords),
        n_facta: results.len(),
        n_feasible: costs.len(),
    };
    let names = graph.names();
    let rows = results
        .iter()
        .enumerate()
        .map(|(i, r)| RecourseRow::new(i, mode.as_str(), kind.as_str(), names, r))
        .collect();
    let samples = model_set
        .into_iter()
        .map(|x| CounterfactualSample { x, phi_index: None, mode })
        .collect();
    Ok((row, rows, samples))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Full pipeline: data, classifier, per-model training, recourse in every
/// mode, and metrics. With `out`, artifacts are written as each stage
/// finishes so that a failure leaves the completed parts on disk.
pub fn run_benchmark(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<BenchmarkReport> {
    let setup = prepare(cfg)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut f = create(&dir.join("config.json"))?;
        serde_json::to_writer_pretty(&mut f, cfg)?;
        f.flush()?;
        scm::write_dataset_csv(create(&dir.join("train.csv"))?, &setup.train, None)?;
    }
    let mut metrics = vec![];
    let mut recourse_rows = vec![];
    let mut samples = vec![];
    for &kind in &cfg.models {
        let fit_seed = rng::derive_tagged(cfg.seed, &format!("fit-{}", kind.as_str()));
        let ensemble = match cfg.model_spec(kind) {
            None => None,
            Some(spec) => {
                let e = ScmEnsemble::fit(setup.bench.scm.graph(), &setup.train, &spec, fit_seed).map_err(|e| e.at_stage("train"))?;
                if let Some(dir) = out {
                    write_ensemble_artifacts(dir, kind, &e)?;
                }
                Some(e)
            }
        };
        let sampler_seed = rng::derive_tagged(cfg.seed, &format!("sampler-{}", kind.as_str()));
        let samplers = match &ensemble {
            None => Samplers::Oracle(&setup.bench.scm, sampler_seed),
            Some(e) => Samplers::Ensemble(e, sampler_seed),
        };
        for &mode in &cfg.modes {
            let (row, rows, s) = evaluate_mode(cfg, &setup, &samplers, kind, mode).map_err(|e| e.at_stage("evaluate"))?;
            metrics.push(row);
            recourse_rows.extend(rows);
            samples.push((kind.as_str().to_string(), mode, s));
            if let Some(dir) = out {
                write_outputs(dir, &setup, &metrics, &recourse_rows, &samples)?;
            }
        }
    }
    recourse::sort_rows(&mut recourse_rows);
    if let Some(dir) = out {
        write_outputs(dir, &setup, &metrics, &recourse_rows, &samples)?;
    }
    Ok(BenchmarkReport {
        metrics,
        recourse: recourse_rows,
        samples,
    })
}

fn file_tag(kind: ModelKind) -> String {
    kind.as_str().to_lowercase().replace('-', "")
}

fn write_ensemble_artifacts(dir: &Path, kind: ModelKind, e: &ScmEnsemble) -> Result<()> {
    let tag = file_tag(kind);
    let mut f = create(&dir.join(format!("model_{tag}.json")))?;
    serde_json::to_writer(&mut f, &e.to_json())?;
    f.flush()?;
    for (r, m) in e.nodes().iter().enumerate() {
        if let counterfactual::NodeModel::Bwgp(b) = m {
            let name = &e.graph().names()[r];
            b.trace().write_csv(create(&dir.join(format!("trace_{tag}_{name}.csv")))?)?;
        }
    }
    Ok(())
}

pub fn write_metrics_csv<W: Write>(w: W, rows: &[MetricsRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

fn write_outputs(
    dir: &Path,
    setup: &BenchmarkSetup,
    metrics: &[MetricsRow],
    recourse_rows: &[RecourseRow],
    samples: &[(String, Mode, Vec<CounterfactualSample>)],
) -> Result<()> {
    write_metrics_csv(create(&dir.join("metrics.csv"))?, metrics)?;
    let mut rows = recourse_rows.to_vec();
    recourse::sort_rows(&mut rows);
    recourse::write_recourse_csv(create(&dir.join("recourse.csv"))?, &rows)?;
    let names = setup.bench.scm.graph().names();
    for (model, mode, s) in samples {
        let tag = model.to_lowercase().replace('-', "");
        counterfactual::write_samples_csv(create(&dir.join(format!("samples_{tag}_{}.csv", mode.as_str())))?, names, s)?;
    }
    Ok(())
}

/// Settings of the two-variable experiment with an ambiguous mechanism.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IllustrativeConfig {
    pub seed: u64,
    /// Mechanism parameter of the data-generating SCM.
    pub phi_true: f64,
    pub n_train: usize,
    /// Training inputs are restricted to `[0, x_max]`.
    pub x_max: f64,
    pub n_interventional: usize,
    pub factum: [f64; 2],
    /// Counterfactual targets `do(X1 = x)`.
    pub do_values: Vec<f64>,
    pub cf_samples: usize,
    /// Mechanism parameters spanning the ground-truth band.
    pub band_points: usize,
    pub bwgp: BwgpHyper,
    pub gp_train: TrainConfig,
}

impl Default for IllustrativeConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            phi_true: 0.5,
            n_train: 174,
            x_max: 0.6,
            n_interventional: 1000,
            factum: [0.22, 0.08],
            do_values: (0..=8).map(|i| 0.6 + 0.05 * i as f64).collect(),
            cf_samples: 500,
            band_points: 100,
            bwgp: BwgpHyper {
                bins: 8,
                bound: 8.0,
                hidden_dims: 16,
                lr: 0.01,
                steps: 3000,
                mc_samples: 10,
                prior_var: 0.1,
                cover_data: false,
            },
            gp_train: ExperimentConfig::default().gp_train,
        }
    }
}

/// Per-model summary of the two-variable experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IllustrativeRow {
    pub model: String,
    /// MMD between model and true interventional samples over `X1 ~ U[0,1]`.
    pub mmd_interventional: f64,
    /// Mean fraction of band points inside the central 95% interval of the
    /// counterfactual samples, over the `do` values.
    pub band_coverage: f64,
    /// Mean counterfactual `X2` under `do(X1 = x1^F)`.
    pub factual_cf_mean: f64,
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos - pos.floor());
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[i]
    }
}

/// Trains GP and BW-GP on the restricted two-variable data set and
/// compares their interventional and counterfactual samples with the
/// ground truth. With `out`, figure data is written as CSV.
pub fn illustrative_experiment(cfg: &IllustrativeConfig, out: Option<&Path>) -> Result<Vec<IllustrativeRow>> {
    let scm = scm::illustrative_scm(cfg.phi_true)?;
    let graph = scm.graph().clone();
    // restricted inputs: X1 ~ U[0, x_max]
    let mut r = rng::stream(rng::derive_tagged(cfg.seed, "train"));
    let train: Vec<Vec<f64>> = (0..cfg.n_train)
        .map(|_| {
            let u = [r.random_range(0.0..cfg.x_max), r.random::<f64>()];
            scm.propagate(&u)
        })
        .collect();
    let [x1f, x2f] = cfg.factum;
    let factum = Factum::with_noise(cfg.factum.to_vec(), vec![x1f, x2f / x1f]);
    // ground-truth interventional sets over X1 ~ U[0, 1]
    let truth = |tag: &str| -> Result<Vec<Vec<f64>>> { Ok(scm.ancestral_sample(cfg.n_interventional, rng::derive_tagged(cfg.seed, tag))?.x) };
    let (truth_a, truth_b) = (truth("truth-a")?, truth("truth-b")?);
    let mut pooled = truth_a.clone();
    pooled.extend(truth_b.iter().cloned());
    let bandwidth = median_heuristic(&pooled)?;
    // band: counterfactual X2 under every mechanism parameter
    let u2 = x2f / x1f;
    let band: Vec<f64> = (0..cfg.band_points)
        .map(|k| scm::zeta_phi(u2, k as f64 / cfg.band_points as f64))
        .collect::<Result<_>>()?;

    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        scm::write_dataset_csv(create(&dir.join("train.csv"))?, &train, None)?;
        let samples: Vec<CounterfactualSample> = truth_a
            .iter()
            .map(|x| CounterfactualSample {
                x: x.clone(),
                phi_index: None,
                mode: Mode::Cate,
            })
            .collect();
        counterfactual::write_samples_csv(create(&dir.join("interventional_truth.csv"))?, graph.names(), &samples)?;
        let mut w = csv::Writer::from_writer(create(&dir.join("band.csv"))?);
        w.write_record(["do_x1", "phi", "x2"])?;
        for &x in &cfg.do_values {
            for (k, v) in band.iter().enumerate() {
                w.write_record([x.to_string(), (k as f64 / cfg.band_points as f64).to_string(), v.to_string()])?;
            }
        }
        w.flush()?;
    }

    let models = [
        (ModelKind::Gp, ModelSpec::Gp { train: cfg.gp_train.clone() }),
        (ModelKind::Bwgp, cfg.bwgp.spec()),
    ];
    let mut rows = vec![];
    for (kind, spec) in models {
        let fit_seed = rng::derive_tagged(cfg.seed, &format!("fit-{}", kind.as_str()));
        let ens = ScmEnsemble::fit(&graph, &train, &spec, fit_seed).map_err(|e| e.at_stage("train"))?;
        let sample_seed = rng::derive_tagged(cfg.seed, &format!("sample-{}", kind.as_str()));
        let inter = counterfactual::interventional_sample(&ens, &Intervention::empty(), cfg.n_interventional, sample_seed, &RootSource::Rows(truth_a.clone()))?;
        let xs: Vec<Vec<f64>> = inter.iter().map(|s| s.x.clone()).collect();
        let mmd_v = mmd(&xs, &truth_b, bandwidth)?;
        let mut coverage = 0.0;
        let mut cf_rows = vec![];
        for &x in &cfg.do_values {
            let s = counterfactual::counterfactual_sample(&ens, &factum, &Intervention::single(0, x), cfg.cf_samples, sample_seed)?;
            let mut v: Vec<f64> = s.iter().map(|d| d.x[1]).collect();
            v.sort_by(f64::total_cmp);
            let (lo, hi) = (quantile(&v, 0.025), quantile(&v, 0.975));
            coverage += band.iter().filter(|&&b| b >= lo && b <= hi).count() as f64 / band.len() as f64;
            cf_rows.extend(s);
        }
        coverage /= cfg.do_values.len() as f64;
        let at_factual = counterfactual::counterfactual_sample(&ens, &factum, &Intervention::single(0, x1f), cfg.cf_samples, sample_seed)?;
        let factual_cf_mean = at_factual.iter().map(|s| s.x[1]).sum::<f64>() / at_factual.len() as f64;
        if let Some(dir) = out {
            let tag = file_tag(kind);
            counterfactual::write_samples_csv(create(&dir.join(format!("interventional_{tag}.csv")))?, graph.names(), &inter)?;
            counterfactual::write_samples_csv(create(&dir.join(format!("counterfactual_{tag}.csv")))?, graph.names(), &cf_rows)?;
            write_ensemble_artifacts(dir, kind, &ens)?;
        }
        rows.push(IllustrativeRow {
            model: kind.as_str().into(),
            mmd_interventional: mmd_v,
            band_coverage: coverage,
            factual_cf_mean,
        });
    }
    if let Some(dir) = out {
        let mut w = csv::Writer::from_writer(create(&dir.join("metrics.csv"))?);
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn normals(n: usize, mean: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng::stream(seed);
        (0..n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut r);
                vec![mean + v]
            })
            .collect()
    }

    #[test]
    fn median_examples() {
        assert_eq!(median_heuristic(&[vec![0.0], vec![2.0]]).unwrap(), 2.0);
        assert_eq!(median_heuristic(&[vec![0.0, 0.0], vec![0.0, 2.0]]).unwrap(), 2.0);
        assert!(median_heuristic(&[vec![1.0], vec![1.0]]).is_err());
        let pts = normals(300, 0.0, 1);
        let h = median_heuristic(&pts).unwrap();
        let scaled: Vec<Vec<f64>> = pts.iter().map(|p| vec![3.0 * p[0]]).collect();
        assert!((median_heuristic(&scaled).unwrap() - 3.0 * h).abs() < 1e-12);
    }

    #[test]
    fn one_dimensional_median_matches_sorting() {
        for seed in 0..5 {
            let pts = normals(101 + seed as usize, 0.0, seed);
            let mut all = vec![];
            for i in 0..pts.len() {
                for j in 0..i {
                    all.push((pts[i][0] - pts[j][0]).abs());
                }
            }
            all.sort_by(f64::total_cmp);
            let m = all.len();
            let expect = if m % 2 == 1 { all[m / 2] } else { 0.5 * (all[m / 2 - 1] + all[m / 2]) };
            assert_eq!(median_heuristic(&pts).unwrap(), expect);
        }
    }

    #[test]
    fn mmd_examples() {
        let x = normals(200, 0.0, 2);
        assert_eq!(mmd2(&x, &x, 1.0).unwrap(), 0.0);
        let a = normals(1000, 0.0, 3);
        let b = normals(1000, 0.0, 4);
        assert!(mmd2(&a, &b, 1.0).unwrap() < 0.02);
        let mut prev = -1.0;
        for shift in [0.0, 1.0, 2.0, 3.0] {
            let v = mmd2(&a, &normals(1000, shift, 5), 1.0).unwrap();
            assert!(v > prev);
            prev = v;
        }
        assert!(prev > 0.5);
        let ab = mmd2(&a, &b, 0.7).unwrap();
        let ba = mmd2(&b, &a, 0.7).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn unbiased_mmd_drops_the_diagonal() {
        let x = normals(30, 0.0, 8);
        let y = normals(40, 0.5, 9);
        let h = 0.9;
        let k = |a: &[f64], b: &[f64]| (-(a[0] - b[0]).powi(2) / (2.0 * h * h)).exp();
        let within = |s: &[Vec<f64>]| {
            let mut t = 0.0;
            for i in 0..s.len() {
                for j in 0..s.len() {
                    if i != j {
                        t += k(&s[i], &s[j]);
                    }
                }
            }
            t / (s.len() * (s.len() - 1)) as f64
        };
        let cross: f64 = x.iter().flat_map(|a| y.iter().map(move |b| (a, b))).map(|(a, b)| k(a, b)).sum::<f64>()
            / (x.len() * y.len()) as f64;
        let want = within(&x) + within(&y) - 2.0 * cross;
        assert!((mmd2_unbiased(&x, &y, h).unwrap() - want).abs() < 1e-12);
        assert!(mmd2_unbiased(&x, &y, h).unwrap() < mmd2(&x, &y, h).unwrap());
    }

    #[test]
    fn variance_rules() {
        let det = vec![vec![vec![1.0, 2.0]; 5]; 3];
        assert_eq!(cf_variance(&det, &[0, 1]).unwrap(), 0.0);
        let s = vec![normals(50, 0.0, 6), normals(50, 1.0, 7)];
        let doubled: Vec<Vec<Vec<f64>>> = s.iter().map(|g| g.iter().map(|p| vec![2.0 * p[0]]).collect()).collect();
        let (a, b) = (cf_variance(&s, &[0]).unwrap(), cf_variance(&doubled, &[0]).unwrap());
        assert!((b - 4.0 * a).abs() < 1e-12);
    }

    #[test]
    fn config_defaults_follow_table() {
        let h = table_hyperparameters("nonlinear3", ClassifierKind::LinearLogistic);
        assert_eq!((h.bound, h.hidden_dims, h.lr, h.steps, h.mc_samples, h.prior_var), (1.0, 13, 0.03, 5719, 21, 0.1));
        let h = table_hyperparameters("semisynth7", ClassifierKind::RandomForest);
        assert_eq!((h.bound, h.hidden_dims, h.steps), (21.0, 27, 4956));
        let c: ExperimentConfig = serde_json::from_str(r#"{"benchmark": "nonadditive3", "models": ["ORACLE", "BW-GP"]}"#).unwrap();
        assert_eq!(c.n_train, 250);
        assert_eq!(c.n_facta, 100);
        assert_eq!(c.models, vec![ModelKind::Oracle, ModelKind::Bwgp]);
    }
}

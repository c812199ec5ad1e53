//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use bwgp::counterfactual::{self, bwgp_noise_posterior, NodeModel, ScmEnsemble};
use bwgp::eval::{self, median_heuristic, mmd2_unbiased, ExperimentConfig, IllustrativeConfig, MetricsRow, ModelKind};
use bwgp::flow::{g_forward, g_inverse, FlowConfig};
use bwgp::gp::{gp_noise_posterior, se_kernel, KernelParams};
use bwgp::recourse::ClassifierKind;
use bwgp::rng;
use bwgp::scm::{self, CausalGraph, Factum, Intervention};
use bwgp::vi::{draw_eps, BwgpModel, Scaling, VariationalPosterior};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<(bool, String), String>;

fn normal(r: &mut impl Rng) -> f64 {
    StandardNormal.sample(r)
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

struct Criterion {
    id: u8,
    name: &'static str,
    limit: Option<Duration>,
}

fn report(c: &Criterion, outcome: Outcome, elapsed: Duration) -> bool {
    let (ok, detail) = match outcome {
        Ok(v) => v,
        Err(e) => (false, format!("error: {e}")),
    };
    let in_time = c.limit.is_none_or(|l| elapsed <= l);
    let pass = ok && in_time;
    let budget = c.limit.map_or(String::new(), |l| format!(" / limit {}s", l.as_secs()));
    println!(
        "{} [{}] {}: {detail} ({:.1}s{budget})",
        if pass { "PASS" } else { "FAIL" },
        c.id,
        c.name,
        elapsed.as_secs_f64()
    );
    pass
}

// ---------------------------------------------------------------- 1

fn flow_suite() -> Outcome {
    let mut r = rng::stream(101);
    let (mut round_trip, mut log_det, mut monotone) = (0.0f64, 0.0f64, true);
    for i in 0..10_000 {
        let d = i % 3;
        let bound = r.random_range(0.5..6.0);
        let cfg = FlowConfig::new(d, 2 + i % 7, bound, 1 + i % 6).map_err(fail)?;
        // widest weight prior of the tuned settings, variance 0.1
        let phi: Vec<f64> = (0..cfg.param_count()).map(|_| 0.1f64.sqrt() * normal(&mut r)).collect();
        let pa: Vec<f64> = (0..d).map(|_| r.random_range(-3.0..3.0)).collect();
        let x = r.random_range(-1.5 * bound..1.5 * bound);
        let (z, ld) = g_forward(x, &pa, &phi, &cfg).map_err(fail)?;
        round_trip = round_trip.max((g_inverse(z, &pa, &phi, &cfg).map_err(fail)? - x).abs());
        if i % 10 == 0 {
            let h = 1e-6;
            let fd = (g_forward(x + h, &pa, &phi, &cfg).map_err(fail)?.0 - g_forward(x - h, &pa, &phi, &cfg).map_err(fail)?.0)
                / (2.0 * h);
            log_det = log_det.max((ld.exp() - fd).abs() / fd);
        }
        if i % 100 == 0 {
            let mut prev = f64::NEG_INFINITY;
            for k in 0..=400 {
                let v = g_forward(-2.0 * bound + bound * k as f64 / 100.0, &pa, &phi, &cfg).map_err(fail)?.0;
                monotone &= v > prev;
                prev = v;
            }
        }
    }
    Ok((
        round_trip < 1e-8 && log_det < 1e-5 && monotone,
        format!("round trip {round_trip:.2e} (<1e-8), log-det rel {log_det:.2e} (<1e-5), monotone {monotone}"),
    ))
}

// ---------------------------------------------------------------- 2

fn tiny_model(seed: u64) -> Result<BwgpModel, String> {
    let mut r = rng::stream(seed);
    let x: Vec<Vec<f64>> = (0..8).map(|_| vec![r.random_range(-2.0..2.0)]).collect();
    let y: Vec<f64> = x.iter().map(|p| p[0].sin() + 0.3 * normal(&mut r)).collect();
    let cfg = FlowConfig::new(1, 2, 2.0, 3).map_err(fail)?;
    let p = cfg.param_count();
    let m = (0..p).map(|_| r.random_range(-0.5..0.5)).collect();
    let log_s = (0..p).map(|_| r.random_range(-2.5..-1.0)).collect();
    let q = VariationalPosterior::new(m, log_s).map_err(fail)?;
    let kernel = KernelParams::new(&[r.random_range(0.5..1.5)], r.random_range(0.5..1.5), r.random_range(0.05..0.3));
    BwgpModel::from_parts(x, y, Some(cfg), q, kernel, Scaling::identity(1)).map_err(fail)
}

fn gradient_suite() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let model = tiny_model(500 + seed)?;
        let p = model.q().dim();
        let eps = draw_eps(p, 4, seed);
        let obj = model.objective(0.1);
        let g = obj.evaluate(model.q(), model.kernel(), &eps, true).map_err(fail)?.1.unwrap();
        let mut flat = model.q().m.clone();
        flat.extend(&model.q().log_s);
        flat.extend(model.kernel().to_vec());
        let f = |v: &[f64]| -> Result<f64, String> {
            let q = VariationalPosterior::new(v[..p].to_vec(), v[p..2 * p].to_vec()).map_err(fail)?;
            Ok(obj.evaluate(&q, &KernelParams::from_slice(&v[2 * p..]), &eps, false).map_err(fail)?.0.elbo)
        };
        for j in 0..flat.len() {
            let h = 1e-5;
            let (mut a, mut b) = (flat.clone(), flat.clone());
            a[j] += h;
            b[j] -= h;
            let fd = (f(&a)? - f(&b)?) / (2.0 * h);
            worst = worst.max((g[j] - fd).abs() / fd.abs().max(g[j].abs()).max(1e-3));
        }
    }
    Ok((worst < 1e-3, format!("worst relative error {worst:.2e} over 20 models (<1e-3)")))
}

// ---------------------------------------------------------------- 3

fn dense_noise_posterior(x: &[Vec<f64>], z: &[f64], k: &KernelParams) -> (f64, f64) {
    let n = x.len();
    let s2 = k.noise_variance();
    let kk = DMatrix::from_fn(n, n, |i, j| se_kernel(&x[i], &x[j], k).unwrap() + if i == j { s2 } else { 0.0 });
    let inv = kk.try_inverse().unwrap();
    let alpha = &inv * DVector::from_column_slice(z);
    (s2 * alpha[n - 1], s2 * (1.0 - s2 * inv[(n - 1, n - 1)]))
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn two_node_ensemble(x: &[Vec<f64>], y: &[f64], k: &KernelParams, with_flow: bool) -> Result<ScmEnsemble, String> {
    let graph = CausalGraph::new(vec!["x1".into(), "x2".into()], vec![vec![], vec![0]]).map_err(fail)?;
    let (flow, q) = if with_flow {
        let cfg = FlowConfig::new(1, 4, 3.0, 3).map_err(fail)?;
        let n = cfg.param_count();
        (Some(cfg), VariationalPosterior::new(vec![0.0; n], vec![-30.0; n]).map_err(fail)?)
    } else {
        (None, VariationalPosterior::empty())
    };
    let model = BwgpModel::from_parts(x.to_vec(), y.to_vec(), flow, q, k.clone(), Scaling::identity(1)).map_err(fail)?;
    let roots = x.iter().map(|p| p[0]).collect();
    ScmEnsemble::new(graph, vec![NodeModel::Root(roots), NodeModel::Bwgp(Box::new(model))], 20, 1).map_err(fail)
}

fn oracle_equivalence() -> Outcome {
    let mut r = rng::stream(303);
    let (mut worst_gp, mut worst_bw) = (0.0f64, 0.0f64);
    for case in 0..20 {
        let n = 5 + case;
        let d = 1 + case % 3;
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
        let y: Vec<f64> = x.iter().map(|p| p.iter().sum::<f64>().cos() + 0.3 * normal(&mut r)).collect();
        let k = KernelParams::new(&vec![r.random_range(0.5..1.5); d], r.random_range(0.5..1.5), r.random_range(0.05..0.5));
        let (fx, fy) = (x[n - 1].clone(), y[n - 1]);

        let post = gp_noise_posterior(&x[..n - 1], &y[..n - 1], &fx, fy, &k).map_err(fail)?;
        let (m, v) = dense_noise_posterior(&x, &y, &k);
        worst_gp = worst_gp.max(rel(post.mean, m)).max(rel(post.variance, v));

        let cfg = FlowConfig::new(d, 4, 3.0, 4).map_err(fail)?;
        let p = cfg.param_count();
        let phi: Vec<f64> = (0..p).map(|_| 0.3 * normal(&mut r)).collect();
        let q = VariationalPosterior::new(phi.clone(), vec![-3.0; p]).map_err(fail)?;
        let model = BwgpModel::from_parts(x[..n - 1].to_vec(), y[..n - 1].to_vec(), Some(cfg), q, k.clone(), Scaling::identity(d))
            .map_err(fail)?;
        let post = bwgp_noise_posterior(&model, &fx, fy, &phi).map_err(fail)?;
        let z: Vec<f64> = x.iter().zip(&y).map(|(p, &t)| g_forward(t, p, &phi, &cfg).unwrap().0).collect();
        let (m, v) = dense_noise_posterior(&x, &z, &k);
        worst_bw = worst_bw.max(rel(post.mean, m)).max(rel(post.variance, v));
    }

    let mut r = rng::stream(304);
    let x: Vec<Vec<f64>> = (0..25).map(|_| vec![r.random_range(-2.0..2.0)]).collect();
    let y: Vec<f64> = x.iter().map(|p| p[0].sin() + 0.2 * normal(&mut r)).collect();
    let k = KernelParams::new(&[0.8], 1.1, 0.05);
    let factum = Factum::new(vec![0.4, 0.9]);
    let iv = Intervention::single(0, 1.1);
    let column = |with_flow: bool, seed: u64| -> Result<Vec<Vec<f64>>, String> {
        let ens = two_node_ensemble(&x, &y, &k, with_flow)?;
        let s = counterfactual::counterfactual_sample(&ens, &factum, &iv, 10_000, seed).map_err(fail)?;
        Ok(s.into_iter().map(|d| vec![d.x[1]]).collect())
    };
    let (gp, bw) = (column(false, 7)?, column(true, 8)?);
    let h = median_heuristic(&gp).map_err(fail)?;
    let distance = mmd2_unbiased(&gp, &bw, h).map_err(fail)?.max(0.0).sqrt();
    Ok((
        worst_gp < 1e-9 && worst_bw < 1e-9 && distance < 0.01,
        format!("GP posterior rel {worst_gp:.1e}, warped posterior rel {worst_bw:.1e} (<1e-9), identity-flow vs GP sampler MMD {distance:.4} (<0.01)"),
    ))
}

// ---------------------------------------------------------------- 4

fn consistency_ensemble(warped: bool) -> Result<ScmEnsemble, String> {
    let bench = scm::benchmark("linear3").map_err(fail)?;
    let rows = bench.scm.ancestral_sample(12, 7).map_err(fail)?.x;
    let graph = bench.scm.graph().clone();
    let mut r = rng::stream(8);
    let mut nodes = vec![];
    for node in 0..graph.len() {
        let pa = graph.parents(node);
        if pa.is_empty() {
            nodes.push(NodeModel::Root(rows.iter().map(|x| x[node]).collect()));
            continue;
        }
        let inputs: Vec<Vec<f64>> = rows.iter().map(|x| pa.iter().map(|&p| x[p]).collect()).collect();
        let targets: Vec<f64> = rows.iter().map(|x| x[node]).collect();
        let (flow, q) = if warped {
            let cfg = FlowConfig::new(pa.len(), 4, 3.0, 4).map_err(fail)?;
            let m = (0..cfg.param_count()).map(|_| 0.3 * normal(&mut r)).collect();
            (Some(cfg), VariationalPosterior::new(m, vec![0.1f64.ln(); cfg.param_count()]).map_err(fail)?)
        } else {
            (None, VariationalPosterior::empty())
        };
        // noise standard deviation 1e-6
        let kernel = KernelParams::new(&vec![1.5; pa.len()], 1.0, 1e-12);
        let sc = Scaling::fit(&inputs, &targets);
        let xs = inputs.iter().map(|p| sc.inputs(p)).collect();
        let ys = targets.iter().map(|&t| sc.target(t)).collect();
        nodes.push(NodeModel::Bwgp(Box::new(BwgpModel::from_parts(xs, ys, flow, q, kernel, sc).map_err(fail)?)));
    }
    ScmEnsemble::new(graph, nodes, 50, 9).map_err(fail)
}

fn counterfactual_consistency() -> Outcome {
    let bench = scm::benchmark("linear3").map_err(fail)?;
    let mut worst = 0.0f64;
    for warped in [false, true] {
        let ens = consistency_ensemble(warped)?;
        for f in 0..5 {
            let factum = bench.scm.ancestral_sample(1, 90 + f).map_err(fail)?.factum(0);
            let iv = Intervention::single(0, factum.x[0]);
            let s = counterfactual::counterfactual_sample(&ens, &factum, &iv, 10_000, 10 + f).map_err(fail)?;
            for node in 1..3 {
                let mean = s.iter().map(|d| d.x[node]).sum::<f64>() / s.len() as f64;
                worst = worst.max((mean - factum.x[node]).abs());
            }
        }
    }
    Ok((worst < 1e-3, format!("worst mean error {worst:.2e} over GP and BW-GP ensembles (<1e-3)")))
}

// ---------------------------------------------------------------- 5

fn illustrative(dir: &Path) -> Outcome {
    let rows = eval::illustrative_experiment(&IllustrativeConfig::default(), Some(dir)).map_err(fail)?;
    let get = |m: &str| rows.iter().find(|r| r.model == m).ok_or(format!("no {m} row"));
    let (gp, bw) = (get("GP")?, get("BW-GP")?);
    Ok((
        bw.mmd_interventional < gp.mmd_interventional && bw.band_coverage >= 0.8,
        format!(
            "interventional MMD BW-GP {:.4} vs GP {:.4}; BW-GP band coverage {:.3} (>=0.8)",
            bw.mmd_interventional, gp.mmd_interventional, bw.band_coverage
        ),
    ))
}

// ---------------------------------------------------------------- 6, 7

fn row<'a>(rows: &'a [MetricsRow], model: ModelKind, mode: &str) -> Result<&'a MetricsRow, String> {
    rows.iter()
        .find(|r| r.model == model.as_str() && r.mode == mode)
        .ok_or(format!("missing {} {mode} row", model.as_str()))
}

fn benchmark_config(benchmark: &str, classifier: ClassifierKind) -> ExperimentConfig {
    ExperimentConfig {
        benchmark: benchmark.into(),
        classifier,
        ..ExperimentConfig::default()
    }
}

fn three_variable(root: &Path) -> Outcome {
    let mut ok = true;
    let mut notes = vec![];
    for name in ["linear3", "nonlinear3", "nonadditive3"] {
        let rows = eval::run_benchmark(&benchmark_config(name, ClassifierKind::LinearLogistic), Some(&root.join(name)))
            .map_err(fail)?
            .metrics;
        let oracle = row(&rows, ModelKind::Oracle, "cf")?.validity;
        let bw = row(&rows, ModelKind::Bwgp, "cf")?;
        let gp = row(&rows, ModelKind::Gp, "cf")?;
        ok &= oracle == 100.0 && bw.validity >= 90.0;
        notes.push(format!("{name}: oracle {oracle}%, BW-GP {}%", bw.validity));
        if name == "nonadditive3" {
            let (a, b) = (bw.mmd.unwrap_or(f64::NAN), gp.mmd.unwrap_or(f64::NAN));
            ok &= a < b;
            notes.push(format!("cf-MMD BW-GP {a:.4} vs GP {b:.4}"));
        }
        if name == "linear3" {
            ok &= bw.cf_variance > gp.cf_variance;
            notes.push(format!("cf-variance BW-GP {:.4} vs GP {:.4}", bw.cf_variance, gp.cf_variance));
        }
    }
    Ok((ok, notes.join("; ")))
}

fn seven_variable(root: &Path) -> Outcome {
    let mut ok = true;
    let mut notes = vec![];
    for (tag, kind) in [
        ("linear", ClassifierKind::LinearLogistic),
        ("nonlinear", ClassifierKind::NonlinearLogistic),
        ("forest", ClassifierKind::RandomForest),
    ] {
        let rows = eval::run_benchmark(&benchmark_config("semisynth7", kind), Some(&root.join(tag)))
            .map_err(fail)?
            .metrics;
        let bw = row(&rows, ModelKind::Bwgp, "cf")?.validity;
        let bw_cate = row(&rows, ModelKind::Bwgp, "cate")?.validity;
        let oracle_cate = row(&rows, ModelKind::Oracle, "cate")?.validity;
        ok &= bw >= 90.0 && bw_cate >= oracle_cate - 10.0;
        notes.push(format!("{tag}: BW-GP {bw}%, CATE BW-GP {bw_cate}% vs oracle {oracle_cate}%"));
    }
    Ok((ok, notes.join("; ")))
}

// ---------------------------------------------------------------- 8

fn metrics_files(root: &Path) -> Vec<std::path::PathBuf> {
    let mut out = vec![root.join("illustrative/metrics.csv")];
    for b in ["linear3", "nonlinear3", "nonadditive3"] {
        out.push(root.join("bench3").join(b).join("metrics.csv"));
    }
    for c in ["linear", "nonlinear", "forest"] {
        out.push(root.join("bench7").join(c).join("metrics.csv"));
    }
    out
}

fn determinism(first: &Path, second: &Path) -> Outcome {
    let _ = illustrative(&second.join("illustrative"));
    let _ = three_variable(&second.join("bench3"));
    let _ = seven_variable(&second.join("bench7"));
    let mut differing = vec![];
    for (a, b) in metrics_files(first).iter().zip(metrics_files(second)) {
        let (x, y) = (std::fs::read(a).map_err(fail)?, std::fs::read(&b).map_err(fail)?);
        if x != y {
            differing.push(b.strip_prefix(second).unwrap_or(&b).display().to_string());
        }
    }
    Ok((
        differing.is_empty(),
        if differing.is_empty() {
            "7 metrics CSVs byte-identical across reruns".into()
        } else {
            format!("differing: {}", differing.join(", "))
        },
    ))
}

fn main() -> ExitCode {
    let first = tempfile::tempdir().expect("temporary directory");
    let second = tempfile::tempdir().expect("temporary directory");
    let root = first.path();
    let minutes = |m: u64| Some(Duration::from_secs(60 * m));
    let criteria: Vec<(Criterion, Box<dyn Fn() -> Outcome>)> = vec![
        (Criterion { id: 1, name: "flow correctness", limit: minutes(1) }, Box::new(flow_suite)),
        (Criterion { id: 2, name: "ELBO gradients", limit: minutes(2) }, Box::new(gradient_suite)),
        (Criterion { id: 3, name: "oracle equivalence", limit: minutes(2) }, Box::new(oracle_equivalence)),
        (Criterion { id: 4, name: "counterfactual consistency", limit: None }, Box::new(counterfactual_consistency)),
        (
            Criterion { id: 5, name: "illustrative reproduction", limit: minutes(15) },
            Box::new(move || illustrative(&root.join("illustrative"))),
        ),
        (
            Criterion { id: 6, name: "three-variable benchmark ordering", limit: minutes(120) },
            Box::new(move || three_variable(&root.join("bench3"))),
        ),
        (
            Criterion { id: 7, name: "seven-variable benchmark", limit: minutes(240) },
            Box::new(move || seven_variable(&root.join("bench7"))),
        ),
        (
            Criterion { id: 8, name: "determinism", limit: None },
            Box::new(|| determinism(first.path(), second.path())),
        ),
    ];
    // ACCEPTANCE_ONLY=1,2,3 restricts the run to the listed criteria
    let only: Option<Vec<u8>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut all = true;
    for (c, run) in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&c.id)) {
            continue;
        }
        let t = Instant::now();
        let outcome = run();
        all &= report(c, outcome, t.elapsed());
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

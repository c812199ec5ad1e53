use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bwgp::counterfactual::{self, Mode, RootSource, ScmEnsemble};
use bwgp::eval::{self, ExperimentConfig, IllustrativeConfig, ModelKind};
use bwgp::recourse::ClassifierKind;
use bwgp::rng;
use bwgp::scm::{self, Factum, Intervention};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bwgp", version, about = "Counterfactual sampling and recourse with Bayesian warped GP causal models")]
struct Cli {
    /// JSON configuration file; command-line flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Oracle,
    Lin,
    Gp,
    Bwgp,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Oracle => ModelKind::Oracle,
            ModelArg::Lin => ModelKind::Lin,
            ModelArg::Gp => ModelKind::Gp,
            ModelArg::Bwgp => ModelKind::Bwgp,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ClassifierArg {
    Linear,
    Nonlinear,
    Forest,
}

impl From<ClassifierArg> for ClassifierKind {
    fn from(c: ClassifierArg) -> Self {
        match c {
            ClassifierArg::Linear => ClassifierKind::LinearLogistic,
            ClassifierArg::Nonlinear => ClassifierKind::NonlinearLogistic,
            ClassifierArg::Forest => ClassifierKind::RandomForest,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Cf,
    Cate,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Cf => Mode::Cf,
            ModeArg::Cate => Mode::Cate,
        }
    }
}

#[derive(clap::Args, Clone)]
struct BenchArgs {
    /// Built-in benchmark: linear3, nonlinear3, nonadditive3 or semisynth7.
    #[arg(long)]
    benchmark: Option<String>,
    #[arg(long, value_enum)]
    classifier: Option<ClassifierArg>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_facta: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a causal model to benchmark data or a dataset CSV.
    Fit {
        #[command(flatten)]
        bench: BenchArgs,
        #[arg(long, value_enum, default_value = "bwgp")]
        model: ModelArg,
        /// Dataset CSV with `node_*` columns in graph order.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Draw interventional samples from a fitted model.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Hard intervention `name=value`; repeatable.
        #[arg(long = "do", value_parser = parse_assignment)]
        interventions: Vec<(String, f64)>,
    },
    /// Draw counterfactual samples for one factum.
    Counterfactual {
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated factual values in graph order.
        #[arg(long, value_delimiter = ',', required = true)]
        factum: Vec<f64>,
        #[arg(long = "do", value_parser = parse_assignment, required = true)]
        interventions: Vec<(String, f64)>,
        #[arg(long, default_value_t = 1000)]
        n: usize,
    },
    /// Find recourse actions for negatively classified facta with one model.
    Recourse {
        #[command(flatten)]
        bench: BenchArgs,
        #[arg(long, value_enum, default_value = "bwgp")]
        model: ModelArg,
        #[arg(long, value_enum, default_value = "cf")]
        mode: ModeArg,
    },
    /// Run the full recourse benchmark over all configured models and modes.
    Benchmark {
        #[command(flatten)]
        bench: BenchArgs,
        #[arg(long, value_enum, value_delimiter = ',')]
        models: Option<Vec<ModelArg>>,
    },
    /// Two-variable experiment with counterfactually ambiguous mechanism.
    Illustrative,
    /// MMD between two sample CSVs.
    EvalMmd {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        bandwidth: Option<f64>,
        /// Reference sample for the median heuristic; defaults to `b`.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Report MMD² instead of its square root.
        #[arg(long)]
        squared: bool,
    },
}

fn parse_assignment(s: &str) -> Result<(String, f64), String> {
    let (name, value) = s.split_once('=').ok_or_else(|| format!("expected name=value, got '{s}'"))?;
    let v = value.trim().parse::<f64>().map_err(|e| format!("bad value in '{s}': {e}"))?;
    Ok((name.trim().to_string(), v))
}

/// Failure with the pipeline stage that produced it.
struct Failure {
    stage: &'static str,
    error: anyhow::Error,
}

fn at(stage: &'static str) -> impl Fn(anyhow::Error) -> Failure {
    move |error| Failure { stage, error }
}

impl From<bwgp::Error> for Failure {
    fn from(e: bwgp::Error) -> Self {
        let stage = e.stage().unwrap_or("run");
        // the stage is printed in the tag, report only the inner error
        let error = match e {
            bwgp::Error::Stage { source, .. } => (*source).into(),
            e => e.into(),
        };
        Failure { stage, error }
    }
}

fn exit_code(stage: &str) -> u8 {
    match stage {
        "args" | "config" | "setup" => 2,
        "data" | "classifier" | "facta" => 3,
        "train" => 4,
        "sample" => 5,
        "recourse" => 6,
        "evaluate" => 7,
        "io" => 8,
        _ => 1,
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let f = File::open(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

fn experiment_config(cli: &Cli, bench: &BenchArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => read_json(p).map_err(at("config"))?,
        None => ExperimentConfig::default(),
    };
    if let Some(b) = &bench.benchmark {
        cfg.benchmark = b.clone();
        cfg.custom = None;
    }
    if let Some(c) = bench.classifier {
        cfg.classifier = c.into();
    }
    if let Some(n) = bench.n_train {
        cfg.n_train = n;
    }
    if let Some(n) = bench.n_facta {
        cfg.n_facta = n;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| Failure::from(e.at_stage("config")))?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure {
            stage: "io",
            error: anyhow::anyhow!("{}: {e}", path.display()),
        })
}

fn out_dir(cli: &Cli) -> Result<&Path, Failure> {
    fs::create_dir_all(&cli.out).map_err(|e| Failure {
        stage: "io",
        error: e.into(),
    })?;
    Ok(&cli.out)
}

fn load_model(path: &Path) -> Result<ScmEnsemble, Failure> {
    let j = read_json(path).map_err(at("config"))?;
    Ok(ScmEnsemble::from_json(&j).map_err(|e| e.at_stage("config"))?)
}

fn intervention(ens: &ScmEnsemble, pairs: &[(String, f64)]) -> Result<Intervention, Failure> {
    let mut targets = vec![];
    let mut values = vec![];
    for (name, v) in pairs {
        let idx = ens.graph().index_of(name).ok_or_else(|| Failure {
            stage: "args",
            error: anyhow::anyhow!("unknown node '{name}'"),
        })?;
        targets.push(idx);
        values.push(*v);
    }
    Ok(Intervention::new(targets, values).map_err(|e| e.at_stage("args"))?)
}

/// Reads every numeric column except sample bookkeeping and noise columns.
fn read_samples(path: &Path) -> anyhow::Result<Vec<Vec<f64>>> {
    let mut rd = csv::Reader::from_path(path)?;
    let header = rd.headers()?.clone();
    let cols: Vec<usize> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| *h != "phi_index" && *h != "mode" && !h.starts_with("u_"))
        .map(|(i, _)| i)
        .collect();
    let mut rows = vec![];
    for rec in rd.records() {
        let rec = rec?;
        rows.push(cols.iter().map(|&i| rec[i].trim().parse::<f64>()).collect::<Result<Vec<_>, _>>()?);
    }
    Ok(rows)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Fit { bench, model, data } => {
            let cfg = experiment_config(cli, bench)?;
            let b = cfg.load_benchmark().map_err(|e| e.at_stage("config"))?;
            let rows = match data {
                Some(p) => {
                    let f = File::open(p).map_err(|e| Failure {
                        stage: "data",
                        error: anyhow::anyhow!("{}: {e}", p.display()),
                    })?;
                    scm::read_dataset_csv(BufReader::new(f)).map_err(|e| e.at_stage("data"))?.0
                }
                None => b.scm.ancestral_sample(cfg.n_train, rng::derive_tagged(cfg.seed, "train")).map_err(|e| e.at_stage("data"))?.x,
            };
            let kind = ModelKind::from(*model);
            let spec = cfg.model_spec(kind).ok_or_else(|| Failure {
                stage: "args",
                error: anyhow::anyhow!("the oracle is not fitted"),
            })?;
            let ens = ScmEnsemble::fit(b.scm.graph(), &rows, &spec, cfg.seed).map_err(|e| e.at_stage("train"))?;
            let dir = out_dir(cli)?;
            let mut f = create(&dir.join("model.json"))?;
            serde_json::to_writer(&mut f, &ens.to_json()).map_err(|e| at("io")(e.into()))?;
            f.flush().map_err(|e| at("io")(e.into()))?;
            for (r, m) in ens.nodes().iter().enumerate() {
                if let counterfactual::NodeModel::Bwgp(bm) = m {
                    let name = &ens.graph().names()[r];
                    bm.trace().write_csv(create(&dir.join(format!("trace_{name}.csv")))?).map_err(|e| e.at_stage("io"))?;
                }
            }
            eprintln!("wrote {}", dir.join("model.json").display());
        }
        Command::Sample { model, n, interventions } => {
            let ens = load_model(model)?;
            let iv = intervention(&ens, interventions)?;
            let seed = cli.seed.unwrap_or(0);
            let s = counterfactual::interventional_sample(&ens, &iv, *n, seed, &RootSource::Empirical).map_err(|e| e.at_stage("sample"))?;
            let dir = out_dir(cli)?;
            counterfactual::write_samples_csv(create(&dir.join("samples.csv"))?, ens.graph().names(), &s).map_err(|e| e.at_stage("io"))?;
        }
        Command::Counterfactual {
            model,
            factum,
            interventions,
            n,
        } => {
            let ens = load_model(model)?;
            if factum.len() != ens.dim() {
                return Err(Failure {
                    stage: "args",
                    error: anyhow::anyhow!("factum has {} values, model has {} nodes", factum.len(), ens.dim()),
                });
            }
            let iv = intervention(&ens, interventions)?;
            let seed = cli.seed.unwrap_or(0);
            let s = counterfactual::counterfactual_sample(&ens, &Factum::new(factum.clone()), &iv, *n, seed).map_err(|e| e.at_stage("sample"))?;
            let dir = out_dir(cli)?;
            counterfactual::write_samples_csv(create(&dir.join("counterfactual.csv"))?, ens.graph().names(), &s).map_err(|e| e.at_stage("io"))?;
        }
        Command::Recourse { bench, model, mode } => {
            let mut cfg = experiment_config(cli, bench)?;
            cfg.models = vec![(*model).into()];
            cfg.modes = vec![(*mode).into()];
            let report = eval::run_benchmark(&cfg, Some(out_dir(cli)?))?;
            print_metrics(&report.metrics);
        }
        Command::Benchmark { bench, models } => {
            let mut cfg = experiment_config(cli, bench)?;
            if let Some(m) = models {
                cfg.models = m.iter().map(|&k| k.into()).collect();
            }
            let report = eval::run_benchmark(&cfg, Some(out_dir(cli)?))?;
            print_metrics(&report.metrics);
        }
        Command::Illustrative => {
            let mut cfg: IllustrativeConfig = match &cli.config {
                Some(p) => read_json(p).map_err(at("config"))?,
                None => IllustrativeConfig::default(),
            };
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let rows = eval::illustrative_experiment(&cfg, Some(out_dir(cli)?))?;
            for r in rows {
                println!(
                    "{:<6} interventional_mmd={:.4} band_coverage={:.3} factual_cf_mean={:.4}",
                    r.model, r.mmd_interventional, r.band_coverage, r.factual_cf_mean
                );
            }
        }
        Command::EvalMmd {
            a,
            b,
            bandwidth,
            reference,
            squared,
        } => {
            let xa = read_samples(a).map_err(at("data"))?;
            let xb = read_samples(b).map_err(at("data"))?;
            let h = match bandwidth {
                Some(h) => *h,
                None => {
                    let r = match reference {
                        Some(p) => read_samples(p).map_err(at("data"))?,
                        None => xb.clone(),
                    };
                    eval::median_heuristic(&r).map_err(|e| e.at_stage("evaluate"))?
                }
            };
            let v = if *squared { eval::mmd2(&xa, &xb, h) } else { eval::mmd(&xa, &xb, h) };
            let v = v.map_err(|e| e.at_stage("evaluate"))?;
            println!("{}", serde_json::json!({ "mmd": v, "bandwidth": h }));
        }
    }
    Ok(())
}

fn print_metrics(rows: &[eval::MetricsRow]) {
    println!("{:<7} {:<5} {:>9} {:>9} {:>8} {:>9}", "model", "mode", "validity", "cost", "mmd", "variance");
    for r in rows {
        let mmd = r.mmd.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        println!(
            "{:<7} {:<5} {:>9.1} {:>9.2} {:>8} {:>9.4}",
            r.model, r.mode, r.validity, r.cost_mean, mmd, r.cf_variance
        );
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error[{}]: {:#}", f.stage, f.error);
            ExitCode::from(exit_code(f.stage))
        }
    }
}

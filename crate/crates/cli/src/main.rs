use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use vfnas::data::{generate_blobs, set_overlap, split, write_dataset, BlobSpec};
use vfnas::exec::Exec;
use vfnas::runner::checkpoint::save_checkpoint;
use vfnas::runner::{
    emit_report, run_evaluation, run_pretrain, run_search, sweep, write_timing, ExperimentConfig, RunReport, SweepAxis,
};
use vfnas::{Error, Result};

#[derive(Parser)]
#[command(name = "vfnas", version, about = "Vertical federated architecture search simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic vertically partitioned dataset with splits.
    GenData(GenData),
    /// Contrastive pretraining of every party's supernet; writes a checkpoint.
    Pretrain(RunArgs),
    /// Architecture search; writes run.json, metrics.csv, arch_party{k}.json
    /// and privacy.json.
    Search(RunArgs),
    /// Retrain and test searched architectures.
    Evaluate(EvaluateArgs),
    /// Full pipelines over one configuration axis.
    Sweep(SweepArgs),
    /// Merge run.json files of earlier runs into one report directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenData {
    /// JSON file with `data`, `overlap` and `split` keys (experiment configs work).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    parties: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    overlap: Option<f64>,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    split: Option<Vec<f64>>,
}

/// Flags shared by the pipeline subcommands; each overrides the config key
/// of the same name.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    algorithm: Option<String>,
    #[arg(long)]
    parties: Option<usize>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    overlap: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    search_epochs: Option<usize>,
    #[arg(long)]
    evaluate_epochs: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Enables the Gaussian mechanism with unit clipping and this noise scale.
    #[arg(long)]
    dp_sigma: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    stop_at_convergence: bool,
    /// f32 or f64.
    #[arg(long)]
    precision: Option<String>,
    /// in_process or socket.
    #[arg(long)]
    transport: Option<String>,
    /// sequential or parallel.
    #[arg(long)]
    exec: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    seed: u64,
    /// Start from a pretraining checkpoint directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Directory holding arch_party{k}.json from a search.
    #[arg(long)]
    arch_dir: PathBuf,
    /// Which run of the architecture files to evaluate.
    #[arg(long, default_value_t = 0)]
    run: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// One or more seeds, comma separated.
    #[arg(long, required = true, value_delimiter = ',')]
    seed: Vec<u64>,
    /// dp_sigma, parties or overlap.
    #[arg(long)]
    axis: String,
    /// Axis values; defaults to the axis' standard grid.
    #[arg(long, value_delimiter = ',')]
    values: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Directories containing run.json.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn read_json(path: &Path) -> Result<Value> {
    let raw = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&raw).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let s = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    fs::write(path, s)?;
    Ok(())
}

fn object(v: Value, what: &str) -> Result<Map<String, Value>> {
    match v {
        Value::Object(m) => Ok(m),
        _ => Err(Error::Config(format!("{what} must be a JSON object"))),
    }
}

fn nested<'a>(m: &'a mut Map<String, Value>, key: &str) -> Result<&'a mut Map<String, Value>> {
    match m.entry(key).or_insert_with(|| json!({})) {
        Value::Object(o) => Ok(o),
        _ => Err(Error::Config(format!("`{key}` must be an object"))),
    }
}

impl ConfigArgs {
    fn load(&self, seed: u64) -> Result<ExperimentConfig> {
        let mut m = match &self.config {
            Some(p) => object(read_json(p)?, "config")?,
            None => Map::new(),
        };
        let mut set = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        };
        set("algorithm", self.algorithm.clone().map(Value::from));
        set("parties", self.parties.map(Value::from));
        set("data_dir", self.data_dir.as_ref().map(|p| Value::from(p.display().to_string())));
        set("overlap", self.overlap.map(Value::from));
        set("batch", self.batch.map(Value::from));
        set("gamma", self.gamma.map(Value::from));
        set("eval_every", self.eval_every.map(Value::from));
        set("precision", self.precision.clone().map(Value::from));
        set("transport", self.transport.clone().map(Value::from));
        set("exec", self.exec.clone().map(Value::from));
        set("stop_at_convergence", self.stop_at_convergence.then_some(Value::Bool(true)));
        set("seed", Some(Value::from(seed)));
        let epochs = nested(&mut m, "epochs")?;
        for (k, v) in [
            ("pretrain", self.pretrain_epochs),
            ("search", self.search_epochs),
            ("evaluate", self.evaluate_epochs),
        ] {
            if let Some(v) = v {
                epochs.insert(k.into(), v.into());
            }
        }
        if let Some(s) = self.dp_sigma {
            let dp = nested(&mut m, "dp")?;
            dp.insert("enabled".into(), true.into());
            dp.insert("sigma1".into(), s.into());
            dp.insert("sigma2".into(), s.into());
        }
        if !m.contains_key("algorithm") {
            return Err(Error::Config("no algorithm given (config key or --algorithm)".into()));
        }
        ExperimentConfig::from_json(&Value::Object(m).to_string())
    }
}

fn with_checkpoint(mut cfg: ExperimentConfig, checkpoint: &Option<PathBuf>) -> Result<ExperimentConfig> {
    if checkpoint.is_some() {
        cfg.checkpoint = checkpoint.clone();
        cfg.validate()?;
    }
    Ok(cfg)
}

fn gen_data(a: &GenData) -> Result<()> {
    let base = match &a.config {
        Some(p) => object(read_json(p)?, "config")?,
        None => Map::new(),
    };
    let mut spec: BlobSpec = match base.get("data") {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::Config(e.to_string()))?,
        None => BlobSpec::default(),
    };
    if let Some(k) = base.get("parties").and_then(Value::as_u64) {
        spec.parties = k as usize;
    }
    spec.parties = a.parties.unwrap_or(spec.parties);
    spec.samples = a.samples.unwrap_or(spec.samples);
    spec.dim = a.dim.unwrap_or(spec.dim);
    spec.classes = a.classes.unwrap_or(spec.classes);
    let overlap = a
        .overlap
        .or_else(|| base.get("overlap").and_then(Value::as_f64))
        .unwrap_or(1.0);
    let ratios: [f64; 3] = match (&a.split, base.get("split")) {
        (Some(s), _) => [s[0], s[1], s[2]],
        (None, Some(v)) => serde_json::from_value(v.clone()).map_err(|e| Error::Config(e.to_string()))?,
        (None, None) => [0.4, 0.4, 0.2],
    };
    let mut ds = generate_blobs(&spec, a.seed)?;
    if overlap < 1.0 {
        ds = set_overlap(&ds, overlap, a.seed)?;
    }
    let splits = split(&ds, ratios, a.seed)?;
    write_dataset(&a.out, &ds, Some(&splits))?;
    println!(
        "wrote {} samples ({} labeled) over {} parties to {}",
        ds.samples(),
        ds.aligned().len(),
        ds.parties(),
        a.out.display()
    );
    Ok(())
}

fn pretrain(a: &RunArgs) -> Result<()> {
    let cfg = a.cfg.load(a.seed)?;
    let (params, summary) = run_pretrain(&cfg)?;
    save_checkpoint(&a.out, cfg.seed, &params)?;
    write_json(&a.out.join("pretrain.json"), &summary)?;
    for s in &summary {
        println!(
            "party {}: {} batches, loss {:.4} -> {:.4}",
            s.party, s.batches, s.first_loss, s.last_loss
        );
    }
    Ok(())
}

fn search(a: &RunArgs) -> Result<()> {
    let cfg = with_checkpoint(a.cfg.load(a.seed)?, &a.checkpoint)?;
    let outcome = run_search(&cfg)?;
    emit_report(std::slice::from_ref(&outcome.report), &a.out)?;
    write_timing(&a.out, &[outcome.wall_clock_secs])?;
    let r = &outcome.report;
    println!(
        "{}: {} iterations, {} rounds, convergence {}",
        r.algorithm.name(),
        r.search_iterations,
        r.search_rounds,
        r.convergence
            .map_or("not reached".to_string(), |c| format!("at iteration {}", c.iteration))
    );
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let cfg = with_checkpoint(a.cfg.load(a.seed)?, &a.checkpoint)?;
    let mut archs = Vec::new();
    for k in 1.. {
        let path = a.arch_dir.join(format!("arch_party{k}.json"));
        if !path.exists() {
            break;
        }
        let doc = match read_json(&path)? {
            Value::Array(runs) => runs
                .into_iter()
                .nth(a.run)
                .ok_or_else(|| Error::Config(format!("{} has no run {}", path.display(), a.run)))?,
            v => v,
        };
        archs.push(doc.to_string());
    }
    let report = run_evaluation(&cfg, &archs)?;
    fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("evaluation.json"), &report)?;
    println!(
        "test accuracy {:.4} (loss {:.4}) after {} retraining rounds",
        report.test_accuracy, report.test_loss, report.retrain_rounds
    );
    Ok(())
}

fn run_sweep(a: &SweepArgs) -> Result<()> {
    let axis: SweepAxis =
        serde_json::from_value(Value::from(a.axis.as_str())).map_err(|_| Error::Config(format!("unknown axis `{}`", a.axis)))?;
    let template = a.cfg.load(a.seed[0])?;
    let values = if a.values.is_empty() { axis.default_values() } else { a.values.clone() };
    let summary = sweep(&template, axis, &values, &a.seed, Exec::default())?;
    emit_report(&summary.reports, &a.out)?;
    write_json(&a.out.join("sweep.json"), &json!({"axis": summary.axis, "points": summary.points}))?;
    for p in &summary.points {
        println!(
            "{} = {}: accuracy {:.4} ± {:.4}, rounds {:.1}",
            a.axis, p.value, p.accuracy_mean, p.accuracy_std, p.rounds_mean
        );
    }
    Ok(())
}

fn report(a: &ReportArgs) -> Result<()> {
    let mut all: Vec<RunReport> = Vec::new();
    for dir in &a.runs {
        let path = dir.join("run.json");
        let runs: Vec<RunReport> =
            serde_json::from_value(read_json(&path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        all.extend(runs);
    }
    emit_report(&all, &a.out)?;
    println!("{:<12} {:>5} {:>6} {:>10} {:>8}", "algorithm", "seed", "iters", "rounds", "test");
    for r in &all {
        let acc = r.test_accuracy.map_or("-".to_string(), |a| format!("{a:.4}"));
        println!(
            "{:<12} {:>5} {:>6} {:>10} {:>8}",
            r.algorithm.name(),
            r.seed,
            r.search_iterations,
            r.search_rounds,
            acc
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Search(a) => search(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() {
                2
            } else if e.is_numerical() {
                3
            } else {
                1
            })
        }
    }
}

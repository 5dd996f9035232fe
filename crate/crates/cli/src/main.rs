//! `fusionvote` command-line front end.
//!
//! Failures print one line to stderr,
//! `error kind=<kind> code=<n> message="<text>"`, and exit with a code that
//! depends only on the kind.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fusionvote::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use fusionvote::config::RunConfig;
use fusionvote::data::{generate_synthetic, load_dataset, save_dataset, DatasetBundle, SynthConfig};
use fusionvote::ensemble::Strategy;
use fusionvote::par::Execution;
use fusionvote::pipeline;
use fusionvote::Error;

#[derive(Parser)]
#[command(name = "fusionvote", version, about = "Feature-fusion CNN ensembles with top-two voting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/test dataset pair.
    GenData(GenData),
    /// Train a population of networks.
    Train(Train),
    /// Run generations of fusion, selection and retraining over a population.
    Fuse(Fuse),
    /// Evaluate an ensemble of checkpoints on a dataset.
    EnsembleEval(EnsembleEval),
    /// Rank distribution of the true label for one checkpoint.
    RankDist(RankDist),
    /// Ensemble accuracy for growing ensemble sizes.
    Sweep(Sweep),
}

#[derive(Args)]
struct GenData {
    /// Output directory; receives train.fvd and test.fvd.
    #[arg(long)]
    out: PathBuf,
    /// Number of classes (balanced, `--per-class` each) unless `--counts` is given.
    #[arg(long)]
    classes: Option<usize>,
    /// Comma-separated training counts per class.
    #[arg(long, value_delimiter = ',')]
    counts: Option<Vec<usize>>,
    #[arg(long, default_value_t = 400)]
    per_class: usize,
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Test samples per class as a fraction of the training count.
    #[arg(long, default_value_t = 0.25)]
    test_fraction: f64,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 6)]
    nets: usize,
    #[arg(long)]
    out_dir: PathBuf,
    /// Networks trained concurrently; 1 trains them one after another.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Fuse {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of trained checkpoints (`*.fvck`, read in name order).
    #[arg(long)]
    population_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    generations: usize,
    #[arg(long)]
    out_dir: PathBuf,
    /// Training set used to retrain children and fresh networks.
    #[arg(long)]
    data: PathBuf,
    /// Optional test set; adds before/after member accuracies to the report.
    #[arg(long)]
    test_data: Option<PathBuf>,
    /// Overrides fga.seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EnsembleArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, num_args = 1.., required = true)]
    checkpoints: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// t2v, top1 (alias bagging) or noi.
    #[arg(long, default_value = "t2v")]
    strategy: String,
    /// Overrides ensemble.alpha.
    #[arg(long)]
    alpha: Option<f64>,
    /// Overrides ensemble.beta.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct EnsembleEval {
    #[command(flatten)]
    common: EnsembleArgs,
}

#[derive(Args)]
struct Sweep {
    #[command(flatten)]
    common: EnsembleArgs,
    /// `a..b` (inclusive) or a comma list; defaults to 2..M.
    #[arg(long)]
    sizes: Option<String>,
}

#[derive(Args)]
struct RankDist {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 3,
        Error::Input(_) => 4,
        Error::Format { .. } => 5,
        Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 6,
        Error::NonFinite { .. } => 7,
        Error::Precondition(_) => 8,
        Error::Io(_) => 9,
    }
}

fn kind_tag(err: &Error) -> &'static str {
    match err {
        Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => "missing_file",
        other => other.kind(),
    }
}

/// Attaches the path to I/O failures without changing their kind.
fn at_path<T>(path: &Path, r: fusionvote::Result<T>) -> fusionvote::Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn load_config(path: Option<&Path>) -> fusionvote::Result<RunConfig> {
    match path {
        Some(p) => {
            let text = at_path(p, std::fs::read_to_string(p).map_err(Error::from))?;
            RunConfig::parse(&text)
        }
        None => Ok(RunConfig::default()),
    }
}

fn load_data(path: &Path) -> fusionvote::Result<DatasetBundle> {
    at_path(path, load_dataset(path))
}

fn load_ck(path: &Path) -> fusionvote::Result<Checkpoint> {
    at_path(path, load_checkpoint(path))
}

fn create_dir(path: &Path) -> fusionvote::Result<()> {
    at_path(path, std::fs::create_dir_all(path).map_err(Error::from))
}

fn checkpoint_name(i: usize) -> String {
    format!("net{i:02}.fvck")
}

fn save_population(dir: &Path, checkpoints: &[Checkpoint]) -> fusionvote::Result<()> {
    create_dir(dir)?;
    for (i, ck) in checkpoints.iter().enumerate() {
        let path = dir.join(checkpoint_name(i));
        at_path(&path, save_checkpoint(&path, ck))?;
    }
    Ok(())
}

fn gen_data(a: GenData) -> fusionvote::Result<()> {
    let counts = match (a.counts, a.classes) {
        (Some(c), Some(k)) if c.len() != k => {
            return Err(Error::Config(format!("--classes {k} disagrees with {} counts", c.len())));
        }
        (Some(c), _) => c,
        (None, Some(k)) => vec![a.per_class; k],
        (None, None) => return Err(Error::Config("give --classes or --counts".into())),
    };
    let (train, test) = generate_synthetic(&SynthConfig::new(counts, a.test_fraction, a.size, a.noise, a.seed))?;
    create_dir(&a.out)?;
    for (bundle, name) in [(&train, "train.fvd"), (&test, "test.fvd")] {
        let path = a.out.join(name);
        at_path(&path, save_dataset(bundle, &path))?;
    }
    println!("wrote {} train / {} test samples to {}", train.len(), test.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: Train) -> fusionvote::Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if a.parallel == 0 {
        return Err(Error::Config("--parallel must be at least 1".into()));
    }
    // the thread cap only shapes scheduling, so the echoed config keeps its own
    let mut run_cfg = cfg.clone();
    let workers = if a.parallel > 1 {
        run_cfg.threads = a.parallel;
        Execution::Parallel
    } else {
        Execution::Sequential
    };
    let data = load_data(&a.data)?;
    let nets = pipeline::train_networks(&run_cfg, &data, a.nets, workers)?;
    let report = pipeline::train_report(&cfg, &data, &nets)?;
    let cks: Vec<Checkpoint> = nets.into_iter().map(|n| n.checkpoint).collect();
    save_population(&a.out_dir, &cks)?;
    let path = a.out_dir.join("train_report.txt");
    at_path(&path, report.write(&path))?;
    println!("trained {} networks into {}", cks.len(), a.out_dir.display());
    Ok(())
}

fn population_paths(dir: &Path) -> fusionvote::Result<Vec<PathBuf>> {
    let entries = at_path(dir, std::fs::read_dir(dir).map_err(Error::from))?;
    let mut paths = Vec::new();
    for entry in entries {
        let p = entry?.path();
        if p.extension().is_some_and(|e| e == "fvck") {
            paths.push(p);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Input(format!("no .fvck checkpoints in {}", dir.display())));
    }
    Ok(paths)
}

fn fuse_cmd(a: Fuse) -> fusionvote::Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.fga.seed = seed;
    }
    let cks = population_paths(&a.population_dir)?
        .iter()
        .map(|p| load_ck(p))
        .collect::<fusionvote::Result<Vec<_>>>()?;
    let train = load_data(&a.data)?;
    let test = a.test_data.as_deref().map(load_data).transpose()?;
    let pop = pipeline::population_from_checkpoints(cks)?;
    let (outcome, report) = pipeline::fuse(&cfg, pop, &train, test.as_ref(), a.generations)?;
    save_population(&a.out_dir, &pipeline::population_checkpoints(&outcome.population))?;
    let path = a.out_dir.join("fuse_report.txt");
    at_path(&path, report.write(&path))?;
    println!("generation {} written to {}", outcome.population.generation, a.out_dir.display());
    Ok(())
}

/// Config text for ensemble reports plus the resolved strategy.
fn ensemble_setup(c: &EnsembleArgs) -> fusionvote::Result<(RunConfig, Strategy)> {
    let mut cfg = load_config(c.config.as_deref())?;
    if let Some(a) = c.alpha {
        cfg.alpha = a;
    }
    if let Some(b) = c.beta {
        cfg.beta = b;
    }
    cfg.validate()?;
    let strategy = match c.strategy.parse::<Strategy>()? {
        Strategy::T2v { .. } => cfg.t2v(),
        other => other,
    };
    Ok((cfg, strategy))
}

fn load_evals(c: &EnsembleArgs, exec: Execution) -> fusionvote::Result<(Vec<fusionvote::trainer::Evaluation>, DatasetBundle)> {
    let cks = c.checkpoints.iter().map(|p| load_ck(p)).collect::<fusionvote::Result<Vec<_>>>()?;
    let data = load_data(&c.data)?;
    Ok((pipeline::evaluate_all(&cks, &data, exec)?, data))
}

fn ensemble_eval_cmd(a: EnsembleEval) -> fusionvote::Result<()> {
    let (cfg, strategy) = ensemble_setup(&a.common)?;
    let exec = cfg.train.execution;
    let (evals, data) = load_evals(&a.common, exec)?;
    let (out, report) = pipeline::ensemble_eval(&cfg.render(), &evals, &data, strategy, exec)?;
    at_path(&a.common.report, report.write(&a.common.report))?;
    println!("accuracy={:.4}", out.ensemble.accuracy);
    Ok(())
}

fn parse_sizes(text: &str) -> fusionvote::Result<Vec<usize>> {
    let bad = || Error::Config(format!("bad --sizes `{text}`"));
    if let Some((a, b)) = text.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    text.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}

fn sweep_cmd(a: Sweep) -> fusionvote::Result<()> {
    let (cfg, strategy) = ensemble_setup(&a.common)?;
    let exec = cfg.train.execution;
    let (evals, data) = load_evals(&a.common, exec)?;
    let sizes = match &a.sizes {
        Some(s) => parse_sizes(s)?,
        None => (2.min(evals.len())..=evals.len()).collect(),
    };
    let (points, report) = pipeline::sweep(&cfg.render(), &evals, &data, strategy, &sizes, exec)?;
    at_path(&a.common.report, report.write(&a.common.report))?;
    for (k, acc) in points {
        println!("size{k}.accuracy={acc:.4}");
    }
    Ok(())
}

fn rank_dist_cmd(a: RankDist) -> fusionvote::Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let ck = load_ck(&a.checkpoint)?;
    let data = load_data(&a.data)?;
    let eval = fusionvote::trainer::evaluate(&ck.state, &data, cfg.train.execution)?;
    let label = format!("seed{}", ck.state.seed);
    let (dist, report) = pipeline::rank_dist(&cfg.render(), &eval, &data, &label)?;
    at_path(&a.report, report.write(&a.report))?;
    let line: Vec<String> = dist.iter().enumerate().map(|(k, v)| format!("rank{}={v:.4}", k + 1)).collect();
    println!("{}", line.join(" "));
    Ok(())
}

fn run(cli: Cli) -> fusionvote::Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Fuse(a) => fuse_cmd(a),
        Command::EnsembleEval(a) => ensemble_eval_cmd(a),
        Command::RankDist(a) => rank_dist_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
            eprintln!("error kind={} code={} message=\"{message}\"", kind_tag(&e), exit_code(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::error;

use fewshot_core::dataset::{load_dataset, write_image_dataset, ClassSplit};
use fewshot_core::pipeline::{self, format_summary, EvalOverrides, RunConfig, RunDir, RunReport, SplitFile};
use fewshot_core::synthetic::{blob_rasters, BlobSpec};
use fewshot_core::{rng, DistanceMode, Error};

/// Few-shot classification: train budgeted meta-learner ensembles and
/// evaluate them on episodic benchmarks.
#[derive(Debug, Parser)]
#[command(name = "fewshot", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Partition a dataset's classes into meta-train/valid/test.
    Split(SplitArgs),
    /// Meta-train the workers, fit the ensemble and evaluate.
    Train(TrainArgs),
    /// Re-evaluate a trained run directory.
    Eval(EvalArgs),
    /// Print a run directory's report.
    Report(ReportArgs),
    /// Dump one episode's item ids as JSON.
    SampleEpisodes(SampleArgs),
    /// Write a synthetic ring-image corpus for trying the pipeline out.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct SplitArgs {
    /// Image directory or EMB1 file; taken from --config when omitted.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ratios as train:valid:test.
    #[arg(long, default_value = "5:1:4")]
    ratios: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    budget_seconds: Option<f64>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    eval: EvalFlags,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    eval: EvalFlags,
}

#[derive(Debug, Args)]
struct EvalFlags {
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    way: Option<usize>,
    #[arg(long)]
    shot: Option<usize>,
    #[arg(long)]
    query: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    distance: Option<Distance>,
    #[arg(long)]
    mct_steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Distance {
    Squared,
    Euclidean,
}

impl From<Distance> for DistanceMode {
    fn from(d: Distance) -> Self {
        match d {
            Distance::Squared => DistanceMode::SquaredEuclidean,
            Distance::Euclidean => DistanceMode::Euclidean,
        }
    }
}

impl EvalFlags {
    fn overrides(&self) -> EvalOverrides {
        EvalOverrides {
            episodes: self.episodes,
            way: self.way,
            shot: self.shot,
            query: self.query,
            seed: self.seed,
            distance: self.distance.map(Into::into),
            mct_steps: self.mct_steps,
        }
    }
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Partition {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    partition: Partition,
    #[arg(long, default_value_t = 5)]
    way: usize,
    #[arg(long, default_value_t = 1)]
    shot: usize,
    #[arg(long, default_value_t = 19)]
    query: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Directory to create; receives `labels.csv` and one PGM per item.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 30)]
    per_class: usize,
    #[arg(long, default_value_t = 12)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Failure of a command, mapped onto the exit code contract.
enum Failure {
    Input(String),
    Runtime(String),
    Degraded,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_input_error() {
            Failure::Input(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn parse_ratios(s: &str) -> Result<[u32; 3], Failure> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(Failure::Input(format!("ratios `{s}` must look like a:b:c")));
    }
    let mut out = [0; 3];
    for ((slot, part), name) in out.iter_mut().zip(&parts).zip(["train", "valid", "test"]) {
        *slot = part
            .trim()
            .parse()
            .map_err(|_| Failure::Input(format!("{name} ratio `{part}` is not a non-negative integer")))?;
        if *slot == 0 {
            return Err(Failure::Input(format!(
                "{name} ratio in `{s}` is 0; every ratio must be positive"
            )));
        }
    }
    Ok(out)
}

fn write_or_print(text: &str, out: Option<&Path>) -> Result<(), Failure> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e).into()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_split(args: &SplitArgs) -> Result<(), Failure> {
    let ratios = parse_ratios(&args.ratios)?;
    let path = match (&args.dataset, &args.config) {
        (Some(d), _) => d.clone(),
        (None, Some(c)) => RunConfig::load(c)?.dataset,
        (None, None) => return Err(Failure::Input("split needs --dataset or --config".into())),
    };
    let dataset = load_dataset(&path)?;
    let split = pipeline::make_split(&dataset, ratios, args.seed)?;
    write_or_print(&split.to_json(), args.out.as_deref())
}

fn cmd_train(args: &TrainArgs) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(b) = args.budget_seconds {
        cfg.budget_seconds = b;
    }
    let o = args.eval.overrides();
    cfg.evaluation.episodes = o.episodes.unwrap_or(cfg.evaluation.episodes);
    cfg.evaluation.way = o.way.unwrap_or(cfg.evaluation.way);
    cfg.evaluation.shot = o.shot.unwrap_or(cfg.evaluation.shot);
    cfg.evaluation.query = o.query.unwrap_or(cfg.evaluation.query);
    cfg.seed = o.seed.unwrap_or(cfg.seed);
    cfg.decoder.distance_mode = o.distance.unwrap_or(cfg.decoder.distance_mode);
    cfg.decoder.iterations = o.mct_steps.unwrap_or(cfg.decoder.iterations);
    let out = pipeline::train(&cfg, &args.out)?;
    if out.report.degraded {
        eprintln!(
            "budget exhausted before any worker validated; degraded report written to {}",
            RunDir::new(&args.out).report().display()
        );
        return Err(Failure::Degraded);
    }
    print!("{}", format_summary(&out.report)?);
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), Failure> {
    let report = pipeline::eval(&args.out, &args.eval.overrides())?;
    print!("{}", format_summary(&report)?);
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<(), Failure> {
    let report = RunReport::load(&RunDir::new(&args.out).report())?;
    print!("{}", format_summary(&report)?);
    Ok(())
}

fn cmd_sample(args: &SampleArgs) -> Result<(), Failure> {
    let cfg = RunConfig::load(&args.config)?;
    let dataset = load_dataset(&cfg.dataset)?;
    let SplitFile { split, .. } = pipeline::make_split(&dataset, cfg.split_ratios, cfg.split_seed)?;
    let ClassSplit {
        meta_train,
        meta_valid,
        meta_test,
    } = split;
    let classes = match args.partition {
        Partition::Train => meta_train,
        Partition::Valid => meta_valid,
        Partition::Test => meta_test,
    };
    let mut rng = rng::stream(args.seed, "sample-episodes");
    let episode = dataset
        .pool(&classes)?
        .sample_episode(args.way, args.shot, args.query, &mut rng)?;
    let json = serde_json::to_string_pretty(&episode).expect("episode serializes");
    println!("{json}");
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<(), Failure> {
    let spec = BlobSpec {
        classes: args.classes,
        per_class: args.per_class,
        size: args.size,
        seed: args.seed,
        ..BlobSpec::default()
    };
    let (dataset, _) = blob_rasters(&spec)?;
    write_image_dataset(&dataset, &args.out)?;
    println!("wrote {} items in {} classes to {}", dataset.len(), dataset.num_classes(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Split(a) => cmd_split(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
        Command::SampleEpisodes(a) => cmd_sample(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            error!("{msg}");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
        Err(Failure::Degraded) => ExitCode::from(3),
    }
}

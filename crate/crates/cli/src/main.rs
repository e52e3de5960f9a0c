use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use abcboost_core::data::{load_dataset, Format, LoadOptions};
use abcboost_core::{evaluate, fit_with, BoostConfig, EnsembleModel, IterationRecord, Method, RawDataset};
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "abcboost", about = "Multi-class boosting with MART, Robust LogitBoost and ABC-Boost")]
struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, env = "ABCBOOST_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write it with a per-iteration CSV log.
    Train(TrainArgs),
    /// Write the predicted label and class probabilities for each row.
    Predict(PredictArgs),
    /// Report misclassifications and log loss on labeled data.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Input format; guessed from the extension when omitted.
    #[arg(long, value_parser = parse_format)]
    format: Option<Format>,

    /// Skip one header line in CSV input.
    #[arg(long)]
    skip_header: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_parser = parse_method, default_value = "abcrobustlogit")]
    method: Method,

    /// Training data.
    #[arg(long = "train")]
    train: PathBuf,

    /// Test data; enables the test_errors log column.
    #[arg(long = "test")]
    test: Option<PathBuf>,

    /// Output model file (JSON).
    #[arg(long, default_value = "model.json")]
    model: PathBuf,

    /// Output CSV log; defaults to the model path with a .log.csv suffix.
    #[arg(long)]
    log: Option<PathBuf>,

    /// Terminal nodes per tree.
    #[arg(short = 'J', default_value_t = 20)]
    leaves: usize,

    /// Shrinkage.
    #[arg(short = 'v', default_value_t = 0.1)]
    nu: f64,

    /// Boosting iterations.
    #[arg(short = 'M', default_value_t = 100)]
    iterations: usize,

    /// Base-class candidates per search.
    #[arg(short = 's', default_value_t = 2)]
    search: usize,

    /// Iterations between base-class searches.
    #[arg(short = 'g', default_value_t = 10)]
    gap: usize,

    /// Plain warm-up iterations before ABC.
    #[arg(short = 'w', default_value_t = 0)]
    warmup: usize,

    #[arg(long, default_value_t = abcboost_core::data::DEFAULT_MAX_BINS)]
    max_bins: usize,

    /// Fewest training samples per leaf.
    #[arg(long, default_value_t = 1)]
    min_leaf: usize,

    /// Print one line per iteration to stderr.
    #[arg(long)]
    verbose: bool,

    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,

    /// Rows to score, in the training file format (labels are ignored).
    #[arg(long)]
    input: PathBuf,

    /// Output CSV; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,

    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,

    /// Labeled data.
    #[arg(long = "test")]
    test: PathBuf,

    #[command(flatten)]
    data: DataArgs,
}

fn parse_format(s: &str) -> Result<Format, String> {
    s.parse().map_err(|e: abcboost_core::Error| e.to_string())
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: abcboost_core::Error| e.to_string())
}

type CliResult<T> = Result<T, String>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    let result = match cli.command {
        Command::Train(args) => run_train(args),
        Command::Predict(args) => run_predict(args),
        Command::Eval(args) => run_eval(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}

fn load(path: &Path, data: &DataArgs, allow_empty: bool) -> CliResult<RawDataset> {
    let format = data.format.unwrap_or_else(|| Format::from_path(path));
    let options = LoadOptions {
        skip_header: data.skip_header,
        allow_empty,
    };
    load_dataset(path, format, options).map_err(|e| e.to_string())
}

fn load_model(path: &Path) -> CliResult<EnsembleModel> {
    EnsembleModel::load(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| format!("{}: {e}", path.display()))
}

fn log_row(record: &IterationRecord) -> String {
    let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
    let candidates: Vec<String> = record.candidates.iter().map(|c| c.to_string()).collect();
    format!(
        "{},{},{},{},{},{}",
        record.iteration,
        record.train_loss,
        opt(record.test_errors),
        opt(record.base_class),
        candidates.join(";"),
        record.trees_trained
    )
}

fn run_train(args: TrainArgs) -> CliResult<()> {
    let train = load(&args.train, &args.data, false)?;
    let test = args
        .test
        .as_deref()
        .map(|p| load(p, &args.data, false))
        .transpose()?;
    let config = BoostConfig {
        method: args.method,
        max_leaves: args.leaves,
        shrinkage: args.nu,
        iterations: args.iterations,
        search_width: args.search,
        gap: args.gap,
        warmup: args.warmup,
        max_bins: args.max_bins,
        min_leaf: args.min_leaf,
    };
    config.validate(train.num_classes()).map_err(|e| e.to_string())?;

    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| args.model.with_extension("log.csv"));
    let mut log = create(&log_path)?;
    let write_err = |e: io::Error| format!("{}: {e}", log_path.display());
    writeln!(log, "iter,train_loss,test_errors,base_class,candidates,trees_trained").map_err(write_err)?;

    let mut io_error = None;
    let (model, training) = fit_with(&config, &train, test.as_ref(), |record| {
        if args.verbose {
            eprintln!("{}", log_row(record));
        }
        if io_error.is_none() {
            if let Err(e) = writeln!(log, "{}", log_row(record)) {
                io_error = Some(e);
            }
        }
    })
    .map_err(|e| e.to_string())?;
    if let Some(e) = io_error {
        return Err(write_err(e));
    }
    log.flush().map_err(write_err)?;
    model
        .save(&args.model)
        .map_err(|e| format!("{}: {e}", args.model.display()))?;

    if let Some(reason) = &training.halted {
        eprintln!("warning: training stopped early at {reason}");
    }
    if let Some(last) = training.records.last() {
        let errors = last
            .test_errors
            .map(|e| format!(" test_errors={e}"))
            .unwrap_or_default();
        eprintln!(
            "trained {} iterations ({} trees) train_loss={}{errors}",
            training.records.len(),
            training.trees_trained(),
            last.train_loss
        );
    }
    Ok(())
}

fn run_predict(args: PredictArgs) -> CliResult<()> {
    let model = load_model(&args.model)?;
    let input = load(&args.input, &args.data, true)?;
    let predictions = if input.n_samples() == 0 {
        None
    } else {
        Some(model.predict_dataset(&input).map_err(|e| e.to_string())?)
    };

    let mut out: Box<dyn Write> = match &args.output {
        Some(path) => Box::new(create(path)?),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    let write_err = |e: io::Error| format!("writing predictions: {e}");
    if let Some(predictions) = predictions {
        for i in 0..predictions.len() {
            let label = model.classes[predictions.labels[i]];
            let probs: Vec<String> = predictions.prob_row(i).iter().map(|p| p.to_string()).collect();
            writeln!(out, "{label},{}", probs.join(",")).map_err(write_err)?;
        }
    }
    out.flush().map_err(write_err)
}

fn run_eval(args: EvalArgs) -> CliResult<()> {
    let model = load_model(&args.model)?;
    let data = load(&args.test, &args.data, true)?;
    let report = evaluate(&model, &data).map_err(|e| e.to_string())?;
    println!(
        "{} samples, {} misclassified ({:.4}%), log loss {:.6}",
        report.n_test,
        report.misclassified,
        100.0 * report.error_rate,
        report.log_loss
    );
    println!("{}", report.summary_line());
    Ok(())
}

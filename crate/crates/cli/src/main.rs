//! condgrad: projection-free constrained optimization experiments from the
//! command line. Exit codes: 0 success, 2 config error, 3 numeric failure,
//! 4 total bench failure.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use condgrad::datasets::{self, DatasetSpec};
use condgrad::error::Error;

use config::{ConfigMap, RunConfig};

#[derive(Parser)]
#[command(name = "condgrad", version, about = "Frank-Wolfe networks: SVMs, trace-norm softmax classifiers, and learned step controllers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write it as CSV
    GenData(GenDataArgs),
    /// Train a model (or solve a QP) with the selected method
    Train(TrainArgs),
    /// Meta-train an LSTM step-size or direction controller
    MetaTrain(MetaTrainArgs),
    /// Run several methods over several seeds and bundle the traces
    Bench(BenchArgs),
    /// Load a model file and write predictions for a CSV of samples
    Predict(PredictArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// circles | lowrank
    #[arg(long)]
    kind: String,
    #[arg(long, default_value_t = 200)]
    n: usize,
    /// Inner circle radius (circles)
    #[arg(long, default_value_t = 1.0)]
    inner: f64,
    /// Outer circle radius (circles)
    #[arg(long, default_value_t = 2.0)]
    outer: f64,
    /// Radial noise sigma (circles)
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Feature count (lowrank)
    #[arg(long, default_value_t = 40)]
    features: usize,
    /// Class count (lowrank)
    #[arg(long, default_value_t = 5)]
    classes: usize,
    /// Planted rank (lowrank)
    #[arg(long, default_value_t = 3)]
    rank: usize,
    /// Logit noise on planted labels (lowrank)
    #[arg(long, default_value_t = 0.0)]
    label_noise: f64,
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file with `key = value` lines; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// svm | softmax | qp
    #[arg(long)]
    experiment: Option<String>,
    /// fw | fw-softmin | l2lc-gamma | l2lc-direction | adam-lagrangian | adam-reparam | projected-gd
    #[arg(long)]
    method: Option<String>,
    /// Dataset CSV (svm, softmax)
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    label_column: Option<String>,
    /// linear | rbf
    #[arg(long)]
    kernel: Option<String>,
    /// RBF bandwidth
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    c: Option<f64>,
    /// Softmin temperature
    #[arg(long)]
    beta: Option<f64>,
    /// default | harmonic | constant
    #[arg(long)]
    schedule: Option<String>,
    /// Constant step size (implies schedule constant)
    #[arg(long)]
    gamma: Option<f64>,
    /// Trace-norm radius (softmax)
    #[arg(long)]
    tau: Option<f64>,
    /// Power iterations per LMO call (softmax)
    #[arg(long)]
    power_iters: Option<usize>,
    /// constant | log : power-iteration budget per step (softmax)
    #[arg(long)]
    power_schedule: Option<String>,
    #[arg(long)]
    iters: Option<usize>,
    /// QP dimension (qp experiment)
    #[arg(long)]
    qp_n: Option<usize>,
    /// Step size for projected-gd (default 1/sigma_1)
    #[arg(long)]
    step: Option<f64>,
    /// Multiplier for adam-lagrangian (default 1/n)
    #[arg(long)]
    lambda: Option<f64>,
    /// Adam step size for the adam-* methods
    #[arg(long)]
    adam_step: Option<f64>,
    /// Controller file for the l2lc-* methods
    #[arg(long)]
    controller: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// zero | wall; wall time in traces breaks byte-reproducibility
    #[arg(long)]
    timing: Option<String>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

impl TrainArgs {
    fn to_map(&self) -> Result<ConfigMap, Error> {
        let mut map = ConfigMap::default();
        if let Some(path) = &self.config {
            map.merge_file(path)?;
        }
        map.set_opt("experiment", &self.experiment);
        map.set_opt("method", &self.method);
        map.set_opt("data", &self.data.as_ref().map(|p| p.display().to_string()));
        map.set_opt("label_column", &self.label_column);
        map.set_opt("kernel", &self.kernel);
        map.set_opt("sigma", &self.sigma);
        map.set_opt("c", &self.c);
        map.set_opt("beta", &self.beta);
        map.set_opt("schedule", &self.schedule);
        map.set_opt("gamma", &self.gamma);
        map.set_opt("tau", &self.tau);
        map.set_opt("power_iters", &self.power_iters);
        map.set_opt("power_schedule", &self.power_schedule);
        map.set_opt("iters", &self.iters);
        map.set_opt("qp_n", &self.qp_n);
        map.set_opt("step", &self.step);
        map.set_opt("lambda", &self.lambda);
        map.set_opt("adam_step", &self.adam_step);
        map.set_opt(
            "controller",
            &self.controller.as_ref().map(|p| p.display().to_string()),
        );
        map.set_opt("seed", &self.seed);
        map.set_opt("timing", &self.timing);
        Ok(map)
    }
}

#[derive(Args)]
struct MetaTrainArgs {
    /// gamma | direction
    #[arg(long)]
    variant: String,
    /// qp | svm-circles
    #[arg(long)]
    tasks: String,
    /// Unrolled Frank-Wolfe steps per task
    #[arg(long)]
    unroll: Option<usize>,
    /// Truncated-backpropagation segment length
    #[arg(long)]
    segment_len: Option<usize>,
    #[arg(long)]
    meta_epochs: Option<usize>,
    #[arg(long)]
    meta_step: Option<f64>,
    #[arg(long)]
    train_tasks: Option<usize>,
    #[arg(long)]
    val_tasks: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    /// Fixed gamma for the direction variant's unrolls
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    schedule: Option<String>,
    /// QP dimension for the qp task family
    #[arg(long)]
    qp_n: Option<usize>,
    /// Dual size sampled per task for svm-circles
    #[arg(long)]
    subset: Option<usize>,
    /// Circles CSV for svm-circles (generated when absent)
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    kernel: Option<String>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Controller output file
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch meta-loss CSV (default: <out dir>/meta_loss.csv)
    #[arg(long)]
    loss_out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Config file; must list `methods` and `seeds`
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "bench_out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// CSV of samples; a label column is ignored when present
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "label")]
    label_column: String,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::AtIteration { source, .. } => exit_code_for(source),
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn fail(err: Error) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(exit_code_for(&err))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::MetaTrain(args) => cmd_meta_train(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Predict(args) => cmd_predict(args),
    }
}

fn cmd_gen_data(args: GenDataArgs) -> ExitCode {
    let seed = args.seed.unwrap_or_else(config::default_seed);
    let spec = match args.kind.as_str() {
        "circles" => DatasetSpec::Circles {
            n: args.n,
            inner: args.inner,
            outer: args.outer,
            noise: args.noise,
            seed,
        },
        "lowrank" => DatasetSpec::LowRankMulticlass {
            n: args.n,
            features: args.features,
            classes: args.classes,
            rank: args.rank,
            label_noise: args.label_noise,
            seed,
        },
        other => {
            return fail(Error::Config(format!(
                "unknown dataset kind '{other}' (valid: circles, lowrank)"
            )))
        }
    };
    let dataset = match datasets::generate(&spec) {
        Ok(d) => d,
        Err(e) => return fail(e),
    };
    if let Err(e) = datasets::save_csv(&dataset, &args.out) {
        return fail(Error::Io(e));
    }
    println!("wrote {} samples to {}", dataset.len(), args.out.display());
    ExitCode::SUCCESS
}

fn cmd_train(args: TrainArgs) -> ExitCode {
    let map = match args.to_map() {
        Ok(m) => m,
        Err(e) => return fail(e),
    };
    let cfg = match RunConfig::from_map(&map) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let outcome = match run::execute_run(&cfg) {
        Ok(o) => o,
        Err(e) => return fail(e),
    };
    if let Err(e) = run::write_run_artifacts(
        &outcome,
        &args.out_dir,
        &map.hash(),
        &map.canonical(),
        cfg.timing,
    ) {
        return fail(e);
    }
    println!("{}", outcome.summary_line(cfg.method));
    ExitCode::SUCCESS
}

fn cmd_meta_train(args: MetaTrainArgs) -> ExitCode {
    let mut map = ConfigMap::default();
    map.set("variant", &args.variant);
    map.set("tasks", &args.tasks);
    map.set("method", "fw"); // satisfies RunConfig; meta-training has no method
    map.set_opt("unroll", &args.unroll);
    map.set_opt("segment_len", &args.segment_len);
    map.set_opt("meta_epochs", &args.meta_epochs);
    map.set_opt("meta_step", &args.meta_step);
    map.set_opt("train_tasks", &args.train_tasks);
    map.set_opt("val_tasks", &args.val_tasks);
    map.set_opt("patience", &args.patience);
    map.set_opt("beta", &args.beta);
    map.set_opt("gamma", &args.gamma);
    map.set_opt("schedule", &args.schedule);
    map.set_opt("qp_n", &args.qp_n);
    map.set_opt("subset", &args.subset);
    map.set_opt("data", &args.data.as_ref().map(|p| p.display().to_string()));
    map.set_opt("kernel", &args.kernel);
    map.set_opt("sigma", &args.sigma);
    map.set_opt("c", &args.c);
    map.set_opt("n", &args.n);
    map.set_opt("noise", &args.noise);
    map.set_opt("seed", &args.seed);

    let outcome = match run::execute_meta_train(&map) {
        Ok(o) => o,
        Err(e) => return fail(e),
    };
    let loss_out = args.loss_out.unwrap_or_else(|| {
        args.out
            .parent()
            .map(|p| p.join("meta_loss.csv"))
            .unwrap_or_else(|| PathBuf::from("meta_loss.csv"))
    });
    if let Err(e) = run::write_meta_artifacts(&outcome, &args.out, &loss_out, &map.hash()) {
        return fail(e);
    }
    let final_loss = outcome
        .losses
        .last()
        .map(|l| l.val_loss.to_string())
        .unwrap_or_else(|| "na".to_string());
    println!(
        "meta-trained {} epochs, best controller written to {} (final val loss {final_loss})",
        outcome.losses.len(),
        args.out.display()
    );
    ExitCode::SUCCESS
}

fn cmd_bench(args: BenchArgs) -> ExitCode {
    let mut map = ConfigMap::default();
    if let Err(e) = map.merge_file(&args.config) {
        return fail(e);
    }
    match run::execute_bench(&map, &args.out_dir) {
        Ok(0) => {
            println!("bench complete: {}", args.out_dir.display());
            ExitCode::SUCCESS
        }
        Ok(code) => {
            eprintln!("error: every bench run failed");
            ExitCode::from(code as u8)
        }
        Err(e) => fail(e),
    }
}

fn cmd_predict(args: PredictArgs) -> ExitCode {
    match run::execute_predict(&args.model, &args.data, &args.out, &args.label_column) {
        Ok(()) => {
            println!("predictions written to {}", args.out.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(e),
    }
}

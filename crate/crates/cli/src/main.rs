use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use capsgnn::data::stratified_kfold;
use capsgnn::gradcheck::{run_suite, GradcheckEntry, TOLERANCE};
use capsgnn::train::{cross_validate_with, evaluate, train, FoldReport};
use capsgnn::{load_tu_dataset, Dataset, ModelConfig};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "capsgnn", version, about = "Capsule graph classification with EM routing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on one stratified split and report validation and test accuracy.
    Train(RunArgs),
    /// Run the repeated nested cross-validation protocol.
    Cv(RunArgs),
    /// Compare analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print dataset statistics.
    Inspect {
        #[command(flatten)]
        data: DataArgs,
    },
}

#[derive(Args)]
struct DataArgs {
    /// TU dataset name, e.g. MUTAG.
    #[arg(long)]
    dataset: String,
    /// Directory holding `<name>/<name>_A.txt` and friends.
    #[arg(long, default_value = "data")]
    data_root: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Where to write the metrics JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override one configuration key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Serialize)]
struct Summary {
    mean: f64,
    std: f64,
}

#[derive(Serialize)]
struct Metrics<'a> {
    dataset: &'a str,
    config: &'a ModelConfig,
    folds: &'a [FoldReport],
    summary: Summary,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<capsgnn::Error>() {
        Some(e) if e.is_data_error() => 2,
        Some(capsgnn::Error::Numeric(_)) => 3,
        _ => 1,
    }
}

fn build_config(args: &RunArgs) -> Result<ModelConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            ModelConfig::parse_text(&text)?
        }
        None => ModelConfig::default(),
    };
    for o in &args.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load(data: &DataArgs) -> Result<Dataset> {
    Ok(load_tu_dataset(&data.data_root, &data.dataset)?)
}

fn write_metrics(path: &Path, metrics: &Metrics) -> Result<()> {
    let json = serde_json::to_string_pretty(metrics)?;
    std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))
}

fn run_train(args: &RunArgs) -> Result<()> {
    let cfg = build_config(args)?;
    let ds = load(&args.data)?;
    let split = stratified_kfold(&ds, cfg.folds, cfg.seed)?.swap_remove(0);
    let started = Instant::now();
    let outcome = train(&ds, &split.train, &split.validation, &cfg)?;
    for r in &outcome.history {
        log::info!("epoch {:>3}  loss {:.4}  train {:.3}  val {:.3}", r.epoch, r.train_loss, r.train_acc, r.val_acc);
    }
    let test_acc = evaluate(&outcome.best, &ds, &split.test)?;
    println!(
        "{}: best epoch {} val {:.4} test {:.4} ({} train / {} val / {} test graphs)",
        ds.name,
        outcome.best_epoch,
        outcome.best_val_acc,
        test_acc,
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );
    if let Some(out) = &args.out {
        let fold = FoldReport {
            rep: 0,
            fold: 0,
            val_acc: outcome.best_val_acc,
            test_acc,
            epochs: outcome.history.len(),
            best_epoch: outcome.best_epoch,
            seconds: started.elapsed().as_secs_f64(),
            selected: true,
            val_loss: outcome.best_val_loss,
        };
        let folds = [fold];
        write_metrics(
            out,
            &Metrics { dataset: &ds.name, config: &cfg, folds: &folds, summary: Summary { mean: test_acc, std: 0.0 } },
        )?;
    }
    Ok(())
}

fn run_cv(args: &RunArgs) -> Result<()> {
    let cfg = build_config(args)?;
    let ds = load(&args.data)?;
    let report = cross_validate_with(&ds, &cfg, &|f| {
        log::info!("rep {} fold {}: val {:.4} test {:.4} ({:.1}s)", f.rep, f.fold, f.val_acc, f.test_acc, f.seconds);
    })?;
    for (rep, acc) in report.summary.repetition_test_acc.iter().enumerate() {
        println!("repetition {rep}: test accuracy {acc:.4}");
    }
    println!(
        "{}: {:.2} +- {:.2} over {} repetitions",
        ds.name,
        100.0 * report.summary.mean,
        100.0 * report.summary.std,
        report.summary.repetition_test_acc.len()
    );
    if let Some(out) = &args.out {
        write_metrics(
            out,
            &Metrics {
                dataset: &report.dataset,
                config: &report.config,
                folds: &report.folds,
                summary: Summary { mean: report.summary.mean, std: report.summary.std },
            },
        )?;
    }
    Ok(())
}

fn run_gradcheck(seed: u64) -> Result<bool> {
    let entries = run_suite(seed);
    let mut modules: Vec<(String, f64)> = Vec::new();
    for GradcheckEntry { group, values, max_rel_error } in &entries {
        println!("{group:<32} {values:>6} values  max rel error {max_rel_error:.3e}");
        let module = group.split('.').next().unwrap_or(group).to_string();
        match modules.iter_mut().find(|(m, _)| *m == module) {
            Some((_, worst)) => *worst = worst.max(*max_rel_error),
            None => modules.push((module, *max_rel_error)),
        }
    }
    println!();
    for (module, worst) in &modules {
        let verdict = if *worst < TOLERANCE { "ok" } else { "FAIL" };
        println!("{module:<12} max rel error {worst:.3e}  {verdict}");
    }
    Ok(entries.iter().all(GradcheckEntry::passed))
}

fn run_inspect(data: &DataArgs) -> Result<()> {
    let ds = load(data)?;
    let nodes: Vec<usize> = ds.graphs.iter().map(|g| g.num_nodes()).collect();
    let edges: usize = ds.graphs.iter().map(|g| g.edges().len()).sum();
    let total_nodes: usize = nodes.iter().sum();
    println!("dataset        {}", ds.name);
    println!("graphs         {}", ds.len());
    println!("classes        {}", ds.num_classes);
    println!("class labels   {:?}", ds.class_values);
    println!("class counts   {:?}", ds.class_counts());
    println!("feature dim    {}", ds.feature_dim);
    println!(
        "features       {}",
        if ds.node_label_values.is_some() { "one-hot node labels" } else { "local degree profile" }
    );
    println!(
        "nodes          {} total, {:.2} mean, {}..={} range",
        total_nodes,
        total_nodes as f64 / ds.len() as f64,
        nodes.iter().min().unwrap_or(&0),
        nodes.iter().max().unwrap_or(&0)
    );
    println!("edges          {} total, {:.2} mean", edges, edges as f64 / ds.len() as f64);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Train(args) => run_train(args),
        Command::Cv(args) => run_cv(args),
        Command::Inspect { data } => run_inspect(data),
        Command::Gradcheck { seed } => match run_gradcheck(*seed) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("error: gradient check exceeded tolerance {TOLERANCE:e}");
                return ExitCode::from(3);
            }
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

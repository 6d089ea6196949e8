use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use fixnorm::config::{defaults_help, load_config, ExperimentConfig};
use fixnorm::data::{self, load_splits, Dataset, Splits};
use fixnorm::metrics::{self, read_json, read_jsonl, write_json};
use fixnorm::train::{train_run, MetricsRecord};
use fixnorm::tuner::{budget_of, run_trial, tune, TrialRecord, TunerResult};
use fixnorm::{gradcheck, Error};

#[derive(Parser)]
#[command(
    name = "fixnorm",
    version,
    about = "Deterministic training lab for norm-fixed SGD and capped-gain heads"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training and write its metrics.
    #[command(after_long_help = defaults_help())]
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Search lr and alpha with the budgeted two-phase tuner.
    #[command(after_long_help = defaults_help())]
    Tune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check every differentiable op against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = gradcheck::DEFAULT_INSTANCES)]
        instances: usize,
    },
    /// Generate or inspect datasets.
    Data {
        #[command(subcommand)]
        action: DataAction,
    },
    /// Tabulate metrics of run or tune directories as CSV.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Directory receiving one CSV per metric.
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum DataAction {
    /// Write the configured synthetic blobs as train.csv / val.csv.
    Synth {
        /// Experiment config; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize an IDX or CIFAR-10 file, or the dataset of a config.
    Inspect {
        #[arg(long, conflicts_with = "file")]
        config: Option<PathBuf>,
        #[arg(required_unless_present = "config")]
        file: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<Error>().is_some_and(Error::is_usage);
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Train { config, out } => cmd_train(&config, &out),
        Command::Tune { config, out } => cmd_tune(&config, &out),
        Command::Gradcheck { seed, instances } => cmd_gradcheck(seed, instances),
        Command::Data { action } => match action {
            DataAction::Synth { config, out } => cmd_synth(config.as_deref(), &out),
            DataAction::Inspect { config, file } => cmd_inspect(config.as_deref(), file.as_deref()),
        },
        Command::Report { dirs, out } => cmd_report(&dirs, &out),
    }
}

fn prepare(config: &Path, out: &Path) -> Result<(ExperimentConfig, Splits)> {
    let cfg = load_config(config)?;
    let splits = load_splits(&cfg.dataset_ref()?)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.toml"), cfg.to_toml_string())
        .with_context(|| format!("writing into {}", out.display()))?;
    Ok((cfg, splits))
}

fn cmd_train(config: &Path, out: &Path) -> Result<ExitCode> {
    let (cfg, splits) = prepare(config, out)?;
    let tc = cfg.train_config();
    let r = train_run(&tc, &splits, Some(&out.join("metrics.jsonl")))?;
    write_json(&out.join("result.json"), &r)?;
    println!("mode        {}", tc.mode);
    println!("steps       {}", r.steps);
    println!("final top1  {:.4}", r.final_top1);
    println!("best top1   {:.4}", r.best_top1);
    if let Some(f) = &r.failure {
        println!("FAILED      {f}");
    }
    println!("metrics     {}", out.join("metrics.jsonl").display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_tune(config: &Path, out: &Path) -> Result<ExitCode> {
    let (cfg, splits) = prepare(config, out)?;
    let template = cfg.train_config();
    let tcfg = cfg.tuner_config();
    tcfg.validate()?;
    let trials_dir = out.join("trials");
    let result = tune(&tcfg, Some(&out.join("ledger.jsonl")), |req| {
        let dir = trials_dir.join(req.tag());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        run_trial(req, &template, &splits, Some(&dir.join("metrics.jsonl")))
    })?;
    write_json(&out.join("tuner_result.json"), &result)?;
    print!(
        "{}",
        ledger_summary(&result, budget_of(&tcfg), tcfg.final_epochs())
    );
    Ok(ExitCode::SUCCESS)
}

fn ledger_summary(result: &TunerResult, planned: u64, t_max: u32) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "phase round index        lr     alpha  epochs   steps    top1"
    );
    for t in &result.trials {
        let _ = writeln!(
            s,
            "{:>5} {:>5} {:>5} {:>9.4} {:>9.4} {:>7} {:>7} {:>7.4}{}",
            t.phase,
            t.round,
            t.index,
            t.lr,
            t.alpha,
            t.budget_epochs,
            t.steps,
            t.top1,
            if t.failed { "  failed" } else { "" }
        );
    }
    let consumed: u64 = result
        .trials
        .iter()
        .map(|t| u64::from(t.budget_epochs))
        .sum();
    let _ = writeln!(
        s,
        "best: lr={} alpha={} top1={:.4}",
        result.lr_best, result.alpha_best, result.acc_best
    );
    let _ = writeln!(
        s,
        "budget: {consumed} epochs consumed, {planned} planned = {:.2} x T_max (T_max = {t_max} epochs), {} steps",
        planned as f64 / f64::from(t_max),
        result.total_steps
    );
    s
}

fn cmd_gradcheck(seed: u64, instances: usize) -> Result<ExitCode> {
    if instances == 0 {
        return Err(Error::config("instances", "must be at least 1").into());
    }
    let report = gradcheck::run_suite(seed, instances)?;
    println!("{:<24} {:>9} {:>14}", "op", "instances", "max rel err");
    for op in &report.ops {
        println!(
            "{:<24} {:>9} {:>14.3e} {}",
            op.name,
            op.instances,
            op.max_rel_error,
            if op.passed() { "ok" } else { "FAIL" }
        );
    }
    println!(
        "tolerance {:e}, worst {:.3e}",
        report.tolerance,
        report.worst()
    );
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn write_dataset_csv(d: &Dataset, path: &Path) -> Result<()> {
    let dim = d.features.len() / d.len();
    let mut s = String::from("label");
    for j in 0..dim {
        let _ = write!(s, ",x{j}");
    }
    s.push('\n');
    for (i, y) in d.labels.iter().enumerate() {
        let _ = write!(s, "{y}");
        for v in d.features.row(i) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn cmd_synth(config: Option<&Path>, out: &Path) -> Result<ExitCode> {
    let cfg = match config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    let spec = cfg.synth_spec();
    let splits = data::gen_blobs(&spec)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_dataset_csv(&splits.train, &out.join("train.csv"))?;
    write_dataset_csv(&splits.val, &out.join("val.csv"))?;
    println!(
        "wrote {} train / {} val samples ({} classes, dim {}) to {}",
        splits.train.len(),
        splits.val.len(),
        spec.classes,
        spec.dim,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn describe(name: &str, d: &Dataset) {
    let mut counts = vec![0usize; d.classes];
    for &y in &d.labels {
        counts[y] += 1;
    }
    let data = d.features.data();
    let mean = data.iter().sum::<f64>() / data.len() as f64;
    let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / data.len() as f64;
    println!(
        "{name}: {} samples, sample shape {:?}, {} classes, mean {:.4}, std {:.4}",
        d.len(),
        d.sample_shape(),
        d.classes,
        mean,
        var.sqrt()
    );
    println!("  class counts {counts:?}");
}

fn cmd_inspect(config: Option<&Path>, file: Option<&Path>) -> Result<ExitCode> {
    if let Some(c) = config {
        let cfg = load_config(c)?;
        let splits = load_splits(&cfg.dataset_ref()?)?;
        describe("train", &splits.train);
        describe("val", &splits.val);
        return Ok(ExitCode::SUCCESS);
    }
    let path = file.expect("clap requires a file without --config");
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let magic = bytes
        .get(..4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]));
    match magic {
        Some(m @ (data::IDX_IMAGES_MAGIC | data::IDX_LABELS_MAGIC)) => {
            let idx = data::parse_idx(&bytes, m)?;
            let kind = if m == data::IDX_IMAGES_MAGIC {
                "images"
            } else {
                "labels"
            };
            println!(
                "IDX {kind}: dims {:?}, {} payload bytes",
                idx.dims,
                idx.payload.len()
            );
        }
        _ if !bytes.is_empty() && bytes.len() % data::CIFAR_RECORD == 0 => {
            let (x, y) = data::parse_cifar10(&bytes)?;
            let d = Dataset::new(x, y, data::CIFAR_CLASSES, data::Split::Train)?;
            describe("CIFAR-10", &d);
        }
        _ => bail!(Error::Format(format!(
            "{}: neither an IDX file nor a whole number of CIFAR-10 records",
            path.display()
        ))),
    }
    Ok(ExitCode::SUCCESS)
}

fn dir_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn cmd_report(dirs: &[PathBuf], out: &Path) -> Result<ExitCode> {
    let mut runs: Vec<(String, Vec<MetricsRecord>)> = Vec::new();
    for dir in dirs {
        let name = dir_name(dir);
        let run_metrics = dir.join("metrics.jsonl");
        let ledger = dir.join("ledger.jsonl");
        if run_metrics.is_file() {
            runs.push((name, read_jsonl(&run_metrics)?));
        } else if ledger.is_file() {
            let trials: Vec<TrialRecord> = read_jsonl(&ledger)?;
            for t in &trials {
                if let Some(p) = t.metrics_path.as_ref().filter(|p| p.is_file()) {
                    runs.push((
                        format!("{name}/p{}-r{}-i{}", t.phase, t.round, t.index),
                        read_jsonl(p)?,
                    ));
                }
            }
            let cfg = load_config(&dir.join("config.toml"))?.tuner_config();
            let result: TunerResult = read_json(&dir.join("tuner_result.json"))?;
            println!("== {name}");
            print!(
                "{}",
                ledger_summary(&result, budget_of(&cfg), cfg.final_epochs())
            );
        } else {
            bail!(Error::config(
                "dirs",
                format!(
                    "{} holds neither metrics.jsonl nor ledger.jsonl",
                    dir.display()
                )
            ));
        }
    }
    let files = metrics::report(&runs, out)?;
    println!("wrote {} CSV files to {}", files.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use elicit_core::elicitation::{read_expert_file, write_expert_file, Perturbation};
use elicit_core::models::{builtin, ModelSpec};
use elicit_core::studies::{
    self, case_config, ideal_expert, StudyContext, StudyReport, CASE_NAMES, THRESHOLDS,
};
use elicit_core::trainer::{fit_with_observer, recovery_error, TraceRow, TrainingConfig};
use elicit_core::Error;

#[derive(Parser)]
#[command(
    name = "elicit",
    version,
    about = "Learn prior hyperparameters from elicited statistics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the ideal expert's statistics at known hyperparameters.
    SimulateExpert(SimulateArgs),
    /// Fit hyperparameters to an expert file.
    Fit(FitArgs),
    /// Run a case study, the truncation sweep or an inconsistency scenario.
    Study(StudyArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Built-in model name.
    #[arg(long, conflicts_with = "model_file", required_unless_present = "model_file")]
    model: Option<String>,
    /// Model definition in JSON.
    #[arg(long)]
    model_file: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Config override as key=value (repeatable, dotted keys).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads for batch simulation.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Hyperparameter values as name=value pairs, replacing the model's own.
    #[arg(long, value_delimiter = ',', value_name = "NAME=VALUE")]
    lambda: Vec<String>,
    /// Number of expert samples.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    expert: PathBuf,
    #[arg(long, default_value = "elicit-out")]
    out: PathBuf,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct StudyArgs {
    /// case1, case2, case3, case4_normal, case4_weibull, threshold or inconsistency.
    name: String,
    /// Truncation thresholds for the threshold study.
    #[arg(long = "t-u", value_delimiter = ',')]
    t_u: Vec<usize>,
    /// double-s, halve-r2 or benchmark.
    #[arg(long, default_value = "double-s")]
    scenario: String,
    #[arg(long, default_value = "elicit-out")]
    out: PathBuf,
    #[command(flatten)]
    train: TrainArgs,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SimulateExpert(a) => simulate_expert(a),
        Command::Fit(a) => fit(a),
        Command::Study(a) => study(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}

fn load_model(m: &ModelArgs) -> Result<ModelSpec, Error> {
    match (&m.model, &m.model_file) {
        (Some(name), _) => builtin(name),
        (None, Some(path)) => ModelSpec::load(path),
        (None, None) => Err(Error::Config("one of --model or --model-file is required".into())),
    }
}

/// The case study's settings for a built-in case, the defaults otherwise.
fn base_config(spec: &ModelSpec) -> TrainingConfig {
    case_config(&spec.name).unwrap_or_default()
}

fn apply_train_args(cfg: &mut TrainingConfig, t: &TrainArgs) -> Result<(), Error> {
    for s in &t.set {
        cfg.apply_override(s)?;
    }
    if let Some(seed) = t.seed {
        cfg.seed = seed;
    }
    if let Some(j) = t.jobs {
        cfg.jobs = j;
    }
    if let Some(e) = t.epochs {
        cfg.epochs = e;
    }
    cfg.validate()
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, format!("{text}\n")).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn progress_line(label: &str, row: &TraceRow, epochs: usize) {
    if (row.epoch + 1).is_multiple_of(50) || row.epoch + 1 == epochs {
        eprintln!(
            "[{label}] epoch {}/{epochs}  loss {:.6}  lr {:.3e}",
            row.epoch + 1,
            row.total_loss,
            row.lr
        );
    }
}

fn simulate_expert(a: SimulateArgs) -> Result<(), Error> {
    let spec = load_model(&a.model)?;
    let mut cfg = base_config(&spec);
    for s in &a.set {
        cfg.apply_override(s)?;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(n) = a.samples {
        cfg.expert_samples = n;
    }
    cfg.validate()?;
    let mut lambda: Vec<Option<f64>> = spec.hyperparameters.iter().map(|h| h.true_value).collect();
    for pair in &a.lambda {
        let (name, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--lambda entry `{pair}` is not name=value")))?;
        let v: f64 = v
            .parse()
            .map_err(|_| Error::Config(format!("--lambda value `{v}` is not a number")))?;
        lambda[spec.hyper_index(name)?] = Some(v);
    }
    let missing: Vec<&str> = spec
        .hyperparameters
        .iter()
        .zip(&lambda)
        .filter(|(_, v)| v.is_none())
        .map(|(h, _)| h.name.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "no value for {}; pass them with --lambda",
            missing.join(", ")
        )));
    }
    let lambda: Vec<f64> = lambda.into_iter().flatten().collect();
    let stats = ideal_expert(&spec, &lambda, &cfg)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_expert_file(&a.out, &stats)?;
    for s in &stats.statistics {
        println!("{}\t{}\t{}", s.id, s.technique.tag(), s.values.len());
    }
    Ok(())
}

#[derive(Serialize)]
struct FitResult {
    model: String,
    seed: u64,
    epochs: usize,
    lambda_final: Vec<NamedValue>,
    #[serde(skip_serializing_if = "Option::is_none")]
    recovery_error: Option<Vec<NamedValue>>,
}

#[derive(Serialize)]
struct NamedValue {
    name: String,
    value: f64,
}

fn named(pairs: Vec<(String, f64)>) -> Vec<NamedValue> {
    pairs
        .into_iter()
        .map(|(name, value)| NamedValue { name, value })
        .collect()
}

fn fit(a: FitArgs) -> Result<(), Error> {
    let spec = load_model(&a.model)?;
    let mut cfg = base_config(&spec);
    apply_train_args(&mut cfg, &a.train)?;
    let expert = read_expert_file(&a.expert)?;
    create_dir(&a.out)?;
    let epochs = cfg.epochs;
    let outcome = fit_with_observer(&spec, &expert, &cfg, &mut |row| {
        progress_line(&spec.name, row, epochs)
    })?;
    outcome.trace.write_csv(a.out.join("trace.csv"))?;
    outcome.trace.write_timing(a.out.join("timing.csv"))?;
    let learned = outcome.named_final();
    let recovery = match spec.lambda_star() {
        Some(star) => {
            let truth: Vec<(String, f64)> = spec.hyper_names().into_iter().zip(star).collect();
            Some(named(recovery_error(&learned, &truth)?))
        }
        None => None,
    };
    let result = FitResult {
        model: spec.name.clone(),
        seed: cfg.seed,
        epochs: outcome.trace.rows.len(),
        lambda_final: named(learned),
        recovery_error: recovery,
    };
    let text = serde_json::to_string_pretty(&result)?;
    write_text(&a.out.join("result.json"), &text)?;
    println!("{text}");
    Ok(())
}

fn print_report(r: &StudyReport) {
    println!("{} ({}), seed {}", r.study, r.model, r.seed);
    for h in &r.hyperparameters {
        match (h.true_value, h.abs_error) {
            (Some(t), Some(e)) => {
                println!(
                    "  {:<8} learned {:>12.5}  true {:>12.5}  error {:.5}",
                    h.name, h.learned, t, e
                )
            }
            _ => println!("  {:<8} learned {:>12.5}", h.name, h.learned),
        }
    }
    for d in &r.directions {
        println!("  {:<8} {:?} vs benchmark {}", d.name, d.direction, d.benchmark);
    }
    println!("  seconds/epoch {:.3}", r.seconds_per_epoch);
}

fn study(a: StudyArgs) -> Result<(), Error> {
    let base = match a.name.as_str() {
        "threshold" => "case3",
        "inconsistency" => "case4_normal",
        name if CASE_NAMES.contains(&name) => name,
        other => {
            return Err(Error::Config(format!(
                "unknown study `{other}` (expected {}, threshold or inconsistency)",
                CASE_NAMES.join(", ")
            )))
        }
    };
    let mut cfg = case_config(base)?;
    apply_train_args(&mut cfg, &a.train)?;
    let epochs = cfg.epochs;
    let mut show = |label: &str, row: &TraceRow| progress_line(label, row, epochs);
    let mut ctx = StudyContext {
        out: Some(a.out.clone()),
        progress: Some(&mut show),
    };
    match a.name.as_str() {
        "threshold" => {
            let t_u = if a.t_u.is_empty() {
                THRESHOLDS.to_vec()
            } else {
                a.t_u.clone()
            };
            for r in studies::run_threshold_study(&t_u, &cfg, &mut ctx)? {
                println!("t_u = {}", r.truncation.unwrap_or_default());
                print_report(&r);
            }
        }
        "inconsistency" => {
            let scenario = match a.scenario.as_str() {
                "benchmark" => None,
                s => Some(s.parse::<Perturbation>()?),
            };
            print_report(&studies::run_inconsistency_study(scenario, &cfg, &mut ctx)?);
        }
        name => print_report(&studies::run_case_study(name, &cfg, &mut ctx)?),
    }
    Ok(())
}

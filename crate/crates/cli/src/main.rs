use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use loopformer::data::{export_jsonl, TaskConfig, TaskKind};
use loopformer::diagnostics::{run_diagnostics, SliceInfo};
use loopformer::gradsuite::{run_suite, TOLERANCE};
use loopformer::train::ablate::{parse_override, summary_table, with_override, AblationSpec, ArmResult};
use loopformer::train::{
    evaluate, fingerprint_of, train_to_dir, write_fingerprint, Checkpoint, RunData, StepEval, TrainConfig,
};
use loopformer::{Error, Result};

#[derive(Parser)]
#[command(name = "loopformer", version, about = "Recursive multimodal decoder: data, training, evaluation, diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Export synthetic samples as JSON lines.
    GenData(GenDataArgs),
    /// Train from a JSON config.
    Train(TrainArgs),
    /// Evaluate a checkpoint at every recursion step up to --eval-step.
    Eval(EvalArgs),
    /// Per-layer norm and CKA report for a checkpoint.
    Diagnose(DiagnoseArgs),
    /// Expand an ablation grid and train every arm.
    Ablate(AblateArgs),
    /// Finite-difference gradient suite in 64-bit arithmetic.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Training config whose `task` section is used as the base.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<TaskKind>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    /// Override any config field, e.g. `--set loss.beta=2.0`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Task to evaluate on; defaults to the checkpoint's task.
    #[arg(long)]
    task: Option<TaskKind>,
    /// Deepest recursion step to report; defaults to the trained depth.
    #[arg(long)]
    eval_step: Option<usize>,
    /// Number of eval samples; defaults to the checkpoint's n_eval.
    #[arg(long)]
    n: Option<usize>,
    /// Data seed; defaults to the checkpoint's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Permit --eval-step beyond the trained depth.
    #[arg(long)]
    allow_extrapolate: bool,
    /// Directory for eval.json and fingerprint.txt.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    allow_extrapolate: bool,
    /// Seed of the CKA row subsample.
    #[arg(long, default_value_t = 0)]
    subsample_seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of concurrent worker processes.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LOOPFORMER_LOG", "info"))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(if e.is_config_error() { 1 } else { 2 })
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serialises") + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::from_json_file(p),
        None => Ok(TrainConfig::default()),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut task: TaskConfig = load_config(a.config.as_deref())?.task;
    if let Some(kind) = a.task {
        task.task = kind;
    }
    task.validate()?;
    create_dir(&a.out)?;
    let path = a.out.join("samples.jsonl");
    export_jsonl(&path, a.seed, a.n, &task)?;
    write_json(&a.out.join("task.json"), &task)?;
    let fp = fingerprint_of(&(&task, a.seed, a.n));
    write_fingerprint(&a.out, &fp)?;
    println!("wrote {} samples to {}", a.n, path.display());
    println!("fingerprint {fp}");
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut config = load_config(a.config.as_deref())?;
    for o in &a.overrides {
        let (path, value) = parse_override(o)?;
        config = with_override(&config, &path, value)?;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(s) = a.steps {
        config.steps = s;
    }
    config.validate()?;
    log::info!(
        "training {} steps, R={}, fingerprint {}",
        config.steps,
        config.recursion.steps,
        config.fingerprint()
    );
    let outcome = train_to_dir(&config, &a.out)?;
    write_json(&a.out.join("eval.json"), &outcome.final_eval)?;
    print!("{}", eval_table(&outcome.final_eval));
    println!("checkpoint written to {}", a.out.display());
    Ok(())
}

fn eval_table(rows: &[StepEval]) -> String {
    let mut out = format!("{:>3}  {:>8}  {:>8}  {:>11}  {:>8}\n", "r", "accuracy", "ce", "ce_adjusted", "degraded");
    for s in rows {
        out += &format!(
            "{:>3}  {:>8.4}  {:>8.4}  {:>11.4}  {:>8.4}\n",
            s.r, s.accuracy, s.ce_raw, s.ce_adjusted, s.degraded_fraction
        );
    }
    out
}

/// Loads a checkpoint and resolves the recursion depth to run.
fn load_for_depth(ckpt: &Path, depth: Option<usize>, allow_extrapolate: bool) -> Result<(Checkpoint, TrainConfig)> {
    let checkpoint = Checkpoint::load(ckpt)?;
    let mut config = checkpoint.config.clone();
    let trained = config.recursion.steps;
    let depth = depth.unwrap_or(trained);
    if depth == 0 {
        return Err(Error::Config("recursion depth must be >= 1".into()));
    }
    if depth > trained && !allow_extrapolate {
        return Err(Error::Config(format!(
            "requested depth {depth} exceeds the trained depth {trained}; pass --allow-extrapolate to run it anyway"
        )));
    }
    config.recursion.steps = depth;
    Ok((checkpoint, config))
}

fn eval(a: EvalArgs) -> Result<()> {
    let (checkpoint, mut config) = load_for_depth(&a.ckpt, a.eval_step, a.allow_extrapolate)?;
    if let Some(kind) = a.task {
        config.task.task = kind;
    }
    if let Some(n) = a.n {
        config.n_eval = n;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    config.validate()?;
    let data = RunData::new(&config)?;
    let rows = evaluate(&checkpoint.params, &data.eval_batches, &config.recursion, config.loss.beta)?;
    print!("{}", eval_table(&rows));
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_json(&out.join("eval.json"), &rows)?;
        write_fingerprint(out, &config.fingerprint())?;
    }
    Ok(())
}

fn diagnose(a: DiagnoseArgs) -> Result<()> {
    let (checkpoint, mut config) = load_for_depth(&a.ckpt, a.steps, a.allow_extrapolate)?;
    if let Some(s) = a.seed {
        config.seed = s;
    }
    config.n_eval = a.n;
    config.validate()?;
    let data = RunData::new(&config)?;
    let slice = SliceInfo {
        task: serde_json::to_value(config.task.task)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default(),
        data_seed: config.seed,
        split: "eval".into(),
        sample_count: a.n,
        subsample_seed: a.subsample_seed,
    };
    let fp = fingerprint_of(&(&config, &slice));
    let report = run_diagnostics(&checkpoint.params, &data.eval_batches, &config.recursion, slice, fp.clone())?;
    create_dir(&a.out)?;
    report.write(&a.out.join("report.json"), &a.out.join("layers.csv"))?;
    write_fingerprint(&a.out, &fp)?;
    println!("{:>4}  {:>5}  {:>10}  {:>8}", "step", "layer", "norm", "cka");
    for s in &report.steps {
        for (l, (n, c)) in s.per_layer_norm.iter().zip(&s.per_layer_cka).enumerate() {
            println!("{:>4}  {:>5}  {:>10.4}  {:>8.4}", s.step, l, n, c);
        }
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.spec).map_err(|e| Error::io(&a.spec, e))?;
    let spec: AblationSpec = serde_json::from_str(&text).map_err(|e| Error::json(&a.spec, e))?;
    let arms = spec.expand()?;
    create_dir(&a.out)?;
    write_fingerprint(&a.out, &fingerprint_of(&spec))?;
    log::info!("ablation grid expands to {} arms", arms.len());

    let dirs: Vec<PathBuf> = (0..arms.len()).map(|i| a.out.join(format!("arm_{i:03}"))).collect();
    for (arm, dir) in arms.iter().zip(&dirs) {
        create_dir(dir)?;
        write_json(&dir.join("arm_config.json"), &arm.config)?;
    }
    if a.parallel > 1 {
        run_arms_in_processes(&dirs, a.parallel)?;
    } else {
        for (arm, dir) in arms.iter().zip(&dirs) {
            log::info!("arm {}", arm.name);
            let outcome = train_to_dir(&arm.config, dir)?;
            write_json(&dir.join("eval.json"), &outcome.final_eval)?;
        }
    }

    let mut results = Vec::with_capacity(arms.len());
    for (arm, dir) in arms.iter().zip(&dirs) {
        let path = dir.join("eval.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let eval: Vec<StepEval> = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        results.push(ArmResult {
            name: arm.name.clone(),
            fingerprint: arm.config.fingerprint(),
            eval,
        });
    }
    let table = summary_table(&results);
    std::fs::write(a.out.join("summary.txt"), &table).map_err(|e| Error::io(a.out.join("summary.txt"), e))?;
    write_json(&a.out.join("summary.json"), &results)?;
    print!("{table}");
    Ok(())
}

/// Runs `train` for every arm directory in child processes, at most `workers`
/// at a time.
fn run_arms_in_processes(dirs: &[PathBuf], workers: usize) -> Result<()> {
    let exe = std::env::current_exe().map_err(|e| Error::io(PathBuf::from("current executable"), e))?;
    let mut pending = dirs.iter();
    let mut running: Vec<(PathBuf, std::process::Child)> = Vec::new();
    let mut failed = Vec::new();
    loop {
        while running.len() < workers {
            let Some(dir) = pending.next() else { break };
            let child = std::process::Command::new(&exe)
                .arg("train")
                .arg("--config")
                .arg(dir.join("arm_config.json"))
                .arg("--out")
                .arg(dir)
                .stdout(std::process::Stdio::null())
                .spawn()
                .map_err(|e| Error::io(&exe, e))?;
            running.push((dir.clone(), child));
        }
        if running.is_empty() {
            break;
        }
        let (dir, mut child) = running.remove(0);
        let status = child.wait().map_err(|e| Error::io(&dir, e))?;
        if !status.success() {
            failed.push(dir.display().to_string());
        }
    }
    if !failed.is_empty() {
        return Err(Error::InvalidArgument(format!("ablation arms failed: {}", failed.join(", "))));
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let entries = run_suite(a.seed, a.eps)?;
    println!("{:<36}  {:>12}  {:>11}  worst", "check", "max rel err", "coordinates");
    let mut ok = true;
    for e in &entries {
        println!(
            "{:<36}  {:>12.3e}  {:>11}  {}[{}]",
            e.name, e.max_relative_error, e.coordinates, e.worst_tensor, e.worst_index
        );
        ok &= e.passed();
    }
    println!("fingerprint {}", fingerprint_of(&(a.seed, a.eps)));
    if !ok {
        return Err(Error::CheckFailed(format!(
            "gradient check exceeded tolerance {TOLERANCE:e}"
        )));
    }
    Ok(())
}

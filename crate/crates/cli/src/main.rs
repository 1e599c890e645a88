mod args;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::Parser;

use args::{Cli, Command, EvaluateArgs, GenerateArgs, GradcheckArgs, ReportArgs, RunArgs, TrainArgs};
use tfmoe::bench::{
    checkpoint_path, continue_protocol, evaluate_task, load_checkpoint, load_tasks, metrics_csv, plot_data_csv, run_pretraining,
    run_protocol, save_checkpoint, summary_markdown, MetricsReport, TaskMetrics, METRICS_FILE, PRETRAIN_REPORT_FILE,
};
use tfmoe::config::{DataSource, ExperimentConfig};
use tfmoe::data::{generate_stream, write_dataset_dir, write_labels, StreamSpec, TaskDataset};
use tfmoe::engine::ModelState;
use tfmoe::oracle::gradcheck_suite;
use tfmoe::Error;

pub const DATA_DIR_ENV: &str = "TFMOE_DATA_DIR";
const CONFIG_COPY: &str = "config.toml";

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_DIVERGED: u8 = 4;

struct Failure {
    code: u8,
    err: anyhow::Error,
}

type CliResult<T> = Result<T, Failure>;

fn fail(code: u8, err: impl Into<anyhow::Error>) -> Failure {
    Failure { code, err: err.into() }
}

/// Exit code of an error raised while training or evaluating.
fn code_of(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) | Error::Parse { .. } => EXIT_CONFIG,
        Error::Gap { .. } | Error::Protocol(_) => EXIT_DATA,
        Error::Divergence { .. } | Error::NonFinite(_) => EXIT_DIVERGED,
        _ => EXIT_FAILURE,
    }
}

fn lib(e: Error) -> Failure {
    let code = code_of(&e);
    fail(code, e)
}

/// Any failure while reading data is a data error, except bad configuration.
fn data(e: Error) -> Failure {
    let code = if code_of(&e) == EXIT_CONFIG { EXIT_CONFIG } else { EXIT_DATA };
    fail(code, e)
}

fn io(e: impl Into<anyhow::Error>) -> Failure {
    fail(EXIT_FAILURE, e)
}

fn data_dir(cli: &Cli) -> Option<PathBuf> {
    cli.data_dir.clone().or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
}

/// Configuration file, then flags.
fn resolve_config(cli: &Cli, run: Option<&RunArgs>) -> CliResult<ExperimentConfig> {
    let (mut cfg, file_sets_data) = match &cli.config {
        Some(path) => {
            let cfg = ExperimentConfig::from_file(path).map_err(|e| fail(EXIT_CONFIG, e))?;
            let keys = ExperimentConfig::keys_in_file(path).map_err(|e| fail(EXIT_CONFIG, e))?;
            (cfg, keys.iter().any(|k| k == "data"))
        }
        None => (ExperimentConfig::default(), false),
    };
    if let Some(run) = run {
        run.overrides.apply(&mut cfg, data_dir(cli).as_ref(), cli.data_dir.is_some(), file_sets_data);
    }
    cfg.validate().map_err(|e| fail(EXIT_CONFIG, e))?;
    Ok(cfg)
}

fn read_tasks(cfg: &ExperimentConfig) -> CliResult<Vec<TaskDataset>> {
    let tasks = load_tasks(cfg).map_err(data)?;
    log::info!("{} tasks, {} nodes in the last", tasks.len(), tasks.last().map_or(0, |t| t.nodes.len()));
    Ok(tasks)
}

fn write_json<S: serde::Serialize>(path: &Path, v: &S) -> CliResult<()> {
    let text = serde_json::to_string_pretty(v).map_err(io)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display())).map_err(io)
}

fn save_config(dir: &Path, cfg: &ExperimentConfig) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(io)?;
    fs::write(dir.join(CONFIG_COPY), cfg.to_toml().map_err(lib)?).map_err(io)
}

fn generate(cli: &Cli, a: &GenerateArgs) -> CliResult<()> {
    let cfg = resolve_config(cli, None)?;
    let mut spec = match cfg.data {
        DataSource::Synthetic(s) => s,
        DataSource::Csv { .. } => StreamSpec::default(),
    };
    if let Some(v) = a.tasks {
        spec.num_tasks = v;
    }
    if let Some(v) = a.initial_nodes {
        spec.initial_nodes = v;
    }
    if let Some(v) = a.nodes_per_task {
        spec.nodes_per_task = v;
    }
    if let Some(v) = a.clusters {
        spec.num_clusters = v;
    }
    if let Some(v) = a.steps_per_day {
        spec.steps_per_day = v;
    }
    if let Some(v) = a.days {
        spec.days_per_task = v;
    }
    if let Some(v) = a.noise {
        spec.noise_level = v;
    }
    if let Some(v) = a.jitter {
        spec.jitter = v;
    }
    if let Some(v) = a.drift {
        spec.drift = v;
    }
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    spec.validate().map_err(|e| fail(EXIT_CONFIG, e))?;
    let out = a
        .out
        .clone()
        .or_else(|| data_dir(cli))
        .ok_or_else(|| fail(EXIT_CONFIG, anyhow!("no output directory: pass --out, --data-dir or set {DATA_DIR_ENV}")))?;
    let stream = generate_stream(&spec).map_err(lib)?;
    write_dataset_dir(&out, &stream.tasks).map_err(io)?;
    write_labels(&out.join("labels.csv"), &stream.labels).map_err(io)?;
    write_json(&out.join("stream.json"), &spec)?;
    println!("wrote {} tasks, {} nodes to {}", stream.tasks.len(), stream.labels.len(), out.display());
    Ok(())
}

fn pretrain_cmd(cli: &Cli, a: &RunArgs) -> CliResult<()> {
    let cfg = resolve_config(cli, Some(a))?;
    let tasks = read_tasks(&cfg)?;
    let (state, report) = run_pretraining::<f64>(&cfg, &tasks).map_err(lib)?;
    save_config(&a.out, &cfg)?;
    write_json(&a.out.join(PRETRAIN_REPORT_FILE), &report)?;
    save_checkpoint(&state, &cfg.hash(), &checkpoint_path(&a.out, 0)).map_err(io)?;
    println!("pre-trained: group sizes {:?}, checkpoint {}", report.group_sizes, checkpoint_path(&a.out, 0).display());
    Ok(())
}

/// Highest task with a checkpoint in `dir`.
fn latest_checkpoint(dir: &Path) -> Option<usize> {
    (0..).take_while(|&t| checkpoint_path(dir, t).exists()).last()
}

fn load_state(path: &Path, cfg: &ExperimentConfig) -> CliResult<ModelState<f64>> {
    let (state, manifest) = load_checkpoint::<f64>(path).with_context(|| format!("loading {}", path.display())).map_err(io)?;
    if manifest.config_hash != cfg.hash() {
        log::warn!("{} was written under a different configuration", path.display());
    }
    Ok(state)
}

/// Metrics already recorded in the run directory for tasks up to `upto`.
fn earlier_metrics(dir: &Path, upto: usize) -> CliResult<Vec<TaskMetrics>> {
    let path = dir.join(METRICS_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let report: MetricsReport =
        serde_json::from_slice(&fs::read(&path).map_err(io)?).with_context(|| format!("parsing {}", path.display())).map_err(io)?;
    Ok(report.tasks.into_iter().filter(|t| t.task <= upto).collect())
}

fn print_metrics(m: &TaskMetrics) {
    let o = &m.all_nodes.overall;
    let f = &m.first_task_nodes.overall;
    println!(
        "task {}: {} nodes, MAE {:.4} RMSE {:.4} MAPE {:.2}% (first-task nodes MAE {:.4})",
        m.task, m.nodes, o.mae, o.rmse, o.mape, f.mae
    );
}

fn train(cli: &Cli, a: &TrainArgs) -> CliResult<()> {
    let cfg = resolve_config(cli, Some(&a.run))?;
    let tasks = read_tasks(&cfg)?;
    let dir = &a.run.out;
    save_config(dir, &cfg)?;
    let metrics = match (a.task, latest_checkpoint(dir)) {
        (None, None) => run_protocol::<f64>(&cfg, &tasks, Some(dir)).map_err(lib)?.metrics,
        (None, Some(done)) => {
            let mut state = load_state(&checkpoint_path(dir, done), &cfg)?;
            let earlier = earlier_metrics(dir, done)?;
            continue_protocol(&mut state, &cfg, &tasks, earlier, Some(dir)).map_err(lib)?.1
        }
        (Some(task), _) => {
            if task == 0 || task > tasks.len() {
                return Err(fail(EXIT_CONFIG, anyhow!("task {task} outside 1..={}", tasks.len())));
            }
            let prev = checkpoint_path(dir, task - 1);
            if !prev.exists() {
                let hint = if task == 1 { "run `pretrain` first" } else { "train the earlier tasks first" };
                return Err(fail(EXIT_FAILURE, anyhow!("missing {}: {hint}", prev.display())));
            }
            let mut state = load_state(&prev, &cfg)?;
            let earlier = earlier_metrics(dir, task - 1)?;
            continue_protocol(&mut state, &cfg, &tasks[..task], earlier, Some(dir)).map_err(lib)?.1
        }
    };
    metrics.tasks.iter().for_each(print_metrics);
    println!("mean MAE {:.4}; metrics in {}", metrics.mean.overall.mae, dir.join(METRICS_FILE).display());
    Ok(())
}

fn evaluate_cmd(cli: &Cli, a: &EvaluateArgs) -> CliResult<()> {
    let cfg = resolve_config(cli, Some(&a.run))?;
    let tasks = read_tasks(&cfg)?;
    let path = match &a.checkpoint {
        Some(p) => p.clone(),
        None => {
            let t = latest_checkpoint(&a.run.out).ok_or_else(|| fail(EXIT_FAILURE, anyhow!("no checkpoint in {}", a.run.out.display())))?;
            checkpoint_path(&a.run.out, t)
        }
    };
    let state = load_state(&path, &cfg)?;
    let wanted: Vec<usize> = match a.task {
        Some(t) => vec![t],
        None => (1..=state.trained_tasks.max(1)).collect(),
    };
    let mut out = Vec::new();
    for t in wanted {
        let task = tasks.get(t.wrapping_sub(1)).ok_or_else(|| fail(EXIT_CONFIG, anyhow!("no task {t}")))?;
        let m = evaluate_task(&state, task, &tasks[0].nodes, &cfg).map_err(lib)?;
        print_metrics(&m);
        out.push(m);
    }
    let report = MetricsReport::new(cfg.protocol.as_str(), cfg.seed, &cfg.hash(), out);
    fs::create_dir_all(&a.run.out).map_err(io)?;
    write_json(&a.run.out.join("evaluation.json"), &report)
}

fn find_metrics(path: &Path, found: &mut Vec<PathBuf>) -> std::io::Result<()> {
    if path.is_file() {
        found.push(path.to_path_buf());
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_metrics(&p, found)?;
        } else if p.file_name().is_some_and(|n| n == METRICS_FILE) {
            found.push(p);
        }
    }
    Ok(())
}

fn report(a: &ReportArgs) -> CliResult<()> {
    let mut files = Vec::new();
    for p in &a.inputs {
        find_metrics(p, &mut files).with_context(|| format!("reading {}", p.display())).map_err(|e| fail(EXIT_DATA, e))?;
    }
    if files.is_empty() {
        return Err(fail(EXIT_DATA, anyhow!("no {METRICS_FILE} under the given inputs")));
    }
    let mut reports = Vec::new();
    for f in &files {
        let bytes = fs::read(f).map_err(|e| fail(EXIT_DATA, e))?;
        let r: MetricsReport =
            serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", f.display())).map_err(|e| fail(EXIT_DATA, e))?;
        reports.push(r);
    }
    fs::create_dir_all(&a.out).map_err(io)?;
    let md = summary_markdown(&reports);
    fs::write(a.out.join("metrics.csv"), metrics_csv(&reports)).map_err(io)?;
    fs::write(a.out.join("summary.md"), &md).map_err(io)?;
    fs::write(a.out.join("plot_data.csv"), plot_data_csv(&reports)).map_err(io)?;
    print!("{md}");
    println!("{} runs summarized in {}", reports.len(), a.out.display());
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let cases = gradcheck_suite(a.seed, a.step, a.tol).map_err(lib)?;
    let mut failed = 0;
    for c in &cases {
        let mark = if c.passed() { "ok" } else { "FAIL" };
        failed += usize::from(!c.passed());
        println!("{mark:4} {:24} {:20} worst rel err {:.2e}", c.kernel, c.shape, c.report.worst());
    }
    println!("{} of {} cases passed (tol {:e}, step {:e})", cases.len() - failed, cases.len(), a.tol, a.step);
    if failed > 0 {
        return Err(fail(EXIT_FAILURE, anyhow!("{failed} gradient checks failed")));
    }
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Generate(a) => generate(cli, a),
        Command::Pretrain(a) => pretrain_cmd(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Evaluate(a) => evaluate_cmd(cli, a),
        Command::Report(a) => report(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

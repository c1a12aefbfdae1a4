//! `spiking-l2l`: meta-train, evaluate, compare and inspect spiking
//! reservoirs from the command line.
//!
//! Exit codes: 0 success, 1 internal error, 2 configuration error,
//! 3 numerical divergence, 4 I/O or file format error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use spiking_l2l::baselines::{backprop_baseline, random_reservoir_eval, ridge_baseline, BackpropConfig, RidgeConfig};
use spiking_l2l::checkpoint::Checkpoint;
use spiking_l2l::config::{ExperimentConfig, RunManifest, TaskFamily};
use spiking_l2l::metrics::{IterationMetrics, MetricsWriter};
use spiking_l2l::outer_loop::{eval_episode, evaluate, probe_eval_task, probe_grid, train_run, EvalSummary, RunPaths};
use spiking_l2l::parallel::Executor;
use spiking_l2l::record::EpisodeRecord;
use spiking_l2l::snn::ReservoirParams;
use spiking_l2l::Error;

/// Environment variable naming the default root for run directories.
const OUT_ROOT_ENV: &str = "SPIKING_L2L_OUT";

#[derive(Parser)]
#[command(name = "spiking-l2l", version, about = "Meta-train spiking reservoirs that learn from examples")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train a reservoir and write manifest, metrics and checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the untrained reservoir) on held-out tasks.
    Eval(EvalArgs),
    /// Run a comparison system on the held-out tasks.
    Baseline(BaselineArgs),
    /// Probe the input-to-prediction map held in the network state.
    Probe(ProbeArgs),
    /// Convert a saved episode record to CSV or JSON lines.
    Export(ExportArgs),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Named preset the configuration starts from.
    #[arg(long)]
    preset: Option<String>,
    /// TOML file merged onto its preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    workers: Option<usize>,
    /// Dotted-key override such as `outer.adam.lr=0.002`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Further overrides given as trailing `KEY=VALUE` arguments.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    iterations: Option<u64>,
    /// Run directory; defaults to `$SPIKING_L2L_OUT/<preset>-seed<seed>`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Continue from the newest checkpoint in the run directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate; its run directory supplies the configuration.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Task family to evaluate on.
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    n_tasks: Option<usize>,
    /// Directory for the summary and learning curve files.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Also save the first N episode records.
    #[arg(long, default_value_t = 0)]
    save_records: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineKind {
    Ridge,
    Backprop,
    Random,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(value_enum)]
    name: BaselineKind,
    /// Reservoir whose traces feed the ridge readout; untrained if omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    n_tasks: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Held-out task index.
    #[arg(long, default_value_t = 0)]
    task: usize,
    /// Examples presented before probing.
    #[arg(long, default_value_t = 100)]
    after: usize,
    /// Grid points per input axis.
    #[arg(long, default_value_t = 21)]
    grid: usize,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportFormat {
    Csv,
    Jsonl,
    Spikes,
}

#[derive(Args)]
struct ExportArgs {
    /// Episode record written by `eval --save-records`.
    #[arg(long)]
    record: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: ExportFormat,
    /// Output file; standard output if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Divergence { .. } => 3,
        Error::Io { .. } | Error::Format { .. } => 4,
        Error::Dimension { .. } | Error::Contract(_) => 1,
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

impl ConfigArgs {
    fn resolve(&self, base: Option<&str>, extra: &[String]) -> Result<ExperimentConfig, Error> {
        let text = match &self.config {
            Some(p) => Some(fs::read_to_string(p).map_err(io_err(p))?),
            None => base.map(str::to_string),
        };
        let mut overrides: Vec<String> = self.set.iter().chain(&self.overrides).cloned().collect();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        if let Some(w) = self.workers {
            overrides.push(format!("run.workers={w}"));
        }
        overrides.extend_from_slice(extra);
        if text.is_none() && self.preset.is_none() {
            return Err(Error::Config(
                "no configuration: pass --preset, --config or --checkpoint".into(),
            ));
        }
        ExperimentConfig::resolve(text.as_deref(), self.preset.as_deref(), &overrides)
    }
}

fn executor(cfg: &ExperimentConfig) -> Result<Executor, Error> {
    Executor::new(cfg.run.execution, cfg.run.workers)
}

/// Loads a checkpoint and the configuration of its run directory, with any
/// command-line overrides applied on top.
fn load_checkpoint(path: &Path, args: &ConfigArgs, extra: &[String]) -> Result<(ExperimentConfig, ReservoirParams), Error> {
    let ckpt = Checkpoint::load(path)?;
    let run_dir = path.parent().and_then(Path::parent).unwrap_or(Path::new("."));
    let manifest_path = RunPaths::new(run_dir).manifest;
    let base = if args.config.is_none() && manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let manifest: RunManifest =
            serde_json::from_str(&text).map_err(|e| Error::Format { path: manifest_path.clone(), msg: e.to_string() })?;
        let cfg = manifest.config()?;
        ckpt.ensure_config(&cfg.training_hash(), path)?;
        Some(cfg.to_toml())
    } else {
        None
    };
    let cfg = args.resolve(base.as_deref(), extra)?;
    let spec = cfg.init_spec()?;
    if spec.n_neurons != ckpt.params.n_neurons()
        || spec.n_inputs != ckpt.params.n_inputs()
        || spec.feature_dim != ckpt.params.feature_dim()
    {
        return Err(Error::Config(format!(
            "checkpoint shapes ({} neurons, {} inputs) do not fit the configuration ({} neurons, {} inputs)",
            ckpt.params.n_neurons(),
            ckpt.params.n_inputs(),
            spec.n_neurons,
            spec.n_inputs
        )));
    }
    Ok((cfg, ckpt.params))
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn write_summary(dir: &Path, name: &str, s: &EvalSummary) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let json = dir.join(format!("{name}_summary.json"));
    fs::write(&json, serde_json::to_string_pretty(s).expect("summary serializes")).map_err(io_err(&json))?;
    let csv = dir.join(format!("{name}_curve.csv"));
    let mut text = String::from("index,mean_mse,std_mse\n");
    for (k, (m, sd)) in s.curve_mean.iter().zip(&s.curve_std).enumerate() {
        text.push_str(&format!("{k},{m},{sd}\n"));
    }
    fs::write(&csv, text).map_err(io_err(&csv))
}

fn summary_metrics(name: &str, s: &EvalSummary) -> IterationMetrics {
    IterationMetrics {
        baseline: Some(name.to_string()),
        iter: 0,
        loss: s.mean_mse.unwrap_or(0.0),
        reg_loss: 0.0,
        mean_rate_hz: s.mean_rate_hz.unwrap_or(0.0),
        wall_ms: 0,
    }
}

fn print_summary(name: &str, s: &EvalSummary) {
    match (s.mean_mse, s.std_mse) {
        (Some(m), Some(sd)) => println!("{name}: {} tasks, MSE {m:.6} +- {sd:.6}", s.n_tasks),
        _ => println!("{name}: no tasks evaluated"),
    }
}

fn family_override(family: &Option<String>) -> Result<Vec<String>, Error> {
    match family {
        None => Ok(Vec::new()),
        Some(f) => {
            let fam: TaskFamily = f.parse()?;
            let name = serde_json::to_value(fam).expect("family serializes");
            Ok(vec![format!("task.family=\"{}\"", name.as_str().expect("string"))])
        }
    }
}

fn cmd_train(a: TrainArgs) -> Result<(), Error> {
    let extra: Vec<String> = a.iterations.map(|n| format!("outer.iterations={n}")).into_iter().collect();
    let cfg = a.config.resolve(None, &extra)?;
    let dir = a
        .out_dir
        .unwrap_or_else(|| out_root().join(format!("{}-seed{}", cfg.preset, cfg.seed)));
    let out = train_run(&cfg, &dir, a.resume, executor(&cfg)?)?;
    println!(
        "trained {} iterations; run directory {}; final checkpoint {}",
        out.iterations,
        dir.display(),
        out.last_checkpoint.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), Error> {
    let extra = family_override(&a.family)?;
    let (cfg, params, name) = match &a.checkpoint {
        Some(p) => {
            let (cfg, params) = load_checkpoint(p, &a.config, &extra)?;
            (cfg, params, "trained")
        }
        None => {
            let cfg = a.config.resolve(None, &extra)?;
            let params = spiking_l2l::outer_loop::initial_params(&cfg)?;
            (cfg, params, "random")
        }
    };
    let n = a.n_tasks.unwrap_or(cfg.eval.n_tasks);
    let summary = evaluate(&params, &cfg, n, &executor(&cfg)?)?;
    print_summary(name, &summary);
    if let Some(dir) = &a.out_dir {
        write_summary(dir, name, &summary)?;
        for i in 0..a.save_records.min(n) {
            let (rec, _) = eval_episode(&params, &cfg, i)?;
            rec.save(&dir.join(format!("episode_{i:04}.rec")))?;
        }
    }
    Ok(())
}

fn cmd_baseline(a: BaselineArgs) -> Result<(), Error> {
    let (cfg, params) = match &a.checkpoint {
        Some(p) => {
            let (cfg, params) = load_checkpoint(p, &a.config, &[])?;
            (cfg, Some(params))
        }
        None => (a.config.resolve(None, &[])?, None),
    };
    let n = a.n_tasks.unwrap_or(cfg.eval.n_tasks);
    let ex = executor(&cfg)?;
    let (name, summary) = match a.name {
        BaselineKind::Random => ("random", random_reservoir_eval(&cfg, n, &ex)?),
        BaselineKind::Backprop => ("backprop", backprop_baseline(&cfg, n, &BackpropConfig::default(), &ex)?),
        BaselineKind::Ridge => {
            let params = match params {
                Some(p) => p,
                None => spiking_l2l::outer_loop::initial_params(&cfg)?,
            };
            ("ridge", ridge_baseline(&params, &cfg, n, &RidgeConfig::default(), &ex)?)
        }
    };
    print_summary(name, &summary);
    if let Some(dir) = &a.out_dir {
        write_summary(dir, name, &summary)?;
        let mut w = MetricsWriter::append(&dir.join("baselines.jsonl"))?;
        w.write(&summary_metrics(name, &summary))?;
    }
    Ok(())
}

fn cmd_probe(a: ProbeArgs) -> Result<(), Error> {
    let (cfg, params) = match &a.checkpoint {
        Some(p) => load_checkpoint(p, &a.config, &[])?,
        None => {
            let cfg = a.config.resolve(None, &[])?;
            let params = spiking_l2l::outer_loop::initial_params(&cfg)?;
            (cfg, params)
        }
    };
    let family = cfg
        .task
        .family
        .regression()
        .ok_or_else(|| Error::Config("probing needs a regression family".into()))?;
    let grid = probe_grid(family, a.grid);
    let rows = probe_eval_task(&params, &cfg, a.task, a.after, &grid)?;
    let dims = family.input_dim();
    let mut text = String::new();
    text.push_str(&(1..=dims).map(|k| format!("x{k}")).collect::<Vec<_>>().join(","));
    text.push_str(",prediction,target\n");
    for (x, (p, y)) in grid.iter().zip(&rows) {
        let xs: Vec<String> = x.iter().map(f64::to_string).collect();
        text.push_str(&format!("{},{p},{y}\n", xs.join(",")));
    }
    fs::write(&a.out, text).map_err(io_err(&a.out))?;
    println!("wrote {} grid rows to {}", rows.len(), a.out.display());
    Ok(())
}

fn cmd_export(a: ExportArgs) -> Result<(), Error> {
    let rec = EpisodeRecord::load(&a.record)?;
    let mut buf = Vec::new();
    let res = match a.format {
        ExportFormat::Csv => rec.write_csv(&mut buf),
        ExportFormat::Jsonl => rec.write_jsonl(&mut buf),
        ExportFormat::Spikes => rec.write_spike_events_csv(&mut buf),
    };
    res.map_err(io_err(&a.record))?;
    match &a.out {
        Some(p) => fs::write(p, &buf).map_err(io_err(p)),
        None => std::io::stdout().write_all(&buf).map_err(io_err(Path::new("<stdout>"))),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Probe(a) => cmd_probe(a),
        Command::Export(a) => cmd_export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

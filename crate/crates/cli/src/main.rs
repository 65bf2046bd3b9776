//! Pipeline driver: scene simulation, task training, evaluation and
//! report rendering as subcommands over the `auris-core` library.
//!
//! Every command that draws randomness takes a mandatory `--seed`;
//! given identical flags and inputs, every output file is
//! byte-identical across runs. Failures print a single
//! `error: <context>: <detail>` line on stderr and exit nonzero.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use auris_core::neural::{
    pretrain_stage0, FusionMode, ModelConfig, ModelState, PretrainOpts,
};
use auris_core::parallel::ExecMode;
use auris_core::report::{overlap_plot, read_csv, summary, write_csv, Bucket, MetricRow};
use auris_core::scene::{build_dataset, load_manifest, Activation, DatasetConfig, PlacementMode};
use auris_core::tasks::{
    eval_fsr, eval_lse, eval_ssl, lse_stats, train_task, TaskKind, TaskRun, TrainOpts,
};

/// Keeps the stage-0 batch stream distinct from parameter
/// initialisation, which consumes the raw seed.
const STAGE0_SEED_SALT: u64 = 0x7374_6167;

#[derive(Parser)]
#[command(name = "auris", version, about = "Spatial-audio listening pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a scene dataset: B-format WAVs plus manifest.jsonl.
    Simulate(SimulateArgs),
    /// Train a task model; pretrains a stage-0 decoder first unless
    /// --stage0 supplies one.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset and write metric rows.
    Evaluate(EvaluateArgs),
    /// Render a summary table and overlap plots from metric files.
    Report(ReportArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Placement mode: left_right or random.
    #[arg(long)]
    mode: String,
    /// Number of scenes.
    #[arg(long)]
    n: usize,
    /// Sources per scene: 1 or 2.
    #[arg(long, default_value_t = 2)]
    sources: usize,
    /// Overlap ratio in [0, 1] for sequential two-source scenes.
    #[arg(long, default_value_t = 0.0)]
    overlap: f64,
    /// Second-source activation: sequential or simultaneous.
    #[arg(long, default_value = "sequential")]
    activation: String,
    /// Lexicon size: utterances draw from the first k letters.
    #[arg(long, default_value_t = 16)]
    lexicon: usize,
    /// Shortest utterance in symbols.
    #[arg(long, default_value_t = 5)]
    utt_min: usize,
    /// Longest utterance in symbols.
    #[arg(long, default_value_t = 12)]
    utt_max: usize,
    /// Dataset seed.
    #[arg(long)]
    seed: u64,
    /// Build scenes one at a time instead of data-parallel.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory from `simulate`.
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Task: ssl, fsr or lse.
    #[arg(long)]
    task: String,
    /// Intensity-vector fusion: none, before or after.
    #[arg(long)]
    fusion: String,
    /// Extend the vocabulary with one token per integer angle.
    #[arg(long)]
    special_tokens: bool,
    /// Stage-0 decoder checkpoint to reuse instead of pretraining one.
    #[arg(long)]
    stage0: Option<PathBuf>,
    /// Save the freshly pretrained stage-0 checkpoint here.
    #[arg(long)]
    save_stage0: Option<PathBuf>,
    /// Stage-0 pretraining steps.
    #[arg(long, default_value_t = 900)]
    stage0_steps: usize,
    /// Stage-0 learning rate.
    #[arg(long, default_value_t = 1e-3)]
    stage0_lr: f64,
    /// Task training steps.
    #[arg(long, default_value_t = 3000)]
    steps: usize,
    /// Examples per optimisation step.
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// Task learning rate.
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Steps between validation passes.
    #[arg(long, default_value_t = 250)]
    val_every: usize,
    /// Model configuration JSON overriding the built-in defaults;
    /// only valid when the stage-0 decoder is trained here.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write a kind,step,value CSV of training and validation losses.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Training seed.
    #[arg(long)]
    seed: u64,
    /// Run batches one example at a time instead of data-parallel.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Dataset directory from `simulate`.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint from `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Task: ssl, fsr or lse.
    #[arg(long)]
    task: String,
    /// Metrics CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Method label for the rows; derived from the checkpoint when
    /// absent.
    #[arg(long)]
    method: Option<String>,
    /// Merge into an existing metrics file, replacing rows that share
    /// task, method, data mode, overlap bucket and metric.
    #[arg(long)]
    append: bool,
    /// Evaluate scenes one at a time instead of data-parallel.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Metrics CSV files; repeat the flag to merge several.
    #[arg(long, required = true)]
    metrics: Vec<PathBuf>,
    /// Output directory for summary.txt and the SVG plots.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
struct CliError(String);

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "error: {}", self.0)
    }
}

fn fail(context: &str, detail: impl std::fmt::Display) -> CliError {
    CliError(format!("{context}: {detail}").replace('\n', " "))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("invalid arguments");
            let line = line.strip_prefix("error: ").unwrap_or(line);
            eprintln!("error: usage: {line}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Simulate(a) => run_simulate(a),
        Cmd::Train(a) => run_train(a),
        Cmd::Evaluate(a) => run_evaluate(a),
        Cmd::Report(a) => run_report(a),
    }
}

fn exec_mode(sequential: bool) -> ExecMode {
    if sequential {
        ExecMode::Sequential
    } else {
        ExecMode::Auto
    }
}

fn run_simulate(a: SimulateArgs) -> Result<(), CliError> {
    let mode: PlacementMode = a.mode.parse().map_err(|e| fail("parsing --mode", e))?;
    let activation: Activation =
        a.activation.parse().map_err(|e| fail("parsing --activation", e))?;
    let cfg = DatasetConfig {
        n_scenes: a.n,
        sources: a.sources,
        mode,
        activation,
        overlap_ratio: a.overlap,
        seed: a.seed,
        lexicon_size: a.lexicon,
        utterance_len: (a.utt_min, a.utt_max),
        ..DatasetConfig::default()
    };
    let manifests = build_dataset(&cfg, &a.out, exec_mode(a.sequential))
        .map_err(|e| fail("building dataset", e))?;
    eprintln!("wrote {} scenes to {}", manifests.len(), a.out.display());
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<(), CliError> {
    let task: TaskKind = a.task.parse().map_err(|e| fail("parsing --task", e))?;
    let fusion: FusionMode = a.fusion.parse().map_err(|e| fail("parsing --fusion", e))?;
    let mode = exec_mode(a.sequential);
    let manifests = load_manifest(&a.data.join("manifest.jsonl"))
        .map_err(|e| fail("loading manifest", e))?;

    let stage0 = match &a.stage0 {
        Some(path) => {
            if a.config.is_some() {
                return Err(CliError(
                    "--config conflicts with --stage0: the checkpoint fixes the model shape"
                        .into(),
                ));
            }
            ModelState::load(path).map_err(|e| fail("loading stage-0 checkpoint", e))?
        }
        None => {
            let mut cfg = match &a.config {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .map_err(|e| fail("reading --config", e))?;
                    serde_json::from_str::<ModelConfig>(&text)
                        .map_err(|e| fail("parsing --config", e))?
                }
                None => ModelConfig::default(),
            };
            cfg.fusion = FusionMode::None;
            cfg.angle_vocab = false;
            cfg.seed = a.seed;
            let mut st = ModelState::new(cfg).map_err(|e| fail("building model", e))?;
            let opts = PretrainOpts {
                steps: a.stage0_steps,
                lr: a.stage0_lr,
                seed: a.seed ^ STAGE0_SEED_SALT,
                mode,
                ..PretrainOpts::default()
            };
            eprintln!("stage-0 pretraining ({} steps)", opts.steps);
            pretrain_stage0(&mut st, &opts).map_err(|e| fail("stage-0 pretraining", e))?;
            if let Some(path) = &a.save_stage0 {
                st.save(path).map_err(|e| fail("saving stage-0 checkpoint", e))?;
            }
            st
        }
    };

    let opts = TrainOpts {
        steps: a.steps,
        batch: a.batch,
        lr: a.lr,
        seed: a.seed,
        val_every: a.val_every,
        mode,
    };
    eprintln!("training {task} ({} steps, fusion {fusion})", opts.steps);
    let run = train_task(&stage0, &manifests, &a.data, task, fusion, a.special_tokens, &opts)
        .map_err(|e| fail("task training", e))?;
    run.state.save(&a.out).map_err(|e| fail("saving checkpoint", e))?;
    if let Some(path) = &a.log {
        std::fs::write(path, train_log(&run)).map_err(|e| fail("writing training log", e))?;
    }
    match run.val_history.iter().find(|&&(s, _)| s == run.best_step) {
        Some((step, val)) => eprintln!(
            "saved {} (best validation loss {val:.4} at step {step})",
            a.out.display()
        ),
        None => eprintln!("saved {}", a.out.display()),
    }
    Ok(())
}

fn train_log(run: &TaskRun) -> String {
    let mut out = String::from("kind,step,value\n");
    for (i, loss) in run.losses.iter().enumerate() {
        out.push_str(&format!("loss,{},{loss}\n", i + 1));
    }
    for (step, val) in &run.val_history {
        out.push_str(&format!("val,{step},{val}\n"));
    }
    out
}

fn method_label(cfg: &ModelConfig) -> String {
    let base = match cfg.fusion {
        FusionMode::None => "w/o IV",
        FusionMode::Before => "w/ IV (Before)",
        FusionMode::After => "w/ IV (After)",
    };
    if cfg.angle_vocab {
        format!("{base} ST.")
    } else {
        base.to_string()
    }
}

fn run_evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    let task: TaskKind = a.task.parse().map_err(|e| fail("parsing --task", e))?;
    let mode = exec_mode(a.sequential);
    let manifests = load_manifest(&a.data.join("manifest.jsonl"))
        .map_err(|e| fail("loading manifest", e))?;
    let state =
        ModelState::load(&a.checkpoint).map_err(|e| fail("loading checkpoint", e))?;
    let method = a.method.clone().unwrap_or_else(|| method_label(&state.config));
    let data_mode = manifests[0].mode.to_string();
    let bucket = match manifests[0].activation {
        Activation::Simultaneous => Bucket::Simultaneous,
        Activation::Sequential => Bucket::Ratio(manifests[0].overlap_ratio),
    };
    let row = |metric: &str, value: f64, n: usize| MetricRow {
        task: task.to_string(),
        method: method.clone(),
        data_mode: data_mode.clone(),
        bucket,
        metric: metric.to_string(),
        value,
        n,
    };

    let rows = match task {
        TaskKind::Ssl => {
            let ev = eval_ssl(&state, &manifests, &a.data, mode)
                .map_err(|e| fail("evaluating", e))?;
            vec![
                row("azimuth_mae", ev.errors.azimuth_mae, ev.errors.count),
                row("elevation_mae", ev.errors.elevation_mae, ev.errors.count),
                row("angular_mae", ev.errors.angular_mae, ev.errors.count),
                row("unparseable_rate", ev.unparseable_rate, ev.errors.count),
            ]
        }
        TaskKind::Fsr => {
            let ev = eval_fsr(&state, &manifests, &a.data, mode)
                .map_err(|e| fail("evaluating", e))?;
            vec![row("wer", ev.wer, ev.n)]
        }
        TaskKind::Lse => {
            let results = eval_lse(&state, &manifests, &a.data, mode)
                .map_err(|e| fail("evaluating", e))?;
            let stats = lse_stats(&results)
                .ok_or_else(|| CliError("evaluating: no answers produced".into()))?;
            let mut v = vec![row("sr", stats.sr, stats.n)];
            if let Some(s) = stats.swer {
                v.push(row("swer", s, stats.n));
            }
            if let Some(f) = stats.fwer {
                v.push(row("fwer", f, stats.n));
            }
            v.push(row("wer", stats.wer, stats.n));
            v
        }
    };

    let merged = if a.append && a.out.exists() {
        merge_rows(read_csv(&a.out).map_err(|e| fail("reading metrics file", e))?, rows)
    } else {
        rows
    };
    write_csv(&a.out, &merged).map_err(|e| fail("writing metrics file", e))?;
    eprintln!("wrote {} metric rows to {}", merged.len(), a.out.display());
    Ok(())
}

fn merge_rows(existing: Vec<MetricRow>, new: Vec<MetricRow>) -> Vec<MetricRow> {
    let key = |r: &MetricRow| {
        (
            r.task.clone(),
            r.method.clone(),
            r.data_mode.clone(),
            r.bucket.to_string(),
            r.metric.clone(),
        )
    };
    let mut out = existing;
    for row in new {
        let k = key(&row);
        match out.iter_mut().find(|r| key(r) == k) {
            Some(slot) => *slot = row,
            None => out.push(row),
        }
    }
    out
}

fn run_report(a: ReportArgs) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for path in &a.metrics {
        rows.extend(read_csv(path).map_err(|e| fail("reading metrics file", e))?);
    }
    std::fs::create_dir_all(&a.out).map_err(|e| fail("creating output directory", e))?;
    let text = summary(&rows).map_err(|e| fail("building summary", e))?;
    std::fs::write(a.out.join("summary.txt"), &text)
        .map_err(|e| fail("writing summary", e))?;
    let mut written = vec!["summary.txt".to_string()];
    let plots = [
        ("sr", "LSE success rate vs overlap"),
        ("wer", "LSE word error rate vs overlap"),
    ];
    for (metric, title) in plots {
        let lse: Vec<MetricRow> = rows
            .iter()
            .filter(|r| r.task == "lse" && r.metric == metric)
            .cloned()
            .collect();
        if lse.is_empty() {
            continue;
        }
        let svg = overlap_plot(&lse, metric, title).map_err(|e| fail("rendering plot", e))?;
        let name = format!("{metric}.svg");
        std::fs::write(a.out.join(&name), &svg).map_err(|e| fail("writing plot", e))?;
        written.push(name);
    }
    eprintln!("wrote {} to {}", written.join(", "), a.out.display());
    Ok(())
}

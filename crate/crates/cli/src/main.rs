// SPDX-License-Identifier: MIT OR Apache-2.0

//! `vc-anomaly` command-line front end.
//!
//! Exit codes: 0 on success, 1 for bad input or configuration, 2 for runtime
//! failures such as I/O errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use vc_anomaly::evaluation::{match_events, report_table, EventMatch, Objective};
use vc_anomaly::io::{event_records, read_annotations, write_annotations, write_json, EventRecord};
use vc_anomaly::{
    generate, load_scenarios, read_dataset, read_stream, run_pipeline, score, sweep, write_stream,
    ConfigFile, DetectionMethod, Error, EvalReport, ParameterGrid, Result, RunConfig, SweepOptions,
};

#[derive(Parser)]
#[command(
    name = "vc-anomaly",
    version,
    about = "Group-level abnormal event detection for video meetings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect group events in a feature stream.
    Detect {
        stream: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        /// Write events here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write per-participant series and flagged points.
        #[arg(long)]
        diagnostics: Option<PathBuf>,
    },
    /// Score detections against annotated windows.
    Evaluate {
        stream: PathBuf,
        annotations: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        /// Write a JSON summary here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-validated parameter sweep over a directory of `<name>.jsonl`
    /// streams with `<name>.csv` annotations.
    Sweep {
        dataset: PathBuf,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        #[arg(long, default_value = "precision", value_parser = parse_objective)]
        objective: Objective,
        /// Seed for the fold assignment.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate synthetic meetings with planted events.
    Synth {
        /// TOML or JSON scenario file.
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// stat, arima or transitions; overrides the config file.
    #[arg(long, value_parser = parse_method)]
    method: Option<DetectionMethod>,
    /// Flat TOML file of detector and aggregation settings.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn parse_method(s: &str) -> std::result::Result<DetectionMethod, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_objective(s: &str) -> std::result::Result<Objective, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl RunArgs {
    fn run_config(&self) -> Result<RunConfig> {
        let mut file = match &self.config {
            Some(path) => ConfigFile::load(path).map_err(|e| e.in_file(path))?,
            None => ConfigFile::default(),
        };
        if let Some(m) = self.method {
            file.method = m;
        }
        file.into_run_config()
    }
}

#[derive(Serialize)]
struct Summary {
    method: String,
    frame_level: EvalReport,
    recall: Option<f64>,
    precision: Option<f64>,
    tnr: Option<f64>,
    fpr: Option<f64>,
    event_level: EventMatch,
    events: Vec<EventRecord>,
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(std::io::Error::from)?;
    println!("{text}");
    Ok(())
}

fn output<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => write_json(value, path).map_err(|e| e.in_file(path)),
        None => print_json(value),
    }
}

fn detect(
    stream: &Path,
    run: &RunArgs,
    out: Option<&Path>,
    diagnostics: Option<&Path>,
) -> Result<()> {
    let cfg = run.run_config()?;
    let stream = read_stream(stream)?;
    let result = run_pipeline(&stream, &cfg)?;
    if let Some(path) = diagnostics {
        write_json(&result.diagnostics, path).map_err(|e| e.in_file(path))?;
    }
    output(&event_records(&result.events, result.fps, cfg.method), out)
}

fn evaluate(stream: &Path, annotations: &Path, run: &RunArgs, out: Option<&Path>) -> Result<()> {
    let cfg = run.run_config()?;
    let stream = read_stream(stream)?;
    let truth = read_annotations(annotations, stream.meta.fps, stream.meta.frame_count)?;
    let result = run_pipeline(&stream, &cfg)?;
    let report = score(&result.events, &truth, stream.meta.frame_count)?;
    let events = match_events(&result.events, &truth);
    print!("{}", report_table(&report));
    println!(
        "events: {} detected, {}/{} annotated windows hit, {}/{} detections overlap an annotation",
        events.predicted_total,
        events.truth_hit,
        events.truth_total,
        events.predicted_hit,
        events.predicted_total
    );
    if let Some(path) = out {
        let summary = Summary {
            method: cfg.method.short_name().to_string(),
            frame_level: report,
            recall: report.recall(),
            precision: report.precision(),
            tnr: report.tnr(),
            fpr: report.fpr(),
            event_level: events,
            events: event_records(&result.events, result.fps, cfg.method),
        };
        write_json(&summary, path).map_err(|e| e.in_file(path))?;
    }
    Ok(())
}

fn run_sweep(dataset: &Path, opts: SweepOptions, run: &RunArgs, out: Option<&Path>) -> Result<()> {
    let base = run.run_config()?;
    let meetings = read_dataset(dataset)?;
    let result = sweep(
        &meetings,
        &ParameterGrid::for_method(base.method),
        &base,
        &opts,
    )?;
    print!("{}", result.to_table());
    if let Some(path) = out {
        write_json(&result, path).map_err(|e| e.in_file(path))?;
    }
    Ok(())
}

fn synth(scenario: &Path, out: &Path) -> Result<()> {
    let scenarios = load_scenarios(scenario)?;
    std::fs::create_dir_all(out).map_err(|e| Error::from(e).in_file(out))?;
    let stem = scenario.file_stem().unwrap_or_default().to_string_lossy();
    let single = scenarios.len() == 1;
    for (i, s) in scenarios.iter().enumerate() {
        let name = if single {
            stem.to_string()
        } else {
            format!("{stem}_{i:03}")
        };
        let (stream, truth) = generate(s).map_err(|e| e.in_file(scenario))?;
        let jsonl = out.join(format!("{name}.jsonl"));
        let csv = out.join(format!("{name}.csv"));
        write_stream(&stream, &jsonl).map_err(|e| e.in_file(&jsonl))?;
        write_annotations(&truth, s.fps, &csv).map_err(|e| e.in_file(&csv))?;
        println!(
            "{}: {} frames, {} participants, {} events",
            jsonl.display(),
            s.duration_frames,
            s.participant_count,
            truth.len()
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Detect {
            stream,
            run,
            out,
            diagnostics,
        } => detect(&stream, &run, out.as_deref(), diagnostics.as_deref()),
        Command::Evaluate {
            stream,
            annotations,
            run,
            out,
        } => evaluate(&stream, &annotations, &run, out.as_deref()),
        Command::Sweep {
            dataset,
            folds,
            objective,
            seed,
            run,
            out,
        } => run_sweep(
            &dataset,
            SweepOptions {
                folds,
                seed,
                objective,
            },
            &run,
            out.as_deref(),
        ),
        Command::Synth { scenario, out } => synth(&scenario, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

//! `dcr`: dataset generation, training runs, evaluation, layer analysis and numerical
//! self-checks.
//!
//! Exit codes: 0 success, 2 validation error, 3 divergence, 4 failed check, 1 anything else.
//! Relative paths resolve against `--workdir`; `DCR_CACHE` and `DCR_DATA` move the
//! dataset cache and the raw data.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use dcr_core::verify::{Fault, GradcheckScale};
use dcr_nets::{Architecture, DEFAULT_RATIO_THRESHOLD};

pub use commands::{
    cmd_analyze_layers, cmd_evaluate, cmd_generate, cmd_gradcheck, cmd_train, gradcheck_status, parse_data_spec,
    render_gradcheck, resolve_config, train_config, GenerateOutcome, LayerAnalysis, TrainSummary, Workspace, EVAL_CSV,
    EVAL_JSON,
};
pub use config::{EvalOptions, ExperimentConfig, Metric, Overrides, Precision, SCHEMA_VERSION};
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "dcr", version, about = "Concept removal experiments")]
pub struct Cli {
    /// Root for relative paths.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Materialize a dataset into the cache.
    Generate {
        /// Data spec: a JSON file, or inline JSON starting with '{'.
        spec: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train from an experiment config.
    Train {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        device: Option<String>,
        /// Replace a non-empty run directory.
        #[arg(long)]
        force: bool,
    },
    /// Print layer widths, contraction ratios and the proposed probe layers.
    AnalyzeLayers {
        #[arg(long)]
        arch: String,
        /// channels,height,width
        #[arg(long, default_value = "1,28,28", value_parser = parse_shape)]
        input_shape: [usize; 3],
        #[arg(long, default_value_t = 10)]
        classes: usize,
        /// Contraction ratio above which a layer is proposed; accepts `inf`.
        #[arg(long, default_value_t = DEFAULT_RATIO_THRESHOLD)]
        threshold: f64,
    },
    /// Check the CAV derivatives against finite differences and dense solves.
    Gradcheck {
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long)]
        max_rows: Option<usize>,
        #[arg(long)]
        max_dim: Option<usize>,
        #[arg(long)]
        woodbury_instances: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Inject a fault to confirm the checks catch it.
        #[arg(long, value_parser = ["sign-flip"])]
        fault: Option<String>,
        /// Run in 32-bit floats; failures are annotated as expected.
        #[arg(long)]
        f32: bool,
    },
    /// Compute metrics for a finished run.
    Evaluate {
        run_dir: PathBuf,
        /// Comma-separated metrics; defaults to the run config's list.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        metrics: Option<Vec<String>>,
    },
}

fn parse_shape(s: &str) -> std::result::Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse::<usize>().map_err(|e| format!("{x}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|_| format!("expected channels,height,width, got '{s}'"))
}

pub fn run(cli: Cli) -> Result<()> {
    let ws = Workspace::new(&cli.workdir);
    match cli.command {
        Command::Generate { spec, seed } => {
            let text = if spec.trim_start().starts_with('{') {
                spec
            } else {
                std::fs::read_to_string(ws.resolve(std::path::Path::new(&spec)))
                    .map_err(|e| CliError::Validation(format!("cannot read data spec {spec}: {e}")))?
            };
            let out = cmd_generate(&ws, &parse_data_spec(&text)?, seed)?;
            println!(
                "{} {} ({} examples, {}): {}",
                out.generator,
                out.kind,
                out.examples,
                if out.from_cache { "cached" } else { "generated" },
                out.path.display()
            );
        }
        Command::Train { config, seed, epochs, device, force } => {
            let s = cmd_train(&ws, &config, &Overrides { seed, epochs, device }, force)?;
            println!("{} run finished after {} epochs: {}", s.label, s.epochs, s.run_dir.display());
            if let Some(a) = s.final_train_accuracy {
                println!("  train accuracy {a:.4}");
            }
            for (name, a) in &s.final_eval_accuracy {
                println!("  {name} accuracy {a:.4}");
            }
        }
        Command::AnalyzeLayers { arch, input_shape, classes, threshold } => {
            let arch = Architecture::parse(&arch)?;
            print!("{}", cmd_analyze_layers(&arch, classes, input_shape, threshold)?.render());
        }
        Command::Gradcheck { instances, max_rows, max_dim, woodbury_instances, seed, fault, f32 } => {
            let d = GradcheckScale::default();
            let scale = GradcheckScale {
                instances: instances.unwrap_or(d.instances),
                max_rows: max_rows.unwrap_or(d.max_rows),
                max_dim: max_dim.unwrap_or(d.max_dim),
                woodbury_instances: woodbury_instances.unwrap_or(d.woodbury_instances),
                seed: seed.unwrap_or(d.seed),
                ..d
            };
            let fault = if fault.is_some() { Fault::SurrogateSignFlip } else { Fault::None };
            let report = cmd_gradcheck(&scale, fault, f32)?;
            print!("{}", render_gradcheck(&report));
            gradcheck_status(&report)?;
        }
        Command::Evaluate { run_dir, metrics } => {
            let metrics = metrics
                .map(|m| {
                    m.iter().filter(|s| !s.trim().is_empty()).map(|s| Metric::parse(s)).collect::<Result<Vec<_>>>()
                })
                .transpose()?;
            if let Some(report) = cmd_evaluate(&ws, &run_dir, metrics.as_deref())? {
                for r in &report.rows {
                    println!("{:<24} {:<28} {:.6}", r.metric, r.scope, r.value);
                }
            }
        }
    }
    Ok(())
}

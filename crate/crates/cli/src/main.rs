use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rpmlab::dataset::{read_dataset, write_dataset};
use rpmlab::harness::{evaluate_reasoning, model_metrics, sweep, Model, TrainConfig};
use rpmlab::metrics::FactorVaeConfig;
use rpmlab::par::Exec;
use rpmlab::puzzle::generate_batch;
use rpmlab::render::Renderer;
use rpmlab::rng::streams;
use rpmlab::space::{FactorSpace, SpaceConfig};

#[derive(Parser)]
#[command(name = "rpmlab", version, about = "Matrix puzzles, joint VAE + reasoner training and disentanglement metrics")]
struct Cli {
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SpaceArgs {
    /// Preset name (dsprites-like, mod-dsprites-like, shapes3d-like, toy2, toy3).
    #[arg(long, default_value = "toy2", conflicts_with = "space_file")]
    space: String,
    /// JSON file with an explicit space config.
    #[arg(long)]
    space_file: Option<PathBuf>,
}

impl SpaceArgs {
    fn config(&self) -> Result<SpaceConfig> {
        match &self.space_file {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Ok(serde_json::from_str(&text)?)
            }
            None => Ok(SpaceConfig::preset(&self.space)),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a puzzle dataset.
    Gen {
        #[command(flatten)]
        space: SpaceArgs,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Rule attributes per puzzle.
        #[arg(long, default_value_t = 1)]
        rules: usize,
        /// Also write panel images at this size.
        #[arg(long)]
        render: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Warm start then joint training; writes a checkpoint.
    Train {
        /// JSON config; missing fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Start from the laptop-sized preset instead of the full defaults.
        #[arg(long)]
        desk: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        warm_start_steps: Option<u64>,
        #[arg(long)]
        joint_steps: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Line-delimited JSON log (stdout when absent).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Reasoning accuracy of a checkpoint on fresh puzzles, as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        puzzles: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Disentanglement scores of a checkpoint's encoder.
    Metrics {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        probe: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Render one puzzle to a PPM/PGM image.
    Inspect {
        #[command(flatten)]
        space: SpaceArgs,
        /// Read the puzzle from a dataset directory instead of generating it.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        rules: usize,
        #[arg(long, default_value_t = 32)]
        cell: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every seed x gamma pair; one JSON line per run.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        desk: bool,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "1,10,20,30,40,50,100")]
        gammas: Vec<f64>,
        #[arg(long, default_value_t = 1000)]
        puzzles: usize,
    },
}

fn base_config(path: Option<&PathBuf>, desk: bool) -> Result<TrainConfig> {
    let base = if desk { TrainConfig::desk() } else { TrainConfig::default() };
    let Some(path) = path else {
        return Ok(base);
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut merged = serde_json::to_value(&base)?;
    let overrides: serde_json::Value = serde_json::from_str(&text)?;
    let Some(fields) = overrides.as_object() else {
        bail!("{} is not a JSON object", path.display());
    };
    for (k, v) in fields {
        if merged.get(k).is_none() {
            bail!("unknown config field `{k}`");
        }
        merged[k] = v.clone();
    }
    Ok(serde_json::from_value(merged)?)
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match cli.command {
        Command::Gen {
            space,
            count,
            seed,
            rules,
            render,
            out,
        } => {
            let m = write_dataset(&out, &space.config()?, count, seed, rules, render, exec)?;
            eprintln!("wrote {} puzzles to {}", m.count, out.display());
        }
        Command::Train {
            config,
            desk,
            seed,
            gamma,
            warm_start_steps,
            joint_steps,
            out,
            log,
        } => {
            let mut cfg = base_config(config.as_ref(), desk)?;
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.gamma = gamma.unwrap_or(cfg.gamma);
            cfg.warm_start_steps = warm_start_steps.unwrap_or(cfg.warm_start_steps);
            cfg.joint_steps = joint_steps.unwrap_or(cfg.joint_steps);
            cfg.validate()?;
            let mut sink: Box<dyn Write> = match &log {
                Some(p) => Box::new(BufWriter::new(
                    File::create(p).with_context(|| format!("creating {}", p.display()))?,
                )),
                None => Box::new(io::stdout().lock()),
            };
            let mut write_err = None;
            let mut logger = |r: &rpmlab::harness::StepRecord| {
                if write_err.is_none() {
                    let line = serde_json::to_string(r).expect("records serialize");
                    if let Err(e) = writeln!(sink, "{line}") {
                        write_err = Some(e);
                    }
                }
            };
            let mut model = Model::new(cfg, exec)?;
            model.warm_start(&mut logger)?;
            model.train_joint(&mut logger)?;
            if let Some(e) = write_err {
                return Err(e).context("writing the training log");
            }
            sink.flush()?;
            model.save(&out)?;
            eprintln!("saved {}", out.display());
        }
        Command::Eval {
            checkpoint,
            puzzles,
            seed,
        } => {
            let model = Model::load(&checkpoint, exec)?;
            let report = evaluate_reasoning(&model, puzzles, seed)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Metrics {
            checkpoint,
            probe,
            seed,
            json,
        } => {
            let model = Model::load(&checkpoint, exec)?;
            let report = model_metrics(&model, probe, &FactorVaeConfig::default(), seed)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.table());
            }
        }
        Command::Inspect {
            space,
            dataset,
            index,
            seed,
            rules,
            cell,
            out,
        } => {
            let (space_cfg, puzzle) = match dataset {
                Some(dir) => {
                    let (manifest, mut puzzles) = read_dataset(&dir)?;
                    if index >= puzzles.len() {
                        bail!("dataset has {} puzzles, index {index} is out of range", puzzles.len());
                    }
                    (manifest.space, puzzles.swap_remove(index))
                }
                None => {
                    let cfg = space.config()?;
                    let s = FactorSpace::build(&cfg)?;
                    let mut p = generate_batch(&s, rules, seed, streams::PUZZLES, index as u64, 1, exec)?;
                    (cfg, p.remove(0))
                }
            };
            let s = FactorSpace::build(&space_cfg)?;
            Renderer::new(&s)?.render_grid(&puzzle, cell)?.write_pnm(&out)?;
            println!("{}", serde_json::to_string(&serde_json::json!({
                "answer_index": puzzle.answer_index,
                "structure": puzzle.structure,
            }))?);
        }
        Command::Sweep {
            config,
            desk,
            seeds,
            gammas,
            puzzles,
        } => {
            let cfg = base_config(config.as_ref(), desk)?;
            for run in sweep(&cfg, &seeds, &gammas, puzzles, exec)? {
                println!("{}", serde_json::to_string(&run)?);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use serkd::bench::{self, BenchSpec};
use serkd::checks;
use serkd::config::{strategy_from_name, RunConfig};
use serkd::run;

#[derive(Parser)]
#[command(name = "serkd", version, about = "Relation distillation on superpixel tokens")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Extra `key=value` settings applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset as SRKD tensors.
    GenData,
    /// Train the teacher with the classification loss.
    TrainTeacher,
    /// Distill the student from a trained teacher.
    Distill {
        /// Teacher checkpoint; defaults to `<out>/teacher.ckpt`.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Also run the baseline and average-pooling variants.
        #[arg(long)]
        compare: bool,
    },
    /// Finite-difference checks of every loss and the full objective.
    Gradcheck,
    /// Time the angle-loss strategies and report memory.
    BenchAngle {
        #[arg(long, default_value_t = 8)]
        b: usize,
        #[arg(long, default_value_t = 64)]
        l: usize,
        #[arg(long, default_value_t = 64)]
        c: usize,
        /// Bytes per element for the memory model.
        #[arg(long, default_value_t = 2)]
        bytes: usize,
        #[arg(long, default_value_t = 4)]
        tile: usize,
        /// Comma-separated subset of naive, vectorized, tiled.
        #[arg(long, default_value = "naive,vectorized,tiled")]
        strategies: String,
        /// Skip strategies whose f64 scratch would exceed this many bytes.
        #[arg(long, default_value_t = 1 << 30)]
        max_bytes: u64,
        /// Skip the naive loop above this many multiply-adds.
        #[arg(long, default_value_t = 2_000_000_000)]
        max_naive_ops: u64,
        /// Skip the vectorized and tiled kernels above this many multiply-adds.
        #[arg(long, default_value_t = 50_000_000_000)]
        max_ops: u64,
    },
    /// Write Q, Q̂, S and the hard assignment for an input.
    DumpSuperpixels {
        /// Image tensor `(H,W,3)` or `(B,H,W,3)`; a synthetic image otherwise.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Cluster this teacher's visual tokens instead of patch colours.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
}

fn load_config(g: &Global) -> anyhow::Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &g.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v.trim())
            .map_err(anyhow::Error::msg)
            .with_context(|| format!("--set {kv}"))?;
    }
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    let cfg = load_config(&cli.global)?;
    let out = &cli.global.out;
    let start = Instant::now();
    match cli.command {
        Command::GenData => {
            let d = run::gen_data(&cfg, out)?;
            println!(
                "wrote {} train and {} val images to {}",
                d.train.len(),
                d.val.len(),
                out.display()
            );
        }
        Command::TrainTeacher => {
            let r = run::train_teacher_cmd(&cfg, out)?;
            println!(
                "teacher: {} steps, val_acc={:.4}, {:.1}s",
                r.steps,
                r.val_acc,
                start.elapsed().as_secs_f64()
            );
        }
        Command::Distill { teacher, compare } => {
            let ckpt = teacher.unwrap_or_else(|| out.join(run::TEACHER_CKPT));
            let o = run::distill_cmd(&cfg, out, &ckpt, compare)?;
            let r = &o.report;
            println!(
                "distill: {} steps, L_dis {:.6} -> {:.6}, val_acc={:.4}, {:.1}s",
                r.steps,
                r.initial.total,
                r.fin.total,
                r.val_acc.last().copied().unwrap_or(f64::NAN),
                start.elapsed().as_secs_f64()
            );
            if let Some(text) = o.compare {
                print!("{text}");
            }
            if !(r.teacher_unchanged && o.checkpoint_unchanged) {
                bail!("teacher parameters changed during distillation");
            }
        }
        Command::Gradcheck => {
            run::prepare_out(out, &cfg)?;
            let rows = checks::run_suite(cfg.seed)?;
            print!("{}", checks::table(&rows));
            if rows.iter().any(|r| !r.passed()) {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::BenchAngle {
            b,
            l,
            c,
            bytes,
            tile,
            strategies,
            max_bytes,
            max_naive_ops,
            max_ops,
        } => {
            let strategies = strategies
                .split(',')
                .map(|s| strategy_from_name(s.trim()).map_err(anyhow::Error::msg))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let spec = BenchSpec {
                b,
                l,
                c,
                bytes,
                tile,
                strategies,
                max_bytes,
                max_naive_ops,
                max_ops,
                seed: cfg.seed,
            };
            run::prepare_out(out, &cfg)?;
            let (modeled, rows) = bench::run(&spec)?;
            print!("{}", bench::table(&spec, modeled, &rows));
        }
        Command::DumpSuperpixels { input, teacher } => {
            let (state, files) = run::dump_cmd(&cfg, out, input.as_deref(), teacher.as_deref())?;
            println!(
                "{} superpixels after {} iteration(s); wrote {}",
                state.geometry.superpixels(),
                state.iteration,
                files
                    .iter()
                    .map(|f| f.display().to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

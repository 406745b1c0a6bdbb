//! `spikewin` command-line harness.
//!
//! Exit codes: 0 success, 1 validation/config/I-O error, 2 numeric or
//! determinism failure.

mod config;
mod run;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use spikewin::error::{Error, Result};

#[derive(Parser)]
#[command(
    name = "spikewin",
    version,
    about = "Hybrid dense/spiking windowed-attention detector: data generation, training, inference, energy reports, gradient checks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic moving-rectangle scene: frames, events, labels
    GenData(Common),
    /// Train on a generated scene and save a checkpoint
    Train(Common),
    /// Per-frame detections and mean IoU against the scene labels
    Eval(Common),
    /// Sliding-window detections at the event stride, reusing the most
    /// recent frame per window
    AsyncInfer(Common),
    /// Analytic operation counts plus measured-firing-rate energy estimate
    Energy(Common),
    /// Gradient verification suites (64-bit only)
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct Common {
    /// Flat key=value config file; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint to load (train resumes from it)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Float width: 32 or 64
    #[arg(long)]
    precision: Option<u32>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    /// Test hook: inject a forward-only term so the check must fail
    #[arg(long, hide = true)]
    corrupt_backward: bool,
}

fn load_cfg(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(c.config.as_deref())?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn precision(c: &Common, default: u32) -> Result<u32> {
    match c.precision.unwrap_or(default) {
        p @ (32 | 64) => Ok(p),
        p => Err(Error::config(format!(
            "precision {p} unsupported; use 32 or 64"
        ))),
    }
}

fn out_dir(c: &Common) -> PathBuf {
    c.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn need_checkpoint<'c>(c: &'c Common, cmd: &str) -> Result<&'c Path> {
    c.checkpoint
        .as_deref()
        .ok_or_else(|| Error::config(format!("{cmd} requires --checkpoint")))
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData(c) => {
            let cfg = load_cfg(&c)?;
            let out = c
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from(&cfg.data_dir));
            run::gen_data(&cfg, &out)
        }
        Cmd::Train(c) => {
            let cfg = load_cfg(&c)?;
            match precision(&c, 32)? {
                64 => run::train::<f64>(&cfg, &out_dir(&c), c.checkpoint.as_deref()),
                _ => run::train::<f32>(&cfg, &out_dir(&c), c.checkpoint.as_deref()),
            }
        }
        Cmd::Eval(c) => {
            let cfg = load_cfg(&c)?;
            let cp = need_checkpoint(&c, "eval")?.to_path_buf();
            match precision(&c, 32)? {
                64 => run::eval::<f64>(&cfg, &out_dir(&c), &cp),
                _ => run::eval::<f32>(&cfg, &out_dir(&c), &cp),
            }
        }
        Cmd::AsyncInfer(c) => {
            let cfg = load_cfg(&c)?;
            let cp = need_checkpoint(&c, "async-infer")?.to_path_buf();
            match precision(&c, 32)? {
                64 => run::async_infer::<f64>(&cfg, &out_dir(&c), &cp),
                _ => run::async_infer::<f32>(&cfg, &out_dir(&c), &cp),
            }
        }
        Cmd::Energy(c) => {
            let cfg = load_cfg(&c)?;
            match precision(&c, 32)? {
                64 => run::energy_report::<f64>(&cfg, &out_dir(&c), c.checkpoint.as_deref()),
                _ => run::energy_report::<f32>(&cfg, &out_dir(&c), c.checkpoint.as_deref()),
            }
        }
        Cmd::Gradcheck(g) => {
            let cfg = load_cfg(&g.common)?;
            if precision(&g.common, 64)? != 64 {
                return Err(Error::config(
                    "gradient checking requires 64-bit precision",
                ));
            }
            run::gradcheck_cmd(&cfg, g.common.out.as_deref(), g.corrupt_backward)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        let code = match e {
            Error::Numeric(_) | Error::Determinism(_) => 2,
            _ => 1,
        };
        std::process::exit(code);
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use devit_core::flops::model_report;
use devit_core::harness::io::{read_frames, read_masks, write_frames, write_masks};
use devit_core::harness::{gen_masks, inpaint_clip, psnr, ssim, synth_clip, Config, MaskKind, MotionSpec, MotionType, WindowConfig};
use devit_core::model::checkpoint::{self, config_hash};
use devit_core::model::train::write_trace_csv;
use devit_core::model::train_toy;
use devit_core::verify::{case_names, gradient_suite};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] devit_core::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
}

type Result<T> = std::result::Result<T, CliError>;

/// `HxW`, e.g. `48x48`.
fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h = h.trim().parse().map_err(|_| format!("bad height in {s:?}"))?;
    let w = w.trim().parse().map_err(|_| format!("bad width in {s:?}"))?;
    Ok((h, w))
}

fn parse_pair(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected DX,DY, got {s:?}"))?;
    Ok((
        a.trim().parse().map_err(|_| format!("bad number in {s:?}"))?,
        b.trim().parse().map_err(|_| format!("bad number in {s:?}"))?,
    ))
}

#[derive(Parser)]
#[command(name = "devit", version, about = "Video inpainting with deformed patch alignment and spatial-temporal attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic clip as numbered PPM frames.
    Synth {
        #[arg(long, value_parser = |s: &str| s.parse::<MotionType>().map_err(|e| e.to_string()))]
        motion: MotionType,
        #[arg(long)]
        frames: usize,
        #[arg(long, value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Pan velocity `DX,DY` in px/frame (defaults depend on the motion type).
        #[arg(long, value_parser = parse_pair)]
        velocity: Option<(f64, f64)>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a hole-mask sequence as numbered PGM files (255 = hole).
    Mask {
        #[arg(long, value_parser = |s: &str| s.parse::<MaskKind>().map_err(|e| e.to_string()))]
        kind: MaskKind,
        #[arg(long)]
        coverage: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        frames: usize,
        #[arg(long, value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long)]
        out: PathBuf,
    },
    /// Complete every frame of a clip with a trained generator.
    Inpaint {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Neighbour half-width (overrides the config).
        #[arg(long)]
        window: Option<usize>,
        /// Distant-frame stride (overrides the config).
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Write attention maps (DVT1 + JSON) and gate weights here.
        #[arg(long)]
        dump_attn: Option<PathBuf>,
    },
    /// Overfit the generator on one clip and write a loss trace and checkpoint.
    TrainToy {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// PSNR and SSIM between two frame directories.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter count and FLOPs estimate of the configured generator.
    Flops {
        #[arg(long)]
        config: PathBuf,
        /// Frames processed together.
        #[arg(long, default_value_t = 5)]
        frames: usize,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// Run a single case.
        #[arg(long)]
        op: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// List case names and exit.
        #[arg(long)]
        list: bool,
    },
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { motion, frames, size, seed, velocity, out } => {
            let mut spec = MotionSpec::new(motion);
            if let Some(v) = velocity {
                spec.velocity = v;
            }
            let clip = synth_clip(&spec, frames, size.0, size.1, seed)?;
            write_frames(&out, &clip.frames)?;
            println!("{}", json!({ "frames": frames, "height": size.0, "width": size.1, "out": out }));
        }
        Command::Mask { kind, coverage, seed, frames, size, out } => {
            let masks = gen_masks(kind, frames, size.0, size.1, seed, coverage)?;
            write_masks(&out, &masks)?;
            println!("{}", json!({ "frames": frames, "coverage": masks.mean(), "out": out }));
        }
        Command::Inpaint { frames, masks, ckpt, config, window, stride, out, dump_attn } => {
            let cfg = Config::load(&config)?;
            let x = read_frames(&frames)?;
            let m = read_masks(&masks)?;
            if m.shape() != [x.shape()[0], 1, x.shape()[2], x.shape()[3]] {
                return Err(CliError::Usage(format!("masks {:?} do not match frames {:?}", m.shape(), x.shape())));
            }
            let params = checkpoint::load(&ckpt, Some(&config_hash(&cfg.generator)?))?;
            let win = WindowConfig {
                neighbors: window.unwrap_or(cfg.window.neighbors),
                stride: stride.unwrap_or(cfg.window.stride),
            };
            let y = inpaint_clip(&x, &m, &params, &cfg.generator, &win, dump_attn.as_deref())?;
            write_frames(&out, &y)?;
            println!("{}", json!({ "frames": y.shape()[0], "out": out }));
        }
        Command::TrainToy { frames, masks, iters, seed, config, out } => {
            let mut cfg = Config::load(&config)?;
            cfg.train.iters = iters;
            cfg.train.seed = seed;
            let x = read_frames(&frames)?;
            let m = read_masks(&masks)?;
            let res = train_toy(&x, &m, &cfg.generator, &cfg.discriminator, &cfg.loss, &cfg.train)?;
            fs::create_dir_all(&out)?;
            write_trace_csv(&res.trace, fs::File::create(out.join("loss.csv"))?)?;
            checkpoint::save(&out.join("generator.dvt"), &res.generator, &config_hash(&cfg.generator)?)?;
            if let Some(d) = &res.discriminator {
                checkpoint::save(&out.join("discriminator.dvt"), d, &config_hash(&cfg.discriminator)?)?;
            }
            let first = res.trace.first().map(|r| r.l_hole).unwrap_or(0.0);
            let last = res.trace.last().map(|r| r.l_hole).unwrap_or(0.0);
            println!("{}", json!({ "iters": iters, "L_hole_start": first, "L_hole_end": last, "out": out }));
        }
        Command::Metrics { pred, gt, out } => {
            let p = read_frames(&pred)?;
            let g = read_frames(&gt)?;
            if p.shape() != g.shape() {
                return Err(CliError::Usage(format!("prediction {:?} vs ground truth {:?}", p.shape(), g.shape())));
            }
            let mut per_frame = Vec::new();
            for t in 0..p.shape()[0] {
                let (a, b) = (p.index_first(t), g.index_first(t));
                per_frame.push(json!({ "frame": t, "psnr": psnr(&a, &b)?, "ssim": ssim(&a, &b)? }));
            }
            let report = json!({ "psnr": psnr(&p, &g)?, "ssim": ssim(&p, &g)?, "frames": per_frame });
            write_json(&out, &report)?;
            println!("{report}");
        }
        Command::Flops { config, frames } => {
            let cfg = Config::load(&config)?;
            let report = model_report(&cfg.generator, frames)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Gradcheck { op, seed, list } => {
            if list {
                for n in case_names() {
                    println!("{n}");
                }
                return Ok(());
            }
            let results = gradient_suite(seed, op.as_deref())?;
            let mut failed = Vec::new();
            for r in &results {
                println!("{}", serde_json::to_string(r)?);
                if !r.passed {
                    failed.push(r.name.clone());
                }
            }
            if !failed.is_empty() {
                return Err(CliError::Failed(format!("gradient check failed: {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

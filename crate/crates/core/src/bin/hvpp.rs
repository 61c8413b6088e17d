use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use log::info;

use hvpp_core::bdrate::{bd_rate, load_rd_csv};
use hvpp_core::checkpoint::{load_checkpoint, save_checkpoint};
use hvpp_core::evaluate::{evaluate_sequences, COMPONENTS};
use hvpp_core::manifest::{read_manifest, ManifestKind};
use hvpp_core::network::{enhance_frame, ParameterStore};
use hvpp_core::training::{train, TrainConfig, TrainSource, FINAL_CHECKPOINT, LOSS_LOG};
use hvpp_core::yuv::{write_yuv420, FrameSource, YuvFile, MAX_QP};
use hvpp_core::{Error, Result};

// Inference allocates and frees many multi-megabyte maps per tile; an
// allocator that keeps freed pages avoids refaulting them every time.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "hvpp", version, about = "Post-processing enhancement of decoded 4:2:0 video")]
struct Cli {
    /// Single-threaded, order-fixed execution; bit-reproducible for a seed.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a key=value config and a training manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Enhance every frame of a raw 8-bit 4:2:0 file.
    Enhance {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Frame size as WIDTHxHEIGHT.
        #[arg(long, value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, value_parser = clap::value_parser!(u8).range(0..=MAX_QP as i64))]
        qp: u8,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quality report and BD-rates over an evaluation manifest.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// BD-rate of a test RD curve against an anchor (CSV `bitrate,quality`).
    Bdrate {
        #[arg(long)]
        anchor: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Write a freshly initialized checkpoint.
    Init {
        /// Training config whose model keys define the architecture;
        /// defaults to the full-size model.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Zero the reconstruction conv so the model is the identity.
        #[arg(long)]
        identity: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WIDTHxHEIGHT, got `{s}`"))?;
    let dim = |v: &str| -> std::result::Result<usize, String> {
        match v.trim().parse::<usize>() {
            Ok(n) if n > 0 && n % 2 == 0 => Ok(n),
            _ => Err(format!("`{v}` is not a positive even integer")),
        }
    };
    Ok((dim(w)?, dim(h)?))
}

fn cmd_train(config: &Path, manifest: &Path, out: &Path, seed: Option<u64>, deterministic: bool) -> Result<()> {
    let mut cfg = TrainConfig::from_file(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let records = read_manifest(manifest, ManifestKind::Train)?;
    let sources = records
        .iter()
        .map(|r| TrainSource::from_record(manifest, r))
        .collect::<Result<Vec<_>>>()?;
    info!(
        "training {} steps on {} sequence(s), seed {}",
        cfg.max_steps,
        sources.len(),
        cfg.seed
    );
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.txt"), cfg.to_text())?;
    let t = Instant::now();
    let outcome = train(sources, &cfg, Some(out), deterministic)?;
    if let (Some(first), Some(last)) = (outcome.log.first(), outcome.log.last()) {
        println!(
            "loss {:.6} -> {:.6} over {} steps in {:.1?}",
            first.loss.total,
            last.loss.total,
            outcome.log.len(),
            t.elapsed()
        );
    }
    println!("wrote {} and {}", out.join(LOSS_LOG).display(), out.join(FINAL_CHECKPOINT).display());
    Ok(())
}

fn cmd_enhance(ckpt: &Path, input: &Path, (w, h): (usize, usize), qp: u8, out: &Path) -> Result<()> {
    let params = load_checkpoint(ckpt)?;
    let src = YuvFile::open(input, w, h)?;
    if src.frame_count() == 0 {
        return Err(Error::InvalidArgument(format!("{} holds no frames", input.display())));
    }
    let tmp = out.with_extension("partial");
    for i in 0..src.frame_count() {
        let t = Instant::now();
        let enhanced = enhance_frame(&params, &src.frame(i)?, qp)?;
        write_yuv420(&enhanced, &tmp, i > 0)?;
        info!("frame {} of {} in {:.2?}", i + 1, src.frame_count(), t.elapsed());
    }
    std::fs::rename(&tmp, out)?;
    println!("wrote {} frame(s) to {}", src.frame_count(), out.display());
    Ok(())
}

fn cmd_evaluate(ckpt: &Path, manifest: &Path, out: &Path) -> Result<()> {
    let params = load_checkpoint(ckpt)?;
    let report = evaluate_sequences(manifest, &params)?;
    report.write(out)?;
    println!("component  BD-rate(PSNR)  BD-rate(MS-SSIM)");
    for (c, (p, m)) in report.summary().iter().enumerate() {
        println!("{:9}  {:>12.4}%  {:>15.4}%", COMPONENTS[c], p, m);
    }
    println!("wrote report to {}", out.display());
    Ok(())
}

fn cmd_init(config: Option<&Path>, identity: bool, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = match config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    let mut params = ParameterStore::init(&cfg.model, seed.unwrap_or(cfg.seed))?;
    if identity {
        params.zero_residual();
    }
    save_checkpoint(&params, out)?;
    println!("wrote {} ({} parameters)", out.display(), params.num_params());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if cli.deterministic {
        // Tile and batch results are merged in a fixed order either way;
        // this only makes the whole run single-threaded.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    match cli.command {
        Command::Train { config, manifest, out } => cmd_train(&config, &manifest, &out, cli.seed, cli.deterministic),
        Command::Enhance { ckpt, input, size, qp, out } => cmd_enhance(&ckpt, &input, size, qp, &out),
        Command::Evaluate { ckpt, manifest, out } => cmd_evaluate(&ckpt, &manifest, &out),
        Command::Bdrate { anchor, test } => {
            let bd = bd_rate(&load_rd_csv(&anchor)?, &load_rd_csv(&test)?)?;
            println!("{bd:.4}");
            Ok(())
        }
        Command::Init { config, identity, out } => cmd_init(config.as_deref(), identity, &out, cli.seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

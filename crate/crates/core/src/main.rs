//! Command-line front door: experiment orchestration (scaling, anchor sweep,
//! ablation grid, strategy comparison), plus single-run train / eval / render.
//!
//! Exit codes: 0 success, 2 configuration error, 1 runtime failure. All
//! outputs land under --out, alongside a manifest.json listing produced files
//! and the hash of the canonical JSON form of the config.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use viewpress::bench::{
    cmd_ablate, cmd_anchor_sweep, cmd_scaling, cmd_strategies, held_out_seeds, write_manifest,
    ExperimentSpec,
};
use viewpress::pipeline::{
    evaluate, forward_tape, make_instance, train, write_metrics_csv, Checkpoint, PipelineConfig,
};
use viewpress::scene::Image;
use viewpress::numcore::Tape;
use viewpress::{Error, Result};

#[derive(Parser)]
#[command(
    name = "viewpress",
    about = "Multi-view compression for feed-forward Gaussian splatting: \
             training, evaluation, and benchmark grids on a synthetic testbed"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config: an experiment spec for grid commands, a pipeline config
    /// for train/eval/render.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing); nothing is written elsewhere.
    #[arg(long)]
    out: PathBuf,
    /// Override the seed list (grid commands) or the run seed (single runs).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Forward-pass cost vs view count: compressed (fixed anchors) against
    /// the per-view baseline. Emits scaling.csv.
    Scaling(Common),
    /// PSNR-vs-anchor-count curves at narrow and wide camera arcs. Emits
    /// anchor_sweep.csv. Trains one model per grid cell.
    Sweep(Common),
    /// Fusion-mode, block-ablation, or beta grids with shared seeds. Emits
    /// ablate.csv.
    Ablate(Common),
    /// Anchor-selection strategy comparison. Emits strategies.csv.
    Strategies(Common),
    /// Train one model. Emits checkpoint.zptn (+ .json sidecar) and
    /// metrics.csv.
    Train(Common),
    /// Evaluate a checkpoint on held-out scenes. Emits eval.json.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint archive produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Held-out scene count.
        #[arg(long, default_value_t = 5)]
        scenes: usize,
    },
    /// Render one scene's target views as PPM images; with --checkpoint the
    /// model predictions are written next to the ground truth.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::InvalidInput(_) | Error::Json(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("cannot parse config {}: {e}", path.display())))
}

fn load_spec(common: &Common) -> Result<ExperimentSpec> {
    let mut spec: ExperimentSpec = read_json(&common.config)?;
    if let Some(seed) = common.seed {
        spec.seeds = vec![seed];
    }
    spec.validate()?;
    std::fs::create_dir_all(&common.out)?;
    Ok(spec)
}

fn load_cfg(common: &Common) -> Result<(PipelineConfig, u64)> {
    let cfg: PipelineConfig = read_json(&common.config)?;
    cfg.validate()?;
    std::fs::create_dir_all(&common.out)?;
    Ok((cfg, common.seed.unwrap_or(0)))
}

/// Print the per-variant median of the psnr column of a grid CSV — the
/// ordering summary for sweep/ablate/strategies output.
fn print_median_summary(csv_path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(csv_path)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let Some(psnr_col) = header.iter().position(|&h| h == "psnr") else {
        return Ok(());
    };
    let mut rows = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            continue;
        }
        // Key = everything before the seed column (variant, or span+N).
        let key = fields[..psnr_col - 1].join(",");
        if let Ok(psnr) = fields[psnr_col].parse::<f64>() {
            rows.push((key, psnr));
        }
    }
    let mut medians = viewpress::bench::median_by_key(&rows);
    medians.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    println!("median held-out PSNR by variant:");
    for (key, med) in medians {
        println!("  {key}: {med:.3}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Scaling(common) => {
            let spec = load_spec(&common)?;
            let files = cmd_scaling(&spec, &common.out)?;
            write_manifest(&common.out, "scaling", &spec, &files)?;
        }
        Command::Sweep(common) => {
            let spec = load_spec(&common)?;
            let files = cmd_anchor_sweep(&spec, &common.out)?;
            print_median_summary(&files[0])?;
            write_manifest(&common.out, "sweep", &spec, &files)?;
        }
        Command::Ablate(common) => {
            let spec = load_spec(&common)?;
            let files = cmd_ablate(&spec, &common.out)?;
            print_median_summary(&files[0])?;
            write_manifest(&common.out, "ablate", &spec, &files)?;
        }
        Command::Strategies(common) => {
            let spec = load_spec(&common)?;
            let files = cmd_strategies(&spec, &common.out)?;
            print_median_summary(&files[0])?;
            write_manifest(&common.out, "strategies", &spec, &files)?;
        }
        Command::Train(common) => {
            let (cfg, seed) = load_cfg(&common)?;
            let (ckpt, metrics) = train(&cfg, seed)?;
            let ckpt_path = common.out.join("checkpoint.zptn");
            ckpt.save(&ckpt_path)?;
            let metrics_path = common.out.join("metrics.csv");
            write_metrics_csv(&metrics_path, &metrics)?;
            let sidecar = common.out.join("checkpoint.zptn.json");
            write_manifest(&common.out, "train", &cfg, &[ckpt_path, sidecar, metrics_path])?;
        }
        Command::Eval { common, checkpoint, scenes } => {
            let (cfg, _) = load_cfg(&common)?;
            if scenes == 0 {
                return Err(Error::config("--scenes must be positive"));
            }
            let ckpt = Checkpoint::load(&checkpoint)?;
            let report = evaluate(&ckpt, &cfg, &held_out_seeds(scenes))?;
            let path = common.out.join("eval.json");
            std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
            println!(
                "median_psnr={:.3} mean_psnr={:.3} n_primitives={} wallclock_ms={:.2}",
                report.median_psnr,
                report.mean_psnr,
                report.n_primitives,
                report.wallclock_ms_per_forward
            );
            write_manifest(&common.out, "eval", &cfg, &[path])?;
        }
        Command::Render { common, checkpoint } => {
            let (cfg, seed) = load_cfg(&common)?;
            let inst = make_instance(&cfg, seed, cfg.eval_targets)?;
            let mut files = Vec::new();
            for (i, img) in inst.target_images.iter().enumerate() {
                let path = common.out.join(format!("target_{i:02}.ppm"));
                img.write_ppm(&path)?;
                files.push(path);
            }
            if let Some(ckpt_path) = checkpoint {
                let ckpt = Checkpoint::load(&ckpt_path)?;
                let mut tape = Tape::<f32>::new();
                let (comp, _) = ckpt.comp.bind(&mut tape);
                let (pred, _) = ckpt.pred.bind(&mut tape);
                let fwd = forward_tape(&mut tape, &inst, &comp, &pred, &cfg, None, seed)?;
                let partition_path = common.out.join("partition.json");
                std::fs::write(&partition_path, serde_json::to_string_pretty(&fwd.partition)?)?;
                files.push(partition_path);
                for (i, var) in fwd.rendered.iter().enumerate() {
                    let img = Image::from_tensor(tape.value(*var))?;
                    let path = common.out.join(format!("predicted_{i:02}.ppm"));
                    img.write_ppm(&path)?;
                    files.push(path);
                }
            }
            write_manifest(&common.out, "render", &cfg, &files)?;
        }
    }
    Ok(())
}

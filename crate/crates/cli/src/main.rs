//! Command-line surface of the splatting pipeline: train sequence models,
//! expand grasp poses, render augmented datasets, validate them, and render
//! single frames.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use meshsplat::pipeline::{
    cmd_augment, cmd_pom, cmd_render, cmd_train, cmd_validate, load_augment_job, load_pom_batch,
    IdentityRefine,
};
use meshsplat::trainer::{load_train_config, TrainConfig};
use meshsplat::Error;

#[derive(Parser)]
#[command(
    name = "meshsplat",
    version,
    about = "Mesh-anchored Gaussian splatting pipeline"
)]
struct Cli {
    /// Override the seed in loaded configs.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core). Outputs do not depend on this.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Log level: error, warn, info, debug, trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a scene model from a sequence's posed multi-view images.
    Train {
        #[arg(long)]
        sequence: PathBuf,
        /// Training config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Expand reference poses into optimized novel grasps.
    Pom {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        batch: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render an augmented image dataset from a checkpoint and poses.
    Augment {
        #[arg(long)]
        job: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-verify every record of an emitted dataset.
    Validate {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Render one pose through one camera to a PNG.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pose: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write 16-bit instead of 8-bit PNG.
        #[arg(long)]
        png16: bool,
    },
    /// Generate the synthetic sphere-grasp sequence (assets, images,
    /// manifest, sequence spec, backgrounds).
    Fixture {
        #[arg(long)]
        out: PathBuf,
        /// Training views to render.
        #[arg(long, default_value_t = 20)]
        views: usize,
        /// Held-out views to render.
        #[arg(long, default_value_t = 4)]
        heldout: usize,
        /// Image size in pixels.
        #[arg(long, default_value_t = 128)]
        size: usize,
        /// Kernels per face.
        #[arg(long, default_value_t = 2)]
        kernels: usize,
        /// Spherical harmonics degree.
        #[arg(long, default_value_t = 2)]
        sh_degree: usize,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::MissingFile(_) => 2,
        Error::AllSamplesRejected => 3,
        Error::EmptyPoseDir(_) => 4,
        _ => 1,
    }
}

/// Rewrite a batch spec with an overridden seed, keeping pose paths
/// resolvable from the new location.
fn batch_with_seed(batch: &Path, out: &Path, seed: u64) -> Result<PathBuf, Error> {
    let (mut spec, _) = load_pom_batch(batch)?;
    spec.seed = seed;
    let base = batch.parent().unwrap_or(Path::new("."));
    spec.reference_poses = spec
        .reference_poses
        .iter()
        .map(|p| {
            let pb = PathBuf::from(p);
            if pb.is_absolute() {
                p.clone()
            } else {
                base.join(pb).display().to_string()
            }
        })
        .collect();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let tmp = out.join("batch_with_seed.json");
    let text = serde_json::to_string_pretty(&spec)
        .map_err(|e| Error::json(tmp.display().to_string(), e))?;
    std::fs::write(&tmp, text).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    Ok(tmp)
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Train {
            sequence,
            config,
            out,
        } => {
            let mut cfg = match config {
                Some(path) => load_train_config(&path)?,
                None => TrainConfig::default(),
            };
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let ckpt = cmd_train(&sequence, &cfg, &out)?;
            println!("checkpoint written to {}", ckpt.display());
            Ok(0)
        }
        Command::Pom {
            checkpoint,
            batch,
            out,
        } => {
            let batch = match cli.seed {
                Some(seed) => batch_with_seed(&batch, &out, seed)?,
                None => batch,
            };
            let outcome = cmd_pom(&checkpoint, &batch, &out)?;
            println!(
                "poses: {} accepted, {} rejected (of {})",
                outcome.accepted, outcome.rejected, outcome.requested
            );
            Ok(0)
        }
        Command::Augment { job, out } => {
            let mut spec = load_augment_job(&job)?;
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            let outcome = cmd_augment(&spec, &out, &IdentityRefine)?;
            println!(
                "dataset: {} generated, {} failed (of {})",
                outcome.generated, outcome.failed, outcome.requested
            );
            if outcome.success() {
                Ok(0)
            } else {
                log::error!(
                    "only {}/{} samples succeeded",
                    outcome.generated,
                    outcome.requested
                );
                Ok(1)
            }
        }
        Command::Validate { dataset } => {
            let report = cmd_validate(&dataset)?;
            println!(
                "validated {} records: {} passed, {} failed",
                report.records,
                report.passed,
                report.failures.len()
            );
            for f in &report.failures {
                println!("  FAIL {f}");
            }
            Ok(if report.all_passed() { 0 } else { 1 })
        }
        Command::Render {
            checkpoint,
            pose,
            camera,
            out,
            png16,
        } => {
            cmd_render(&checkpoint, &pose, &camera, &out, png16)?;
            println!("wrote {}", out.display());
            Ok(0)
        }
        Command::Fixture {
            out,
            views,
            heldout,
            size,
            kernels,
            sh_degree,
        } => {
            let seed = cli.seed.unwrap_or(21);
            let spec = meshsplat::fixtures::write_sequence(
                &out, kernels, sh_degree, seed, views, heldout, size, size,
            )?;
            meshsplat::fixtures::write_backgrounds(&out.join("backgrounds"), 4, 512, 512)?;
            println!("sequence spec written to {}", spec.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .init();
    meshsplat::configure_workers(cli.workers);
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use ifnet::model::ModelParams;
use ifnet::trainer::TrainError;
use ifnet_cli::commands::{self, Outcome, Split};
use ifnet_cli::config::RunConfig;
use ifnet_cli::verify;

/// Implicit feature networks: 3D reconstruction and completion from
/// voxel grids and point clouds.
#[derive(Parser, Debug)]
#[command(name = "ifnet", version)]
struct Cli {
    /// Run configuration (`key = value` lines); defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel sections.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Single worker thread; outputs depend only on config, inputs and seed.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Continue training from the run directory's checkpoint.
    #[arg(long, global = true)]
    resume: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic shapes, inputs, training samples and splits.
    Gen,
    /// Train on the generated training split.
    Train,
    /// Mesh one input, or every shape of a split.
    Reconstruct {
        /// Model checkpoint; defaults to the run directory's best model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// A .ifvx voxel grid or .xyz point cloud.
        #[arg(long, requires = "output", conflicts_with = "split")]
        input: Option<PathBuf>,
        /// OBJ path for a single reconstruction.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Also dump the occupancy field (f32) here.
        #[arg(long, requires = "input")]
        field_dump: Option<PathBuf>,
        /// Reconstruct every shape of this split (train, val or test).
        #[arg(long, requires = "out_dir")]
        split: Option<String>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Compare predicted meshes with ground truth.
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        /// Defaults to the dataset's mesh directory.
        #[arg(long)]
        gt_dir: Option<PathBuf>,
        /// Only evaluate shapes of this split.
        #[arg(long)]
        split: Option<String>,
        /// Metrics CSV path.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the property battery.
    Verify,
}

fn run(cli: Cli) -> Result<Outcome> {
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::for_task(ifnet_cli::config::Task::Voxel32),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    match cli.command {
        Command::Gen => {
            let s = commands::gen(&cfg)?;
            println!(
                "generated {} shapes into {} ({} train, {} val, {} test)",
                s.train + s.val + s.test,
                cfg.data_dir.display(),
                s.train,
                s.val,
                s.test
            );
            Ok(Outcome::Success)
        }
        Command::Train => {
            let s = commands::train(&cfg, cli.resume)?;
            println!(
                "stopped after {} steps ({:?}); best validation loss {}",
                s.steps, s.stop, s.best_val
            );
            Ok(Outcome::Success)
        }
        Command::Reconstruct {
            checkpoint,
            input,
            output,
            field_dump,
            split,
            out_dir,
        } => {
            let ckpt = checkpoint.unwrap_or_else(|| cfg.run_dir.join(commands::MODEL_FILE));
            let params = ModelParams::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            match (input, output, split, out_dir) {
                (Some(i), Some(o), None, _) => {
                    if commands::reconstruct_one(&cfg, &params, &i, &o, field_dump.as_deref())? {
                        eprintln!(
                            "warning: {} has no surface at threshold {}",
                            i.display(),
                            cfg.mesher.threshold
                        );
                        return Ok(Outcome::EmptyOutput);
                    }
                    Ok(Outcome::Success)
                }
                (None, None, Some(s), Some(dir)) => {
                    let empty = commands::reconstruct_split(&cfg, &params, Split::parse(&s)?, &dir)?;
                    for id in &empty {
                        eprintln!("warning: {id} has no surface at threshold {}", cfg.mesher.threshold);
                    }
                    Ok(if empty.is_empty() {
                        Outcome::Success
                    } else {
                        Outcome::EmptyOutput
                    })
                }
                _ => bail!("give either --input and --output, or --split and --out-dir"),
            }
        }
        Command::Eval {
            pred_dir,
            gt_dir,
            split,
            output,
        } => {
            let gt = gt_dir.unwrap_or_else(|| cfg.data_dir.join("meshes"));
            let ids: Option<Vec<String>> = match split {
                Some(s) => {
                    let s = Split::parse(&s)?;
                    let m = commands::read_manifest(&cfg.data_dir)?;
                    Some(m.into_iter().filter(|e| e.split == s).map(|e| e.id).collect())
                }
                None => None,
            };
            let rows = commands::eval(&cfg, &pred_dir, &gt, ids.as_deref())?;
            print!("{}", commands::eval_table(&rows));
            if let Some(o) = output {
                std::fs::write(&o, commands::eval_csv(&rows)).with_context(|| format!("writing {}", o.display()))?;
            }
            Ok(if rows.iter().all(|r| r.report.is_some()) {
                Outcome::Success
            } else {
                Outcome::Failed
            })
        }
        Command::Verify => {
            let checks = verify::run_all();
            for c in &checks {
                println!("{c}");
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            println!("{} checks, {failed} failed", checks.len());
            Ok(if failed == 0 { Outcome::Success } else { Outcome::Failed })
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let abort = e
        .chain()
        .any(|c| matches!(c.downcast_ref::<TrainError>(), Some(TrainError::NumericalAbort { .. })));
    if abort {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(o) => ExitCode::from(o.exit_code() as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gated_moe::config::ExperimentConfig;
use gated_moe::eval::{self, ExperimentReport};
use gated_moe::{data, trainer, Error};

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;
const EXIT_PARTIAL: u8 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "gated-moe",
    version,
    about = "Train and evaluate gated fusion of two-stream experts"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the model/training seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Test with 25 temporal samples x 10 crops per video.
    #[arg(long, global = true)]
    paper_scale_test: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run all training stages, then evaluate on the test split.
    Train {
        /// Continue from a stage checkpoint inside an earlier run directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate the checkpoints of a run directory.
    Eval {
        /// Run directory holding the checkpoints (defaults to --out).
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Run the ablation grid from the config's `ablation` section.
    Ablate,
    /// Write fusion-weight scatter and histogram CSVs from a report.
    ExportWeights {
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 20)]
        bins: usize,
    },
    /// Project gate trunk features of the test split to 2-D with PCA.
    ProjectFeatures {
        /// Run directory holding the checkpoints.
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Debug)]
enum Failure {
    Lib(Error),
    Partial(usize, usize),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn load_config(g: &Global) -> Result<ExperimentConfig, Failure> {
    let path = g
        .config
        .as_ref()
        .ok_or_else(|| Failure::Usage("--config is required for this command".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if g.paper_scale_test {
        cfg.use_paper_scale_test();
        cfg.validate()?;
    }
    Ok(cfg)
}

fn out_dir(g: &Global, fallback: &str) -> PathBuf {
    g.out.clone().unwrap_or_else(|| PathBuf::from(fallback))
}

fn print_report(r: &ExperimentReport) {
    let a = &r.accuracy;
    println!("test videos: {} ({} crops each)", r.test_videos, r.crops_per_video);
    println!("gated:        {:.2}%", 100.0 * a.gated);
    println!("gated (w/o multitask): {:.2}%", 100.0 * a.gated_stage2);
    println!(
        "fixed grid:   {:.2}% (1 : {})",
        100.0 * a.fixed_grid,
        r.fixed_weight.temporal_ratio()
    );
    println!("fixed 1:1.5:  {:.2}%", 100.0 * a.fixed_default);
    println!("even:         {:.2}%", 100.0 * a.even);
    println!("sci:          {:.2}%", 100.0 * a.sci);
    println!("spatial only: {:.2}%", 100.0 * a.spatial);
    println!("temporal only:{:.2}%", 100.0 * a.temporal);
    println!("dead-gate rate: {:.4}", r.dead_gate_rate);
}

fn run(cli: Cli) -> Result<(), Failure> {
    let g = &cli.global;
    match &cli.command {
        Command::Train { resume } => {
            let cfg = load_config(g)?;
            let out = out_dir(g, "run");
            let report = match resume {
                None => eval::run_experiment(&cfg, Some(&out))?.1,
                Some(ckpt) => {
                    std::fs::create_dir_all(&out).map_err(|e| Failure::Usage(format!("{}: {e}", out.display())))?;
                    let splits = data::generate_dataset(&cfg.dataset)?;
                    trainer::resume_training(&cfg, &splits.train, &splits.val, ckpt, Some(&out))?;
                    let r = eval::eval_run_dir(&cfg, &out)?;
                    r.write(&out.join("report.json"))?;
                    r
                }
            };
            print_report(&report);
            println!("artifacts in {}", out.display());
        }
        Command::Eval { run } => {
            let cfg = load_config(g)?;
            let dir = run.clone().unwrap_or_else(|| out_dir(g, "run"));
            let report = eval::eval_run_dir(&cfg, &dir)?;
            let dest = g.out.clone().unwrap_or_else(|| dir.clone());
            std::fs::create_dir_all(&dest).map_err(|e| Failure::Usage(format!("{}: {e}", dest.display())))?;
            report.write(&dest.join("report_eval.json"))?;
            print_report(&report);
        }
        Command::Ablate => {
            let cfg = load_config(g)?;
            let out = out_dir(g, "ablation");
            std::fs::create_dir_all(&out).map_err(|e| Failure::Usage(format!("{}: {e}", out.display())))?;
            let threads = std::env::var("GATED_MOE_THREADS")
                .ok()
                .and_then(|v| v.parse::<usize>().ok())
                .filter(|&n| n > 0)
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let result = eval::run_ablation(&cfg, Some(&out), threads)?;
            let (long, table) = eval::write_ablation_csv(&out, &result)?;
            println!("{} runs, {} failed", result.runs.len(), result.failures());
            println!("wrote {} and {}", long.display(), table.display());
            for r in result.runs.iter().filter(|r| r.error.is_some()) {
                eprintln!(
                    "{} seed {}: {}",
                    r.cell.label(),
                    r.seed,
                    r.error.as_deref().unwrap_or("")
                );
            }
            if result.failures() > 0 {
                return Err(Failure::Partial(result.failures(), result.runs.len()));
            }
        }
        Command::ExportWeights { report, bins } => {
            let r = ExperimentReport::read(report)?;
            let dest = g
                .out
                .clone()
                .unwrap_or_else(|| report.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf));
            let (scatter, hist) = eval::export_weights(&dest, &r.weight_samples, "", *bins)?;
            eval::export_weights(&dest, &r.stage2_weight_samples, "stage2_", *bins)?;
            println!("wrote {} and {}", scatter.display(), hist.display());
            println!(
                "spatial-share std: {:.4} (multitask) vs {:.4} (weights only)",
                r.spatial_share_std, r.stage2_spatial_share_std
            );
        }
        Command::ProjectFeatures { run } => {
            let cfg = load_config(g)?;
            let dest = g.out.clone().unwrap_or_else(|| run.clone());
            let path = eval::project_features(&cfg, run, &dest)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Partial(failed, total)) => {
            eprintln!("error: {failed} of {total} ablation runs failed");
            ExitCode::from(EXIT_PARTIAL)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config { .. } => EXIT_CONFIG,
                Error::Divergence { .. } => EXIT_DIVERGENCE,
                _ => EXIT_RUNTIME,
            })
        }
    }
}

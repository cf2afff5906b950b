use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use mim_core::checkpoint::Checkpoint;
use mim_core::degradation::{write_pnm, Dataset};
use mim_core::experiment::{
    ablate, ablation_table, restore, route_report, train, write_tensors, ExperimentConfig, ReportBlocks, Variant,
};
use mim_core::gradcheck::{full_suite, report_text};
use mim_core::{MimError, Result};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "mim", version, about = "Mixture-of-experts diffusion restoration at toy scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML); defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for all artifacts.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Also write the first N pairs as PGM/PPM images.
        #[arg(long, default_value_t = 0)]
        export: usize,
    },
    /// Train on the non-held-out part of the dataset.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Restore the held-out samples with a trained checkpoint.
    Restore {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write restored images as PGM/PPM.
        #[arg(long)]
        export: bool,
    },
    /// Train and evaluate several variants from the same seed and data.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated variant names; all variants when omitted.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Mean expert-group gates per degradation kind.
    RouteReport {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Average gates over every block instead of the first.
        #[arg(long)]
        all_blocks: bool,
    },
    /// Compare reverse-mode gradients with finite differences.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        instances: u64,
    },
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| persistence(path, e))?;
                ExperimentConfig::from_text(&text)?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        fs::create_dir_all(&self.out).map_err(|e| persistence(&self.out, e))?;
        Ok(cfg)
    }

    fn dataset_path(&self, cfg: &ExperimentConfig) -> PathBuf {
        cfg.data.path.clone().unwrap_or_else(|| self.out.join("dataset.mimp"))
    }

    fn load_dataset(&self, cfg: &ExperimentConfig) -> Result<Dataset> {
        let path = self.dataset_path(cfg);
        info!("reading dataset {}", path.display());
        Dataset::load(&path)
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        let path = self.out.join(name);
        fs::write(&path, text).map_err(|e| persistence(&path, e))?;
        info!("wrote {}", path.display());
        Ok(())
    }
}

fn persistence(path: &Path, source: std::io::Error) -> MimError {
    MimError::Persistence {
        path: path.to_path_buf(),
        source,
    }
}

fn checkpoint_for(common: &Common, cfg: &ExperimentConfig, path: &Option<PathBuf>) -> Result<Checkpoint> {
    let path = path.clone().unwrap_or_else(|| common.out.join("checkpoint.mimd"));
    let ck = Checkpoint::load(&path)?;
    ck.expect_config(&cfg.model_config())?;
    Ok(ck)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, export } => {
            let cfg = common.load()?;
            let data = cfg.build_dataset()?;
            let path = common.dataset_path(&cfg);
            data.save(&path)?;
            println!("wrote {} samples to {}", data.len(), path.display());
            for (i, s) in data.samples.iter().take(export).enumerate() {
                let ext = if s.clean.shape()[0] == 1 { "pgm" } else { "ppm" };
                write_pnm(&s.clean, &common.out.join(format!("sample{i:03}_clean.{ext}")))?;
                write_pnm(&s.degraded, &common.out.join(format!("sample{i:03}_degraded.{ext}")))?;
            }
        }
        Command::Train { common } => {
            let cfg = common.load()?;
            let data = common.load_dataset(&cfg)?;
            let (train_set, _) = data.split(cfg.data.held_out)?;
            let report = train(&cfg, &train_set.samples)?;
            let path = common.out.join("checkpoint.mimd");
            report.checkpoint.save(&path)?;
            let mut log = report.log.join("\n");
            log.push('\n');
            common.write("train.log", &log)?;
            match report.final_loss() {
                Some(l) => println!("trained {} steps, final loss {l:.6}; checkpoint {}", report.losses.len(), path.display()),
                None => println!("no training steps; checkpoint {}", path.display()),
            }
        }
        Command::Restore {
            common,
            checkpoint,
            export,
        } => {
            let cfg = common.load()?;
            let ck = checkpoint_for(&common, &cfg, &checkpoint)?;
            let data = common.load_dataset(&cfg)?;
            let (_, held_out) = data.split(cfg.data.held_out)?;
            let out = restore(&ck, &held_out.samples, &cfg.sampler, cfg.seed)?;
            write_tensors(&common.out.join("restored.tensors"), &out.restored)?;
            if export {
                for (i, img) in out.restored.iter().enumerate() {
                    let ext = if img.shape()[0] == 1 { "pgm" } else { "ppm" };
                    write_pnm(img, &common.out.join(format!("restored{i:03}.{ext}")))?;
                }
            }
            let text = out.metrics.to_text();
            common.write("metrics.txt", &text)?;
            print!("{text}");
        }
        Command::Ablate { common, variants } => {
            let cfg = common.load()?;
            let variants: Vec<Variant> = if variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                variants.iter().map(|v| v.parse()).collect::<Result<_>>()?
            };
            let data = common.load_dataset(&cfg)?;
            let table = ablation_table(&ablate(&cfg, &variants, &data)?);
            common.write("ablation.txt", &table)?;
            print!("{table}");
        }
        Command::RouteReport {
            common,
            checkpoint,
            all_blocks,
        } => {
            let cfg = common.load()?;
            let ck = checkpoint_for(&common, &cfg, &checkpoint)?;
            let (model, store) = ck.instantiate()?;
            let data = common.load_dataset(&cfg)?;
            let blocks = if all_blocks { ReportBlocks::All } else { ReportBlocks::First };
            let report = route_report(&model, &store, &data.samples, blocks, cfg.seed)?;
            let text = report.to_text();
            common.write("routing.txt", &text)?;
            print!("{text}");
        }
        Command::GradCheck { common, instances } => {
            let cfg = common.load()?;
            let reports = full_suite(instances, cfg.seed)?;
            let text = report_text(&reports);
            common.write("gradcheck.txt", &text)?;
            print!("{text}");
            let failed = reports.iter().filter(|r| !r.passed()).count();
            if failed > 0 {
                return Err(MimError::Contract(format!("{failed} gradient checks failed")));
            }
            println!("all {} gradient checks passed", reports.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! gridvlm: train and compare toy vision-language models on synthetic
//! grid scenes.
//!
//! Exit codes: 0 success, 1 at least one matrix cell failed,
//! 2 configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};

use gridvlm_core::encoders::EncoderVariant;
use gridvlm_core::fusion::VariantConfig;
use gridvlm_core::harness::{
    self, diagnose_attention, evaluate, load_cell_model, load_matrix_data, parse_results_csv,
    patch_shuffle_probe, run_matrix, write_attention_csv, write_report, ExperimentConfig,
};
use gridvlm_core::rope::PeScheme;
use gridvlm_core::scenegen::{generate_datasets, DataGenConfig, Task};

#[derive(Parser)]
#[command(name = "gridvlm", version, about)]
struct Cli {
    /// Experiment configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for independent experiment cells.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate deterministic QA and caption datasets.
    GenData {
        /// Training items per task.
        #[arg(long, default_value_t = 5000)]
        train: usize,
        /// Eval items per task.
        #[arg(long, default_value_t = 1000)]
        eval: usize,
        /// Comma-separated task list.
        #[arg(long, default_value = "relation,count,locate")]
        tasks: String,
    },
    /// Pretrain one encoder variant and cache the checkpoint.
    PretrainEncoder {
        /// "contrastive" or "generative".
        #[arg(long)]
        variant: String,
        /// Dataset directory from gen-data.
        #[arg(long)]
        data: PathBuf,
    },
    /// Train a single (encoder, pe, seed) cell end to end.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        encoder: String,
        #[arg(long)]
        pe: String,
        /// Reuse an existing encoder checkpoint instead of pretraining.
        #[arg(long)]
        encoder_ckpt: Option<PathBuf>,
    },
    /// Evaluate a trained cell directory on the eval splits.
    Eval {
        /// Cell directory holding config.toml and checkpoint.bin.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Rebuild report.md from an existing results.csv.
    Report {
        #[arg(long)]
        records: PathBuf,
    },
    /// Attention diagnostics on Locate items for a trained cell.
    Diagnose {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 200)]
        items: usize,
    },
    /// Position-shuffle probe: accuracy drop when image-token positions
    /// are permuted at inference.
    ProbeShuffle {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the full experiment matrix, resuming completed cells.
    RunMatrix {
        /// Dataset directory (overrides the config).
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Other(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) | CliError::Other(m) => write!(f, "{m}"),
        }
    }
}

impl From<harness::HarnessError> for CliError {
    fn from(e: harness::HarnessError) -> Self {
        match e {
            harness::HarnessError::Config(_) => CliError::Config(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<gridvlm_core::fusion::FusionError> for CliError {
    fn from(e: gridvlm_core::fusion::FusionError) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<gridvlm_core::scenegen::DatasetError> for CliError {
    fn from(e: gridvlm_core::scenegen::DatasetError) -> Self {
        match e {
            gridvlm_core::scenegen::DatasetError::Config(_) => CliError::Config(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

fn load_experiment_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            toml::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(jobs) = cli.jobs {
        cfg.jobs = jobs;
    }
    Ok(cfg)
}

fn parse_variant(s: &str) -> Result<EncoderVariant, CliError> {
    EncoderVariant::from_str(s).map_err(CliError::Config)
}

fn parse_pe(s: &str) -> Result<PeScheme, CliError> {
    PeScheme::from_str(s).map_err(CliError::Config)
}

fn run(cli: &Cli) -> Result<bool, CliError> {
    match &cli.command {
        Command::GenData { train, eval, tasks } => {
            let tasks: Vec<Task> = tasks
                .split(',')
                .filter(|t| !t.trim().is_empty())
                .map(|t| Task::from_str(t.trim()).map_err(CliError::Config))
                .collect::<Result<_, _>>()?;
            if tasks.is_empty() {
                return Err(CliError::Config("no tasks requested".into()));
            }
            let out = cli
                .out
                .clone()
                .ok_or_else(|| CliError::Config("gen-data requires --out DIR".into()))?;
            let cfg = DataGenConfig {
                seed: cli.seed.unwrap_or(0),
                train_per_task: *train,
                eval_per_task: *eval,
                tasks,
                ..Default::default()
            };
            let paths = generate_datasets(&cfg, &out)?;
            println!("wrote datasets under {}", paths.dir.display());
            Ok(true)
        }

        Command::PretrainEncoder { variant, data } => {
            let variant = parse_variant(variant)?;
            let mut cfg = load_experiment_config(cli)?;
            cfg.data_dir = data.clone();
            let seed = cli.seed.unwrap_or(0);
            let matrix_data = load_matrix_data(&cfg.data_dir)?;
            let caption_hash = harness::caption_file_hash(&cfg.data_dir)?;
            let path = harness::ensure_encoder(variant, seed, &cfg, &matrix_data, &caption_hash)?;
            println!("encoder checkpoint: {}", path.display());
            Ok(true)
        }

        Command::Train {
            data,
            encoder,
            pe,
            encoder_ckpt,
        } => {
            let encoder = parse_variant(encoder)?;
            let pe = parse_pe(pe)?;
            let mut cfg = load_experiment_config(cli)?;
            cfg.data_dir = data.clone();
            let seed = cli.seed.unwrap_or(0);
            let matrix_data = load_matrix_data(&cfg.data_dir)?;
            let cell = VariantConfig {
                encoder,
                pe,
                seed,
                model: cfg.model,
                train: cfg.train.clone(),
            };
            let ckpt = match encoder_ckpt {
                Some(p) => p.clone(),
                None => {
                    let caption_hash = harness::caption_file_hash(&cfg.data_dir)?;
                    harness::ensure_encoder(encoder, seed, &cfg, &matrix_data, &caption_hash)?
                }
            };
            let output = harness::run_cell(&cell, &cfg, &matrix_data, &ckpt)?;
            let dir = harness::cell_dir(&cfg.out_dir, &cell);
            println!("trained cell at {}", dir.display());
            for r in &output.records {
                println!("  {} accuracy {:.4} ({} items)", r.task.label(), r.accuracy, r.n_items);
            }
            Ok(true)
        }

        Command::Eval { model, data } => {
            let matrix_data = load_matrix_data(data)?;
            let (cell, fusion_model) = load_cell_model(model, &matrix_data)?;
            let records = evaluate(&fusion_model, &matrix_data.qa_eval, &matrix_data.vocab, &cell)?;
            let csv = harness::results_csv(&records);
            print!("{csv}");
            if let Some(out) = &cli.out {
                std::fs::create_dir_all(out)?;
                std::fs::write(out.join("results.csv"), &csv)?;
            }
            Ok(true)
        }

        Command::Report { records } => {
            let text = std::fs::read_to_string(records)
                .map_err(|e| CliError::Config(format!("{}: {e}", records.display())))?;
            let parsed = parse_results_csv(&text)?;
            let out_dir = cli
                .out
                .clone()
                .unwrap_or_else(|| records.parent().unwrap_or(Path::new(".")).to_path_buf());
            let (_, report_path) = write_report(&parsed, &out_dir)?;
            println!("wrote {}", report_path.display());
            Ok(true)
        }

        Command::Diagnose { model, data, items } => {
            let matrix_data = load_matrix_data(data)?;
            let (cell, fusion_model) = load_cell_model(model, &matrix_data)?;
            let locate = matrix_data
                .qa_eval
                .get(&Task::Locate)
                .map(|v| &v[..v.len().min(*items)])
                .unwrap_or(&[]);
            let summary = diagnose_attention(&fusion_model, locate, &cell)?;
            println!(
                "{}-seed{}: target share of image attention {:.4} vs uniform null {:.4} \
                 ({} items, row-sum max err {:.2e})",
                summary.variant,
                summary.seed,
                summary.target_share_of_image,
                summary.uniform_null,
                summary.n_items,
                summary.row_sum_max_err
            );
            if let Some(out) = &cli.out {
                std::fs::create_dir_all(out)?;
                write_attention_csv(std::slice::from_ref(&summary), &out.join("attention.csv"))?;
                println!("wrote {}", out.join("attention.csv").display());
            }
            Ok(true)
        }

        Command::ProbeShuffle { model, data } => {
            let matrix_data = load_matrix_data(data)?;
            let (cell, fusion_model) = load_cell_model(model, &matrix_data)?;
            let probe_seed = cli.seed.unwrap_or(0);
            let report =
                patch_shuffle_probe(&fusion_model, &matrix_data.qa_eval, &cell, probe_seed)?;
            print!("{}", report.to_csv());
            if let Some(out) = &cli.out {
                std::fs::create_dir_all(out)?;
                std::fs::write(out.join("probe.csv"), report.to_csv())?;
            }
            Ok(true)
        }

        Command::RunMatrix { data } => {
            let mut cfg = load_experiment_config(cli)?;
            if let Some(d) = data {
                cfg.data_dir = d.clone();
            }
            let n_cells = cfg.cells().len();
            println!(
                "running {} cells ({} encoders x {} schemes x {} seeds) with {} jobs",
                n_cells,
                cfg.encoders.len(),
                cfg.pe_schemes.len(),
                cfg.seeds.len(),
                cfg.jobs
            );
            let outcome = run_matrix(&cfg)?;
            println!(
                "{} records -> {}",
                outcome.records.len(),
                outcome.results_path.display()
            );
            println!("report -> {}", outcome.report_path.display());
            for (cell, err) in &outcome.failures {
                eprintln!("FAILED {cell}: {err}");
            }
            Ok(outcome.all_ok())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::from(0),
        Ok(false) => ExitCode::from(1),
        Err(CliError::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Other(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

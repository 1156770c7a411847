use std::path::PathBuf;
use std::process::ExitCode;

use asdkit::commands::{self, AblationAxis, AblationGrid, TrainOptions, Workspace};
use asdkit::encoder::FinetuneMode;
use asdkit::{AsdError, Result, RunConfig};
use clap::{Args, Parser, Subcommand};

/// Anomalous sound detection pipeline. All paths are relative to --workdir.
#[derive(Parser, Debug)]
#[command(name = "asdkit", version)]
struct Cli {
    #[arg(long, default_value = ".", global = true)]
    workdir: PathBuf,
    /// JSON run config; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// Seed for both corpus synthesis and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    tau2: Option<f64>,
    #[arg(long, global = true)]
    nq: Option<usize>,
    #[arg(long, global = true)]
    bank_size: Option<usize>,
    #[arg(long, global = true)]
    steps: Option<u64>,
    /// `full` trains everything; `lora` freezes the backbone.
    #[arg(long, global = true, value_parser = ["full", "lora"])]
    mode: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the effective config as JSON.
    Config,
    /// Render the synthetic corpus.
    GenData {
        #[arg(long)]
        force: bool,
    },
    /// Train the encoder and loss heads on the training split.
    Train {
        /// Start encoder weights from this checkpoint.
        #[arg(long)]
        init: Option<String>,
        #[arg(long)]
        resume: Option<String>,
        #[arg(long, default_value = commands::MODEL)]
        out: String,
    },
    /// Chunk embeddings for every clip.
    Embed {
        #[arg(long, default_value = commands::MODEL)]
        model: String,
        #[arg(long, default_value = commands::EMBEDDINGS)]
        out: String,
    },
    /// Build the KNN index from normal training embeddings.
    FitBackend {
        #[arg(long, default_value = commands::EMBEDDINGS)]
        embeddings: String,
        #[arg(long, default_value = commands::INDEX)]
        out: String,
    },
    /// Anomaly score per test clip.
    Score {
        #[arg(long, default_value = commands::INDEX)]
        index: String,
        #[arg(long, default_value = commands::EMBEDDINGS)]
        embeddings: String,
        #[arg(long, default_value = commands::SCORES)]
        out: String,
    },
    /// AUC, pAUC and hmean report from a score file.
    Eval {
        #[arg(long, default_value = commands::SCORES)]
        scores: String,
        /// Output prefix for .txt, .csv and .json.
        #[arg(long, default_value = commands::REPORT)]
        out: String,
    },
    /// Fold LoRA branches into the base weights.
    MergeLora {
        #[arg(long, default_value = commands::MODEL)]
        model: String,
        #[arg(long, default_value = "merged.ckpt")]
        out: String,
    },
    /// Mean group-adapter distribution per clip.
    InspectGroups {
        #[arg(long, default_value = commands::MODEL)]
        model: String,
        /// Adapter application index; the last one by default.
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, default_value = commands::GROUPS)]
        out: String,
    },
    /// Train and evaluate over a grid of settings.
    Ablate {
        /// Comma-separated: rank, branches, fully_connected, frozen,
        /// adapter_site, objective.
        #[arg(long, value_delimiter = ',', default_value = "rank,branches,fully_connected,frozen")]
        axes: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 4)]
        pl_clusters: usize,
        #[arg(long)]
        init: Option<String>,
        #[arg(long, default_value = commands::ABLATION)]
        out: String,
    },
    /// Every stage in order, generating the corpus if it is missing.
    Run,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let path = cli.workdir.join(p);
            if !path.exists() {
                return Err(AsdError::MissingArtifact(path));
            }
            RunConfig::load(&path)?
        }
        None => RunConfig::default(),
    };
    let o = &cli.overrides;
    if let Some(s) = o.seed {
        cfg.data.seed = s;
        cfg.training.seed = s;
    }
    if let Some(v) = o.lambda {
        cfg.losses.lambda = v;
    }
    if let Some(v) = o.tau2 {
        cfg.losses.tau2 = v;
    }
    if let Some(v) = o.nq {
        cfg.losses.n_q = v;
    }
    if let Some(v) = o.bank_size {
        cfg.losses.bank_size = v;
    }
    if let Some(v) = o.steps {
        cfg.training.steps = v;
    }
    if let Some(m) = &o.mode {
        cfg.fclora.frozen = m == "lora";
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let ws = Workspace::new(&cli.workdir);
    match &cli.cmd {
        Command::Config => println!("{}", serde_json::to_string_pretty(&cfg)?),
        Command::GenData { force } => print!("{}", commands::cmd_gen_data(&ws, &cfg, *force)?),
        Command::Train { init, resume, out } => {
            let mode = match cfg.mode() {
                FinetuneMode::Full => "full",
                FinetuneMode::Lora => "lora",
            };
            log::info!("training in {mode} mode for {} steps", cfg.training.steps);
            let opts = TrainOptions {
                init: init.clone(),
                resume: resume.clone(),
                out: Some(out.clone()),
            };
            let s = commands::cmd_train(&ws, &cfg, &opts)?;
            println!(
                "trained {} steps, loss {:.4} -> {:.4}, wrote {}",
                s.steps,
                s.first_loss.unwrap_or(f64::NAN),
                s.last_loss.unwrap_or(f64::NAN),
                s.checkpoint.display()
            );
        }
        Command::Embed { model, out } => {
            let n = commands::cmd_embed(&ws, &cfg, model, out)?;
            println!("embedded {n} clips into {out}");
        }
        Command::FitBackend { embeddings, out } => {
            let n = commands::cmd_fit_backend(&ws, &cfg, embeddings, out)?;
            println!("fitted {n} partitions into {out}");
        }
        Command::Score { index, embeddings, out } => {
            let n = commands::cmd_score(&ws, &cfg, index, embeddings, out)?;
            println!("scored {n} test clips into {out}");
        }
        Command::Eval { scores, out } => print!("{}", commands::cmd_eval(&ws, &cfg, scores, out)?.to_table()),
        Command::MergeLora { model, out } => {
            let s = commands::cmd_merge_lora(&ws, model, out)?;
            if s.sites == 0 {
                println!("no LoRA branches in {model}; nothing merged");
            } else {
                println!(
                    "merged {} sites, {} -> {} scalars, wrote {out}",
                    s.sites, s.scalars_before, s.scalars_after
                );
            }
        }
        Command::InspectGroups { model, layer, out } => {
            let n = commands::cmd_inspect_groups(&ws, &cfg, model, out, *layer)?;
            println!("wrote group distributions for {n} clips to {out}");
        }
        Command::Ablate {
            axes,
            seeds,
            pl_clusters,
            init,
            out,
        } => {
            let axes = axes
                .iter()
                .map(|a| AblationAxis::parse(a.trim()).map(|ax| (ax, ax.default_values())))
                .collect::<Result<Vec<_>>>()?;
            let grid = AblationGrid {
                axes,
                seeds: seeds.clone(),
                pl_clusters: *pl_clusters,
            };
            let rows = commands::cmd_ablate(&ws, &cfg, &grid, init.as_deref(), out)?;
            for r in rows {
                let v = r.score.map_or_else(|| r.status.clone(), |s| format!("{:.2}", s * 100.0));
                println!("{:<16} {:<14} seed {:<3} {v}", r.axis, r.value, r.seed);
            }
        }
        Command::Run => {
            if !ws.data_dir(&cfg).join("manifest.jsonl").exists() {
                print!("{}", commands::cmd_gen_data(&ws, &cfg, false)?);
            }
            commands::cmd_train(&ws, &cfg, &TrainOptions::default())?;
            commands::cmd_embed(&ws, &cfg, commands::MODEL, commands::EMBEDDINGS)?;
            commands::cmd_fit_backend(&ws, &cfg, commands::EMBEDDINGS, commands::INDEX)?;
            commands::cmd_score(&ws, &cfg, commands::INDEX, commands::EMBEDDINGS, commands::SCORES)?;
            print!("{}", commands::cmd_eval(&ws, &cfg, commands::SCORES, commands::REPORT)?.to_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

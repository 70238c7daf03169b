use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use facedup::dedup::DedupMode;
use facedup::pipeline::{cmd_apply, cmd_dedup, cmd_eval, cmd_report, cmd_scan, RunConfig};
use facedup::{Error, Result};

/// Duplicate detection and preservative deduplication for face image datasets.
#[derive(Parser, Debug)]
#[command(name = "facedup", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Dataset root as `ID=PATH` (repeatable).
    #[arg(long = "dataset", value_name = "ID=PATH", global = true)]
    datasets: Vec<String>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Feature sidecar (repeatable).
    #[arg(long = "sidecar", global = true)]
    sidecars: Vec<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    max_phash_distance: Option<u32>,
    #[arg(long, global = true)]
    t_fp: Option<f64>,
    #[arg(long, global = true)]
    t_assign: Option<f64>,
    #[arg(long, global = true)]
    t_margin: Option<f64>,
    /// Remove every duplicate instead of keeping representatives.
    #[arg(long, global = true)]
    full_removal: bool,
    #[arg(long, global = true)]
    no_cache: bool,
    /// Skip the aligned-crop variant.
    #[arg(long, global = true)]
    no_preprocessed: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Ingest datasets, hash images and find raw duplicate sets.
    Scan,
    /// Build the deduplication plan from the scan outputs.
    Dedup,
    /// Apply the plan to the manifest.
    Apply {
        /// Copy retained files into the output directory.
        #[arg(long)]
        materialize: bool,
    },
    /// Evaluate original, fully and preservatively deduplicated variants.
    Eval,
    /// Summarize the outputs of previous commands.
    Report,
    /// Scan, dedup and, when sidecars are configured, eval.
    Run,
    /// Print the effective configuration.
    Config,
}

fn config(common: &Common) -> Result<RunConfig> {
    let mut c = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for d in &common.datasets {
        let (id, path) = d
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--dataset expects ID=PATH, got {d:?}")))?;
        c.datasets.insert(id.to_owned(), PathBuf::from(path));
    }
    if let Some(o) = &common.output_dir {
        c.output_dir = o.clone();
    }
    c.sidecars.extend(common.sidecars.iter().cloned());
    if let Some(w) = common.workers {
        c.workers = w;
    }
    if let Some(s) = common.seed {
        c.eval.seed = s;
    }
    if let Some(d) = common.max_phash_distance {
        c.hash.max_phash_distance = d;
    }
    if let Some(t) = common.t_fp {
        c.dedup.t_fp = t;
    }
    if let Some(t) = common.t_assign {
        c.dedup.t_assign = t;
    }
    if let Some(t) = common.t_margin {
        c.dedup.t_margin = t;
    }
    if common.full_removal {
        c.dedup.mode = DedupMode::FullRemoval;
    }
    if common.no_cache {
        c.use_cache = false;
    }
    if common.no_preprocessed {
        c.variants.preprocessed = false;
    }
    c.validate()?;
    Ok(c)
}

fn run(cli: &Cli) -> Result<()> {
    let c = config(&cli.common)?;
    match &cli.command {
        Command::Scan => {
            let r = cmd_scan(&c)?;
            println!(
                "{} images, {} original and {} preprocessed duplicate sets",
                r.images, r.sets_original, r.sets_preprocessed
            );
        }
        Command::Dedup => {
            let p = cmd_dedup(&c)?;
            println!("{} removed, {} moved, {} kept", p.report.removed, p.report.moved, p.report.kept);
        }
        Command::Apply { materialize } => {
            let m = cmd_apply(&c, *materialize)?;
            println!("{} images retained", m.len());
        }
        Command::Eval => {
            cmd_eval(&c)?;
            print!("{}", cmd_report(&c)?);
        }
        Command::Report => print!("{}", cmd_report(&c)?),
        Command::Run => {
            cmd_scan(&c)?;
            cmd_dedup(&c)?;
            if !c.sidecars.is_empty() {
                cmd_eval(&c)?;
            }
            print!("{}", cmd_report(&c)?);
        }
        Command::Config => print!("{}", c.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

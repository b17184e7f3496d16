//! `deconf` command-line entry point.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use deconf_core::corpus::export_pool;
use deconf_core::delta::{save_importance, Normalization};
use deconf_core::mask::MaskType;
use deconf_core::sampler::{make_benchmark, write_manifest};
use deconf_harness::error::core_exit_code;
use deconf_harness::experiments::{load_pool, regenerate_row, run_to_csv, Experiment};
use deconf_harness::lab::GridPoint;
use deconf_harness::plan::ExperimentPlan;
use deconf_harness::Error;

#[derive(Parser)]
#[command(name = "deconf", version, about = "Confounder weight filtering experiments")]
struct Cli {
    #[command(flatten)]
    plan: PlanArgs,
    #[command(subcommand)]
    command: Command,
}

/// Plan file plus per-field overrides.
#[derive(Args)]
struct PlanArgs {
    /// Plan file (.toml or .json); defaults apply when omitted.
    #[arg(long, global = true)]
    plan: Option<PathBuf>,
    /// JSON-lines pool to sample from instead of generating one.
    #[arg(long, global = true)]
    pool: Option<PathBuf>,
    #[arg(long, global = true, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    /// Test α for every grid point (default: the reciprocal of the training α).
    #[arg(long, global = true)]
    alpha_test: Option<f64>,
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, global = true, value_delimiter = ',')]
    mask_pcts: Option<Vec<f64>>,
    #[arg(long, global = true, value_delimiter = ',')]
    k_grid: Option<Vec<f64>>,
    /// Any of M_I, M_D, M_union.
    #[arg(long, global = true, value_delimiter = ',')]
    mask_types: Option<Vec<MaskType>>,
    #[arg(long, global = true)]
    tradeoff_alpha: Option<f64>,
    /// per-batch-mean-abs, per-batch-frobenius or none.
    #[arg(long, global = true)]
    normalization: Option<Normalization>,
    #[arg(long, global = true)]
    threshold: Option<f64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic corpus commands.
    Corpus {
        #[command(subcommand)]
        action: CorpusAction,
    },
    /// Benchmark split commands.
    Bench {
        #[command(subcommand)]
        action: BenchAction,
    },
    /// Fine-tune the primary model of one grid point and save its artifacts.
    Train(Point),
    /// Extended Confounding Filter experiments.
    Ecf {
        #[command(subcommand)]
        action: EcfAction,
    },
    /// Dual Filter experiments.
    Df {
        #[command(subcommand)]
        action: DfAction,
    },
    /// AUPRC against ΔFPR for every method at the trade-off α.
    Tradeoff,
    /// Per-layer Jaccard overlap of primary and confounder updates.
    Entangle,
    /// Print the intact-model metrics of one grid point.
    Report {
        #[command(flatten)]
        point: Point,
        #[arg(long)]
        json: bool,
    },
    /// Recompute one recorded CSV row and check it byte for byte.
    Regenerate {
        /// ecf_probe, df_sweep, tradeoff or entanglement.
        experiment: Experiment,
        /// The data row exactly as it appears in the CSV.
        row: String,
    },
}

#[derive(Subcommand)]
enum CorpusAction {
    /// Write pool.jsonl, vocab.tsv and the corpus spec.
    Generate,
}

#[derive(Subcommand)]
enum BenchAction {
    /// Sample one benchmark and write its split manifests.
    Make(Point),
}

#[derive(Subcommand)]
enum EcfAction {
    /// Sweep unfreezing prefixes and masking ratios.
    Probe,
}

#[derive(Subcommand)]
enum DfAction {
    /// Sweep k for every mask type.
    Sweep,
}

#[derive(Args)]
struct Point {
    #[arg(long)]
    alpha: f64,
    #[arg(long)]
    seed: u64,
}

fn load_plan(args: &PlanArgs) -> anyhow::Result<ExperimentPlan> {
    let mut plan = match &args.plan {
        Some(path) => ExperimentPlan::load(path)?,
        None => ExperimentPlan::default(),
    };
    if let Some(v) = &args.pool {
        plan.pool_path = Some(v.clone());
    }
    if let Some(v) = &args.alphas {
        plan.alphas = v.clone();
    }
    if args.alpha_test.is_some() {
        plan.alpha_test = args.alpha_test;
    }
    if let Some(v) = &args.seeds {
        plan.seeds = v.clone();
    }
    if let Some(v) = &args.mask_pcts {
        plan.ecf_mask_pcts = v.clone();
    }
    if let Some(v) = &args.k_grid {
        plan.df_k_grid = v.clone();
    }
    if let Some(v) = &args.mask_types {
        plan.mask_types = v.clone();
    }
    if let Some(v) = args.tradeoff_alpha {
        plan.tradeoff_alpha = v;
    }
    if let Some(v) = args.normalization {
        plan.normalization = v;
    }
    if let Some(v) = args.threshold {
        plan.threshold = v;
    }
    if let Some(v) = args.workers {
        plan.workers = v;
    }
    if let Some(v) = &args.out {
        plan.output_dir = v.clone();
    }
    plan.validate()?;
    Ok(plan)
}

fn grid_dir(plan: &ExperimentPlan, alpha: f64, seed: u64) -> PathBuf {
    plan.output_dir.join(format!("alpha{alpha}_seed{seed}"))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn run_family(plan: &ExperimentPlan, experiment: Experiment) -> anyhow::Result<()> {
    let pool = load_pool(plan)?;
    let path = run_to_csv(plan, &pool, experiment)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let plan = load_plan(&cli.plan)?;
    match &cli.command {
        Command::Corpus { action: CorpusAction::Generate } => {
            let pool = deconf_core::corpus::generate_pool(&plan.corpus)?;
            create_dir(&plan.output_dir)?;
            export_pool(&plan.corpus, &pool, &plan.output_dir)?;
            println!("wrote {} examples to {}", pool.len(), plan.output_dir.display());
        }
        Command::Bench { action: BenchAction::Make(Point { alpha, seed }) } => {
            let pool = load_pool(&plan)?;
            let bench = make_benchmark(&pool, &plan.shift_for(*alpha, *seed))?;
            let dir = grid_dir(&plan, *alpha, *seed);
            create_dir(&dir)?;
            for split in bench.splits() {
                let path = dir.join(format!("{}_manifest.jsonl", split.name));
                let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
                write_manifest(&mut f, split)?;
                f.flush()?;
                println!("{}: {:?} (cells p0c0,p0c1,p1c0,p1c1)", split.name, split.cell_counts());
            }
            println!("manifest_hash {}", bench.manifest_hash());
        }
        Command::Train(Point { alpha, seed }) => {
            let pool = load_pool(&plan)?;
            let gp = GridPoint::prepare(&plan, &pool, *alpha, *seed)?;
            let dir = grid_dir(&plan, *alpha, *seed);
            create_dir(&dir)?;
            gp.primary.save(&dir.join("primary.ckpt.json"))?;
            save_importance(&gp.delta_p, &dir.join("delta_p.json"))?;
            std::fs::write(dir.join("history.csv"), gp.primary_history.to_csv())?;
            std::fs::write(dir.join("metrics.json"), gp.evaluate(&gp.primary)?.to_json()?)?;
            let p = gp.provenance();
            println!("checkpoint_hash {}\nmanifest_hash {}", p.checkpoint_hash, p.manifest_hash);
        }
        Command::Ecf { action: EcfAction::Probe } => run_family(&plan, Experiment::EcfProbe)?,
        Command::Df { action: DfAction::Sweep } => run_family(&plan, Experiment::DualFilter)?,
        Command::Tradeoff => run_family(&plan, Experiment::Tradeoff)?,
        Command::Entangle => run_family(&plan, Experiment::Entanglement)?,
        Command::Report { point: Point { alpha, seed }, json } => {
            let pool = load_pool(&plan)?;
            let gp = GridPoint::prepare(&plan, &pool, *alpha, *seed)?;
            let report = gp.evaluate(&gp.primary)?;
            if *json {
                println!("{}", report.to_json()?);
            } else {
                print!("{}", report.to_text());
            }
        }
        Command::Regenerate { experiment, row } => {
            let pool = load_pool(&plan)?;
            let line = regenerate_row(&plan, &pool, *experiment, row)?;
            print!("identical: {line}");
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<Error>() {
        return e.exit_code() as u8;
    }
    if let Some(e) = err.downcast_ref::<deconf_core::Error>() {
        return core_exit_code(e) as u8;
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return 3;
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

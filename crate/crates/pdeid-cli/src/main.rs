use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use pdeid_cli::config::ExperimentConfig;
use pdeid_cli::harness;
use std::fs;
use std::path::PathBuf;

/// Identify PDE parameters from snapshot pairs via Gaussian-process training.
#[derive(Parser)]
#[command(name = "pdeid", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a solution field and write it with a provenance sidecar.
    Generate(RunArgs),
    /// Train on one snapshot pair and print the identified equation.
    Identify(RunArgs),
    /// Sweep consecutive snapshot pairs across noise levels.
    SweepPairs(RunArgs),
    /// Sweep the snapshot gap at a fixed earlier snapshot.
    SweepDt(RunArgs),
    /// Aggregate run CSVs under a results directory into report tables.
    Report {
        /// Directory containing runs-*.csv and figure-*.csv files.
        #[arg(long)]
        results: PathBuf,
        /// Output directory for report files.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment config file (key = value lines with [section] headers).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config's training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for sweeps (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("reading config {}", args.config.display()))?;
    let mut cfg = ExperimentConfig::from_text(&text)?;
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.train_seed = seed;
    }
    Ok(cfg)
}

fn init_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate(args) => {
            init_threads(args.threads)?;
            let cfg = load_config(&args)?;
            let (data, meta) = harness::cmd_generate(&cfg)?;
            println!("wrote {}", data.display());
            println!("wrote {}", meta.display());
        }
        Command::Identify(args) => {
            init_threads(args.threads)?;
            let cfg = load_config(&args)?;
            let outcome = harness::cmd_identify(&cfg)?;
            println!("{}", outcome.equation);
            println!(
                "nlml = {:.6}, sigma2 = {:.3e}, converged = {}",
                outcome.record.nlml, outcome.record.sigma2, outcome.record.converged
            );
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
        }
        Command::SweepPairs(args) => {
            init_threads(args.threads)?;
            let cfg = load_config(&args)?;
            let table = harness::cmd_sweep_pairs(&cfg)?;
            print_table(&table);
        }
        Command::SweepDt(args) => {
            init_threads(args.threads)?;
            let cfg = load_config(&args)?;
            let table = harness::cmd_sweep_dt(&cfg)?;
            print_table(&table);
        }
        Command::Report { results, out, threads } => {
            init_threads(threads)?;
            for f in harness::cmd_report(&results, &out)? {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn print_table(table: &harness::ResultTable) {
    println!(
        "family = {}, true parameters = {:?}",
        table.family.name(),
        table.true_lambda
    );
    for row in &table.rows {
        let cells: Vec<String> = row
            .cells
            .iter()
            .map(|c| match c {
                Some(s) => format!("[{:.4}, {:.4}, {:.4}]", s.q1, s.median, s.q3),
                None => "[missing]".to_string(),
            })
            .collect();
        println!(
            "{} = {:<8} n = {:<4} {}",
            table.row_label,
            format!("{:.4}", row.label),
            row.n_runs,
            cells.join(" ")
        );
    }
}

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fedstyle_cli::config::{self, Axis};
use fedstyle_cli::{compare, runner};
use fedstyle_core::clustering::cluster_accuracy;
use fedstyle_core::experiment::ExperimentConfig;
use fedstyle_core::federation::cluster_clients;
use fedstyle_core::synthdata::export_world;

/// Federated source-free segmentation experiments on synthetic worlds.
#[derive(Parser)]
#[command(name = "fedstyle", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config (or a summary.json to rerun); defaults apply otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seed list, overriding the config.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Output directory.
    #[arg(long, default_value = "fedstyle-out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment, one run per seed.
    Run {
        #[command(flatten)]
        common: Common,
        /// Ablation axis `KEY=V1,V2,...`; repeat for a cartesian product.
        #[arg(long)]
        ablate: Vec<Axis>,
    },
    /// Tabulate two or more finished runs.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "fedstyle-compare")]
        out: PathBuf,
    },
    /// Export the synthetic world of the first seed as flat files.
    GenWorld {
        #[command(flatten)]
        common: Common,
    },
    /// Cluster the clients of the first seed's world by style.
    Cluster {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => config::load(p)?,
        None => ExperimentConfig::default(),
    };
    if !common.seed.is_empty() {
        cfg.seeds = common.seed.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("FEDSTYLE_THREADS") {
        let n: usize = v.parse().with_context(|| format!("FEDSTYLE_THREADS={v} is not a count"))?;
        if n == 0 {
            bail!("FEDSTYLE_THREADS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(common: &Common, axes: &[Axis]) -> Result<()> {
    let cfg = load(common)?;
    if axes.is_empty() {
        let s = runner::run_experiment(&cfg, &common.out)?;
        println!(
            "mIoU {:.4} ± {:.4} over seeds (last-rounds std {:.4}) -> {}",
            s.summary.miou_mean_over_seeds,
            s.summary.miou_std_over_seeds,
            s.summary.miou_std_over_last_rounds,
            common.out.display()
        );
        return Ok(());
    }
    for (label, variant) in config::expand(&cfg, axes)? {
        let dir = common.out.join(&label);
        let s = runner::run_experiment(&variant, &dir)?;
        println!(
            "{label}: mIoU {:.4} ± {:.4} over seeds (last-rounds std {:.4})",
            s.summary.miou_mean_over_seeds, s.summary.miou_std_over_seeds, s.summary.miou_std_over_last_rounds
        );
    }
    Ok(())
}

fn gen_world(common: &Common) -> Result<()> {
    let cfg = load(common)?;
    let world = cfg.world_for(cfg.seeds[0])?;
    export_world(&world, &common.out)?;
    println!(
        "{} clients, {} client images, {} test images -> {}",
        world.clients.len(),
        world.total_client_images(),
        world.test.len(),
        common.out.display()
    );
    Ok(())
}

fn cluster(common: &Common) -> Result<()> {
    let cfg = load(common)?;
    let seed = cfg.seeds[0];
    let world = cfg.world_for(seed)?;
    let mut fed = cfg.effective(seed);
    fed.clustering = true;
    let c = cluster_clients(&world.clients, &fed)?;
    std::fs::create_dir_all(&common.out)?;
    let path = common.out.join("partition.json");
    let export = c.partition.to_export(c.selection_range, c.selection_seeds.clone());
    std::fs::write(&path, serde_json::to_string_pretty(&export)? + "\n")?;
    let truth = world.clients.iter().map(|k| (k.id, k.domain)).collect();
    println!(
        "{} clusters, silhouette {:.4}, agreement with planted domains {:.3} -> {}",
        c.partition.num_clusters(),
        c.partition.silhouette(),
        cluster_accuracy(&c.partition, &truth)?,
        path.display()
    );
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    configure_threads()?;
    match &cli.command {
        Command::Run { common, ablate } => run(common, ablate),
        Command::Compare { runs, out } => {
            let rows = compare::compare(runs, out)?;
            for r in &rows {
                println!("{:40} {:.4} ± {:.4} ({:+.4})", r.run, r.miou_mean_over_seeds, r.miou_std_over_seeds, r.delta_vs_first);
            }
            println!("-> {}", Path::new(out).display());
            Ok(())
        }
        Command::GenWorld { common } => gen_world(common),
        Command::Cluster { common } => cluster(common),
    }
}

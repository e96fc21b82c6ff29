//! Command-line entry points: run experiments, evaluate checkpoints, emit
//! trigger artifacts, and inspect partitions.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use fedsim::config::parse_config;
use fedsim::data::dirichlet_partition;
use fedsim::defense::{mask_gen_client, merge_masks, pattern_gen_client, MaskGenParams};
use fedsim::error::Result;
use fedsim::io::{
    load_checkpoint, save_checkpoint, save_trigger, write_manifest, write_metrics_csv, RunManifest,
};
use fedsim::orchestrator::{build_attack, build_datasets, evaluate, run_experiment};
use fedsim::seed::{self, domain};
use fedsim::attack::build_triggered_testset;

/// Environment variable overriding the default output directory.
const OUT_DIR_ENV: &str = "FEDSIM_OUT_DIR";

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Federated backdoor attack/defense simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full experiment: writes metrics CSV, manifest, and checkpoint.
    Run {
        config: PathBuf,
        /// Output directory (flag > FEDSIM_OUT_DIR > current directory).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Report clean accuracy and backdoor success rate of a checkpoint.
    Evaluate { checkpoint: PathBuf, config: PathBuf },
    /// Debug: reverse-engineer a trigger from a checkpoint and save it.
    GenTrigger {
        checkpoint: PathBuf,
        config: PathBuf,
        /// Client whose pattern is stored in the artifact.
        #[arg(long, default_value_t = 0)]
        client: u32,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Emit per-client label histograms of the configured partition as CSV.
    Partition {
        config: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn cmd_run(config_path: &Path, dir: PathBuf) -> Result<()> {
    let cfg = parse_config(config_path)?;
    std::fs::create_dir_all(&dir)?;
    let started_at = timestamp();
    let (model, records, summary) = run_experiment(cfg.clone())?;
    let finished_at = timestamp();

    let metrics_path = dir.join("metrics.csv");
    write_metrics_csv(&records, &metrics_path)?;
    let ckpt_path = dir.join("model.ckpt");
    save_checkpoint(&model, &ckpt_path)?;
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        started_at,
        finished_at,
        config: cfg,
        summary,
    };
    write_manifest(&manifest, dir.join("manifest.json"))?;

    match summary {
        Some(s) => println!(
            "rounds={} ABSR={:.6} BBSR={:.6} ACC={:.6}",
            records.len(),
            s.absr,
            s.bbsr,
            s.acc
        ),
        None => println!("rounds=0 (no summary)"),
    }
    println!("wrote {}", metrics_path.display());
    Ok(())
}

fn cmd_evaluate(checkpoint: &Path, config_path: &Path) -> Result<()> {
    let cfg = parse_config(config_path)?;
    let model = load_checkpoint(checkpoint)?;
    let (train, clean_test) = build_datasets(&cfg)?;
    let attack = build_attack(&cfg, &train)?;
    let triggered = build_triggered_testset(&clean_test, &attack)?;
    let (acc, bsr) = evaluate(&model, &clean_test, &triggered, attack.target_label)?;
    println!("ACC={:.6} BSR={:.6}", acc, bsr);
    Ok(())
}

fn cmd_gen_trigger(checkpoint: &Path, config_path: &Path, client: u32, dir: PathBuf) -> Result<()> {
    let cfg = parse_config(config_path)?;
    let model = load_checkpoint(checkpoint)?;
    let (train, _) = build_datasets(&cfg)?;
    let mut partition_rng = seed::rng_from(seed::derive(cfg.seed, domain::PARTITION, &[]));
    let partition = dirichlet_partition(&train, cfg.n_clients, cfg.partition_h, &mut partition_rng)?;
    if client as usize >= cfg.n_clients {
        return Err(fedsim::SimError::InvalidArgument {
            op: "gen-trigger",
            detail: format!("client {} out of range for {} clients", client, cfg.n_clients),
        });
    }

    let params = MaskGenParams {
        epochs: cfg.mask_epochs,
        lr: cfg.mask_lr,
        acc_threshold: cfg.acc_threshold,
        lambda: cfg.lambda,
        num_classes: train.num_classes(),
        batch_size: cfg.batch_size,
    };
    let shards: Vec<_> = (0..cfg.n_clients)
        .map(|i| train.subset(partition.client_indices(i)))
        .collect::<Result<_>>()?;
    let masks: Vec<_> = shards
        .iter()
        .enumerate()
        .map(|(i, shard)| {
            let mut rng = seed::rng_from(seed::derive(cfg.seed, domain::MASK_GEN, &[i as u64]));
            mask_gen_client(&model, shard, &params, &mut rng)
        })
        .collect::<Result<_>>()?;
    let merged = merge_masks(&masks)?;
    let mut rng = seed::rng_from(seed::derive(cfg.seed, domain::PATTERN_GEN, &[client as u64]));
    let pattern = pattern_gen_client(
        &model,
        &merged,
        &shards[client as usize],
        cfg.pattern_epochs,
        cfg.pattern_lr,
        cfg.batch_size,
        &mut rng,
    )?;

    std::fs::create_dir_all(&dir)?;
    let path = dir.join("trigger.bin");
    save_trigger(&merged, &pattern, cfg.t_s, client, &path)?;
    let distance = merged.l1_norm().scalar_value()?;
    println!("mask_l1={:.6} wrote {}", distance, path.display());
    Ok(())
}

fn cmd_partition(config_path: &Path, dir: PathBuf) -> Result<()> {
    let cfg = parse_config(config_path)?;
    let (train, _) = build_datasets(&cfg)?;
    let mut partition_rng = seed::rng_from(seed::derive(cfg.seed, domain::PARTITION, &[]));
    let partition = dirichlet_partition(&train, cfg.n_clients, cfg.partition_h, &mut partition_rng)?;

    std::fs::create_dir_all(&dir)?;
    let path = dir.join("partition.csv");
    let mut out = String::from("client_id");
    for c in 0..train.num_classes() {
        out.push_str(&format!(",class_{}", c));
    }
    out.push('\n');
    for client in 0..cfg.n_clients {
        out.push_str(&client.to_string());
        for count in partition.label_histogram(&train, client) {
            out.push_str(&format!(",{}", count));
        }
        out.push('\n');
    }
    std::fs::write(&path, out)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { config, out_dir: flag } => cmd_run(&config, out_dir(flag)),
        Command::Evaluate { checkpoint, config } => cmd_evaluate(&checkpoint, &config),
        Command::GenTrigger { checkpoint, config, client, out_dir: flag } => {
            cmd_gen_trigger(&checkpoint, &config, client, out_dir(flag))
        }
        Command::Partition { config, out_dir: flag } => cmd_partition(&config, out_dir(flag)),
    };
    if let Err(err) = outcome {
        eprintln!("error: {}", err);
        std::process::exit(1);
    }
}

//! Command-line interface: generate / train / evaluate / ablate / heatmap.
//!
//! Exit codes: 0 success, 2 usage or config-schema error, 3 data error,
//! 4 divergence.

mod config;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use config::{config_hash, load_with_overrides, write_stamp, RunConfig};
use phymotion::error::Error as PhyError;
use phymotion::eval::{
    binary_accuracy, copy_last_baseline, evaluate, prediction_heatmap, rollout_mse,
    run_ablation, RunStamp,
};
use phymotion::model::build_model;
use phymotion::nn::load_checkpoint;
use phymotion::sim::{generate_dataset, Dataset, DatasetSpec, MotionClass, Split};
use phymotion::train::train;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "phymotion",
    version,
    about = "Synthetic-motion dataset generation, disentangled motion/appearance training with latent-ODE prediction, and evaluation"
)]
struct Cli {
    /// Worker threads for data generation and evaluation (1 is the
    /// reproducibility reference; training is always single-threaded).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonConfig {
    /// Run-config JSON file (defaults apply when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key: --set train.lambda=0.5 --set model.d_z=16
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset directory from a generation-spec JSON file.
    Generate {
        /// DatasetSpec JSON file (defaults apply when omitted).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Override a spec key: --set episodes_per_class=50
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Train one model; writes checkpoints, metrics.jsonl, and a summary.
    Train {
        #[command(flatten)]
        common: CommonConfig,
        /// Convenience override for train.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a held-out split.
    Evaluate {
        #[command(flatten)]
        common: CommonConfig,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Report file (defaults to <out_dir>/report.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the four-arm loss ablation and write the comparison table.
    Ablate {
        #[command(flatten)]
        common: CommonConfig,
    },
    /// Prediction-similarity heatmap from a context prefix.
    Heatmap {
        #[command(flatten)]
        common: CommonConfig,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 9)]
        context: usize,
        #[arg(long, default_value_t = 3)]
        horizon: usize,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also report rollout MSE against the copy-last baseline.
        #[arg(long, default_value_t = false)]
        baseline: bool,
    },
}

fn parse_split(name: &str) -> Result<Split> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(anyhow!("unknown split {other:?} (expected train, val, or test)")),
    }
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<PhyError>() {
            return match e {
                PhyError::Divergence { .. } => 4,
                PhyError::Param(_) | PhyError::Contract(_) | PhyError::Json(_) => 2,
                _ => 3,
            };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return 2;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    if err.to_string().contains("config schema") || err.to_string().contains("override") {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(2);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .ok();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate { spec, seed, out, sets } => cmd_generate(spec, seed, out, sets),
        Command::Train { common, seed } => cmd_train(common, seed),
        Command::Evaluate { common, checkpoint, split, out } => {
            cmd_evaluate(common, checkpoint, &split, out)
        }
        Command::Ablate { common } => cmd_ablate(common),
        Command::Heatmap { common, checkpoint, context, horizon, split, baseline } => {
            cmd_heatmap(common, checkpoint, context, horizon, &split, baseline)
        }
    }
}

fn cmd_generate(
    spec_path: Option<PathBuf>,
    seed: u64,
    out: PathBuf,
    sets: Vec<String>,
) -> Result<()> {
    let spec: DatasetSpec = load_with_overrides(spec_path.as_deref(), &sets)?;
    spec.validate().map_err(|e| anyhow!(e))?;
    let manifest = generate_dataset(&spec, seed, &out).map_err(|e| anyhow!(e))?;
    let hash = write_stamp(&out, seed, &spec)?;
    let dataset = Dataset::load(&out).map_err(|e| anyhow!(e))?;
    println!(
        "generated {} episodes ({} per class) into {}",
        manifest.episodes.len(),
        spec.episodes_per_class,
        out.display()
    );
    println!("config hash {hash}");
    println!("manifest hash {}", dataset.manifest_hash().map_err(|e| anyhow!(e))?);
    Ok(())
}

fn load_run_config(common: &CommonConfig) -> Result<RunConfig> {
    let rc: RunConfig = load_with_overrides(common.config.as_deref(), &common.sets)?;
    rc.validate()?;
    Ok(rc)
}

fn cmd_train(common: CommonConfig, seed: Option<u64>) -> Result<()> {
    let mut rc = load_run_config(&common)?;
    if let Some(s) = seed {
        rc.train.seed = s;
    }
    let dataset = Dataset::load(&rc.dataset_dir)
        .with_context(|| format!("loading dataset from {}", rc.dataset_dir.display()))?;
    let hash = write_stamp(&rc.out_dir, rc.train.seed, &rc)?;
    let outcome = train(&dataset, &rc.model, &rc.train, &rc.out_dir).map_err(|e| anyhow!(e))?;
    let s = &outcome.summary;
    println!(
        "trained {} steps over {} epochs ({} parameters), config hash {hash}",
        s.steps, s.epochs, s.param_count
    );
    println!(
        "final loss: task {:.6} phys {:.6} app {:.6} total {:.6}",
        s.final_loss.l_task, s.final_loss.l_phys, s.final_loss.l_app, s.final_loss.total
    );
    println!(
        "best val accuracy {:.2}% at epoch {}; checkpoints: {} / {}",
        100.0 * s.best_val_accuracy,
        s.best_epoch,
        s.best_checkpoint.display(),
        s.final_checkpoint.display()
    );
    Ok(())
}

fn build_from_checkpoint(
    rc: &RunConfig,
    checkpoint: &PathBuf,
) -> Result<(phymotion::model::DualBranchModel, phymotion::nn::ParamSet<f32>)> {
    let mut model_config = rc.model.clone();
    model_config.n_pred = rc.train.n_pred;
    let (model, mut ps) =
        build_model::<f32>(&model_config, rc.train.seed).map_err(|e| anyhow!(e))?;
    load_checkpoint(checkpoint, &mut ps)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    Ok((model, ps))
}

fn cmd_evaluate(
    common: CommonConfig,
    checkpoint: PathBuf,
    split: &str,
    out: Option<PathBuf>,
) -> Result<()> {
    let rc = load_run_config(&common)?;
    let split = parse_split(split)?;
    let dataset = Dataset::load(&rc.dataset_dir).map_err(|e| anyhow!(e))?;
    let (model, ps) = build_from_checkpoint(&rc, &checkpoint)?;
    let stamp = RunStamp {
        seed: rc.train.seed,
        config_hash: config_hash(&rc)?,
        checkpoint: checkpoint.display().to_string(),
    };
    let report = evaluate(&model, &ps, &dataset, split, stamp).map_err(|e| anyhow!(e))?;
    let path = out.unwrap_or_else(|| rc.out_dir.join("report.json"));
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    std::fs::write(&path, json)?;
    println!("split {}: average accuracy {:.2}%", report.split.name(), report.average_accuracy);
    for (i, class) in MotionClass::ALL.iter().enumerate() {
        println!("  {:<12} {:.2}%", class.name(), report.per_class_accuracy[i]);
    }
    println!("report written to {}", path.display());

    let acc_dec = binary_accuracy(
        &model,
        &ps,
        &dataset,
        split,
        MotionClass::Accelerated,
        MotionClass::Decelerated,
    )
    .map_err(|e| anyhow!(e))?;
    println!("accelerated-vs-decelerated binary accuracy {:.2}%", 100.0 * acc_dec);
    Ok(())
}

fn cmd_ablate(common: CommonConfig) -> Result<()> {
    let rc = load_run_config(&common)?;
    let dataset = Dataset::load(&rc.dataset_dir).map_err(|e| anyhow!(e))?;
    let hash = write_stamp(&rc.out_dir, rc.train.seed, &rc)?;
    let outcome =
        run_ablation(&dataset, &rc.model, &rc.train, &rc.out_dir).map_err(|e| anyhow!(e))?;
    let mut json = serde_json::to_string_pretty(&outcome)?;
    json.push('\n');
    std::fs::write(rc.out_dir.join("ablation.json"), json)?;
    std::fs::write(rc.out_dir.join("ablation_table.txt"), outcome.render_table())?;
    std::fs::write(rc.out_dir.join("ablation_table.csv"), outcome.render_csv())?;
    println!("dataset hash {}, config hash {hash}", outcome.dataset_hash);
    print!("{}", outcome.render_table());
    println!("reports written to {}", rc.out_dir.display());
    Ok(())
}

fn cmd_heatmap(
    common: CommonConfig,
    checkpoint: PathBuf,
    context: usize,
    horizon: usize,
    split: &str,
    baseline: bool,
) -> Result<()> {
    let rc = load_run_config(&common)?;
    let split = parse_split(split)?;
    let dataset = Dataset::load(&rc.dataset_dir).map_err(|e| anyhow!(e))?;
    let (model, ps) = build_from_checkpoint(&rc, &checkpoint)?;
    let hm = prediction_heatmap(&model, &ps, &dataset, split, context, horizon)
        .map_err(|e| anyhow!(e))?;
    std::fs::create_dir_all(&rc.out_dir)?;
    let mut json = serde_json::to_string_pretty(&hm)?;
    json.push('\n');
    std::fs::write(rc.out_dir.join("heatmap.json"), json)?;
    std::fs::write(rc.out_dir.join("heatmap.csv"), hm.render_csv())?;
    std::fs::write(rc.out_dir.join("heatmap.pgm"), hm.render_pgm())?;
    println!(
        "heatmap over {} episode(s) ({} skipped as too short): {} rows x {} cols",
        hm.episodes_used, hm.episodes_skipped, hm.rows, hm.cols
    );
    for r in 0..hm.rows {
        let m = hm.matching_col(r);
        let row_mean: f64 = (0..hm.cols).map(|c| hm.get(r, c)).sum::<f64>() / hm.cols as f64;
        println!(
            "  predicted step {}: matching-column similarity {:.4}, row mean {:.4}, margin {:.4}",
            r + 1,
            hm.get(r, m),
            row_mean,
            hm.get(r, m) - row_mean
        );
    }
    if baseline {
        let base =
            copy_last_baseline(&model, &ps, &dataset, split, horizon).map_err(|e| anyhow!(e))?;
        let roll = rollout_mse(&model, &ps, &dataset, split, horizon).map_err(|e| anyhow!(e))?;
        println!("rollout MSE vs copy-last baseline (per class):");
        for (i, class) in MotionClass::ALL.iter().enumerate() {
            let ratio = if base.per_class[i] > 0.0 {
                roll.per_class[i] / base.per_class[i]
            } else {
                f64::NAN
            };
            println!(
                "  {:<12} rollout {:.6} baseline {:.6} ratio {:.3}",
                class.name(),
                roll.per_class[i],
                base.per_class[i],
                ratio
            );
        }
    }
    println!("heatmap files written to {}", rc.out_dir.display());
    Ok(())
}

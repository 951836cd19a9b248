//! Experiment CLI: synthetic data generation, training, evaluation,
//! gradient checking, scan benchmarking, and hyperparameter sweeps.
//!
//! Exit codes: 0 success, 1 usage/input error, 2 numerical abort.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hyperssm_cli::bench::{bench_scan, BenchSettings};
use hyperssm_cli::config::{load_config, RunConfig};
use hyperssm_cli::error::CliResult;
use hyperssm_cli::gradcheck_cmd;
use hyperssm_cli::metrics::write_summary_csv;
use hyperssm_cli::sweep::{sweep_blocks, sweep_curvature};
use hyperssm_cli::train::{evaluate, train_loop};
use hyperssm_core::data::{
    generate_synthetic_dataset, load_manifest, DatasetManifest, SyntheticSpec,
};
use hyperssm_core::model::{count_params, load_checkpoint};

#[derive(Parser)]
#[command(
    name = "hyperssm",
    about = "Hyperbolic-alignment selective state-space model: training and experiments",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML config file with [model] and [train] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in preset: `default` or `desk`. Ignored when --config is given.
    #[arg(long)]
    preset: Option<String>,
    /// Override: hidden width.
    #[arg(long)]
    hidden: Option<usize>,
    /// Override: sequence blocks per modality.
    #[arg(long)]
    blocks: Option<usize>,
    /// Override: dropout rate.
    #[arg(long)]
    dropout: Option<f64>,
    /// Override: initial curvature (negative).
    #[arg(long, allow_hyphen_values = true)]
    k0: Option<f64>,
    /// Override: learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Override: batch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Override: number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override: stop after this many optimizer steps (cycles epochs).
    #[arg(long)]
    steps: Option<usize>,
    /// Override: metric emission interval in steps.
    #[arg(long)]
    log_every: Option<usize>,
}

impl ConfigArgs {
    /// Precedence: flag overrides > config file > preset > defaults.
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = if let Some(path) = &self.config {
            load_config(Some(path))?
        } else {
            let mut base = RunConfig::default();
            if let Some(preset) = &self.preset {
                base.apply_preset(preset)?;
            }
            base
        };
        if let Some(v) = self.hidden {
            cfg.model.hidden = v;
        }
        if let Some(v) = self.blocks {
            cfg.model.blocks = v;
        }
        if let Some(v) = self.dropout {
            cfg.model.dropout = v;
        }
        if let Some(v) = self.k0 {
            cfg.model.k0 = v;
        }
        if let Some(v) = self.lr {
            cfg.train.lr = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if self.steps.is_some() {
            cfg.train.max_steps = self.steps;
        }
        if let Some(v) = self.log_every {
            cfg.train.log_every = v;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generates a synthetic dataset (and optionally a held-out split).
    GenData {
        /// Output directory (manifest.txt plus samples/).
        #[arg(long)]
        out: PathBuf,
        /// Training samples listed in manifest.txt.
        #[arg(long, default_value_t = 64)]
        samples: usize,
        /// Extra held-out samples listed in manifest_eval.txt.
        #[arg(long, default_value_t = 0)]
        eval_samples: usize,
        #[arg(long, default_value_t = 8)]
        t_steps: usize,
        #[arg(long, default_value_t = 32)]
        d_audio: usize,
        #[arg(long, default_value_t = 32)]
        d_visual: usize,
        #[arg(long, default_value_t = 16)]
        d_question: usize,
        #[arg(long, default_value_t = 6)]
        vocab: usize,
        #[arg(long, default_value_t = 4)]
        parents: usize,
        #[arg(long, default_value_t = 8)]
        children: usize,
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Trains a model on a dataset manifest.
    Train {
        /// Path to the dataset manifest file.
        #[arg(long)]
        data: PathBuf,
        /// RNG seed for initialization, shuffling, and dropout.
        #[arg(long)]
        seed: u64,
        /// Run directory for metrics.jsonl and checkpoint/.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Optional held-out manifest evaluated at the end of training.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluates a checkpoint on a dataset manifest.
    Eval {
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
    },
    /// Finite-difference verification of gradients.
    Gradcheck {
        /// `ops`, `model`, or `all`.
        #[arg(long, default_value = "all")]
        level: String,
    },
    /// Times the chunked selective scan across sequence lengths.
    BenchScan {
        /// Comma-separated sequence lengths.
        #[arg(long, value_delimiter = ',', default_value = "1024,4096")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 32)]
        channels: usize,
        #[arg(long, default_value_t = 16)]
        state: usize,
        #[arg(long, default_value_t = 64)]
        chunk: usize,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Trains one model per initial-curvature value and tabulates accuracy.
    SweepCurvature {
        #[arg(
            long,
            value_delimiter = ',',
            allow_hyphen_values = true,
            default_value = "-0.05,-0.1,-0.5,-1.0"
        )]
        k0s: Vec<f64>,
        #[arg(long)]
        data: PathBuf,
        /// Held-out manifest for the reported accuracy (defaults to --data).
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        /// CSV output path.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Trains one model per block count and tabulates accuracy.
    SweepBlocks {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,4")]
        blocks: Vec<usize>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn load_data(path: &std::path::Path) -> CliResult<DatasetManifest> {
    Ok(load_manifest(path)?)
}

fn run(cmd: Cmd) -> CliResult<()> {
    match cmd {
        Cmd::GenData {
            out,
            samples,
            eval_samples,
            t_steps,
            d_audio,
            d_visual,
            d_question,
            vocab,
            parents,
            children,
            noise,
            seed,
        } => {
            let spec = SyntheticSpec {
                n_samples: samples + eval_samples,
                t_steps,
                d_audio,
                d_visual,
                d_question,
                vocab_size: vocab,
                n_parent_classes: parents,
                n_child_classes: children,
                noise_std: noise,
                seed,
            };
            let manifest = generate_synthetic_dataset(&spec, &out)?;
            if eval_samples > 0 {
                let (train_half, eval_half) = manifest.split(samples)?;
                train_half.write("manifest.txt")?;
                eval_half.write("manifest_eval.txt")?;
                println!(
                    "wrote {} train + {} eval samples under {}",
                    train_half.len(),
                    eval_half.len(),
                    out.display()
                );
            } else {
                println!("wrote {} samples under {}", manifest.len(), out.display());
            }
            Ok(())
        }
        Cmd::Train {
            data,
            seed,
            out,
            eval_data,
            config,
        } => {
            let manifest = load_data(&data)?;
            let run_cfg = config.resolve()?;
            let model_cfg = run_cfg.model.to_model_config(&manifest.spec);
            let eval_manifest = eval_data.as_deref().map(load_data).transpose()?;
            let metrics_path = out.as_ref().map(|d| d.join("metrics.jsonl"));
            let ckpt_dir = out.as_ref().map(|d| d.join("checkpoint"));
            let outcome = train_loop(
                &manifest,
                model_cfg,
                &run_cfg.train,
                seed,
                metrics_path.as_deref(),
                ckpt_dir.as_deref(),
                eval_manifest.as_ref(),
            )?;
            if let Some(last) = outcome.records.last() {
                println!(
                    "finished step {}: total {:.6} (align {:.6}, qa {:.6}), train acc {:.4}, k {:.6}",
                    last.step, last.total, last.l_align, last.l_qa, last.train_acc, last.k
                );
            }
            if let Some(acc) = outcome.final_eval_acc {
                println!("eval accuracy {acc:.4}");
            }
            if let Some(dir) = &out {
                println!("artifacts under {}", dir.display());
            }
            Ok(())
        }
        Cmd::Eval {
            checkpoint,
            data,
            batch_size,
        } => {
            let (model, _seed) = load_checkpoint::<f64>(&checkpoint)?;
            let manifest = load_data(&data)?;
            let report = evaluate(&model, &manifest, batch_size)?;
            println!(
                "overall accuracy {:.4} over {} samples",
                report.overall,
                manifest.len()
            );
            for (qtype, acc, count) in &report.by_query_type {
                println!("  query type {qtype}: accuracy {acc:.4} ({count} samples)");
            }
            Ok(())
        }
        Cmd::Gradcheck { level } => gradcheck_cmd::run(&level),
        Cmd::BenchScan {
            lengths,
            trials,
            batch,
            channels,
            state,
            chunk,
            csv,
        } => {
            let settings = BenchSettings {
                batch,
                channels,
                state,
                chunk,
                trials,
            };
            let rows = bench_scan(&lengths, &settings)?;
            println!("{:>8}  {:>12}  {:>8}", "length", "median_ms", "ratio");
            let mut csv_rows = Vec::new();
            for r in &rows {
                let ratio = r.ratio.map_or(String::new(), |v| format!("{v:.3}"));
                println!("{:>8}  {:>12.3}  {:>8}", r.length, r.median_ms, ratio);
                csv_rows.push(vec![
                    r.length.to_string(),
                    format!("{:.6}", r.median_ms),
                    ratio,
                ]);
            }
            if let Some(path) = csv {
                write_summary_csv(&path, &["length", "median_ms", "ratio"], &csv_rows)?;
            }
            Ok(())
        }
        Cmd::SweepCurvature {
            k0s,
            data,
            eval_data,
            seed,
            out,
            config,
        } => {
            let manifest = load_data(&data)?;
            let eval_manifest = match &eval_data {
                Some(p) => load_data(p)?,
                None => manifest.clone(),
            };
            let run_cfg = config.resolve()?;
            let base = run_cfg.model.to_model_config(&manifest.spec);
            let rows = sweep_curvature(&k0s, &base, &run_cfg.train, &manifest, &eval_manifest, seed)?;
            println!("{:>10}  {:>9}", "k0", "eval_acc");
            let mut csv_rows = Vec::new();
            for r in &rows {
                println!("{:>10}  {:>9.4}", r.k0, r.eval_acc);
                csv_rows.push(vec![r.k0.to_string(), format!("{:.6}", r.eval_acc)]);
            }
            if let Some(path) = out {
                write_summary_csv(&path, &["k0", "eval_acc"], &csv_rows)?;
            }
            Ok(())
        }
        Cmd::SweepBlocks {
            blocks,
            data,
            eval_data,
            seed,
            out,
            config,
        } => {
            let manifest = load_data(&data)?;
            let eval_manifest = match &eval_data {
                Some(p) => load_data(p)?,
                None => manifest.clone(),
            };
            let run_cfg = config.resolve()?;
            let base = run_cfg.model.to_model_config(&manifest.spec);
            let rows = sweep_blocks(&blocks, &base, &run_cfg.train, &manifest, &eval_manifest, seed)?;
            println!("{:>8}  {:>9}  {:>10}", "blocks", "eval_acc", "params");
            let mut csv_rows = Vec::new();
            for r in &rows {
                let mut cfg = base.clone();
                cfg.n_blocks = r.n_blocks;
                debug_assert_eq!(count_params(&cfg).total, r.param_count);
                println!("{:>8}  {:>9.4}  {:>10}", r.n_blocks, r.eval_acc, r.param_count);
                csv_rows.push(vec![
                    r.n_blocks.to_string(),
                    format!("{:.6}", r.eval_acc),
                    r.param_count.to_string(),
                ]);
            }
            if let Some(path) = out {
                write_summary_csv(&path, &["blocks", "eval_acc", "params"], &csv_rows)?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests succeed; everything else is a
            // usage error (exit code 1, not clap's default 2).
            use clap::error::ErrorKind;
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if ok { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

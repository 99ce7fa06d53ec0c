use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use poolnet::audit::audit_params;
use poolnet::checkpoint::Checkpoint;
use poolnet::config::{DatasetKind, TrainConfig, DATA_ROOT_ENV};
use poolnet::data::{balanced_subset, load_cifar10, synth_dataset};
use poolnet::gradcheck::{check_named, DEFAULT_TOLERANCE, SUITE};
use poolnet::layers::Layer;
use poolnet::perceptron::{complexity_probe, fit_loglog_slope, PerceptronPool, PerceptronSpec};
use poolnet::train::{evaluate, train_runs};

#[derive(Parser)]
#[command(
    name = "poolnet",
    version,
    about = "Train and inspect networks with learnable pooling layers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model described by a TOML configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Repeat with seeds seed, seed+1, ... and report the best run.
        #[arg(long, default_value_t = 1)]
        runs: usize,
        /// Override output.dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Top-1 accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CIFAR-10 directory, or `synth` for the checkpoint's synthetic validation set.
        #[arg(long, env = DATA_ROOT_ENV)]
        data: String,
    },
    /// Finite-difference check of a layer's backward pass.
    Gradcheck {
        /// `kind[:key=value,...]`, or `suite` for every layer.
        #[arg(long)]
        layer: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
    /// Parameter table of the pooling slots and the whole model.
    Audit {
        #[arg(long)]
        config: PathBuf,
    },
    /// Time perceptron pooling against input size.
    BenchPool {
        #[arg(long, value_delimiter = ',', default_values_t = [64, 128, 256, 512])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        channels: usize,
        /// Units per window (1 pools, 4 keeps the size).
        #[arg(long, default_value_t = 1)]
        units: usize,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config, runs, out } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(dir) = out {
                cfg.output.dir = dir;
            }
            let outcomes = train_runs(&cfg, runs, |r, row| {
                println!(
                    "run {r} epoch {:>3}  loss {:.4}  train {:.4}  val {:.4}  lr {:.2e}",
                    row.epoch, row.train_loss, row.train_acc, row.val_acc, row.lr
                );
            })?;
            for (r, o) in outcomes.iter().enumerate() {
                println!(
                    "run {r}: val_acc {:.4}, checkpoint {}",
                    o.final_val_acc(),
                    o.checkpoint_path.display()
                );
            }
            if let Some((r, best)) = outcomes
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.final_val_acc().total_cmp(&b.1.final_val_acc()))
            {
                println!("best of {runs}: run {r} val_acc {:.4}", best.final_val_acc());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { checkpoint, data } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let (cfg, mut net) = ck.restore()?;
            let images = if data == "synth" {
                if cfg.data.dataset != DatasetKind::Synth {
                    bail!(
                        "checkpoint was trained on {:?}, not the synthetic set",
                        cfg.data.dataset
                    );
                }
                synth_dataset(cfg.data.classes, cfg.data.val_count, cfg.data.seed.wrapping_add(1))?
            } else {
                let test = load_cifar10(data.as_ref())
                    .with_context(|| format!("loading CIFAR-10 from {data}"))?
                    .test;
                match cfg.data.val_per_class {
                    Some(n) => balanced_subset(&test, cfg.data.classes, n),
                    None => test,
                }
            };
            let acc = evaluate(&mut net, &images, cfg.data.classes, cfg.data.eval_batch_size)?;
            println!("accuracy {acc:.4} on {} images", images.len());
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { layer, seed, tolerance } => {
            let specs: Vec<&str> = if layer == "suite" {
                SUITE.to_vec()
            } else {
                vec![layer.as_str()]
            };
            let mut ok = true;
            for spec in specs {
                let report = check_named(spec, seed, tolerance)?;
                println!("{report}");
                ok &= report.passed();
            }
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Audit { config } => {
            let cfg = TrainConfig::load(&config)?;
            println!("{}", audit_params(&cfg.model, cfg.data.classes)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::BenchPool { sizes, channels, units } => {
            let spec = PerceptronSpec::default().units(units);
            let rows = complexity_probe(
                || Ok(Box::new(PerceptronPool::<f32>::new(spec.clone(), 0)?) as Box<dyn Layer<f32>>),
                &sizes,
                channels,
            )?;
            println!("{:>6} {:>12} {:>14} {:>10}", "side", "elements", "seconds", "ns/elem");
            for r in &rows {
                let mark = if r.below_floor { "  (below timer floor)" } else { "" };
                println!(
                    "{:>6} {:>12} {:>14.3e} {:>10.3}{mark}",
                    r.side,
                    r.elements,
                    r.seconds,
                    r.ns_per_element()
                );
            }
            match fit_loglog_slope(&rows) {
                Some(s) => println!("log-log slope {s:.3}"),
                None => println!("log-log slope unavailable (too few timed sizes)"),
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

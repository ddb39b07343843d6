//! Command-line harness: configuration-driven training, evaluation of saved
//! models, and gradient checking.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hinge_forest::config::{load_config, Task};
use hinge_forest::data::SplitTag;
use hinge_forest::gradcheck::{grad_check, DEFAULT_STEP, DEFAULT_TOLERANCE};
use hinge_forest::model::load_model;
use hinge_forest::train::{evaluate_split, load_splits, train_from_config};

#[derive(Parser)]
#[command(
    name = "hinge",
    about = "Train and evaluate differentiable hinge forests and ferns"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a configuration file.
    Train {
        /// TOML experiment configuration.
        config: PathBuf,
        /// Override the run seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Evaluate a saved model on a split of a configured dataset.
    Eval {
        /// Model file written by `train`.
        model: PathBuf,
        /// Configuration naming the dataset (its dataset section is used).
        config: PathBuf,
        /// Which split to evaluate.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Compare analytic gradients against central differences in 64-bit.
    Gradcheck {
        /// TOML experiment configuration.
        config: PathBuf,
        /// Number of sampled coordinates.
        #[arg(long, default_value_t = 200)]
        samples: usize,
        /// Override the sampling seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> hinge_forest::Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train {
            config,
            seed,
            out_dir,
        } => {
            let mut config = load_config(&config)?;
            if let Some(seed) = seed {
                config.run.seed = seed;
            }
            if let Some(out_dir) = out_dir {
                config.run.out_dir = out_dir;
            }
            config.validate()?;
            println!("# canonical configuration");
            print!("{}", config.canonical());
            println!("# training");
            let outcome = train_from_config::<f32>(&config)?;
            println!("metrics: {}", outcome.metrics_path.display());
            println!("final model: {}", outcome.final_model.display());
            println!(
                "best model: {} (error {:.6} at step {})",
                outcome.best_model.display(),
                outcome.best_error,
                outcome.best_step
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            model,
            config,
            split,
        } => {
            let config = load_config(&config)?;
            let (mut graph, manifest, _) = load_model::<f32>(&model)?;
            let data = load_splits::<f32>(&config)?;
            let target = match split.as_str() {
                "train" => Some(&data.train),
                "val" | "validation" => data.validation.as_ref(),
                "test" => data.test.as_ref(),
                other => {
                    return Err(hinge_forest::Error::Config(format!(
                        "unknown split '{other}', expected train, val or test"
                    )))
                }
            };
            let target = target.ok_or_else(|| {
                hinge_forest::Error::Config(format!("dataset has no '{split}' split"))
            })?;
            if target.example_shape() != manifest.example_shape.as_slice() {
                return Err(hinge_forest::Error::Config(format!(
                    "model expects example shape {:?} but dataset provides {:?}",
                    manifest.example_shape,
                    target.example_shape()
                )));
            }
            let metrics = evaluate_split(&mut graph, target, config.run.batch_size)?;
            println!("split: {}", SplitTag::as_str(target.tag));
            println!("loss: {:.6}", metrics.loss);
            match config.dataset.task {
                Task::Classification => {
                    println!("misclassification: {:.6}", metrics.error);
                }
                Task::Regression => {
                    println!("r2: {:.6}", 1.0 - metrics.error);
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck {
            config,
            samples,
            seed,
        } => {
            let config = load_config(&config)?;
            let data = load_splits::<f64>(&config)?;
            let outputs = match config.dataset.task {
                Task::Classification => data.train.classes().ok_or_else(|| {
                    hinge_forest::Error::Config("dataset has no class labels".into())
                })?,
                Task::Regression => 1,
            };
            let mut graph = hinge_forest::builder::build_graph::<f64>(
                &config.architecture(),
                data.train.example_shape(),
                outputs,
                config.run.seed,
            )?;
            let batch_rows: Vec<usize> =
                (0..config.run.batch_size.min(data.train.len())).collect();
            let (batch, labels) = data.train.gather(&batch_rows);
            // Develop running statistics before checking; the harness then
            // freezes them.
            graph.set_training(true);
            for _ in 0..5 {
                graph.run_forward(&batch, &labels)?;
            }
            let report = grad_check(
                &mut graph,
                &batch,
                &labels,
                samples,
                DEFAULT_STEP,
                DEFAULT_TOLERANCE,
                seed.unwrap_or(config.run.seed),
            )?;
            println!(
                "checked {} coordinates ({} skipped near hinge kinks)",
                report.checked, report.skipped
            );
            println!("max relative error: {:.3e}", report.max_rel_error);
            if report.passed() {
                println!("gradcheck: PASS (tolerance {:.1e})", report.tolerance);
                Ok(ExitCode::SUCCESS)
            } else {
                println!("gradcheck: FAIL (tolerance {:.1e})", report.tolerance);
                for f in report.failures.iter().take(20) {
                    println!(
                        "  {}.{}[{}]: analytic {:.6e}, central difference {:.6e}, rel {:.3e}",
                        f.node, f.param, f.index, f.analytic, f.numeric, f.rel_error
                    );
                }
                Ok(ExitCode::FAILURE)
            }
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use bigat_cli::ablate::cmd_ablate;
use bigat_cli::commands::{cmd_bench, cmd_evaluate, cmd_explain, cmd_inspect, cmd_synth, cmd_train, EvalSplit, InspectTarget};
use bigat_cli::config::{RunConfig, ENV_OUTPUT_DIR, ENV_SEED};
use bigat_cli::loao::cmd_loao;
use bigat_cli::report::Status;
use bigat_core::data::{Balancing, SynthConfig};
use bigat_core::explain::AttributionSettings;
use bigat_core::model::{Hyper, CANONICAL_VARIANT};
use bigat_core::training::LossKind;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bigat", version, about = "Train, ablate, explain and benchmark flow-based intrusion detectors")]
struct Cli {
    /// Repeat for more log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a variant and write checkpoint, history, ROC curves and report.
    Train(RunArgs),
    /// Score a checkpoint on the test split or on all rows.
    Evaluate {
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: EvalSplit,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train all 12 ablation variants with and without balancing.
    Ablate(RunArgs),
    /// Leave-one-attack-out runs; every attack class when none is named.
    Loao {
        #[arg(long)]
        held_out: Option<String>,
        /// Skip the all-class reference model.
        #[arg(long)]
        no_baseline: bool,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Shapley attributions for a checkpoint.
    Explain {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 200)]
        sample_size: usize,
        #[arg(long, default_value_t = 2000)]
        permutations: usize,
        #[arg(long, default_value_t = 200)]
        background_size: usize,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        #[arg(long, default_value_t = 0)]
        explain_seed: u64,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Time inference of a checkpoint.
    Bench {
        checkpoint: PathBuf,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write a synthetic flow table and its sidecar.
    Synth {
        #[arg(long, default_value_t = 6)]
        classes: usize,
        #[arg(long, default_value_t = 400)]
        n_per_class: usize,
        #[arg(long, default_value_t = 20)]
        seq_len: usize,
        #[arg(long, default_value_t = 2.0)]
        separation: f64,
        /// Per-class size multipliers, comma separated.
        #[arg(long, value_delimiter = ',')]
        imbalance: Option<Vec<f64>>,
        #[arg(long, default_value_t = 7)]
        synth_seed: u64,
        #[arg(long, default_value = "Label")]
        label_column: String,
        #[arg(long, env = ENV_OUTPUT_DIR, default_value = "runs")]
        output_dir: PathBuf,
    },
    /// Print the layer table of a variant or checkpoint.
    Inspect {
        #[arg(long, default_value_t = CANONICAL_VARIANT)]
        variant: u8,
        #[arg(long, default_value_t = 83)]
        seq_len: usize,
        #[arg(long, default_value_t = 6)]
        classes: usize,
        #[arg(long, conflicts_with = "variant")]
        checkpoint: Option<PathBuf>,
    },
}

fn parse_balancing(s: &str) -> Result<Balancing, String> {
    s.parse().map_err(|e: bigat_core::Error| e.to_string())
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    s.parse().map_err(|e: bigat_core::Error| e.to_string())
}

/// Flags shared by the data-driven commands. Flags beat environment
/// variables, which beat the config file.
#[derive(Args)]
struct RunArgs {
    /// JSON config with flat keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV flow table.
    #[arg(long, conflicts_with = "synth")]
    data: Option<PathBuf>,
    /// Use the default synthetic benchmark as the data source.
    #[arg(long)]
    synth: bool,
    #[arg(long)]
    label_column: Option<String>,
    #[arg(long)]
    normal_class: Option<String>,
    #[arg(long)]
    variant: Option<u8>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long, value_parser = parse_balancing)]
    balancing: Option<Balancing>,
    #[arg(long, value_parser = parse_loss)]
    loss: Option<LossKind>,
    #[arg(long)]
    train_frac: Option<f64>,
    #[arg(long, env = ENV_SEED)]
    seed: Option<u64>,
    #[arg(long, env = ENV_OUTPUT_DIR)]
    output_dir: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(d) = &self.data {
            cfg.data = Some(d.clone());
            cfg.synth = None;
        }
        if self.synth {
            cfg.synth = Some(SynthConfig::default());
            cfg.data = None;
        }
        macro_rules! set {
            ($field:ident => $($target:tt)+) => {
                if let Some(v) = &self.$field {
                    $($target)+ = v.clone();
                }
            };
        }
        set!(label_column => cfg.label_column);
        set!(variant => cfg.variant);
        set!(epochs => cfg.train.epochs);
        set!(batch_size => cfg.train.batch_size);
        set!(learning_rate => cfg.train.learning_rate);
        set!(balancing => cfg.train.balancing);
        set!(loss => cfg.train.loss);
        set!(train_frac => cfg.train_frac);
        set!(seed => cfg.train.seed);
        set!(output_dir => cfg.output_dir);
        if self.normal_class.is_some() {
            cfg.normal_class = self.normal_class.clone();
        }
        Ok(cfg)
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<Status> {
    match cli.command {
        Command::Train(args) => {
            let report = cmd_train(&args.resolve()?)?;
            println!("{} ({} parameters)", report.variant.name, report.variant.param_total);
            print!("{}", report.results.to_table());
            if let Some(p) = &report.artifacts.report {
                println!("report: {}", p.display());
            }
            Ok(report.status)
        }
        Command::Evaluate { checkpoint, split, run } => {
            let report = cmd_evaluate(&checkpoint, &run.resolve()?, split)?;
            print_json(&report.eval.headline)?;
            Ok(report.status)
        }
        Command::Ablate(args) => {
            let report = cmd_ablate(&args.resolve()?)?;
            print!("{}", report.to_csv());
            Ok(report.status)
        }
        Command::Loao { held_out, no_baseline, run } => {
            let report = cmd_loao(&run.resolve()?, held_out.as_deref(), !no_baseline)?;
            if let Some(b) = report.baseline_accuracy {
                println!("baseline accuracy: {b:.4}");
            }
            println!("held_out,retained_accuracy,zero_day_detection_rate,all_rows_accuracy,held_out_rows_in_train");
            for f in &report.folds {
                println!(
                    "{},{:.4},{:.4},{:.4},{}",
                    f.held_out, f.retained_accuracy, f.zero_day_detection_rate, f.all_rows_accuracy, f.held_out_rows_in_train
                );
            }
            Ok(report.status)
        }
        Command::Explain {
            checkpoint,
            sample_size,
            permutations,
            background_size,
            top_k,
            explain_seed,
            run,
        } => {
            let settings = AttributionSettings {
                sample_size,
                permutations,
                background_size,
                seed: explain_seed,
                top_k,
            };
            let report = cmd_explain(&checkpoint, &run.resolve()?, &settings)?;
            print_json(&report.attribution.top_k(top_k))?;
            Ok(report.status)
        }
        Command::Bench {
            checkpoint,
            warmup,
            repeats,
            batch,
            run,
        } => {
            let mut cfg = run.resolve()?;
            cfg.bench_warmup = warmup.unwrap_or(cfg.bench_warmup);
            cfg.bench_repeats = repeats.unwrap_or(cfg.bench_repeats);
            cfg.bench_batch = batch.unwrap_or(cfg.bench_batch);
            let report = cmd_bench(&checkpoint, &cfg)?;
            print_json(&report.bench)?;
            Ok(report.status)
        }
        Command::Synth {
            classes,
            n_per_class,
            seq_len,
            separation,
            imbalance,
            synth_seed,
            label_column,
            output_dir,
        } => {
            let defaults = SynthConfig::default();
            let imbalance = imbalance.unwrap_or(if classes == defaults.classes {
                defaults.imbalance
            } else {
                Vec::new()
            });
            let settings = SynthConfig {
                classes,
                n_per_class,
                seq_len,
                separation,
                imbalance,
                seed: synth_seed,
            };
            print_json(&cmd_synth(&settings, &label_column, &output_dir)?)?;
            Ok(Status::Ok)
        }
        Command::Inspect {
            variant,
            seq_len,
            classes,
            checkpoint,
        } => {
            let target = match &checkpoint {
                Some(p) => InspectTarget::Checkpoint(p),
                None => InspectTarget::Variant {
                    id: variant,
                    seq_len,
                    n_classes: classes,
                },
            };
            print!("{}", cmd_inspect(target, &Hyper::default())?);
            Ok(Status::Ok)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Failed) => {
            eprintln!("error: report marked failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

//! `rlab`: run the corruption and recovery pipeline one stage at a time.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rlab::pipeline::{ModelLabel, Pipeline, RunConfig};
use rlab::Error;

#[derive(Parser)]
#[command(name = "rlab", version, about = "Degrade a small transformer and recover it with distilled LoRA adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the corpus splits and pretrain the teacher.
    TrainTeacher(ConfigArg),
    /// Perturb the teacher's K/V projections into the degraded student.
    Corrupt(ConfigArg),
    /// Sample the synthetic distillation corpus from the teacher.
    GenData(ConfigArg),
    /// Train LoRA adapters by logit distillation.
    Recover(ConfigArg),
    /// Full-parameter distillation baseline.
    DistillFull(ConfigArg),
    /// Cross-entropy LoRA baseline on the labeled split.
    SftLora(ConfigArg),
    /// Evaluate models; the teacher and corrupted model are always included.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        /// Models to evaluate: recover, full_distill, sft.
        #[arg(long = "model", value_parser = parse_label)]
        models: Vec<ModelLabel>,
    },
    /// Accuracy recovery percentage from three scores.
    Ar {
        /// Score of the degraded model.
        #[arg(long, allow_negative_numbers = true)]
        es: f64,
        /// Score of the original model.
        #[arg(long, allow_negative_numbers = true)]
        et: f64,
        /// Score after recovery.
        #[arg(long, allow_negative_numbers = true)]
        estar: f64,
    },
    /// Recovery runs over nested synthetic-corpus sizes.
    Sweep(ConfigArg),
    /// Join saved evaluation reports into one table.
    Report(ConfigArg),
    /// Run every stage in order.
    All(ConfigArg),
}

#[derive(clap::Args)]
struct ConfigArg {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
}

fn parse_label(s: &str) -> Result<ModelLabel, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Exit status for each error category.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::RunConfig(_) | Error::Config(_) | Error::Invalid(_) => 2,
        Error::MissingArtifact(_) => 3,
        Error::FingerprintMismatch { .. } => 4,
        Error::Persist(_) => 5,
        Error::ConfigMismatch(_) | Error::VocabMismatch { .. } => 6,
        Error::NoDegradation(_) => 7,
        _ => 1,
    }
}

fn pipeline(arg: &ConfigArg) -> Result<Pipeline, Error> {
    Ok(Pipeline::new(RunConfig::load(&arg.config)?))
}

const RECOVERED: [ModelLabel; 3] = [ModelLabel::Recover, ModelLabel::FullDistill, ModelLabel::Sft];

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::TrainTeacher(c) => {
            let s = pipeline(&c)?.train_teacher()?;
            println!(
                "teacher holdout perplexity {:.3} (initial {:.3})",
                s.perplexity, s.initial_perplexity
            );
        }
        Command::Corrupt(c) => print!("{}", pipeline(&c)?.corrupt()?.render_table()),
        Command::GenData(c) => {
            let ds = pipeline(&c)?.gen_data()?;
            println!("{} records, max_len {}", ds.len(), ds.header.max_len);
        }
        Command::Recover(c) => {
            let (set, log) = pipeline(&c)?.recover()?;
            println!(
                "{} adapters, {} trainable parameters, {} steps, final loss {:.5}, {:.1}s",
                set.len(),
                log.trainable_params,
                log.total_steps,
                log.final_loss().unwrap_or(f64::NAN),
                log.wall_time_secs
            );
        }
        Command::DistillFull(c) => print_log(&pipeline(&c)?.distill_full()?),
        Command::SftLora(c) => print_log(&pipeline(&c)?.sft_lora()?),
        Command::Eval { config, models } => {
            let models = if models.is_empty() { RECOVERED.to_vec() } else { models };
            let reports = pipeline(&config)?.eval(&models)?;
            print!("{}", rlab::eval::join_reports(&reports)?);
        }
        Command::Ar { es, et, estar } => println!("{:.2}", rlab::eval::ar_percent(es, et, estar)?),
        Command::Sweep(c) => {
            let (curve, _) = pipeline(&c)?.sweep().map_err(|e| {
                eprintln!("partial curve:\n{}", e.partial.to_tsv());
                e.source
            })?;
            print!("{}", curve.to_tsv());
            println!("# monotone: {}", curve.is_monotone());
        }
        Command::Report(c) => print!("{}", pipeline(&c)?.report()?),
        Command::All(c) => {
            let mut p = pipeline(&c)?;
            p.train_teacher()?;
            p.corrupt()?;
            p.gen_data()?;
            p.recover()?;
            p.distill_full()?;
            p.sft_lora()?;
            p.eval(&RECOVERED)?;
            print!("{}", p.report()?);
        }
    }
    Ok(())
}

fn print_log(log: &rlab::distill::TrainLog) {
    println!(
        "{} trainable parameters, {} steps, final loss {:.5}, {:.1}s",
        log.trainable_params,
        log.total_steps,
        log.final_loss().unwrap_or(f64::NAN),
        log.wall_time_secs
    );
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

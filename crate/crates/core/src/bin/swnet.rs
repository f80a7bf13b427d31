//! Experiment CLI. Verbosity follows the `SWN_LOG` environment variable
//! (`error`, `warn`, `info`, `debug`, `trace`; default `info`).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use superweight::ensemble::{enumerate_anytime_schedule, select_under_budget, FrozenMember, SwnModel};
use superweight::harness::{
    gen_dataset, interpolation_curve, load_config, run_and_emit, search_stage, DatasetSpec, ExperimentConfig,
};
use superweight::metrics::EvalReport;
use superweight::numerics::{Precision, Scalar};
use superweight::weightgen::{checkpoint_precision, Checkpoint, SharingPlan};
use superweight::{Error, Result};

#[derive(Parser)]
#[command(name = "swnet", version, about = "SuperWeight network experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML experiment config.
    config: PathBuf,
    /// Override a config key, e.g. `--set tau=0.2 --set dataset.seed=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Root directory for run outputs.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Search, train with refinement, evaluate, and write all artifacts.
    Run(ConfigArgs),
    /// Run only the grouping stage and print the resulting clusters.
    SearchOnly(ConfigArgs),
    /// Evaluate a checkpoint on the test split of a dataset spec.
    Eval {
        checkpoint: PathBuf,
        /// TOML dataset spec.
        dataset: PathBuf,
        #[arg(long, default_value_t = 15)]
        bins: usize,
    },
    /// Best member subset whose cost fits the budget, scored on the
    /// checkpoint's validation split.
    Anytime {
        checkpoint: PathBuf,
        /// Multiply-accumulates per sample.
        #[arg(long)]
        budget: u64,
    },
    /// Accuracy along the straight line between the first members of two
    /// checkpoints, on the first checkpoint's test split.
    Interpolate {
        ckpt_a: PathBuf,
        ckpt_b: PathBuf,
        #[arg(long, default_value_t = 10)]
        steps: usize,
    },
}

fn read_precision(path: &Path) -> Result<Precision> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_precision(&bytes)
}

fn load_model<T: Scalar>(path: &Path) -> Result<(SwnModel<T>, serde_json::Value)> {
    SwnModel::from_checkpoint(&Checkpoint::<T>::load(path)?)
}

fn stored_dataset(extra: &serde_json::Value, path: &Path) -> Result<DatasetSpec> {
    let spec = extra
        .get("dataset")
        .ok_or_else(|| Error::Checkpoint(format!("{} records no dataset spec", path.display())))?;
    Ok(serde_json::from_value(spec.clone())?)
}

fn eval<T: Scalar>(checkpoint: &Path, dataset: &Path, bins: usize) -> Result<()> {
    let text = std::fs::read_to_string(dataset).map_err(|e| Error::io(dataset, e))?;
    let spec: DatasetSpec = toml::from_str(&text).map_err(|e| Error::config("dataset", e.to_string()))?;
    let data = gen_dataset::<T>(&spec)?;
    let (model, _) = load_model::<T>(checkpoint)?;
    let members = model.freeze()?;
    let member_probs = members
        .iter()
        .map(|m| Ok((m.spec().member_id, m.predict_proba(&data.test.x)?)))
        .collect::<Result<Vec<_>>>()?;
    let probs: Vec<_> = member_probs.iter().map(|(_, p)| p.clone()).collect();
    let ensemble = superweight::ensemble::average_probs(&probs)?;
    let report = EvalReport::build(&ensemble, &member_probs, &data.test.y, bins, false)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn anytime<T: Scalar>(checkpoint: &Path, budget: u64) -> Result<()> {
    let (model, extra) = load_model::<T>(checkpoint)?;
    let data = gen_dataset::<T>(&stored_dataset(&extra, checkpoint)?)?;
    let schedule = enumerate_anytime_schedule(&model.freeze()?, &data.val.x, &data.val.y)?;
    let pick = select_under_budget(&schedule, budget)?;
    println!("{}", serde_json::to_string_pretty(pick)?);
    Ok(())
}

fn first_member<T: Scalar>(path: &Path) -> Result<(FrozenMember<T>, serde_json::Value)> {
    let (model, extra) = load_model::<T>(path)?;
    let member = model.freeze()?.into_iter().next().ok_or(Error::EmptySubset)?;
    Ok((member, extra))
}

fn interpolate<T: Scalar>(a: &Path, b: &Path, steps: usize) -> Result<()> {
    let (ma, extra) = first_member::<T>(a)?;
    let (mb, _) = first_member::<T>(b)?;
    let data = gen_dataset::<T>(&stored_dataset(&extra, a)?)?;
    println!("lambda,accuracy,loss");
    for p in interpolation_curve(&ma, &mb, &data.test, steps)? {
        println!("{:?},{:?},{:?}", p.lambda, p.accuracy, p.loss);
    }
    Ok(())
}

fn search_only<T: Scalar>(config: &ExperimentConfig) -> Result<()> {
    let data = gen_dataset::<T>(&config.dataset)?;
    let members = config.build_members(&data.input_shape, data.classes, 1.0)?;
    let outcome = search_stage(config, &members, &data)?;
    let layers: Vec<_> = members.iter().flat_map(|m| m.layers.iter().copied()).collect();
    let plan = SharingPlan::from_groups(&layers, &outcome.groups.to_vecs())?;
    println!("{}", plan.to_json());
    Ok(())
}

macro_rules! at_precision {
    ($p:expr, $f:ident ( $($arg:expr),* )) => {
        match $p {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let config = load_config(&args.config, &args.overrides)?;
            let summary = run_and_emit(&config, &args.out)?;
            let r = &summary.report;
            println!(
                "{}: top1 {:.4} nll {:.4} ece {:.4} ({} of {} parameters)",
                summary.dir.display(),
                r.test.top1,
                r.test.nll,
                r.test.ece,
                r.budget.trainable_final,
                r.budget.full_parameters
            );
            Ok(())
        }
        Command::SearchOnly(args) => {
            let config = load_config(&args.config, &args.overrides)?;
            at_precision!(config.precision, search_only(&config))
        }
        Command::Eval {
            checkpoint,
            dataset,
            bins,
        } => at_precision!(read_precision(&checkpoint)?, eval(&checkpoint, &dataset, bins)),
        Command::Anytime { checkpoint, budget } => {
            at_precision!(read_precision(&checkpoint)?, anytime(&checkpoint, budget))
        }
        Command::Interpolate { ckpt_a, ckpt_b, steps } => {
            at_precision!(read_precision(&ckpt_a)?, interpolate(&ckpt_a, &ckpt_b, steps))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SWN_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Wrapping variants already print their source.
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

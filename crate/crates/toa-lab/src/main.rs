//! Command-line front end: dataset generation, two-stage training,
//! estimator evaluation, and the invariant selftest.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use toa_lab::channel::ChannelCase;
use toa_lab::classical::EstimatorKind;
use toa_lab::harness::{self, checkpoint, dataset, report};
use toa_lab::neural::{self, AugmentConfig, TrainSample};
use toa_lab::prs::build_config;

#[derive(Parser)]
#[command(name = "toa-lab", version, about = "Narrowband OFDM TOA estimation workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset of correlation feature maps.
    Gen(GenArgs),
    /// Train the regressor (stage 1: extractor + heads, stage 2: one head).
    Train(TrainArgs),
    /// Evaluate an estimator over a dataset and write a metrics report.
    Eval(EvalArgs),
    /// Run the built-in invariant suite.
    Selftest,
}

#[derive(Args)]
struct GenArgs {
    /// Channel case: static | epa5 | eva5
    #[arg(long)]
    case: ChannelCase,
    /// SNR list in dB, comma separated (e.g. "-10,-5,0,5,10")
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    snr: Vec<f64>,
    /// Number of records
    #[arg(long)]
    n: usize,
    /// PRS subframes per record (1 or 2)
    #[arg(long, default_value_t = 2)]
    subframes: usize,
    /// Physical cell identity (0..=503)
    #[arg(long, default_value_t = 0)]
    cell_id: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training stage: 1 or 2
    #[arg(long)]
    stage: u8,
    /// Channel case of the fine-tuned head (required for stage 2)
    #[arg(long, required_if_eq("stage", "2"))]
    case: Option<ChannelCase>,
    /// Dataset files (stage 1 may merge several)
    #[arg(long, num_args = 1.., required = true)]
    data: Vec<PathBuf>,
    /// Checkpoint path: output for stage 1, input for stage 2
    #[arg(long)]
    ckpt: PathBuf,
    /// Stage-2 output path (defaults to overwriting --ckpt)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Perturbation-augmentation factor (0 disables, stage 2 only)
    #[arg(long, default_value_t = 0)]
    augment: usize,
    /// Perturbation scale relative to the correlation RMS
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Override the maximum number of epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the peak learning rate
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// Estimator: peak | ls | music | esprit | nn
    #[arg(long)]
    estimator: EstimatorKind,
    /// Dataset file
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint (required for the nn estimator)
    #[arg(long, required_if_eq("estimator", "nn"))]
    ckpt: Option<PathBuf>,
    /// Report output path (stdout when omitted)
    #[arg(long)]
    report: Option<PathBuf>,
    /// Report format: json | csv
    #[arg(long, default_value = "json")]
    format: report::ReportFormat,
    /// Subframes of the generating scenario (for re-synthesis paths)
    #[arg(long, default_value_t = 2)]
    subframes: usize,
    #[arg(long, default_value_t = 0)]
    cell_id: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn load_samples(paths: &[PathBuf]) -> toa_lab::Result<Vec<TrainSample>> {
    let mut samples = Vec::new();
    for path in paths {
        samples.extend(dataset::read_file(path)?.records);
    }
    Ok(samples)
}

fn run(cli: Cli) -> toa_lab::Result<()> {
    match cli.command {
        Command::Gen(args) => {
            let mut scenario =
                harness::ScenarioConfig::new(args.case, args.snr, args.n, args.seed);
            scenario.n_subframes = args.subframes;
            scenario.cell_id = args.cell_id;
            if scenario.snr_list_db.iter().any(|s| !s.is_finite()) {
                return Err(toa_lab::ToaError::Argument(
                    "snr values must be finite".into(),
                ));
            }
            let ds = harness::gen_dataset(&scenario, &args.out)?;
            println!(
                "wrote {} records ({}x{} maps) to {}",
                ds.records.len(),
                ds.m,
                1 + ds.n_rb,
                args.out.display()
            );
        }
        Command::Train(args) => {
            let config = build_config("nbiot-1.4MHz")?;
            let t_s = config.sample_period_s;
            let samples = load_samples(&args.data)?;
            match args.stage {
                1 => {
                    let mut hyper = harness::default_stage1_hyper(args.seed);
                    if let Some(e) = args.epochs {
                        hyper.max_epochs = e;
                    }
                    if let Some(lr) = args.lr {
                        hyper.lr = lr;
                    }
                    hyper.parallel = harness::init_worker_pool();
                    let out = neural::train_stage1::<f32>(&samples, t_s, &hyper)?;
                    checkpoint::write_file(&out.params, &args.ckpt)?;
                    println!(
                        "stage 1: best val loss {:.1} ns^2 at epoch {} ({} epochs run); wrote {}",
                        out.best_val_loss,
                        out.best_epoch,
                        out.val_losses.len(),
                        args.ckpt.display()
                    );
                }
                2 => {
                    let case = args.case.expect("clap enforces --case for stage 2");
                    let params = checkpoint::read_file(&args.ckpt)?;
                    let mut hyper = harness::default_stage2_hyper(args.seed);
                    if let Some(e) = args.epochs {
                        hyper.max_epochs = e;
                    }
                    if let Some(lr) = args.lr {
                        hyper.lr = lr;
                    }
                    let augment_cfg = (args.augment > 0).then_some(AugmentConfig {
                        alpha: args.alpha,
                        factor: args.augment,
                        seed: args.seed.wrapping_add(0xA06),
                    });
                    let out =
                        neural::train_stage2(&params, case, &samples, t_s, &hyper, augment_cfg)?;
                    let out_path = args.out.unwrap_or(args.ckpt);
                    checkpoint::write_file(&out.params, &out_path)?;
                    println!(
                        "stage 2 ({case}): best val loss {:.1} ns^2 at epoch {} ({} epochs run); wrote {}",
                        out.best_val_loss,
                        out.best_epoch,
                        out.val_losses.len(),
                        out_path.display()
                    );
                }
                other => {
                    return Err(toa_lab::ToaError::Argument(format!(
                        "stage must be 1 or 2, got {other}"
                    )))
                }
            }
        }
        Command::Eval(args) => {
            let ds = dataset::read_file(&args.data)?;
            let params = args
                .ckpt
                .as_ref()
                .map(|p| checkpoint::read_file(p))
                .transpose()?;
            let opts = harness::EvalOptions {
                estimator: args.estimator,
                params: params.as_ref(),
                cell_id: args.cell_id,
                n_subframes: args.subframes,
                seed: args.seed,
            };
            let rep = harness::evaluate(&ds, &opts)?;
            match &args.report {
                Some(path) => {
                    report::write_file(&rep, path, args.format)?;
                    println!("wrote report to {}", path.display());
                }
                None => {
                    let bytes = match args.format {
                        report::ReportFormat::Json => report::to_json(&rep),
                        report::ReportFormat::Csv => report::to_csv(&rep),
                    };
                    println!("{}", String::from_utf8_lossy(&bytes));
                }
            }
            for e in &rep.entries {
                eprintln!(
                    "{} {} @ {} dB: rmse {:.1} ns, median {:.1} ns over {} records",
                    e.estimator, e.case, e.snr_db, e.rmse_ns, e.median_abs_ns, e.count
                );
            }
        }
        Command::Selftest => {
            harness::run_selftest()?;
            println!("selftest passed");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    harness::init_worker_pool();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

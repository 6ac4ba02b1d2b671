//! Command-line experiment runner: data generation, training, evaluation,
//! prediction, gradient checking, the study sweeps, and heatmap export.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sbu_lstm::data::{save_csv, tail_window, window, NormStats};
use sbu_lstm::harness::{
    evaluate_on, export_heatmap, load_series, persistence_report, prepare_data, run_perm_test,
    run_sweep_lags, run_sweep_layers, run_sweep_missing, run_sweep_width, run_training,
    ExperimentConfig,
};
use sbu_lstm::model::{load_checkpoint, save_checkpoint, CheckpointMeta};
use sbu_lstm::training::gradient_check;
use sbu_lstm::{Error, Result};

#[derive(Parser)]
#[command(
    name = "sbu-lstm",
    about = "Stacked bidirectional/unidirectional LSTM experiments for multi-location \
             time-series prediction",
    version
)]
struct Cli {
    /// Experiment configuration file (TOML); defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Base seed overriding the data, model, training, and split seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for reports and artifacts.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,

    /// CSV data file; synthetic data is generated when absent.
    #[arg(long, global = true)]
    data: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic series and write it as CSV.
    Generate {
        /// Output path (default: <out-dir>/synthetic.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model; writes checkpoint, training history, and a test report.
    Train,
    /// Evaluate a checkpoint over a dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Predict the speed vector following the end of a series.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference gradient check on a small randomly initialized model.
    Gradcheck,
    /// Layer-count sweep across the SBU, pure-LSTM, and pure-BDLSTM families.
    SweepLayers,
    /// Time-lag sweep.
    SweepLags {
        #[arg(long, value_delimiter = ',', default_values_t = [6usize, 8, 10, 12])]
        lags: Vec<usize>,
    },
    /// Hidden-width sweep over multipliers of the location count.
    SweepWidth {
        #[arg(long, value_delimiter = ',', default_values_t = [0.25f64, 0.5, 1.0, 2.0, 4.0])]
        multipliers: Vec<f64>,
    },
    /// Missing-data robustness sweep.
    SweepMissing {
        #[arg(long, value_delimiter = ',', default_values_t = [0.0f64, 0.05, 0.10, 0.15, 0.20, 0.30])]
        proportions: Vec<f64>,
        /// Also corrupt training and validation inputs at each proportion.
        #[arg(long)]
        corrupt_training: bool,
    },
    /// Spatial-permutation study: exact rewiring check plus a retrain comparison.
    PermTest,
    /// Export aligned actual/predicted location x time matrices.
    ExportHeatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        /// First timestep of the export range.
        #[arg(long, default_value_t = 0)]
        start: usize,
        /// One past the last timestep (default: start + one day of 5-min steps).
        #[arg(long)]
        end: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_toml_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(path) = &cli.data {
        cfg.data.csv = Some(path.clone());
    }
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    let out_dir = cli.out_dir.clone();

    match &cli.command {
        Command::Generate { out } => {
            let mut data_cfg = cfg.data.clone();
            data_cfg.csv = None; // always generate, even when --data points elsewhere
            let series = load_series(&data_cfg)?;
            std::fs::create_dir_all(&out_dir)?;
            let path = out.clone().unwrap_or_else(|| out_dir.join("synthetic.csv"));
            save_csv(&series, &path)?;
            println!(
                "wrote {} ({} timesteps x {} locations, seed {})",
                path.display(),
                series.timesteps,
                series.locations,
                data_cfg.seed
            );
        }
        Command::Train => {
            let series = load_series(&cfg.data)?;
            let prepared = prepare_data(&series, &cfg)?;
            let spec = cfg.model.build_spec(series.width(), series.locations);
            let run = run_training(&spec, &prepared, &cfg.train, series.channels)?;

            std::fs::create_dir_all(&out_dir)?;
            let meta = CheckpointMeta {
                epoch: run.history.best_epoch.unwrap_or(0),
                validation_mse: run.history.best_val_mse(),
            };
            let ckpt = out_dir.join("model.ckpt");
            save_checkpoint(&run.model, Some(&prepared.stats), &meta, &ckpt)?;
            std::fs::write(out_dir.join("history.csv"), run.history.to_csv())?;

            let baseline = persistence_report(
                &prepared.splits.test,
                &prepared.stats,
                series.locations,
                series.channels,
            )?;
            let report = format!(
                "{}metric,value\ntest_mae,{}\ntest_mape,{}\npersistence_mae,{}\nepochs,{}\nstopped_early,{}\n",
                cfg.header_comment(),
                run.report.mae,
                run.report.mape,
                baseline.mae,
                run.history.epochs.len(),
                run.history.stopped_early,
            );
            std::fs::write(out_dir.join("train_report.csv"), &report)?;
            println!(
                "trained {} epochs; test MAE {:.4}, MAPE {:.3}% (persistence MAE {:.4}); checkpoint at {}",
                run.history.epochs.len(),
                run.report.mae,
                run.report.mape,
                baseline.mae,
                ckpt.display()
            );
        }
        Command::Evaluate { checkpoint } => {
            let (model, stats, _) = load_checkpoint(checkpoint)?;
            let stats = stats.unwrap_or_else(|| NormStats::identity(model.spec.input_width));
            let series = load_series(&cfg.data)?;
            let normalized = stats.normalize_series(&series);
            let samples = window(&normalized, model.spec.time_lags)?;
            let report = evaluate_on(&model, &samples, &stats, series.channels)?;
            println!(
                "samples {}  MAE {:.4}  MAPE {:.3}% ({} zero-speed pairs excluded)",
                report.sample_count, report.mae, report.mape, report.mape_excluded
            );
            std::fs::create_dir_all(&out_dir)?;
            std::fs::write(
                out_dir.join("evaluate.csv"),
                format!("mae,mape,samples,mape_excluded\n{}\n", report.csv_row()),
            )?;
        }
        Command::Predict { checkpoint } => {
            let (model, stats, _) = load_checkpoint(checkpoint)?;
            let stats = stats.unwrap_or_else(|| NormStats::identity(model.spec.input_width));
            let series = load_series(&cfg.data)?;
            let n = model.spec.time_lags;
            if series.timesteps < n {
                return Err(Error::Config(format!(
                    "series has {} timesteps; the model needs a window of {n}",
                    series.timesteps
                )));
            }
            let normalized = stats.normalize_series(&series);
            let input = tail_window(&normalized, n)?;
            let (pred, _) = sbu_lstm::model::model_forward(&model, &input)?;
            let speeds = stats.denormalize_speed(&pred, series.channels);
            for (id, v) in series.location_ids.iter().zip(&speeds) {
                println!("{id},{v}");
            }
        }
        Command::Gradcheck => {
            // A deliberately small stack keeps the parameter count low enough
            // for the full finite-difference pass to run in moments.
            let mut small = cfg.clone();
            small.data.csv = None;
            small.data.locations = small.data.locations.min(3);
            small.data.timesteps = 64;
            small.model.hidden = small.model.hidden.min(4);
            small.model.time_lags = small.model.time_lags.min(6);
            let series = load_series(&small.data)?;
            let prepared = prepare_data(&series, &small)?;
            let spec = small.model.build_spec(series.width(), series.locations);
            let model = sbu_lstm::model::build_model(&spec)?;
            let sample = prepared
                .splits
                .train
                .iter()
                .find(|s| s.input.mask.last() == Some(&true))
                .ok_or_else(|| Error::Config("no usable training sample".into()))?;
            let max_rel = gradient_check(&model, sample, 1e-6)?;
            println!("max relative gradient error: {max_rel:.3e}");
            if max_rel >= 1e-5 {
                return Err(Error::Config(format!(
                    "gradient check failed: max relative error {max_rel:.3e} >= 1e-5"
                )));
            }
        }
        Command::SweepLayers => {
            let path = run_sweep_layers(&cfg, &out_dir)?;
            println!("wrote {}", path.display());
        }
        Command::SweepLags { lags } => {
            let path = run_sweep_lags(&cfg, lags, &out_dir)?;
            println!("wrote {}", path.display());
        }
        Command::SweepWidth { multipliers } => {
            let path = run_sweep_width(&cfg, multipliers, &out_dir)?;
            println!("wrote {}", path.display());
        }
        Command::SweepMissing { proportions, corrupt_training } => {
            let path = run_sweep_missing(&cfg, proportions, *corrupt_training, &out_dir)?;
            println!("wrote {}", path.display());
        }
        Command::PermTest => {
            let path = run_perm_test(&cfg, &out_dir)?;
            println!("wrote {}", path.display());
        }
        Command::ExportHeatmap { checkpoint, start, end } => {
            let (model, stats, _) = load_checkpoint(checkpoint)?;
            let stats = stats.unwrap_or_else(|| NormStats::identity(model.spec.input_width));
            let series = load_series(&cfg.data)?;
            let end = end.unwrap_or_else(|| (start + 288).min(series.timesteps));
            let (a, b) = export_heatmap(&model, &stats, &series, (*start, end), &out_dir)?;
            println!("wrote {} and {}", a.display(), b.display());
        }
    }
    Ok(())
}

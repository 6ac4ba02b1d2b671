//! Experiment harness: configuration files, the end-to-end data pipeline
//! (generate/load, normalize on the training portion only, window, split),
//! repeated-training sweeps, the permutation study, and heatmap export.
//!
//! Every report is a pure function of the resolved configuration and seeds:
//! rerunning a command writes byte-identical files. Reports open with the
//! full resolved configuration as `#`-prefixed comment lines, and wall-clock
//! timings are confined to training-history files so sweep reports stay
//! reproducible.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    corrupt_sample_inputs, load_csv, split_chronological, split_shuffle, synth_generate, window,
    DatasetSplit, NormScheme, NormStats, Sample, SpeedSeries, SynthParams,
};
use crate::error::{Error, Result};
use crate::layers::MergeMode;
use crate::metrics::{evaluate, persistence_baseline, EvalReport};
use crate::model::{
    build_model, model_forward, permute_input, permute_locations, LayerSpec, Model, ModelSpec,
};
use crate::training::{train, TrainConfig, TrainHistory};

/// Where the series comes from: a CSV file, or the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// CSV path; when absent, synthetic data is generated instead.
    pub csv: Option<PathBuf>,
    pub locations: usize,
    pub timesteps: usize,
    pub seed: u64,
    pub synth: SynthParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            csv: None,
            // 20 days of 5-minute steps across 16 locations: large enough to
            // learn from, small enough that a full sweep finishes in minutes.
            locations: 16,
            timesteps: 5760,
            seed: 0,
            synth: SynthParams::default(),
        }
    }
}

/// Stack shape: a bidirectional first layer, optional middle layers, a
/// unidirectional last layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StackConfig {
    pub time_lags: usize,
    /// Hidden width of the first and last layers (middle layers carry their
    /// own widths).
    pub hidden: usize,
    pub middle: Vec<LayerSpec>,
    pub merge: MergeMode,
    pub seed: u64,
    pub use_mask: bool,
}

impl Default for StackConfig {
    fn default() -> Self {
        StackConfig {
            time_lags: 10,
            hidden: 16,
            middle: Vec::new(),
            merge: MergeMode::Concat,
            seed: 42,
            use_mask: true,
        }
    }
}

impl StackConfig {
    /// Builds the full spec for a given data width.
    pub fn build_spec(&self, input_width: usize, output_width: usize) -> ModelSpec {
        let mut layers = vec![LayerSpec::bdlstm(self.hidden, self.merge)];
        layers.extend(self.middle.iter().cloned());
        layers.push(LayerSpec::lstm(self.hidden));
        ModelSpec {
            input_width,
            time_lags: self.time_lags,
            layers,
            output_width,
            seed: self.seed,
            use_mask: self.use_mask,
            baseline: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: StackConfig,
    pub train: TrainConfig,
    /// Trainings per sweep cell; seeds advance by 1 per repetition.
    pub repetitions: usize,
    pub split_seed: u64,
    pub normalization: NormScheme,
    /// Chronological instead of shuffled splitting.
    pub chronological_split: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            model: StackConfig::default(),
            train: TrainConfig::default(),
            repetitions: 3,
            split_seed: 7,
            normalization: NormScheme::Minmax,
            chronological_split: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// The fully resolved configuration as `#`-prefixed report header lines.
    pub fn header_comment(&self) -> String {
        let toml = toml::to_string(self).expect("config serializes");
        let mut out = String::new();
        for line in toml.lines() {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
        out
    }

    /// Applies a base seed override to every seeded stage.
    pub fn override_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.model.seed = seed.wrapping_add(1);
        self.train.seed = seed.wrapping_add(2);
        self.split_seed = seed.wrapping_add(3);
    }
}

pub fn load_series(cfg: &DataConfig) -> Result<SpeedSeries> {
    match &cfg.csv {
        Some(path) => load_csv(path),
        None => synth_generate(cfg.locations, cfg.timesteps, &cfg.synth, cfg.seed),
    }
}

/// The assembled pipeline output: normalized splits plus the statistics
/// needed to map predictions back to the original scale.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub splits: DatasetSplit,
    pub stats: NormStats,
    pub normalized: SpeedSeries,
}

/// Windows, splits, and normalizes. Normalization statistics are fitted only
/// on timesteps covered by training-split windows, then the series is
/// normalized and re-windowed; the re-split assigns samples identically
/// because windowing order and count are unchanged.
pub fn prepare_data(series: &SpeedSeries, cfg: &ExperimentConfig) -> Result<PreparedData> {
    prepare_data_with_lags(series, cfg, cfg.model.time_lags)
}

pub fn prepare_data_with_lags(
    series: &SpeedSeries,
    cfg: &ExperimentConfig,
    time_lags: usize,
) -> Result<PreparedData> {
    let raw_samples = window(series, time_lags)?;
    let split = |samples: Vec<Sample>| -> Result<DatasetSplit> {
        if cfg.chronological_split {
            split_chronological(samples, (7, 2, 1))
        } else {
            split_shuffle(samples, (7, 2, 1), cfg.split_seed)
        }
    };
    let raw_split = split(raw_samples)?;

    let mut train_steps = vec![false; series.timesteps];
    for sample in &raw_split.train {
        for t in sample.origin_index - time_lags..=sample.origin_index {
            train_steps[t] = true;
        }
    }
    let stats = NormStats::fit(series, cfg.normalization, Some(&train_steps));
    let normalized = stats.normalize_series(series);
    let splits = split(window(&normalized, time_lags)?)?;
    Ok(PreparedData { splits, stats, normalized })
}

/// Test-split evaluation on the original speed scale, with the persistence
/// baseline computed over the same samples.
pub fn evaluate_on(model: &Model, samples: &[Sample], stats: &NormStats, channels: usize) -> Result<EvalReport> {
    let mut pairs = Vec::new();
    for sample in samples {
        if sample.input.mask.last() != Some(&true) {
            continue;
        }
        let (pred, _) = model_forward(model, &sample.input)?;
        pairs.push((
            stats.denormalize_speed(&sample.target, channels),
            stats.denormalize_speed(&pred, channels),
        ));
    }
    evaluate(&pairs, model.spec.output_width)
}

pub fn persistence_report(samples: &[Sample], stats: &NormStats, locations: usize, channels: usize) -> Result<EvalReport> {
    let mut pairs = Vec::new();
    for sample in samples {
        let Ok(pred) = persistence_baseline(sample, channels) else { continue };
        pairs.push((
            stats.denormalize_speed(&sample.target, channels),
            stats.denormalize_speed(&pred, channels),
        ));
    }
    evaluate(&pairs, locations)
}

/// One full training run under a spec, returning the trained model, its
/// history, and the test-split report.
pub struct TrainedRun {
    pub model: Model,
    pub history: TrainHistory,
    pub report: EvalReport,
}

pub fn run_training(
    spec: &ModelSpec,
    prepared: &PreparedData,
    train_cfg: &TrainConfig,
    channels: usize,
) -> Result<TrainedRun> {
    let model = build_model(spec)?;
    let (best, history) = train(&model, &prepared.splits, train_cfg)?;
    let report = evaluate_on(&best, &prepared.splits.test, &prepared.stats, channels)?;
    Ok(TrainedRun { model: best, history, report })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Trains one sweep cell `repetitions` times; divergence is recorded, not
/// fatal. Returns (maes, mapes, failures).
fn run_cell(
    base_spec: &ModelSpec,
    prepared: &PreparedData,
    cfg: &ExperimentConfig,
    channels: usize,
) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let mut maes = Vec::new();
    let mut mapes = Vec::new();
    let mut failures = 0usize;
    for rep in 0..cfg.repetitions.max(1) as u64 {
        let mut spec = base_spec.clone();
        spec.seed = cfg.model.seed.wrapping_add(rep);
        let mut train_cfg = cfg.train.clone();
        train_cfg.seed = cfg.train.seed.wrapping_add(rep);
        match run_training(&spec, prepared, &train_cfg, channels) {
            Ok(run) => {
                maes.push(run.report.mae);
                mapes.push(run.report.mape);
            }
            Err(Error::NonFiniteLoss { .. }) => failures += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((maes, mapes, failures))
}

fn cell_row(maes: &[f64], mapes: &[f64], failures: usize) -> String {
    if maes.is_empty() {
        format!("divergent,divergent,divergent,{failures}")
    } else {
        format!("{},{},{},{failures}", mean(maes), mean(mapes), std_dev(maes), )
    }
}

fn write_report(out_dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join(name);
    std::fs::write(&path, contents)?;
    Ok(path)
}

/// Layer-count sweep over three model families (SBU stack, pure LSTM stack,
/// pure BDLSTM stack) with 0..=4 middle layers each.
pub fn run_sweep_layers(cfg: &ExperimentConfig, out_dir: &Path) -> Result<PathBuf> {
    let series = load_series(&cfg.data)?;
    let prepared = prepare_data(&series, cfg)?;
    let (p, f) = (series.locations, series.channels);
    let width = series.width();
    let hidden = cfg.model.hidden;

    let mut body = String::from("family,middle_layers,mae_mean,mape_mean,mae_std,failures\n");
    for family in ["sbu", "lstm", "bdlstm"] {
        for n_middle in 0..=4usize {
            let layers: Vec<LayerSpec> = match family {
                "sbu" => {
                    let mut l = vec![LayerSpec::bdlstm(hidden, cfg.model.merge)];
                    l.extend(std::iter::repeat(LayerSpec::lstm(hidden)).take(n_middle));
                    l.push(LayerSpec::lstm(hidden));
                    l
                }
                "lstm" => std::iter::repeat(LayerSpec::lstm(hidden)).take(n_middle + 2).collect(),
                _ => std::iter::repeat(LayerSpec::bdlstm(hidden, cfg.model.merge))
                    .take(n_middle + 2)
                    .collect(),
            };
            let spec = ModelSpec {
                input_width: width,
                time_lags: cfg.model.time_lags,
                layers,
                output_width: p,
                seed: cfg.model.seed,
                use_mask: cfg.model.use_mask,
                baseline: family != "sbu",
            };
            let (maes, mapes, failures) = run_cell(&spec, &prepared, cfg, f)?;
            writeln!(body, "{family},{n_middle},{}", cell_row(&maes, &mapes, failures)).unwrap();
        }
    }
    write_report(out_dir, "sweep_layers.csv", &format!("{}{body}", cfg.header_comment()))
}

/// Time-lag sweep: repeated training per lag, emitting raw per-repetition
/// MAEs (for external boxplotting) plus summary statistics.
pub fn run_sweep_lags(cfg: &ExperimentConfig, lags: &[usize], out_dir: &Path) -> Result<PathBuf> {
    if lags.is_empty() {
        return Err(Error::Config("lag list is empty".into()));
    }
    let series = load_series(&cfg.data)?;
    let (p, f) = (series.locations, series.channels);

    let mut samples_body = String::from("lag,repetition,mae\n");
    let mut summary = String::from("lag,mae_mean,mae_std,mape_mean,note\n");
    for &lag in lags {
        if lag >= series.timesteps {
            writeln!(summary, "{lag},,,,skipped: lag >= {} timesteps", series.timesteps).unwrap();
            continue;
        }
        let prepared = prepare_data_with_lags(&series, cfg, lag)?;
        let mut stack = cfg.model.clone();
        stack.time_lags = lag;
        let spec = stack.build_spec(series.width(), p);
        let (maes, mapes, failures) = run_cell(&spec, &prepared, cfg, f)?;
        for (rep, mae) in maes.iter().enumerate() {
            writeln!(samples_body, "{lag},{rep},{mae}").unwrap();
        }
        if maes.is_empty() {
            writeln!(summary, "{lag},,,,divergent in all {failures} repetitions").unwrap();
        } else {
            writeln!(summary, "{lag},{},{},{},", mean(&maes), std_dev(&maes), mean(&mapes)).unwrap();
        }
    }
    write_report(out_dir, "sweep_lags_samples.csv", &format!("{}{samples_body}", cfg.header_comment()))?;
    write_report(out_dir, "sweep_lags.csv", &format!("{}{summary}", cfg.header_comment()))
}

/// Hidden-width sweep: scales the stack width by each multiplier of the
/// location count (ceiling rule), reporting MAE/MAPE/STD per width.
pub fn run_sweep_width(cfg: &ExperimentConfig, multipliers: &[f64], out_dir: &Path) -> Result<PathBuf> {
    if multipliers.is_empty() {
        return Err(Error::Config("multiplier list is empty".into()));
    }
    let series = load_series(&cfg.data)?;
    let prepared = prepare_data(&series, cfg)?;
    let (p, f) = (series.locations, series.channels);

    let mut body = String::from("multiplier,width,mae_mean,mape_mean,mae_std,failures\n");
    for &m in multipliers {
        let width = (m * p as f64).ceil() as usize;
        if width == 0 {
            return Err(Error::Config(format!("width multiplier {m} yields a zero-width layer")));
        }
        let mut stack = cfg.model.clone();
        stack.hidden = width;
        let spec = stack.build_spec(series.width(), p);
        let (maes, mapes, failures) = run_cell(&spec, &prepared, cfg, f)?;
        writeln!(body, "{m},{width},{}", cell_row(&maes, &mapes, failures)).unwrap();
    }
    write_report(out_dir, "sweep_width.csv", &format!("{}{body}", cfg.header_comment()))
}

/// Missing-data robustness sweep: trains per repetition, then corrupts the
/// evaluation inputs at each proportion. With `corrupt_training` the training
/// and validation inputs are corrupted at the same proportion too (one
/// training per proportion per repetition instead of one per repetition).
pub fn run_sweep_missing(
    cfg: &ExperimentConfig,
    proportions: &[f64],
    corrupt_training: bool,
    out_dir: &Path,
) -> Result<PathBuf> {
    if proportions.is_empty() {
        return Err(Error::Config("proportion list is empty".into()));
    }
    let series = load_series(&cfg.data)?;
    let prepared = prepare_data(&series, cfg)?;
    let (p, f) = (series.locations, series.channels);
    let spec = cfg.model.build_spec(series.width(), p);

    // Clean-training models are shared across proportions.
    let mut clean_models: Vec<Model> = Vec::new();
    if !corrupt_training {
        for rep in 0..cfg.repetitions.max(1) as u64 {
            let mut rep_spec = spec.clone();
            rep_spec.seed = cfg.model.seed.wrapping_add(rep);
            let mut train_cfg = cfg.train.clone();
            train_cfg.seed = cfg.train.seed.wrapping_add(rep);
            clean_models.push(run_training(&rep_spec, &prepared, &train_cfg, f)?.model);
        }
    }

    let mut body = String::from("proportion,mae_mean,mape_mean,mae_std\n");
    let mut row_maes: Vec<f64> = Vec::new();
    for (prop_idx, &proportion) in proportions.iter().enumerate() {
        let mut maes = Vec::new();
        let mut mapes = Vec::new();
        for rep in 0..cfg.repetitions.max(1) as u64 {
            let corrupt_seed = cfg.data.seed.wrapping_add(1000 + rep * 100 + prop_idx as u64);
            let model = if corrupt_training {
                let mut corrupted = prepared.clone();
                corrupt_sample_inputs(&mut corrupted.splits.train, proportion, corrupt_seed.wrapping_add(1))?;
                corrupt_sample_inputs(&mut corrupted.splits.validation, proportion, corrupt_seed.wrapping_add(2))?;
                let mut rep_spec = spec.clone();
                rep_spec.seed = cfg.model.seed.wrapping_add(rep);
                let mut train_cfg = cfg.train.clone();
                train_cfg.seed = cfg.train.seed.wrapping_add(rep);
                run_training(&rep_spec, &corrupted, &train_cfg, f)?.model
            } else {
                clean_models[rep as usize].clone()
            };
            let mut test = prepared.splits.test.clone();
            corrupt_sample_inputs(&mut test, proportion, corrupt_seed)?;
            let report = evaluate_on(&model, &test, &prepared.stats, f)?;
            maes.push(report.mae);
            mapes.push(report.mape);
        }
        writeln!(body, "{proportion},{},{},{}", mean(&maes), mean(&mapes), std_dev(&maes)).unwrap();
        row_maes.push(mean(&maes));
    }
    if row_maes.len() > 1 {
        let trend = if row_maes.last().unwrap() > row_maes.first().unwrap() { "yes" } else { "no" };
        writeln!(body, "# accuracy_decreases_with_missingness,{trend}").unwrap();
    }
    write_report(out_dir, "sweep_missing.csv", &format!("{}{body}", cfg.header_comment()))
}

/// Permutation study: (a) the exact forward-pass equivariance check on a
/// trained model; (b) retraining on spatially permuted data and reporting
/// both MAEs side by side (no pass/fail asserted for the empirical half).
pub fn run_perm_test(cfg: &ExperimentConfig, out_dir: &Path) -> Result<PathBuf> {
    let series = load_series(&cfg.data)?;
    let prepared = prepare_data(&series, cfg)?;
    let (p, f) = (series.locations, series.channels);

    // The exact rewiring needs a projection; widen the last layer by one if
    // the configured stack maps straight onto the locations.
    let mut stack = cfg.model.clone();
    let mut spec = stack.build_spec(series.width(), p);
    let widened = !spec.needs_projection();
    if widened {
        stack.hidden += 1;
        spec = stack.build_spec(series.width(), p);
    }

    let run = run_training(&spec, &prepared, &cfg.train, f)?;

    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.data.seed.wrapping_add(99));
    let mut perm: Vec<usize> = (0..p).collect();
    for i in (1..p).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }

    let permuted_model = permute_locations(&run.model, &perm, f)?;
    let mut max_dev = 0.0f64;
    let mut checked = 0usize;
    for sample in prepared.splits.test.iter().take(50) {
        if sample.input.mask.last() != Some(&true) {
            continue;
        }
        let (pred, _) = model_forward(&run.model, &sample.input)?;
        let (pred_perm, _) = model_forward(&permuted_model, &permute_input(&sample.input, &perm, f))?;
        for (loc, &target) in perm.iter().enumerate() {
            max_dev = max_dev.max((pred[loc] - pred_perm[target]).abs());
        }
        checked += 1;
    }
    let equivariance = if max_dev < 1e-12 { "PASS" } else { "FAIL" };

    // Empirical half: retrain from scratch on the permuted series.
    let mut permuted_series = series.clone();
    for t in 0..series.timesteps {
        for loc in 0..p {
            for chan in 0..f {
                let src = series.index(t, loc, chan);
                let dst = series.index(t, perm[loc], chan);
                permuted_series.values[dst] = series.values[src];
                permuted_series.observed[dst] = series.observed[src];
            }
        }
    }
    let prepared_perm = prepare_data(&permuted_series, cfg)?;
    let retrained = run_training(&spec, &prepared_perm, &cfg.train, f)?;

    let mut body = String::new();
    writeln!(body, "permutation,{}", perm.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")).unwrap();
    if widened {
        writeln!(body, "note,last hidden width raised to {} so the rewiring has a projection to act on", stack.hidden).unwrap();
    }
    writeln!(body, "equivariance_check,{equivariance}").unwrap();
    writeln!(body, "equivariance_max_abs_deviation,{max_dev}").unwrap();
    writeln!(body, "equivariance_samples_checked,{checked}").unwrap();
    writeln!(body, "original_mae,{}", run.report.mae).unwrap();
    writeln!(body, "retrained_permuted_mae,{}", retrained.report.mae).unwrap();
    write_report(out_dir, "perm_test.csv", &format!("{}{body}", cfg.header_comment()))
}

/// Exports aligned location x time matrices of actual and predicted speeds
/// over `[start, end)` timesteps, for external heatmap plotting.
pub fn export_heatmap(
    model: &Model,
    stats: &NormStats,
    series: &SpeedSeries,
    range: (usize, usize),
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    let (start, end) = range;
    if start >= end || end > series.timesteps {
        return Err(Error::Config(format!(
            "heatmap range {start}..{end} outside series of {} timesteps",
            series.timesteps
        )));
    }
    let normalized = stats.normalize_series(series);
    let samples = window(&normalized, model.spec.time_lags)?;
    let mut by_origin: Vec<Option<&Sample>> = vec![None; series.timesteps];
    for sample in &samples {
        by_origin[sample.origin_index] = Some(sample);
    }

    // One prediction vector per column, shared by every location row.
    let mut preds: Vec<Option<Vec<f64>>> = Vec::with_capacity(end - start);
    for t in start..end {
        let pred = match by_origin[t] {
            Some(sample) if sample.input.mask.last() == Some(&true) => {
                let (raw, _) = model_forward(model, &sample.input)?;
                Some(stats.denormalize_speed(&raw, series.channels))
            }
            _ => None,
        };
        preds.push(pred);
    }

    let mut actual = String::from("location");
    for t in start..end {
        write!(actual, ",{t}").unwrap();
    }
    actual.push('\n');
    let mut predicted = actual.clone();

    for p in 0..series.locations {
        write!(actual, "{}", series.location_ids[p]).unwrap();
        write!(predicted, "{}", series.location_ids[p]).unwrap();
        for (i, t) in (start..end).enumerate() {
            match series.get(t, p, 0) {
                Some(v) => write!(actual, ",{v}").unwrap(),
                None => actual.push(','),
            }
            match &preds[i] {
                Some(v) => write!(predicted, ",{}", v[p]).unwrap(),
                None => predicted.push(','),
            }
        }
        actual.push('\n');
        predicted.push('\n');
    }
    let a = write_report(out_dir, "heatmap_actual.csv", &actual)?;
    let b = write_report(out_dir, "heatmap_predicted.csv", &predicted)?;
    Ok((a, b))
}

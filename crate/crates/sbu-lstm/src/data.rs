//! Dataset pipeline: CSV ingest, normalization, sliding-window sample
//! construction, shuffled splitting, a synthetic traffic-network generator,
//! and missing-value injection for robustness experiments.
//!
//! A [`SpeedSeries`] is a `T x P x F` observation tensor with a per-entry
//! observed flag; channel 0 is always speed. Windowing completes partially
//! observed steps by per-location-channel last-observation-carried-forward
//! (LOCF, with first-value backfill at the series start) so the layers only
//! ever see fully observed or fully missing steps.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::SeqInput;

/// Raw spatio-temporal observations.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedSeries {
    pub timesteps: usize,
    pub locations: usize,
    pub channels: usize,
    /// Row-major `T x P x F` values; entries with `observed = false` hold
    /// sentinel contents that are never read.
    pub values: Vec<f64>,
    pub observed: Vec<bool>,
    pub interval_minutes: u32,
    pub location_ids: Vec<String>,
    pub channel_names: Vec<String>,
}

impl SpeedSeries {
    pub fn index(&self, t: usize, p: usize, f: usize) -> usize {
        (t * self.locations + p) * self.channels + f
    }

    pub fn get(&self, t: usize, p: usize, f: usize) -> Option<f64> {
        let i = self.index(t, p, f);
        self.observed[i].then(|| self.values[i])
    }

    pub fn width(&self) -> usize {
        self.locations * self.channels
    }

    pub fn fully_observed(timesteps: usize, locations: usize, channels: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), timesteps * locations * channels);
        let observed = vec![true; values.len()];
        SpeedSeries {
            timesteps,
            locations,
            channels,
            values,
            observed,
            interval_minutes: 5,
            location_ids: (0..locations).map(|p| format!("loc_{p}")).collect(),
            channel_names: default_channel_names(channels),
        }
    }

    /// LOCF-completed copy of the value buffer: for each location-channel
    /// column, unobserved entries take the most recent observed value, and
    /// entries before the first observation take that first value. Columns
    /// with no observations at all stay at 0.
    pub(crate) fn completed_values(&self) -> Vec<f64> {
        let mut completed = vec![0.0; self.values.len()];
        for p in 0..self.locations {
            for f in 0..self.channels {
                let mut carry: Option<f64> = None;
                for t in 0..self.timesteps {
                    let i = self.index(t, p, f);
                    if self.observed[i] {
                        carry = Some(self.values[i]);
                    }
                    if let Some(v) = carry {
                        completed[i] = v;
                    }
                }
                // First-value backfill.
                if let Some(first_t) = (0..self.timesteps).find(|&t| self.observed[self.index(t, p, f)]) {
                    let first = self.values[self.index(first_t, p, f)];
                    for t in 0..first_t {
                        completed[self.index(t, p, f)] = first;
                    }
                }
            }
        }
        completed
    }
}

fn default_channel_names(channels: usize) -> Vec<String> {
    const KNOWN: [&str; 3] = ["speed", "volume", "occupancy"];
    (0..channels)
        .map(|f| KNOWN.get(f).map(|s| s.to_string()).unwrap_or_else(|| format!("c{f}")))
        .collect()
}

/// One supervised pair: an `n`-step input window of width `P*F` and the
/// speed vector at the following timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: SeqInput,
    pub target: Vec<f64>,
    /// Timestep index of the target in the source series.
    pub origin_index: usize,
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
    pub split_seed: u64,
}

/// Slides an `n`-step window over the series. A step is masked iff all of
/// its `P*F` entries are unobserved; partially observed steps are completed
/// by LOCF. Samples whose target (speed at the step after the window) has
/// any unobserved entry are dropped.
pub fn window(series: &SpeedSeries, n: usize) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::Config("window length must be >= 1".into()));
    }
    if series.timesteps <= n {
        return Err(Error::Config(format!(
            "series has {} timesteps; need more than the window length {n}",
            series.timesteps
        )));
    }

    let width = series.width();
    let completed = series.completed_values();
    let step_observed: Vec<bool> = (0..series.timesteps)
        .map(|t| {
            let start = series.index(t, 0, 0);
            series.observed[start..start + width].iter().any(|&o| o)
        })
        .collect();

    let mut samples = Vec::with_capacity(series.timesteps - n);
    for target_t in n..series.timesteps {
        let target_ok =
            (0..series.locations).all(|p| series.observed[series.index(target_t, p, 0)]);
        if !target_ok {
            continue;
        }
        let mut steps = Vec::with_capacity(n);
        let mut mask = Vec::with_capacity(n);
        for t in target_t - n..target_t {
            if step_observed[t] {
                let start = series.index(t, 0, 0);
                steps.push(completed[start..start + width].to_vec());
                mask.push(true);
            } else {
                steps.push(vec![0.0; width]);
                mask.push(false);
            }
        }
        let target: Vec<f64> =
            (0..series.locations).map(|p| series.values[series.index(target_t, p, 0)]).collect();
        samples.push(Sample { input: SeqInput { steps, mask }, target, origin_index: target_t });
    }
    Ok(samples)
}

/// Seeded uniform shuffle followed by contiguous ratio cuts (floor rounding,
/// remainder to the test split).
pub fn split_shuffle(samples: Vec<Sample>, ratios: (u32, u32, u32), seed: u64) -> Result<DatasetSplit> {
    if samples.len() < 3 {
        return Err(Error::Config(format!("need at least 3 samples to split, got {}", samples.len())));
    }
    let (a, b, c) = ratios;
    if a == 0 || b == 0 || c == 0 {
        return Err(Error::Config("split ratios must all be positive".into()));
    }
    let total = (a + b + c) as usize;
    let mut samples = samples;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples.shuffle(&mut rng);
    let n = samples.len();
    let cut1 = n * a as usize / total;
    let cut2 = n * (a + b) as usize / total;
    let test = samples.split_off(cut2);
    let validation = samples.split_off(cut1);
    Ok(DatasetSplit { train: samples, validation, test, split_seed: seed })
}

/// Chronological alternative to [`split_shuffle`]: contiguous cuts in time
/// order, no window overlap between train and test periods.
pub fn split_chronological(mut samples: Vec<Sample>, ratios: (u32, u32, u32)) -> Result<DatasetSplit> {
    if samples.len() < 3 {
        return Err(Error::Config(format!("need at least 3 samples to split, got {}", samples.len())));
    }
    let (a, b, c) = ratios;
    let total = (a + b + c) as usize;
    samples.sort_by_key(|s| s.origin_index);
    let n = samples.len();
    let cut1 = n * a as usize / total;
    let cut2 = n * (a + b) as usize / total;
    let test = samples.split_off(cut2);
    let validation = samples.split_off(cut1);
    Ok(DatasetSplit { train: samples, validation, test, split_seed: 0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormScheme {
    None,
    #[default]
    Minmax,
    Zscore,
}

impl std::str::FromStr for NormScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NormScheme::None),
            "minmax" => Ok(NormScheme::Minmax),
            "zscore" => Ok(NormScheme::Zscore),
            other => Err(Error::Config(format!(
                "unknown normalization scheme {other:?} (expected none|minmax|zscore)"
            ))),
        }
    }
}

/// Per-location-channel affine transform `x' = (x - offset) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub scheme: NormScheme,
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

const SCALE_FLOOR: f64 = 1e-8;

impl NormStats {
    pub fn identity(width: usize) -> Self {
        NormStats { scheme: NormScheme::None, offset: vec![0.0; width], scale: vec![1.0; width] }
    }

    /// Fits per-location-channel statistics over observed entries. When
    /// `timestep_filter` is given, only flagged timesteps contribute (used to
    /// restrict fitting to the training split).
    pub fn fit(series: &SpeedSeries, scheme: NormScheme, timestep_filter: Option<&[bool]>) -> Self {
        let width = series.width();
        if scheme == NormScheme::None {
            return NormStats::identity(width);
        }
        let mut offset = vec![0.0; width];
        let mut scale = vec![1.0; width];
        for p in 0..series.locations {
            for f in 0..series.channels {
                let col = p * series.channels + f;
                let entries: Vec<f64> = (0..series.timesteps)
                    .filter(|&t| timestep_filter.map(|flags| flags[t]).unwrap_or(true))
                    .filter_map(|t| series.get(t, p, f))
                    .collect();
                if entries.is_empty() {
                    continue;
                }
                match scheme {
                    NormScheme::Minmax => {
                        let min = entries.iter().cloned().fold(f64::INFINITY, f64::min);
                        let max = entries.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        offset[col] = min;
                        scale[col] = (max - min).max(SCALE_FLOOR);
                    }
                    NormScheme::Zscore => {
                        let mean = entries.iter().sum::<f64>() / entries.len() as f64;
                        let var = entries.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                            / entries.len() as f64;
                        offset[col] = mean;
                        scale[col] = var.sqrt().max(SCALE_FLOOR);
                    }
                    NormScheme::None => unreachable!(),
                }
            }
        }
        NormStats { scheme, offset, scale }
    }

    pub fn normalize_series(&self, series: &SpeedSeries) -> SpeedSeries {
        let mut out = series.clone();
        for t in 0..series.timesteps {
            for col in 0..series.width() {
                let i = t * series.width() + col;
                if out.observed[i] {
                    out.values[i] = (out.values[i] - self.offset[col]) / self.scale[col];
                }
            }
        }
        out
    }

    /// Inverts the speed-channel transform for a per-location prediction.
    pub fn denormalize_speed(&self, pred: &[f64], channels: usize) -> Vec<f64> {
        pred.iter()
            .enumerate()
            .map(|(p, &v)| v * self.scale[p * channels] + self.offset[p * channels])
            .collect()
    }

    /// Forward speed-channel transform (normalizes a raw target vector).
    pub fn normalize_speed(&self, raw: &[f64], channels: usize) -> Vec<f64> {
        raw.iter()
            .enumerate()
            .map(|(p, &v)| (v - self.offset[p * channels]) / self.scale[p * channels])
            .collect()
    }
}

/// Synthetic traffic-network generator parameters.
///
/// Speeds are `base_speed` minus two daily peak-hour troughs, minus
/// congestion waves that propagate toward increasing location indices with a
/// per-hop time lag of `hop_lag` steps and per-hop amplitude factor
/// `coupling`, plus Gaussian noise, clamped at 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub base_speed: f64,
    /// Steps per day.
    pub daily_period: usize,
    /// Depth of the morning/evening peak-hour dips.
    pub peak_amplitude: f64,
    /// Congestion waves per day.
    pub congestion_waves: usize,
    /// Depth of a wave at its origin location.
    pub wave_depth: f64,
    /// Steps of delay per location hop as a wave propagates.
    pub hop_lag: usize,
    /// Per-hop amplitude factor in (0, 1]; 0 disables propagation.
    pub coupling: f64,
    /// Temporal width (in steps) of a wave's Gaussian profile.
    pub wave_sigma: f64,
    pub noise_std: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            base_speed: 60.0,
            daily_period: 288,
            peak_amplitude: 18.0,
            congestion_waves: 8,
            wave_depth: 25.0,
            hop_lag: 2,
            coupling: 0.85,
            wave_sigma: 3.0,
            noise_std: 0.5,
        }
    }
}

impl SynthParams {
    fn validate(&self) -> Result<()> {
        if self.base_speed <= 0.0 {
            return Err(Error::Config("base_speed must be positive".into()));
        }
        if self.daily_period == 0 {
            return Err(Error::Config("daily_period must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.coupling) {
            return Err(Error::Config("coupling must lie in [0, 1]".into()));
        }
        if self.noise_std < 0.0 || self.peak_amplitude < 0.0 || self.wave_depth < 0.0 {
            return Err(Error::Config("amplitudes must be nonnegative".into()));
        }
        if self.wave_sigma <= 0.0 {
            return Err(Error::Config("wave_sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Generates a speed-only synthetic series; a pure function of
/// `(P, T, params, seed)`.
pub fn synth_generate(locations: usize, timesteps: usize, params: &SynthParams, seed: u64) -> Result<SpeedSeries> {
    if locations == 0 || timesteps == 0 {
        return Err(Error::Config("need at least one location and one timestep".into()));
    }
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let period = params.daily_period as f64;
    let morning = period / 3.0; // 08:00 for a 288-step day
    let evening = period * 17.5 / 24.0;
    let dip_sigma = (period / 24.0).max(1.0); // one hour

    let mut values = vec![0.0; timesteps * locations];
    for t in 0..timesteps {
        let tod = (t % params.daily_period) as f64;
        let dip = params.peak_amplitude
            * (gaussian_bump(tod, morning, dip_sigma, period) + gaussian_bump(tod, evening, dip_sigma, period));
        for p in 0..locations {
            values[t * locations + p] = params.base_speed - dip;
        }
    }

    // Congestion waves: each starts at a random location and time, then
    // propagates toward increasing location indices, one hop per `hop_lag`
    // steps, with amplitude decaying by `coupling` per hop. Unidirectional
    // propagation keeps the adjacent-location lag signature unambiguous.
    let days = timesteps.div_ceil(params.daily_period);
    let wave_sigma = params.wave_sigma;
    for _ in 0..days * params.congestion_waves {
        let start = rng.gen_range(0..timesteps);
        let origin = rng.gen_range(0..locations);
        let mut p = origin as i64;
        let mut hops = 0usize;
        loop {
            if p >= locations as i64 {
                break;
            }
            let amp = params.wave_depth * params.coupling.powi(hops as i32);
            if amp < 0.5 {
                break;
            }
            let center = start as f64 + (hops * params.hop_lag) as f64;
            let lo = ((center - 4.0 * wave_sigma).floor().max(0.0)) as usize;
            let hi = ((center + 4.0 * wave_sigma).ceil() as usize).min(timesteps.saturating_sub(1));
            for t in lo..=hi {
                let d = t as f64 - center;
                values[t * locations + p as usize] -= amp * (-d * d / (2.0 * wave_sigma * wave_sigma)).exp();
            }
            p += 1;
            hops += 1;
            if params.coupling == 0.0 {
                break;
            }
        }
    }

    if params.noise_std > 0.0 {
        let normal = Normal::new(0.0, params.noise_std).expect("validated noise_std");
        for v in values.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    for v in values.iter_mut() {
        *v = v.max(0.0);
    }

    Ok(SpeedSeries::fully_observed(timesteps, locations, 1, values))
}

fn gaussian_bump(x: f64, center: f64, sigma: f64, period: f64) -> f64 {
    // Circular distance so the dip shape is periodic across midnight.
    let mut d = (x - center).abs();
    d = d.min(period - d);
    (-d * d / (2.0 * sigma * sigma)).exp()
}

/// Marks exactly `floor(proportion * T * P * F)` uniformly chosen observed
/// entries as unobserved; deterministic per seed.
pub fn inject_missing(series: &SpeedSeries, proportion: f64, seed: u64) -> Result<SpeedSeries> {
    if !(0.0..1.0).contains(&proportion) {
        return Err(Error::Config(format!("missing proportion {proportion} outside [0, 1)")));
    }
    let count = (proportion * series.values.len() as f64).floor() as usize;
    let mut out = series.clone();
    if count == 0 {
        return Ok(out);
    }
    let observed_indices: Vec<usize> =
        (0..series.observed.len()).filter(|&i| series.observed[i]).collect();
    if count > observed_indices.len() {
        return Err(Error::Config(format!(
            "cannot mark {count} entries missing; only {} are observed",
            observed_indices.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = rand::seq::index::sample(&mut rng, observed_indices.len(), count);
    for i in chosen.iter() {
        out.observed[observed_indices[i]] = false;
    }
    Ok(out)
}

/// Missing-value injection at the sample level: in each sample's input
/// window, exactly `floor(proportion * n * width)` elements are dropped,
/// then the window is re-completed (LOCF per column within the window, steps
/// with every element dropped become masked). Targets are untouched.
pub fn corrupt_sample_inputs(samples: &mut [Sample], proportion: f64, seed: u64) -> Result<()> {
    if !(0.0..1.0).contains(&proportion) {
        return Err(Error::Config(format!("missing proportion {proportion} outside [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for sample in samples.iter_mut() {
        let n = sample.input.len();
        let width = sample.input.width();
        let total = n * width;
        let count = (proportion * total as f64).floor() as usize;
        if count == 0 {
            continue;
        }
        let mut dropped = vec![false; total];
        for i in rand::seq::index::sample(&mut rng, total, count).iter() {
            dropped[i] = true;
        }
        // Elements of already-masked steps count as dropped.
        for t in 0..n {
            if !sample.input.mask[t] {
                for col in 0..width {
                    dropped[t * width + col] = true;
                }
            }
        }
        for col in 0..width {
            let mut carry: Option<f64> = None;
            let mut first: Option<f64> = None;
            for t in 0..n {
                if !dropped[t * width + col] {
                    carry = Some(sample.input.steps[t][col]);
                    if first.is_none() {
                        first = Some(sample.input.steps[t][col]);
                    }
                } else {
                    sample.input.steps[t][col] = carry.or(first).unwrap_or(0.0);
                }
            }
            // Backfill before the first surviving observation.
            if let Some(fv) = first {
                for t in 0..n {
                    if !dropped[t * width + col] {
                        break;
                    }
                    sample.input.steps[t][col] = fv;
                }
            }
        }
        for t in 0..n {
            let all_dropped = (0..width).all(|col| dropped[t * width + col]);
            if all_dropped {
                sample.input.mask[t] = false;
                sample.input.steps[t] = vec![0.0; width];
            }
        }
    }
    Ok(())
}

/// The final `n` timesteps as a model input: LOCF-completed values, steps
/// masked only when every entry is unobserved. Used for prediction past the
/// end of a series, where no target exists yet.
pub fn tail_window(series: &SpeedSeries, n: usize) -> Result<SeqInput> {
    if n == 0 || series.timesteps < n {
        return Err(Error::Config(format!(
            "series has {} timesteps; cannot take a tail window of {n}",
            series.timesteps
        )));
    }
    let width = series.width();
    let completed = series.completed_values();
    let mut steps = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    for t in series.timesteps - n..series.timesteps {
        let start = series.index(t, 0, 0);
        let observed = series.observed[start..start + width].iter().any(|&o| o);
        if observed {
            steps.push(completed[start..start + width].to_vec());
        } else {
            steps.push(vec![0.0; width]);
        }
        mask.push(observed);
    }
    Ok(SeqInput { steps, mask })
}

/// Writes the series as CSV: first column `timestamp` (integer step),
/// one column per location-channel (`<location>` for speed,
/// `<location>:<channel>` otherwise), empty cell = missing.
pub fn save_csv(series: &SpeedSeries, path: &Path) -> Result<()> {
    let mut out = String::from("timestamp");
    for p in 0..series.locations {
        for f in 0..series.channels {
            if f == 0 {
                write!(out, ",{}", series.location_ids[p]).unwrap();
            } else {
                write!(out, ",{}:{}", series.location_ids[p], series.channel_names[f]).unwrap();
            }
        }
    }
    out.push('\n');
    for t in 0..series.timesteps {
        write!(out, "{t}").unwrap();
        for col in 0..series.width() {
            let i = t * series.width() + col;
            if series.observed[i] {
                write!(out, ",{}", series.values[i]).unwrap();
            } else {
                out.push(',');
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_csv(path: &Path) -> Result<SpeedSeries> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, message: "empty file".into() })?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 2 || cols[0] != "timestamp" {
        return Err(Error::Parse {
            line: 1,
            message: "header must start with 'timestamp' and name at least one column".into(),
        });
    }

    // Column order defines location order; channels must repeat identically
    // per location.
    let mut location_ids: Vec<String> = Vec::new();
    let mut channel_names: Vec<String> = Vec::new();
    let mut parsed: Vec<(String, String)> = Vec::new();
    for col in &cols[1..] {
        let (loc, chan) = match col.rsplit_once(':') {
            Some((loc, chan)) => (loc.to_string(), chan.to_string()),
            None => (col.to_string(), "speed".to_string()),
        };
        if parsed.iter().any(|(l, c)| l == &loc && c == &chan) {
            return Err(Error::Parse { line: 1, message: format!("duplicate column {col:?}") });
        }
        if !location_ids.contains(&loc) {
            location_ids.push(loc.clone());
        }
        parsed.push((loc, chan));
    }
    let first_loc = &location_ids[0];
    for (l, c) in &parsed {
        if l == first_loc {
            channel_names.push(c.clone());
        }
    }
    if channel_names.first().map(String::as_str) != Some("speed") {
        return Err(Error::Parse { line: 1, message: "first channel per location must be speed".into() });
    }
    let channels = channel_names.len();
    let locations = location_ids.len();
    let expected: Vec<(String, String)> = location_ids
        .iter()
        .flat_map(|l| channel_names.iter().map(move |c| (l.clone(), c.clone())))
        .collect();
    if parsed != expected {
        return Err(Error::Parse {
            line: 1,
            message: "columns must be grouped per location with identical channel order".into(),
        });
    }

    let mut values = Vec::new();
    let mut observed = Vec::new();
    let mut timesteps = 0;
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 1 + locations * channels {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected {} cells, found {}", 1 + locations * channels, cells.len()),
            });
        }
        for (col, cell) in cells[1..].iter().enumerate() {
            if cell.is_empty() {
                values.push(0.0);
                observed.push(false);
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("non-numeric cell {cell:?}"),
            })?;
            if col % channels == 0 && v < 0.0 {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("negative speed {v}"),
                });
            }
            values.push(v);
            observed.push(true);
        }
        timesteps += 1;
    }
    if timesteps == 0 {
        return Err(Error::Parse { line: 2, message: "no data rows".into() });
    }
    Ok(SpeedSeries {
        timesteps,
        locations,
        channels,
        values,
        observed,
        interval_minutes: 5,
        location_ids,
        channel_names,
    })
}

//! Evaluation metrics (MAE, MAPE), the persistence baseline, and report
//! assembly.
//!
//! Metrics are always computed on the original speed scale, over all scalar
//! (sample x location) residuals. MAPE excludes pairs with a zero actual and
//! reports how many were excluded.

use crate::data::Sample;
use crate::error::{Error, Result};

/// Mean absolute error over paired values.
pub fn mae(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    if actual.is_empty() {
        return Err(Error::UndefinedMetric("MAE of an empty list".into()));
    }
    assert_eq!(actual.len(), predicted.len(), "mae: lengths {} vs {}", actual.len(), predicted.len());
    let sum: f64 = actual.iter().zip(predicted).map(|(a, p)| (a - p).abs()).sum();
    Ok(sum / actual.len() as f64)
}

/// Mean absolute percentage error; pairs with `actual == 0` are excluded and
/// counted in the second return value.
pub fn mape(actual: &[f64], predicted: &[f64]) -> Result<(f64, usize)> {
    if actual.is_empty() {
        return Err(Error::UndefinedMetric("MAPE of an empty list".into()));
    }
    assert_eq!(actual.len(), predicted.len(), "mape: lengths {} vs {}", actual.len(), predicted.len());
    let mut sum = 0.0;
    let mut included = 0usize;
    for (a, p) in actual.iter().zip(predicted) {
        if *a == 0.0 {
            continue;
        }
        sum += ((a - p) / a).abs();
        included += 1;
    }
    if included == 0 {
        return Err(Error::UndefinedMetric("MAPE with all actuals zero".into()));
    }
    Ok((100.0 * sum / included as f64, actual.len() - included))
}

/// Naive floor predictor: the speed vector of the most recent observed step
/// in the window.
pub fn persistence_baseline(sample: &Sample, channels: usize) -> Result<Vec<f64>> {
    let last_observed = sample
        .input
        .mask
        .iter()
        .rposition(|&m| m)
        .ok_or_else(|| Error::Config("persistence baseline: fully masked window".into()))?;
    let step = &sample.input.steps[last_observed];
    Ok((0..step.len() / channels).map(|p| step[p * channels]).collect())
}

/// Accumulated evaluation over a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mae: f64,
    pub mape: f64,
    pub per_location_mae: Vec<f64>,
    pub sample_count: usize,
    pub mape_excluded: usize,
}

/// Builds an [`EvalReport`] from aligned (actual, predicted) vectors, one
/// pair per sample, each of width P.
pub fn evaluate(pairs: &[(Vec<f64>, Vec<f64>)], locations: usize) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric("evaluation over zero samples".into()));
    }
    let mut abs_sum = vec![0.0; locations];
    let mut all_actual = Vec::with_capacity(pairs.len() * locations);
    let mut all_pred = Vec::with_capacity(pairs.len() * locations);
    for (actual, predicted) in pairs {
        assert_eq!(actual.len(), locations, "evaluate: actual width {} vs {locations}", actual.len());
        assert_eq!(predicted.len(), locations, "evaluate: predicted width {} vs {locations}", predicted.len());
        for p in 0..locations {
            abs_sum[p] += (actual[p] - predicted[p]).abs();
        }
        all_actual.extend_from_slice(actual);
        all_pred.extend_from_slice(predicted);
    }
    let global_mae = mae(&all_actual, &all_pred)?;
    let (global_mape, excluded) = mape(&all_actual, &all_pred)?;
    Ok(EvalReport {
        mae: global_mae,
        mape: global_mape,
        per_location_mae: abs_sum.iter().map(|s| s / pairs.len() as f64).collect(),
        sample_count: pairs.len(),
        mape_excluded: excluded,
    })
}

impl EvalReport {
    /// Flat CSV row: `mae,mape,samples,mape_excluded`.
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.mae, self.mape, self.sample_count, self.mape_excluded)
    }
}

//! Pulse-height calibration: amplitude traces to photon-count statistics.
//!
//! Each trace is histogrammed and fitted with a sum of Gaussians, one per
//! resolved photon number. Events are then binned either by thresholds at
//! the density minima between adjacent peaks or by the fitted peak areas.
//! Across an ensemble, the peak ladder of the trace whose lowest peak sits
//! lowest (the zero-photon peak) labels every other trace, so a probe too
//! bright to show its own zero peak is still counted from the right outcome.

mod count_table;
mod mixture;
mod thresholds;

pub use count_table::CountTable;
pub use mixture::{
    fit_peaks, fit_peaks_with, GaussianComponent, GaussianMixtureFit, Histogram, PeakSearch, MIN_EVENTS,
};
pub use thresholds::{bin_counts, bin_counts_by_area, place_thresholds, ThresholdSet, THRESHOLD_TOL_MV};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::AmplitudeTrace;

/// How fitted peaks are turned into counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinningMethod {
    /// Count events between thresholds at the mixture's density minima.
    #[default]
    Threshold,
    /// Use the fitted Gaussian areas.
    Area,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub bin_width_mv: f64,
    /// Components fitted per trace; `None` means `n_outcomes + 2`.
    pub max_peaks: Option<usize>,
    pub seed_floor: f64,
    pub min_peak_events: f64,
    pub smoothing_window: usize,
    pub max_iters: usize,
    pub method: BinningMethod,
    /// Label peaks against the ensemble's zero-photon ladder.
    pub align_labels: bool,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        let search = PeakSearch::default();
        CalibrationConfig {
            bin_width_mv: search.bin_width_mv,
            max_peaks: None,
            seed_floor: search.seed_floor,
            min_peak_events: search.min_peak_events,
            smoothing_window: search.smoothing_window,
            max_iters: search.max_iters,
            method: BinningMethod::Threshold,
            align_labels: true,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bin_width_mv.is_finite() && self.bin_width_mv > 0.0) {
            return Err(Error::config(format!("bin_width_mv must be positive, got {}", self.bin_width_mv)));
        }
        if self.max_peaks == Some(0) {
            return Err(Error::config("max_peaks must be positive"));
        }
        if !(self.seed_floor.is_finite() && (0.0..1.0).contains(&self.seed_floor)) {
            return Err(Error::config("seed_floor must lie in [0, 1)"));
        }
        if !(self.min_peak_events.is_finite() && self.min_peak_events >= 0.0) {
            return Err(Error::config("min_peak_events must be >= 0"));
        }
        if self.smoothing_window == 0 || self.max_iters == 0 {
            return Err(Error::config("smoothing_window and max_iters must be positive"));
        }
        Ok(())
    }

    fn search(&self, n_outcomes: usize) -> PeakSearch {
        PeakSearch {
            bin_width_mv: self.bin_width_mv,
            max_peaks: self.max_peaks.unwrap_or(n_outcomes + 2),
            seed_floor: self.seed_floor,
            min_peak_events: self.min_peak_events,
            smoothing_window: self.smoothing_window,
            max_iters: self.max_iters,
            spacing_hint: None,
        }
    }
}

/// Calibration record of one probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeCalibration {
    pub probe_id: u32,
    pub fit: GaussianMixtureFit,
    pub thresholds: ThresholdSet,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleCalibration {
    pub table: CountTable,
    /// Successful probes, in input order.
    pub probes: Vec<ProbeCalibration>,
    /// Probes whose calibration failed, with the reason.
    pub failed: Vec<(u32, Error)>,
}

/// Fits, thresholds and bins a single trace on its own (labels start at 0).
pub fn calibrate_trace(trace: &AmplitudeTrace, n_outcomes: usize, cfg: &CalibrationConfig) -> Result<ProbeCalibration> {
    cfg.validate()?;
    if n_outcomes == 0 {
        return Err(Error::shape("need at least one outcome"));
    }
    let fit = fit_peaks_with(trace.amplitudes(), &cfg.search(n_outcomes))?;
    finish(trace, fit, n_outcomes, cfg.method)
}

fn finish(
    trace: &AmplitudeTrace,
    fit: GaussianMixtureFit,
    n_outcomes: usize,
    method: BinningMethod,
) -> Result<ProbeCalibration> {
    let thresholds = place_thresholds(&fit);
    let counts = match method {
        BinningMethod::Threshold => bin_counts(trace.amplitudes(), &thresholds, n_outcomes)?,
        BinningMethod::Area => bin_counts_by_area(&fit, trace.len(), n_outcomes)?,
    };
    Ok(ProbeCalibration { probe_id: trace.probe_id, fit, thresholds, counts })
}

/// Calibrates every trace (in parallel) and assembles the count table.
///
/// With `skip_failed`, probes whose fit fails are reported in
/// [`EnsembleCalibration::failed`] and left out of the table; otherwise the
/// first failure is returned.
pub fn calibrate_ensemble(
    traces: &[AmplitudeTrace],
    n_outcomes: usize,
    cfg: &CalibrationConfig,
    skip_failed: bool,
) -> Result<EnsembleCalibration> {
    cfg.validate()?;
    if n_outcomes == 0 {
        return Err(Error::shape("need at least one outcome"));
    }
    if traces.is_empty() {
        return Err(Error::Calibration("no traces to calibrate".into()));
    }
    let search = cfg.search(n_outcomes);
    let mut fits: Vec<Result<GaussianMixtureFit>> =
        traces.par_iter().map(|t| fit_peaks_with(t.amplitudes(), &search)).collect();

    // Traces showing a single peak cannot infer the ladder spacing; refit
    // them with the spacing seen across the ensemble.
    if let Some(spacing) = ensemble_spacing(fits.iter().filter_map(|f| f.as_ref().ok())) {
        let hinted = PeakSearch { spacing_hint: Some(spacing), ..search.clone() };
        fits.par_iter_mut().zip(traces).for_each(|(fit, trace)| {
            if matches!(fit, Ok(f) if f.components.len() == 1) {
                *fit = fit_peaks_with(trace.amplitudes(), &hinted);
            }
        });
    }
    if cfg.align_labels {
        align_labels(&mut fits);
    }

    let mut probes = Vec::with_capacity(traces.len());
    let mut failed = Vec::new();
    for (trace, fit) in traces.iter().zip(fits) {
        match fit.and_then(|f| finish(trace, f, n_outcomes, cfg.method)) {
            Ok(p) => probes.push(p),
            Err(e) if skip_failed => {
                log::warn!("probe {}: calibration failed: {e}", trace.probe_id);
                failed.push((trace.probe_id, e));
            }
            Err(e) => return Err(Error::Calibration(format!("probe {}: {e}", trace.probe_id))),
        }
    }
    if probes.is_empty() {
        return Err(Error::Calibration("every probe failed to calibrate".into()));
    }
    let table = CountTable::from_columns(n_outcomes, probes.iter().map(|p| (p.probe_id, p.counts.clone())).collect())?;
    Ok(EnsembleCalibration { table, probes, failed })
}

/// Median adjacent-peak spacing over all fits.
fn ensemble_spacing<'a>(fits: impl Iterator<Item = &'a GaussianMixtureFit>) -> Option<f64> {
    let mut gaps: Vec<f64> = fits.flat_map(|f| f.means().windows(2).map(|w| w[1] - w[0]).collect::<Vec<_>>()).collect();
    if gaps.is_empty() {
        return None;
    }
    gaps.sort_by(f64::total_cmp);
    Some(gaps[gaps.len() / 2])
}

/// Sets `first_outcome` of every fit to the index of its lowest peak on the
/// reference ladder: the means of the fit whose lowest peak is lowest,
/// extended beyond its last peak at the ensemble spacing.
fn align_labels(fits: &mut [Result<GaussianMixtureFit>]) {
    let Some(spacing) = ensemble_spacing(fits.iter().filter_map(|f| f.as_ref().ok())) else { return };
    let reference = fits
        .iter()
        .filter_map(|f| f.as_ref().ok())
        .min_by(|a, b| a.components[0].mean_mv.total_cmp(&b.components[0].mean_mv))
        .map(|f| f.means());
    let Some(ladder) = reference else { return };
    let last = ladder[ladder.len() - 1];
    for fit in fits.iter_mut().flatten() {
        let x = fit.components[0].mean_mv;
        fit.first_outcome = if x <= last + 0.5 * spacing {
            (0..ladder.len()).min_by(|&i, &j| (ladder[i] - x).abs().total_cmp(&(ladder[j] - x).abs())).unwrap_or(0)
        } else {
            ladder.len() - 1 + ((x - last) / spacing).round() as usize
        };
    }
}

use serde::{Deserialize, Serialize};

use super::mixture::GaussianMixtureFit;
use crate::error::{Error, Result};
use crate::optimize::brent_minimize;

/// Absolute tolerance of the valley search, mV.
pub const THRESHOLD_TOL_MV: f64 = 1e-3;
/// Grid points used to bracket the valley before the Brent refinement.
const VALLEY_GRID: usize = 256;

/// Cut points between adjacent peaks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet {
    /// Strictly increasing; one fewer than the number of fitted peaks.
    pub cut_points_mv: Vec<f64>,
    /// Outcome assigned to amplitudes below the first cut point.
    #[serde(default)]
    pub first_outcome: usize,
    /// Indices of cut points placed at the midpoint because the fitted
    /// density had no single valley between the two means.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fallback: Vec<usize>,
}

impl ThresholdSet {
    pub fn new(cut_points_mv: Vec<f64>) -> Result<Self> {
        if cut_points_mv.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("threshold".into()));
        }
        if cut_points_mv.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::domain("thresholds must be strictly increasing"));
        }
        Ok(ThresholdSet { cut_points_mv, first_outcome: 0, fallback: Vec::new() })
    }

    /// Outcome of one amplitude: intervals are half-open `[c_k, c_{k+1})`, so
    /// a value exactly on a cut point belongs to the upper interval.
    pub fn outcome(&self, amplitude: f64, n_outcomes: usize) -> usize {
        let k = self.cut_points_mv.partition_point(|&c| c <= amplitude);
        (self.first_outcome + k).min(n_outcomes - 1)
    }
}

/// Places a cut at the minimum of the fitted mixture density between every
/// pair of adjacent means.
pub fn place_thresholds(fit: &GaussianMixtureFit) -> ThresholdSet {
    let means = fit.means();
    let mut cuts = Vec::with_capacity(means.len().saturating_sub(1));
    let mut fallback = Vec::new();
    for (k, w) in means.windows(2).enumerate() {
        match valley(fit, w[0], w[1]) {
            Some(x) => cuts.push(x),
            None => {
                log::warn!(
                    "no single density valley between peaks at {:.3} and {:.3} mV; using the midpoint",
                    w[0],
                    w[1]
                );
                cuts.push(0.5 * (w[0] + w[1]));
                fallback.push(k);
            }
        }
    }
    ThresholdSet { cut_points_mv: cuts, first_outcome: fit.first_outcome, fallback }
}

/// Interior minimum of the density on `(a, b)`, or `None` unless the density
/// falls and then rises exactly once on the grid.
fn valley(fit: &GaussianMixtureFit, a: f64, b: f64) -> Option<f64> {
    let h = (b - a) / VALLEY_GRID as f64;
    let values: Vec<f64> = (0..=VALLEY_GRID).map(|i| fit.density(a + i as f64 * h)).collect();
    let (imin, _) = values.iter().enumerate().min_by(|x, y| x.1.total_cmp(y.1))?;
    if imin == 0 || imin == VALLEY_GRID {
        return None;
    }
    let falls = values[..=imin].windows(2).all(|w| w[1] <= w[0]);
    let rises = values[imin..].windows(2).all(|w| w[1] >= w[0]);
    if !(falls && rises) {
        return None;
    }
    let lo = a + (imin - 1) as f64 * h;
    let hi = a + (imin + 1) as f64 * h;
    Some(brent_minimize(|x| fit.density(x), lo, hi, THRESHOLD_TOL_MV).x)
}

/// Counts per outcome by threshold binning; the top outcome is cumulative.
pub fn bin_counts(amplitudes: &[f64], thresholds: &ThresholdSet, n_outcomes: usize) -> Result<Vec<u64>> {
    if n_outcomes == 0 {
        return Err(Error::shape("need at least one outcome"));
    }
    let mut counts = vec![0u64; n_outcomes];
    for &a in amplitudes {
        counts[thresholds.outcome(a, n_outcomes)] += 1;
    }
    Ok(counts)
}

/// Counts per outcome from the fitted peak areas. Events the fit does not
/// describe (above its window) go to the cumulative top outcome, and the
/// result is rounded to integers that add up to `n_events`.
pub fn bin_counts_by_area(fit: &GaussianMixtureFit, n_events: usize, n_outcomes: usize) -> Result<Vec<u64>> {
    if n_outcomes == 0 {
        return Err(Error::shape("need at least one outcome"));
    }
    if fit.components.is_empty() {
        return Err(Error::Calibration("fit has no components".into()));
    }
    let described = fit.total_weight();
    let total = described.max(n_events as f64);
    let mut expected = vec![0.0; n_outcomes];
    for (k, c) in fit.components.iter().enumerate() {
        expected[(fit.first_outcome + k).min(n_outcomes - 1)] += c.weight / total;
    }
    expected[n_outcomes - 1] += (total - described) / total;
    Ok(largest_remainder(&expected, n_events as u64))
}

/// Integer apportionment of `total` in proportion to `shares` (summing to 1).
fn largest_remainder(shares: &[f64], total: u64) -> Vec<u64> {
    let raw: Vec<f64> = shares.iter().map(|s| s * total as f64).collect();
    let mut out: Vec<u64> = raw.iter().map(|r| r.floor() as u64).collect();
    let assigned: u64 = out.iter().sum();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&i, &j| (raw[j] - raw[j].floor()).total_cmp(&(raw[i] - raw[i].floor())).then(i.cmp(&j)));
    for &i in order.iter().take(total.saturating_sub(assigned) as usize) {
        out[i] += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::mixture::GaussianComponent;

    fn mixture(parts: &[(f64, f64, f64)]) -> GaussianMixtureFit {
        GaussianMixtureFit {
            components: parts
                .iter()
                .map(|&(weight, mean_mv, sigma_mv)| GaussianComponent { weight, mean_mv, sigma_mv })
                .collect(),
            goodness: 1.0,
            bin_width_mv: 1.3,
            window_mv: (-100.0, 100.0),
            first_outcome: 0,
            iterations: 0,
        }
    }

    #[test]
    fn symmetric_pair_cuts_at_midpoint() {
        let t = place_thresholds(&mixture(&[(1.0, 0.0, 1.5), (1.0, 10.0, 1.5)]));
        assert_eq!(t.cut_points_mv.len(), 1);
        assert!((t.cut_points_mv[0] - 5.0).abs() <= 1e-3);
        assert!(t.fallback.is_empty());
    }

    #[test]
    fn unequal_weights_shift_cut_toward_weak_peak() {
        // Oracle: setting the density derivative to zero for unit widths gives
        // 9 x phi(x) = (10 - x) phi(x - 10), i.e. x = 5 + ln(9x / (10 - x)) / 10,
        // a contraction solved here by fixed-point iteration.
        let t = place_thresholds(&mixture(&[(9.0, 0.0, 1.0), (1.0, 10.0, 1.0)]));
        let mut expect = 5.0f64;
        for _ in 0..100 {
            expect = 5.0 + (9.0 * expect / (10.0 - expect)).ln() / 10.0;
        }
        assert!(t.cut_points_mv[0] > 5.0);
        assert!((t.cut_points_mv[0] - expect).abs() <= 1e-3, "{}", t.cut_points_mv[0]);
    }

    #[test]
    fn single_component_has_no_cuts() {
        let t = place_thresholds(&mixture(&[(5.0, 1.0, 1.0)]));
        assert!(t.cut_points_mv.is_empty());
        assert_eq!(bin_counts(&[-3.0, 0.0, 50.0], &t, 4).unwrap(), vec![3, 0, 0, 0]);
    }

    #[test]
    fn swamped_peak_falls_back_to_midpoint() {
        let t = place_thresholds(&mixture(&[(100.0, 0.0, 2.0), (1.0, 2.0, 2.0)]));
        assert_eq!(t.fallback, vec![0]);
        assert_eq!(t.cut_points_mv, vec![1.0]);
    }

    #[test]
    fn boundary_values_go_up_and_top_bin_accumulates() {
        let t = ThresholdSet::new(vec![1.0, 2.0, 3.0]).unwrap();
        let counts = bin_counts(&[0.5, 1.0, 1.5, 2.0, 3.0, 9.0], &t, 3).unwrap();
        assert_eq!(counts, vec![1, 2, 3]);
        assert_eq!(bin_counts(&[-5.0, 0.99], &t, 3).unwrap(), vec![2, 0, 0]);
    }

    #[test]
    fn first_outcome_shifts_labels() {
        let mut t = ThresholdSet::new(vec![1.0]).unwrap();
        t.first_outcome = 2;
        assert_eq!(bin_counts(&[0.0, 5.0], &t, 5).unwrap(), vec![0, 0, 1, 1, 0]);
    }

    #[test]
    fn rejects_unsorted_thresholds() {
        assert!(ThresholdSet::new(vec![2.0, 1.0]).is_err());
        assert!(ThresholdSet::new(vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn area_counts_preserve_total_and_fill_top_outcome() {
        let mut fit = mixture(&[(600.0, 0.0, 1.0), (300.0, 10.0, 1.0)]);
        fit.window_mv = (-10.0, 15.0);
        let counts = bin_counts_by_area(&fit, 1000, 4).unwrap();
        assert_eq!(counts, vec![600, 300, 0, 100]);
        let single = bin_counts_by_area(&mixture(&[(250.0, 0.0, 1.0)]), 250, 3).unwrap();
        assert_eq!(single, vec![250, 0, 0]);
    }

    #[test]
    fn largest_remainder_is_exact() {
        let out = largest_remainder(&[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 10);
        assert_eq!(out.iter().sum::<u64>(), 10);
        assert_eq!(out, vec![4, 3, 3]);
    }
}

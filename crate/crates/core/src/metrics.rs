//! Validation metrics: fidelity curves, measured/reconstructed/linear
//! comparisons and sensitivity sweeps over the probe calibration.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::CountTable;
use crate::error::{Error, Result};
use crate::photon_stats::{
    column_fidelity, distance_slices, poisson_cumulative, LinearDetectorModel, PovmMatrix, ProbeEnsemble, ProbeMatrix,
    TailPolicy,
};
use crate::tomography::{forward_model, reconstruct_povm, ReconstructionConfig};

/// Photon number up to which fidelities are summarized separately from the
/// sparsely probed columns above it.
pub const DEFAULT_SPLIT_M: usize = 100;

/// Column fidelities `F_m` between two POVMs of the same shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityCurve {
    pub values: Vec<f64>,
}

/// Worst columns below and above a split photon number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelitySummary {
    pub split_m: usize,
    /// Minimum over `m <= split_m` and where it occurs.
    pub min_low: f64,
    pub argmin_low: usize,
    /// Minimum over `split_m < m < M`; `None` when there are no such columns.
    pub min_high: Option<f64>,
    pub argmin_high: Option<usize>,
}

fn argmin(values: &[f64], offset: usize) -> Option<(usize, f64)> {
    values.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).map(|(i, &v)| (i + offset, v))
}

impl FidelityCurve {
    pub fn summary(&self, split_m: usize) -> FidelitySummary {
        let cut = (split_m + 1).min(self.values.len());
        let (argmin_low, min_low) = argmin(&self.values[..cut], 0).unwrap_or((0, 1.0));
        let high = argmin(&self.values[cut..], cut);
        FidelitySummary { split_m, min_low, argmin_low, min_high: high.map(|h| h.1), argmin_high: high.map(|h| h.0) }
    }

    /// Photon numbers `m <= up_to` with `F_m < threshold`.
    pub fn failures(&self, threshold: f64, up_to: usize) -> Vec<usize> {
        self.values.iter().enumerate().take(up_to + 1).filter(|(_, &f)| f < threshold).map(|(m, _)| m).collect()
    }
}

pub fn fidelity_curve(reconstructed: &PovmMatrix, model: &PovmMatrix) -> Result<FidelityCurve> {
    reconstructed.same_shape(model)?;
    let values = (0..model.truncation()).map(|m| column_fidelity(reconstructed, model, m)).collect::<Result<_>>()?;
    Ok(FidelityCurve { values })
}

/// Measured, reconstructed and linear-model outcome distributions of one probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeComparison {
    pub probe_id: u32,
    pub mean_photons: f64,
    pub events: u64,
    /// `p`: the calibrated counts, normalized.
    pub measured: Vec<f64>,
    /// `r = Pi q`: the reconstruction's prediction.
    pub reconstructed: Vec<f64>,
    /// `l`: the linear detector's prediction, `Poisson(eta mu + gamma)`.
    pub linear: Vec<f64>,
    pub abs_diff_reconstructed: Vec<f64>,
    pub abs_diff_linear: Vec<f64>,
    pub max_diff_reconstructed: f64,
    pub max_diff_linear: f64,
    pub tv_reconstructed: f64,
    pub tv_linear: f64,
    /// Per-outcome multinomial band `3 sqrt(l (1 - l) / events)`.
    pub fluctuation_bound: Vec<f64>,
    /// Whether `|p - l|` leaves the band for some outcome.
    pub linear_outside_bound: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub n_outcomes: usize,
    pub eta: f64,
    pub gamma: f64,
    pub probes: Vec<ProbeComparison>,
}

impl ComparisonTable {
    /// Probes whose measured distribution is incompatible with the linear model.
    pub fn linearity_violations(&self) -> Vec<u32> {
        self.probes.iter().filter(|p| p.linear_outside_bound).map(|p| p.probe_id).collect()
    }
}

/// Compares, probe by probe, the measured distribution with the prediction
/// of the reconstructed POVM and with the linear detector. The probe
/// statistics fold photon numbers beyond the truncation into the last
/// column, so all three distributions sum to one.
pub fn three_way_comparison(
    counts: &CountTable,
    recon: &PovmMatrix,
    model: &LinearDetectorModel,
    ensemble: &ProbeEnsemble,
) -> Result<ComparisonTable> {
    let n_out = counts.n_outcomes();
    if recon.n_outcomes() != n_out {
        return Err(Error::shape(format!("POVM has {} outcomes, count table has {n_out}", recon.n_outcomes())));
    }
    if counts.n_probes() != ensemble.len() {
        return Err(Error::shape(format!(
            "count table has {} probes, ensemble has {}",
            counts.n_probes(),
            ensemble.len()
        )));
    }
    let q = ProbeMatrix::with_policy(&ensemble.mean_photons(), recon.truncation(), TailPolicy::Absorb)?;
    let r = forward_model(recon, &q)?;
    let k = ensemble.len();
    let mut probes = Vec::with_capacity(k);
    for (j, probe) in ensemble.probes().iter().enumerate() {
        let col = counts
            .index_of(probe.id)
            .ok_or_else(|| Error::shape(format!("probe {} missing from count table", probe.id)))?;
        let events = counts.total(col);
        let measured = counts.probs(col);
        let reconstructed: Vec<f64> = (0..n_out).map(|n| r[n * k + j]).collect();
        let linear = poisson_cumulative(model.eta() * probe.mean_photons + model.gamma(), n_out);
        let dr = distance_slices(&measured, &reconstructed)?;
        let dl = distance_slices(&measured, &linear)?;
        let fluctuation_bound: Vec<f64> =
            linear.iter().map(|&l| 3.0 * (l * (1.0 - l) / events.max(1) as f64).sqrt()).collect();
        let linear_outside_bound = dl.abs_diff.iter().zip(&fluctuation_bound).any(|(d, b)| d > b);
        probes.push(ProbeComparison {
            probe_id: probe.id,
            mean_photons: probe.mean_photons,
            events,
            measured,
            reconstructed,
            linear,
            max_diff_reconstructed: dr.max,
            max_diff_linear: dl.max,
            tv_reconstructed: dr.total_variation,
            tv_linear: dl.total_variation,
            abs_diff_reconstructed: dr.abs_diff,
            abs_diff_linear: dl.abs_diff,
            fluctuation_bound,
            linear_outside_bound,
        });
    }
    Ok(ComparisonTable { n_outcomes: n_out, eta: model.eta(), gamma: model.gamma(), probes })
}

/// Magnitudes of the calibration uncertainties explored by [`sensitivity_sweep`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Perturbations {
    /// Relative error of the energy (power-meter) scale; mean photon
    /// numbers are multiplied by `1 +- energy_scale`.
    pub energy_scale: f64,
    /// Error of the attenuation, dB; mean photon numbers are multiplied by
    /// `10^(+-attenuation_db / 10)`.
    pub attenuation_db: f64,
}

impl Default for Perturbations {
    fn default() -> Self {
        Perturbations { energy_scale: 0.005, attenuation_db: 0.0 }
    }
}

impl Perturbations {
    /// The grid `{-e, 0, +e} x {-a, 0, +a}` without repeats, identity first.
    pub fn grid(&self) -> Result<Vec<(f64, f64)>> {
        if !(self.energy_scale.is_finite() && (0.0..1.0).contains(&self.energy_scale)) {
            return Err(Error::config(format!("energy_scale must lie in [0, 1), got {}", self.energy_scale)));
        }
        if !(self.attenuation_db.is_finite() && self.attenuation_db >= 0.0) {
            return Err(Error::config(format!("attenuation_db must be >= 0, got {}", self.attenuation_db)));
        }
        let signs = |x: f64| if x == 0.0 { vec![0.0] } else { vec![0.0, -x, x] };
        Ok(signs(self.energy_scale)
            .into_iter()
            .flat_map(|e| signs(self.attenuation_db).into_iter().map(move |a| (e, a)))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub energy_scale: f64,
    pub attenuation_db: f64,
    /// Resulting multiplier on every mean photon number.
    pub factor: f64,
    pub fidelities: Vec<f64>,
    pub min_fidelity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// First point is the unperturbed reconstruction.
    pub points: Vec<SweepPoint>,
    /// Worst `F_m` over all points, column by column.
    pub envelope: Vec<f64>,
}

impl SweepResult {
    pub fn baseline(&self) -> &[f64] {
        &self.points[0].fidelities
    }

    pub fn envelope_curve(&self) -> FidelityCurve {
        FidelityCurve { values: self.envelope.clone() }
    }
}

/// Reconstructs the POVM once per perturbation of the probe mean photon
/// numbers and compares each against a fixed model (normally the linear
/// detector at the unperturbed efficiency estimate).
pub fn sensitivity_sweep(
    counts: &CountTable,
    ensemble: &ProbeEnsemble,
    cfg: &ReconstructionConfig,
    model: &PovmMatrix,
    perturbations: &Perturbations,
) -> Result<SweepResult> {
    let grid = perturbations.grid()?;
    let points = grid
        .par_iter()
        .map(|&(e, a)| {
            let factor = (1.0 + e) * 10f64.powf(a / 10.0);
            let recon = reconstruct_povm(counts, &ensemble.scaled(factor)?, cfg)?;
            let fidelities = fidelity_curve(&recon.povm, model)?.values;
            let min_fidelity = fidelities.iter().cloned().fold(1.0, f64::min);
            Ok(SweepPoint { energy_scale: e, attenuation_db: a, factor, fidelities, min_fidelity })
        })
        .collect::<Result<Vec<_>>>()?;
    let envelope =
        (0..model.truncation()).map(|m| points.iter().map(|p| p.fidelities[m]).fold(1.0, f64::min)).collect();
    Ok(SweepResult { points, envelope })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::photon_stats::{binomial_povm, Probe};

    #[test]
    fn model_against_itself_is_one() {
        let b = binomial_povm(0.051, 12, 140).unwrap();
        let c = fidelity_curve(&b, &b).unwrap();
        assert!(c.values.iter().all(|&f| (f - 1.0).abs() < 1e-12));
        let s = c.summary(DEFAULT_SPLIT_M);
        assert!(s.min_high.is_some() && s.argmin_high.unwrap() > 100);
        assert!(c.failures(0.99, 100).is_empty());
    }

    #[test]
    fn wrong_efficiency_is_detected() {
        let a = binomial_povm(0.5, 12, 140).unwrap();
        let b = binomial_povm(0.051, 12, 140).unwrap();
        let c = fidelity_curve(&a, &b).unwrap();
        assert!(c.values[20..].iter().all(|&f| f < 0.9));
        assert_eq!(c.values[0], 1.0);
    }

    #[test]
    fn column_fidelity_matches_poisson_bhattacharyya_closed_form() {
        // Far from the cumulative outcome, columns are nearly Poisson(eta m);
        // exp(-(sqrt a - sqrt b)^2 / 2) is the Poisson Bhattacharyya coefficient.
        let a = binomial_povm(0.02, 40, 60).unwrap();
        let b = binomial_povm(0.03, 40, 60).unwrap();
        let c = fidelity_curve(&a, &b).unwrap();
        let m = 50.0;
        let poisson = (-((0.02f64 * m).sqrt() - (0.03f64 * m).sqrt()).powi(2) / 2.0).exp();
        assert!((c.values[50] - poisson).abs() < 2e-3, "{} vs {poisson}", c.values[50]);
    }

    #[test]
    fn summary_split_is_configurable() {
        let c = FidelityCurve { values: vec![1.0, 0.9, 1.0, 0.8, 1.0] };
        let s = c.summary(2);
        assert_eq!((s.min_low, s.argmin_low), (0.9, 1));
        assert_eq!((s.min_high, s.argmin_high), (Some(0.8), Some(3)));
        let all = c.summary(10);
        assert_eq!(all.min_low, 0.8);
        assert_eq!(all.min_high, None);
    }

    fn synthetic(eta: f64, means: &[f64], total: f64) -> (CountTable, ProbeEnsemble) {
        let probes: Vec<Probe> = means
            .iter()
            .enumerate()
            .map(|(i, &m)| Probe { id: i as u32, mean_photons: m, attenuation_db: None, n_pulses: total as u64 })
            .collect();
        let cols = means
            .iter()
            .enumerate()
            .map(|(i, &m)| {
                (i as u32, poisson_cumulative(eta * m, 12).iter().map(|p| (p * total).round() as u64).collect())
            })
            .collect();
        (CountTable::from_columns(12, cols).unwrap(), ProbeEnsemble::new(probes).unwrap())
    }

    #[test]
    fn comparison_distributions_are_normalized_and_agree_on_linear_data() {
        // A truncation far above the brightest probe keeps the folded tail negligible.
        let (t, e) = synthetic(0.051, &[6.5, 20.0, 60.0, 130.0], 1e9);
        let recon = binomial_povm(0.051, 12, 260).unwrap();
        let cmp = three_way_comparison(&t, &recon, &LinearDetectorModel::lossy(0.051).unwrap(), &e).unwrap();
        for p in &cmp.probes {
            for v in [&p.measured, &p.reconstructed, &p.linear] {
                assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            assert!(p.max_diff_linear < 1e-8 && p.max_diff_reconstructed < 1e-8, "{p:?}");
        }
        assert!(cmp.linearity_violations().is_empty());
    }

    #[test]
    fn comparison_flags_a_wrong_model() {
        let (t, e) = synthetic(0.051, &[10.0, 100.0], 1e5);
        let recon = binomial_povm(0.051, 12, 140).unwrap();
        let cmp = three_way_comparison(&t, &recon, &LinearDetectorModel::lossy(0.06).unwrap(), &e).unwrap();
        assert_eq!(cmp.linearity_violations(), vec![0, 1]);
    }

    #[test]
    fn perturbation_grid_has_identity_first() {
        let g = Perturbations { energy_scale: 0.01, attenuation_db: 0.5 }.grid().unwrap();
        assert_eq!(g.len(), 9);
        assert_eq!(g[0], (0.0, 0.0));
        assert_eq!(Perturbations { energy_scale: 0.0, attenuation_db: 0.0 }.grid().unwrap(), vec![(0.0, 0.0)]);
        assert!(Perturbations { energy_scale: -0.1, attenuation_db: 0.0 }.grid().is_err());
    }

    #[test]
    fn sweep_envelope_is_bounded_by_baseline_and_worsens_with_size() {
        let means: Vec<f64> = (0..8).map(|i| 6.5 * 1.3f64.powi(i)).collect();
        let (t, e) = synthetic(0.051, &means, 1e9);
        let cfg = ReconstructionConfig { max_iters: 5_000, ..Default::default() };
        let model = binomial_povm(0.051, 12, 140).unwrap();
        let zero =
            sensitivity_sweep(&t, &e, &cfg, &model, &Perturbations { energy_scale: 0.0, attenuation_db: 0.0 }).unwrap();
        assert_eq!(zero.envelope, zero.baseline());
        let mut last = 1.0;
        for db in [0.5, 1.5, 3.0] {
            let s = sensitivity_sweep(&t, &e, &cfg, &model, &Perturbations { energy_scale: 0.0, attenuation_db: db })
                .unwrap();
            assert!(s.envelope.iter().zip(s.baseline()).all(|(e, b)| e <= b));
            let worst = s.envelope[..=40].iter().cloned().fold(1.0, f64::min);
            assert!(worst < last, "{db} dB: {worst} !< {last}");
            last = worst;
        }
        assert!(last < 0.95);
    }
}

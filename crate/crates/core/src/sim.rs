//! Seeded Monte Carlo model of a TES read-out chain.
//!
//! Only the pulse-height summary is simulated: each pulse yields a number of
//! detected photons `c`, and the recorded amplitude is a Gaussian centred on
//! `baseline + c * spacing`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::photon_stats::{check_eta, check_gamma, ProbeEnsemble};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorPhysicalConfig {
    pub eta: f64,
    /// Mean dark counts per pulse.
    pub gamma: f64,
    /// Centre of the 0-photon peak, mV.
    pub baseline_mv: f64,
    /// Amplitude step per detected photon, mV.
    pub peak_spacing_mv: f64,
    /// Width of the 0-photon peak, mV.
    pub sigma0_mv: f64,
    /// Extra width per detected photon, mV.
    pub sigma_slope: f64,
    /// Hard ceiling on the number of detected photons per pulse.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub saturation_count: Option<u32>,
}

impl Default for DetectorPhysicalConfig {
    fn default() -> Self {
        DetectorPhysicalConfig {
            eta: 0.051,
            gamma: 0.0,
            baseline_mv: 0.0,
            peak_spacing_mv: 13.0,
            sigma0_mv: 2.0,
            sigma_slope: 0.0,
            saturation_count: None,
        }
    }
}

impl DetectorPhysicalConfig {
    pub fn validate(&self) -> Result<()> {
        check_eta(self.eta).map_err(|e| Error::config(e.to_string()))?;
        check_gamma(self.gamma).map_err(|e| Error::config(e.to_string()))?;
        if !self.baseline_mv.is_finite() {
            return Err(Error::config("baseline_mv must be finite"));
        }
        if !(self.peak_spacing_mv.is_finite() && self.peak_spacing_mv > 0.0) {
            return Err(Error::config("peak_spacing_mv must be positive"));
        }
        if !(self.sigma0_mv.is_finite() && self.sigma0_mv > 0.0) {
            return Err(Error::config("sigma0_mv must be positive"));
        }
        if !(self.sigma_slope.is_finite() && self.sigma_slope >= 0.0) {
            return Err(Error::config("sigma_slope must be >= 0"));
        }
        if self.saturation_count == Some(0) {
            return Err(Error::config("saturation_count must be positive"));
        }
        Ok(())
    }

    /// Peak separation in units of the 0-peak width.
    pub fn resolution_ratio(&self) -> f64 {
        self.peak_spacing_mv / self.sigma0_mv
    }

    /// True when adjacent peaks are at least four widths apart.
    pub fn is_resolvable(&self) -> bool {
        self.resolution_ratio() >= 4.0
    }

    pub fn peak_center(&self, count: u32) -> f64 {
        self.baseline_mv + count as f64 * self.peak_spacing_mv
    }

    pub fn peak_width(&self, count: u32) -> f64 {
        self.sigma0_mv + count as f64 * self.sigma_slope
    }
}

/// Pulse amplitudes recorded for one probe.
#[derive(Debug, Clone, PartialEq)]
pub struct AmplitudeTrace {
    pub probe_id: u32,
    amplitudes: Vec<f64>,
    truth_counts: Option<Vec<u32>>,
}

impl AmplitudeTrace {
    pub fn new(probe_id: u32, amplitudes: Vec<f64>, truth_counts: Option<Vec<u32>>) -> Result<Self> {
        if let Some(i) = amplitudes.iter().position(|a| !a.is_finite()) {
            return Err(Error::NonFinite(format!("probe {probe_id}: amplitude {i}")));
        }
        if let Some(t) = &truth_counts {
            if t.len() != amplitudes.len() {
                return Err(Error::shape(format!(
                    "probe {probe_id}: {} truth counts for {} amplitudes",
                    t.len(),
                    amplitudes.len()
                )));
            }
        }
        Ok(AmplitudeTrace { probe_id, amplitudes, truth_counts })
    }

    pub fn amplitudes(&self) -> &[f64] {
        &self.amplitudes
    }

    pub fn truth_counts(&self) -> Option<&[u32]> {
        self.truth_counts.as_deref()
    }

    pub fn len(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amplitudes.is_empty()
    }

    /// Histogram of the truth counts folded into `n_outcomes` bins, top bin cumulative.
    pub fn truth_histogram(&self, n_outcomes: usize) -> Option<Vec<u64>> {
        let truth = self.truth_counts.as_ref()?;
        let mut h = vec![0u64; n_outcomes];
        for &c in truth {
            h[(c as usize).min(n_outcomes - 1)] += 1;
        }
        Some(h)
    }
}

/// SplitMix64 finalizer.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-probe seed; depends only on the run seed and the probe id.
pub fn derive_seed(seed: u64, probe_id: u32) -> u64 {
    splitmix64(seed ^ splitmix64(probe_id as u64 ^ 0xA5A5_5A5A_0000_0000))
}

fn poisson_draw<R: Rng>(mean: f64, rng: &mut R) -> Result<u64> {
    if mean == 0.0 {
        return Ok(0);
    }
    let d = Poisson::new(mean).map_err(|e| Error::config(format!("Poisson({mean}): {e}")))?;
    Ok(d.sample(rng) as u64)
}

/// Simulates `n_pulses` pulses of a coherent probe with mean photon number `mu`.
pub fn simulate_trace(
    cfg: &DetectorPhysicalConfig,
    probe_id: u32,
    mu: f64,
    n_pulses: u64,
    seed: u64,
) -> Result<AmplitudeTrace> {
    cfg.validate()?;
    if !mu.is_finite() || mu < 0.0 {
        return Err(Error::config(format!("mean photon number must be >= 0, got {mu}")));
    }
    if n_pulses == 0 {
        return Err(Error::config("n_pulses must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let light = if mu > 0.0 { Some(Poisson::new(mu).map_err(|e| Error::config(e.to_string()))?) } else { None };
    let mut amplitudes = Vec::with_capacity(n_pulses as usize);
    let mut truth = Vec::with_capacity(n_pulses as usize);
    for _ in 0..n_pulses {
        let photons = light.as_ref().map_or(0, |d| d.sample(&mut rng) as u64);
        let detected = if photons == 0 || cfg.eta == 0.0 {
            0
        } else {
            Binomial::new(photons, cfg.eta).map_err(|e| Error::config(e.to_string()))?.sample(&mut rng)
        };
        let dark = poisson_draw(cfg.gamma, &mut rng)?;
        let mut count = (detected + dark).min(u32::MAX as u64) as u32;
        if let Some(cap) = cfg.saturation_count {
            count = count.min(cap);
        }
        let z: f64 = StandardNormal.sample(&mut rng);
        amplitudes.push(cfg.peak_center(count) + cfg.peak_width(count) * z);
        truth.push(count);
    }
    AmplitudeTrace::new(probe_id, amplitudes, Some(truth))
}

/// One trace per probe, each driven by [`derive_seed`]`(seed, probe.id)`.
/// Probes are simulated in parallel; the output follows ensemble order.
pub fn simulate_ensemble(
    cfg: &DetectorPhysicalConfig,
    ensemble: &ProbeEnsemble,
    seed: u64,
) -> Result<Vec<AmplitudeTrace>> {
    cfg.validate()?;
    ensemble
        .probes()
        .par_iter()
        .map(|p| simulate_trace(cfg, p.id, p.mean_photons, p.n_pulses, derive_seed(seed, p.id)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::photon_stats::{dark_count_povm, predict_distribution, LinearDetectorModel, Probe};
    use statrs::distribution::{ContinuousCDF, Normal};

    fn cfg(eta: f64, gamma: f64) -> DetectorPhysicalConfig {
        DetectorPhysicalConfig { eta, gamma, ..Default::default() }
    }

    #[test]
    fn vacuum_probe_gives_zero_counts() {
        let t = simulate_trace(&cfg(0.5, 0.0), 1, 0.0, 20_000, 3).unwrap();
        assert!(t.truth_counts().unwrap().iter().all(|&c| c == 0));
        let n = t.len() as f64;
        let mean = t.amplitudes().iter().sum::<f64>() / n;
        let var = t.amplitudes().iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 4.0 * 2.0 / n.sqrt());
        assert!((var.sqrt() - 2.0).abs() < 0.05);
    }

    #[test]
    fn ideal_detector_mean_count() {
        let n = 1_000_000u64;
        let t = simulate_trace(&cfg(1.0, 0.0), 1, 2.0, n, 11).unwrap();
        let mean = t.truth_counts().unwrap().iter().map(|&c| c as f64).sum::<f64>() / n as f64;
        // 3 sigma of a Poisson(2) sample mean is 3 * sqrt(2 / 1e6) = 0.0042
        assert!((mean - 2.0).abs() < 0.005, "mean {mean}");
    }

    #[test]
    fn thinned_probe_is_poisson() {
        let n = 1_000_000u64;
        let t = simulate_trace(&cfg(0.051, 0.0), 1, 31.0, n, 5).unwrap();
        let h = t.truth_histogram(30).unwrap();
        let tv: f64 = 0.5
            * h.iter()
                .enumerate()
                .map(|(k, &c)| {
                    let expect = if k < 29 {
                        crate::photon_stats::poisson_pmf(1.581, k).unwrap()
                    } else {
                        crate::photon_stats::poisson_upper_tail(1.581, 29).unwrap()
                    };
                    (c as f64 / n as f64 - expect).abs()
                })
                .sum::<f64>();
        assert!(tv < 0.005, "TV {tv}");
    }

    #[test]
    fn marginal_law_matches_prediction() {
        let n = 200_000u64;
        for (i, &(eta, gamma, mu)) in
            [(0.051, 0.0, 60.0), (0.3, 0.2, 10.0), (0.0, 0.3, 5.0), (1.0, 0.0, 3.0)].iter().enumerate()
        {
            let t = simulate_trace(&cfg(eta, gamma), 1, mu, n, 100 + i as u64).unwrap();
            let povm = dark_count_povm(&LinearDetectorModel::new(eta, gamma).unwrap(), 12, 140).unwrap();
            let pred = predict_distribution(&povm, mu).unwrap().distribution;
            let h = t.truth_histogram(12).unwrap();
            let tv: f64 = 0.5 * h.iter().zip(pred.probs()).map(|(&c, p)| (c as f64 / n as f64 - p).abs()).sum::<f64>();
            assert!(tv < 4.0 / (n as f64).sqrt(), "eta {eta} gamma {gamma}: TV {tv}");
        }
    }

    #[test]
    fn residuals_are_gaussian_per_class() {
        let c = DetectorPhysicalConfig { sigma_slope: 0.3, ..cfg(0.2, 0.0) };
        let t = simulate_trace(&c, 1, 10.0, 100_000, 9).unwrap();
        for class in 0..4u32 {
            let mut res: Vec<f64> = t
                .amplitudes()
                .iter()
                .zip(t.truth_counts().unwrap())
                .filter(|(_, &k)| k == class)
                .map(|(a, _)| a - c.peak_center(class))
                .collect();
            assert!(res.len() >= 10_000);
            res.sort_by(f64::total_cmp);
            let normal = Normal::new(0.0, c.peak_width(class)).unwrap();
            let n = res.len() as f64;
            let d = res
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let f = normal.cdf(x);
                    (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
                })
                .fold(0.0, f64::max);
            // Kolmogorov-Smirnov critical value at the 1% level.
            assert!(d < 1.628 / n.sqrt(), "class {class}: D = {d}");
        }
    }

    #[test]
    fn saturation_caps_counts() {
        let c = DetectorPhysicalConfig { saturation_count: Some(3), ..cfg(0.5, 0.0) };
        let t = simulate_trace(&c, 1, 40.0, 1000, 1).unwrap();
        assert!(t.truth_counts().unwrap().iter().all(|&k| k <= 3));
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = DetectorPhysicalConfig { sigma0_mv: 0.0, ..Default::default() };
        assert!(matches!(simulate_trace(&bad, 1, 1.0, 10, 0), Err(Error::Config(_))));
        assert!(simulate_trace(&cfg(1.5, 0.0), 1, 1.0, 10, 0).is_err());
        assert!(simulate_trace(&cfg(0.5, 0.0), 1, 1.0, 0, 0).is_err());
    }

    #[test]
    fn ensemble_determinism_and_subseeds() {
        let c = DetectorPhysicalConfig::default();
        let single =
            ProbeEnsemble::new(vec![Probe { id: 7, mean_photons: 12.0, attenuation_db: None, n_pulses: 500 }]).unwrap();
        let traces = simulate_ensemble(&c, &single, 42).unwrap();
        let direct = simulate_trace(&c, 7, 12.0, 500, derive_seed(42, 7)).unwrap();
        assert_eq!(traces[0], direct);

        let ens = ProbeEnsemble::paper_default(200);
        let a = simulate_ensemble(&c, &ens, 1).unwrap();
        let b = simulate_ensemble(&c, &ens, 1).unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(a, b);
        // Adding probes leaves the existing traces untouched.
        let mut probes = ens.probes().to_vec();
        probes.push(Probe { id: 99, mean_photons: 1.0, attenuation_db: None, n_pulses: 10 });
        let bigger = simulate_ensemble(&c, &ProbeEnsemble::new(probes).unwrap(), 1).unwrap();
        assert_eq!(&bigger[..20], &a[..]);
    }

    #[test]
    fn default_config_is_resolvable() {
        assert!(DetectorPhysicalConfig::default().is_resolvable());
        assert_eq!(DetectorPhysicalConfig::default().resolution_ratio(), 6.5);
    }
}

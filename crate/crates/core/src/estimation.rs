//! Maximum-likelihood estimation of the linear-detector parameters.
//!
//! For a coherent probe of mean `mu`, a linear detector of efficiency `eta`
//! with Poissonian dark counts `gamma` produces `Poisson(eta mu + gamma)`
//! counts (binomial thinning of a Poisson law is Poisson, and independent
//! Poisson laws add), so every likelihood here is closed-form with the last
//! outcome cumulative. Efficiencies are estimated probe by probe and
//! averaged over the ensemble; the dark-count rate is not identifiable from
//! a single probe (only `eta mu + gamma` enters) and is fitted jointly.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};
use statrs::function::factorial::ln_factorial;

use crate::calibration::{CountTable, ThresholdSet};
use crate::error::{Error, Result};
use crate::optimize::{brent_maximize, nelder_mead_box};
use crate::photon_stats::{
    binomial_pmf, check_eta, check_gamma, poisson_pmf_unchecked, poisson_upper_tail_unchecked, ProbeEnsemble,
};
use crate::sim::AmplitudeTrace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationConfig {
    /// Absolute tolerance of every one-dimensional maximization.
    pub tol: f64,
    /// Upper end of the dark-count search interval, counts per pulse.
    pub gamma_max: f64,
    /// One-sided confidence of the reported dark-count upper bound.
    pub confidence: f64,
    /// Alternating coordinate sweeps before the Nelder-Mead polish.
    pub max_sweeps: usize,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        EstimationConfig { tol: 1e-7, gamma_max: 5.0, confidence: 0.95, max_sweeps: 200 }
    }
}

impl EstimationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(Error::config(format!("tol must be positive, got {}", self.tol)));
        }
        if !(self.gamma_max.is_finite() && self.gamma_max >= 0.0) {
            return Err(Error::config(format!("gamma_max must be >= 0, got {}", self.gamma_max)));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::config(format!("confidence must lie in (0, 1), got {}", self.confidence)));
        }
        if self.max_sweeps == 0 {
            return Err(Error::config("max_sweeps must be positive"));
        }
        Ok(())
    }
}

/// Result of [`estimate_eta`] or [`estimate_eta_gamma`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyEstimate {
    /// Mean of the per-probe efficiencies.
    pub eta_hat: f64,
    /// Standard error of the mean over probes; `None` with a single probe.
    pub eta_se: Option<f64>,
    /// Inverse square root of the observed information of the pooled
    /// likelihood at `eta_hat`; a diagnostic only.
    pub eta_se_fisher: Option<f64>,
    /// Probes that entered the average, in table order.
    pub probe_ids: Vec<u32>,
    pub per_probe_etas: Vec<f64>,
    /// Probes skipped for carrying no information (no events or no light).
    pub skipped: Vec<u32>,
    pub gamma_hat: Option<f64>,
    /// Jackknife standard error over probes.
    pub gamma_se: Option<f64>,
    /// One-sided profile-likelihood upper bound on the dark-count rate.
    pub gamma_upper: Option<f64>,
    pub gamma_at_boundary: Option<bool>,
    /// Pooled log-likelihood at `(eta_hat, gamma_hat)`.
    pub loglik: f64,
}

/// Log-probability of each outcome under `Poisson(lambda)`, last outcome cumulative.
fn log_outcome_probs(lambda: f64, n_outcomes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n_outcomes);
    for n in 0..n_outcomes - 1 {
        out.push(if lambda == 0.0 {
            if n == 0 {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        } else {
            -lambda + n as f64 * lambda.ln() - ln_factorial(n as u64)
        });
    }
    out.push(poisson_upper_tail_unchecked(lambda, n_outcomes - 1).ln());
    out
}

/// `sum_n N_n log l_n` with `0 log 0 = 0`.
fn loglik_lambda(lambda: f64, counts: &[u64]) -> f64 {
    log_outcome_probs(lambda, counts.len())
        .iter()
        .zip(counts)
        .filter(|(_, &c)| c > 0)
        .map(|(lp, &c)| c as f64 * lp)
        .sum()
}

fn check_counts(counts: &[u64], mu: f64) -> Result<()> {
    if counts.is_empty() {
        return Err(Error::shape("need at least one outcome"));
    }
    if !(mu.is_finite() && mu >= 0.0) {
        return Err(Error::domain(format!("mean photon number must be >= 0, got {mu}")));
    }
    Ok(())
}

/// Log-likelihood of one probe's counts under a lossy linear detector, via
/// `sum_m B[n][m] q[m] = Poisson(eta mu)`. Returns `-inf` where the model
/// gives zero probability to an observed outcome.
pub fn loglik_eta(eta: f64, counts: &[u64], mu: f64) -> Result<f64> {
    check_eta(eta)?;
    check_counts(counts, mu)?;
    Ok(loglik_lambda(eta * mu, counts))
}

/// Log-likelihood with Poissonian dark counts: outcomes follow
/// `Poisson(eta mu + gamma)`.
pub fn loglik_eta_gamma(eta: f64, gamma: f64, counts: &[u64], mu: f64) -> Result<f64> {
    check_eta(eta)?;
    check_gamma(gamma)?;
    check_counts(counts, mu)?;
    Ok(loglik_lambda(eta * mu + gamma, counts))
}

/// The same likelihood evaluated the long way: explicit sums over photon
/// numbers `m < truncation` of the binomial POVM times the Poisson probe
/// statistics, the cumulative last outcome taken as the complement.
pub fn loglik_eta_explicit(eta: f64, counts: &[u64], mu: f64, truncation: usize) -> Result<f64> {
    check_eta(eta)?;
    check_counts(counts, mu)?;
    let n_out = counts.len();
    let mut probs: Vec<f64> = (0..n_out - 1)
        .map(|n| (0..truncation).map(|m| binomial_pmf(m, n, eta) * poisson_pmf_unchecked(mu, m)).sum())
        .collect();
    let head: f64 = probs.iter().sum();
    probs.push((1.0 - head).max(0.0));
    Ok(probs.iter().zip(counts).filter(|(_, &c)| c > 0).map(|(p, &c)| c as f64 * p.ln()).sum())
}

/// One probe's data ready for fitting.
#[derive(Debug, Clone)]
struct ProbeData {
    id: u32,
    mu: f64,
    counts: Vec<u64>,
}

fn collect_probes(counts: &CountTable, ensemble: &ProbeEnsemble) -> Result<(Vec<ProbeData>, Vec<u32>)> {
    let mut used = Vec::new();
    let mut skipped = Vec::new();
    for j in 0..counts.n_probes() {
        let id = counts.probe_ids()[j];
        let probe = ensemble
            .probes()
            .iter()
            .find(|p| p.id == id)
            .ok_or_else(|| Error::shape(format!("probe {id} is not in the ensemble")))?;
        if counts.total(j) == 0 {
            log::warn!("probe {id}: no events, skipped");
            skipped.push(id);
        } else if probe.mean_photons == 0.0 {
            log::warn!("probe {id}: vacuum probe carries no efficiency information, skipped");
            skipped.push(id);
        } else {
            used.push(ProbeData { id, mu: probe.mean_photons, counts: counts.counts(j).to_vec() });
        }
    }
    if used.is_empty() {
        return Err(Error::Estimation("no probe carries usable counts".into()));
    }
    Ok((used, skipped))
}

fn mean_and_se(values: &[f64]) -> (f64, Option<f64>) {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, Some((var / k).sqrt()))
}

fn pooled_loglik(probes: &[ProbeData], eta: f64, gamma: f64) -> f64 {
    probes.iter().map(|p| loglik_lambda(eta * p.mu + gamma, &p.counts)).sum()
}

fn probe_eta(p: &ProbeData, gamma: f64, tol: f64) -> f64 {
    brent_maximize(|eta| loglik_lambda(eta * p.mu + gamma, &p.counts), 0.0, 1.0, tol).x
}

/// Observed-information standard error of the pooled efficiency at fixed `gamma`.
fn fisher_se(probes: &[ProbeData], eta: f64, gamma: f64) -> Option<f64> {
    let h = 1e-5 * eta.max(1e-3);
    if eta - h < 0.0 || eta + h > 1.0 {
        return None;
    }
    let f = |e: f64| pooled_loglik(probes, e, gamma);
    let curvature = -(f(eta + h) - 2.0 * f(eta) + f(eta - h)) / (h * h);
    (curvature.is_finite() && curvature > 0.0).then(|| 1.0 / curvature.sqrt())
}

/// Per-probe ML efficiencies averaged over the ensemble; the standard error
/// is the spread across probes divided by `sqrt(K)`.
pub fn estimate_eta(
    counts: &CountTable,
    ensemble: &ProbeEnsemble,
    cfg: &EstimationConfig,
) -> Result<EfficiencyEstimate> {
    cfg.validate()?;
    let (probes, skipped) = collect_probes(counts, ensemble)?;
    Ok(summarize(&probes, skipped, 0.0, cfg.tol, None))
}

fn summarize(
    probes: &[ProbeData],
    skipped: Vec<u32>,
    gamma: f64,
    tol: f64,
    joint: Option<(Option<f64>, Option<f64>, bool)>,
) -> EfficiencyEstimate {
    let per_probe_etas: Vec<f64> = probes.iter().map(|p| probe_eta(p, gamma, tol)).collect();
    let (eta_hat, eta_se) = mean_and_se(&per_probe_etas);
    EfficiencyEstimate {
        eta_hat,
        eta_se,
        eta_se_fisher: fisher_se(probes, eta_hat, gamma),
        probe_ids: probes.iter().map(|p| p.id).collect(),
        per_probe_etas,
        skipped,
        gamma_hat: joint.map(|_| gamma),
        gamma_se: joint.and_then(|j| j.0),
        gamma_upper: joint.and_then(|j| j.1),
        gamma_at_boundary: joint.map(|j| j.2),
        loglik: pooled_loglik(probes, eta_hat, gamma),
    }
}

/// Joint ML fit of one efficiency and one dark-count rate shared by all
/// probes: alternating bounded 1-D maximizations, then a Nelder-Mead polish.
fn pooled_fit(probes: &[ProbeData], cfg: &EstimationConfig) -> (f64, f64) {
    let tol = cfg.tol;
    let (mut eta, mut gamma) = (0.5, 0.0);
    for _ in 0..cfg.max_sweeps {
        let g = brent_maximize(|g| pooled_loglik(probes, eta, g), 0.0, cfg.gamma_max, tol).x;
        let e = brent_maximize(|e| pooled_loglik(probes, e, g), 0.0, 1.0, tol).x;
        let moved = (e - eta).abs().max((g - gamma).abs());
        eta = e;
        gamma = g;
        if moved <= tol {
            break;
        }
    }
    let polished = nelder_mead_box(
        |x| -pooled_loglik(probes, x[0], x[1]),
        &[eta, gamma],
        &[1e-3, 1e-3],
        &[0.0, 0.0],
        &[1.0, cfg.gamma_max],
        1e-14,
        2000,
    );
    if -polished.value > pooled_loglik(probes, eta, gamma) {
        (polished.x[0], polished.x[1])
    } else {
        (eta, gamma)
    }
}

/// Profile log-likelihood of the dark-count rate.
fn profile(probes: &[ProbeData], gamma: f64, tol: f64) -> f64 {
    brent_maximize(|e| pooled_loglik(probes, e, gamma), 0.0, 1.0, tol).value
}

/// Smallest `gamma > gamma_hat` whose profile log-likelihood has dropped by
/// `z^2 / 2` (one-sided `confidence`), or `gamma_max` if it never does.
fn profile_upper_bound(probes: &[ProbeData], gamma_hat: f64, cfg: &EstimationConfig) -> f64 {
    let z = statrs::distribution::Normal::standard().inverse_cdf(cfg.confidence);
    let target = profile(probes, gamma_hat, cfg.tol) - 0.5 * z * z;
    let (mut lo, mut hi) = (gamma_hat, cfg.gamma_max);
    if profile(probes, hi, cfg.tol) >= target {
        return hi;
    }
    while hi - lo > cfg.tol.max(1e-12 * hi) {
        let mid = 0.5 * (lo + hi);
        if profile(probes, mid, cfg.tol) >= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Joint estimate of efficiency and dark-count rate.
///
/// The dark-count rate is the pooled ML estimate on `[0, gamma_max]`, with a
/// leave-one-probe-out jackknife error and a one-sided profile-likelihood
/// upper bound. The efficiency is then estimated probe by probe at that rate
/// and averaged exactly as in [`estimate_eta`], so that a rate fixed at zero
/// (`gamma_max = 0`) reproduces [`estimate_eta`].
pub fn estimate_eta_gamma(
    counts: &CountTable,
    ensemble: &ProbeEnsemble,
    cfg: &EstimationConfig,
) -> Result<EfficiencyEstimate> {
    cfg.validate()?;
    let (probes, skipped) = collect_probes(counts, ensemble)?;
    let (_, gamma_hat) = pooled_fit(&probes, cfg);
    let gamma_se = (probes.len() >= 2).then(|| {
        let loo: Vec<f64> = (0..probes.len())
            .map(|i| {
                let rest: Vec<ProbeData> =
                    probes.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, p)| p.clone()).collect();
                pooled_fit(&rest, cfg).1
            })
            .collect();
        let k = loo.len() as f64;
        let mean = loo.iter().sum::<f64>() / k;
        ((k - 1.0) / k * loo.iter().map(|g| (g - mean).powi(2)).sum::<f64>()).sqrt()
    });
    let gamma_upper = profile_upper_bound(&probes, gamma_hat, cfg);
    let at_boundary = gamma_hat <= cfg.tol;
    Ok(summarize(&probes, skipped, gamma_hat, cfg.tol, Some((gamma_se, Some(gamma_upper), at_boundary))))
}

/// Dark-count rate measured with the source blocked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DarkRate {
    pub events: u64,
    pub above_threshold: u64,
    /// Fraction of events above the first threshold.
    pub rate: f64,
    /// Binomial standard error of `rate`.
    pub se: f64,
    /// One-sided Clopper-Pearson upper bound at `confidence`.
    pub upper: f64,
    pub confidence: f64,
    /// Set when so many events cross the threshold that the run cannot have
    /// been dark (rate of one half or more).
    pub implausible: bool,
}

/// Counts dark events: pulses whose amplitude reaches the first threshold
/// of a light calibration.
pub fn dark_rate_direct(trace: &AmplitudeTrace, thresholds: &ThresholdSet, confidence: f64) -> Result<DarkRate> {
    if trace.is_empty() {
        return Err(Error::Estimation("dark trace is empty".into()));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::config(format!("confidence must lie in (0, 1), got {confidence}")));
    }
    let Some(&cut) = thresholds.cut_points_mv.first() else {
        return Err(Error::Estimation("thresholds have no cut point to count dark events against".into()));
    };
    let events = trace.len() as u64;
    let above = trace.amplitudes().iter().filter(|&&a| a >= cut).count() as u64;
    let n = events as f64;
    let rate = above as f64 / n;
    let se = (rate * (1.0 - rate) / n).sqrt();
    let upper = if above == events {
        1.0
    } else {
        Beta::new(above as f64 + 1.0, (events - above) as f64)
            .map_err(|e| Error::Estimation(e.to_string()))?
            .inverse_cdf(confidence)
    };
    let implausible = rate >= 0.5;
    if implausible {
        log::warn!("dark run has {above} of {events} events above threshold; source may not be blocked");
    }
    Ok(DarkRate { events, above_threshold: above, rate, se, upper, confidence, implausible })
}
